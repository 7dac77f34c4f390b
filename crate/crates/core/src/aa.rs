//! Amino-acid alphabet and the 25-symbol model vocabulary.

use core::fmt;

use serde::{Deserialize, Serialize};

/// Number of standard amino acids.
pub const NUM_AA: usize = 20;

/// Model vocabulary: 20 amino acids followed by MASK, PAD, BOS, EOS, UNK.
pub const VOCAB_SIZE: usize = 25;

/// One-letter codes in index order.
pub const AA_LETTERS: [u8; NUM_AA] = *b"ACDEFGHIKLMNPQRSTVWY";

const AA_THREE: [&str; NUM_AA] = [
    "ALA", "CYS", "ASP", "GLU", "PHE", "GLY", "HIS", "ILE", "LYS", "LEU", "MET", "ASN", "PRO",
    "GLN", "ARG", "SER", "THR", "VAL", "TRP", "TYR",
];

/// Residue identity: one of the 20 standard amino acids or unknown.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AminoAcid(u8);

impl AminoAcid {
    pub const UNK: AminoAcid = AminoAcid(NUM_AA as u8);

    /// Standard amino acid by zero-based index; `None` when `idx >= 20`.
    pub fn from_index(idx: usize) -> Option<Self> {
        (idx < NUM_AA).then_some(AminoAcid(idx as u8))
    }

    pub fn from_letter(c: char) -> Option<Self> {
        let up = c.to_ascii_uppercase() as u32;
        AA_LETTERS
            .iter()
            .position(|&l| l as u32 == up)
            .map(|i| AminoAcid(i as u8))
    }

    /// Three-letter residue name; non-standard names map to [`AminoAcid::UNK`].
    pub fn from_three_letter(name: &str) -> Self {
        let name = name.trim();
        if name.eq_ignore_ascii_case("MSE") {
            return AminoAcid(10);
        }
        AA_THREE
            .iter()
            .position(|t| t.eq_ignore_ascii_case(name))
            .map(|i| AminoAcid(i as u8))
            .unwrap_or(Self::UNK)
    }

    pub fn is_standard(self) -> bool {
        (self.0 as usize) < NUM_AA
    }

    /// Zero-based index, 20 for unknown.
    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn letter(self) -> char {
        if self.is_standard() {
            AA_LETTERS[self.0 as usize] as char
        } else {
            'X'
        }
    }

    pub fn three_letter(self) -> &'static str {
        if self.is_standard() {
            AA_THREE[self.0 as usize]
        } else {
            "UNK"
        }
    }

    pub fn token(self) -> Token {
        if self.is_standard() {
            Token(self.0)
        } else {
            Token::UNK
        }
    }
}

impl fmt::Debug for AminoAcid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.letter())
    }
}

/// A symbol of the 25-entry model vocabulary.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Token(u8);

impl Token {
    pub const MASK: Token = Token(20);
    pub const PAD: Token = Token(21);
    pub const BOS: Token = Token(22);
    pub const EOS: Token = Token(23);
    pub const UNK: Token = Token(24);

    pub fn from_index(idx: usize) -> Option<Self> {
        (idx < VOCAB_SIZE).then_some(Token(idx as u8))
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn is_amino_acid(self) -> bool {
        (self.0 as usize) < NUM_AA
    }
}

/// Parses a one-letter sequence; unknown letters become `None`.
pub fn parse_sequence(s: &str) -> Option<alloc::vec::Vec<AminoAcid>> {
    s.chars().map(AminoAcid::from_letter).collect()
}

pub fn sequence_string(seq: &[AminoAcid]) -> alloc::string::String {
    seq.iter().map(|a| a.letter()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn letters_and_three_letter_codes_agree() {
        for i in 0..NUM_AA {
            let aa = AminoAcid::from_index(i).unwrap();
            assert_eq!(AminoAcid::from_letter(aa.letter()), Some(aa));
            assert_eq!(AminoAcid::from_three_letter(aa.three_letter()), aa);
            assert_eq!(aa.token().index(), i);
        }
        assert_eq!(AminoAcid::from_three_letter("HOH"), AminoAcid::UNK);
        assert_eq!(AminoAcid::UNK.token(), Token::UNK);
        assert!(AminoAcid::from_index(20).is_none());
    }

    #[test]
    fn specials_follow_amino_acids() {
        assert_eq!(Token::MASK.index(), 20);
        assert_eq!(Token::UNK.index(), VOCAB_SIZE - 1);
        assert!(!Token::MASK.is_amino_acid());
    }
}
