//! Antibody-antigen complex model, contact sets and CDR masking.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use core::ops::Range;
use core::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aa::{AminoAcid, Token};
use crate::geometry::{distance, Point, RigidMotion};

/// Default Cα contact cutoff in Å.
pub const DEFAULT_CONTACT_CUTOFF: f64 = 6.6;

/// Backbone atom slots, in storage order.
pub const BACKBONE_ATOMS: [&str; 4] = ["N", "CA", "C", "O"];
pub const CA: usize = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Residue {
    pub aa: AminoAcid,
    /// `[N, CA, C, O]` coordinates in Å.
    pub backbone: [Point; 4],
    pub chain_id: char,
    /// Residue sequence number as written in the source file.
    pub seq_index: i32,
    /// Insertion code, `' '` when absent.
    pub icode: char,
}

impl Residue {
    pub fn ca(&self) -> &Point {
        &self.backbone[CA]
    }

    pub fn is_finite(&self) -> bool {
        self.backbone.iter().flatten().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum CdrName {
    H1,
    H2,
    H3,
    L1,
    L2,
    L3,
}

impl CdrName {
    pub const ALL: [CdrName; 6] = [
        CdrName::H1,
        CdrName::H2,
        CdrName::H3,
        CdrName::L1,
        CdrName::L2,
        CdrName::L3,
    ];

    pub fn chain(self) -> ChainKind {
        match self {
            CdrName::H1 | CdrName::H2 | CdrName::H3 => ChainKind::Heavy,
            _ => ChainKind::Light,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            CdrName::H1 => "H1",
            CdrName::H2 => "H2",
            CdrName::H3 => "H3",
            CdrName::L1 => "L1",
            CdrName::L2 => "L2",
            CdrName::L3 => "L3",
        }
    }
}

impl fmt::Display for CdrName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CdrName {
    type Err = StructureError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        CdrName::ALL
            .into_iter()
            .find(|c| c.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| StructureError::UnknownCdr(s.into()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ChainKind {
    Heavy,
    Light,
    Antigen,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StructureError {
    #[error("unknown CDR name {0:?}")]
    UnknownCdr(String),
    #[error("CDR {0} is not annotated on this complex")]
    MissingCdr(CdrName),
    #[error("CDR {0} is empty")]
    EmptyCdr(CdrName),
    #[error("CDR {cdr} range {start}..{end} exceeds chain length {len}")]
    CdrOutOfBounds {
        cdr: CdrName,
        start: usize,
        end: usize,
        len: usize,
    },
    #[error("CDR ranges {0} and {1} overlap")]
    CdrOverlap(CdrName, CdrName),
    #[error("CDR {cdr} contains an unknown residue at chain index {index}")]
    UnknownResidueInCdr { cdr: CdrName, index: usize },
    #[error("epitope index {0} is outside the antigen")]
    EpitopeOutOfRange(usize),
    #[error("non-finite backbone coordinate in chain {0}")]
    NonFiniteCoordinate(char),
}

/// A parsed antibody-antigen complex.
#[derive(Debug, Clone, PartialEq)]
pub struct Complex {
    pub id: String,
    pub heavy: Vec<Residue>,
    pub light: Vec<Residue>,
    pub antigen: Vec<Residue>,
    /// Half-open index ranges into `heavy` (H1-H3) or `light` (L1-L3).
    pub cdr_ranges: BTreeMap<CdrName, Range<usize>>,
    /// Indices into `antigen`.
    pub epitope: BTreeSet<usize>,
}

impl Complex {
    /// Builds a complex and checks its invariants.
    pub fn new(
        id: impl Into<String>,
        heavy: Vec<Residue>,
        light: Vec<Residue>,
        antigen: Vec<Residue>,
        cdr_ranges: BTreeMap<CdrName, Range<usize>>,
        epitope: BTreeSet<usize>,
    ) -> Result<Self, StructureError> {
        let c = Complex {
            id: id.into(),
            heavy,
            light,
            antigen,
            cdr_ranges,
            epitope,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), StructureError> {
        for r in self.heavy.iter().chain(&self.light).chain(&self.antigen) {
            if !r.is_finite() {
                return Err(StructureError::NonFiniteCoordinate(r.chain_id));
            }
        }
        let entries: Vec<(CdrName, &Range<usize>)> =
            self.cdr_ranges.iter().map(|(k, v)| (*k, v)).collect();
        for &(cdr, range) in &entries {
            let chain = self.chain(cdr.chain());
            if range.start >= range.end {
                return Err(StructureError::EmptyCdr(cdr));
            }
            if range.end > chain.len() {
                return Err(StructureError::CdrOutOfBounds {
                    cdr,
                    start: range.start,
                    end: range.end,
                    len: chain.len(),
                });
            }
            if let Some(off) = chain[range.clone()]
                .iter()
                .position(|r| !r.aa.is_standard())
            {
                return Err(StructureError::UnknownResidueInCdr {
                    cdr,
                    index: range.start + off,
                });
            }
        }
        for (a, &(ca, ra)) in entries.iter().enumerate() {
            for &(cb, rb) in &entries[a + 1..] {
                if ca.chain() == cb.chain() && ra.start < rb.end && rb.start < ra.end {
                    return Err(StructureError::CdrOverlap(ca, cb));
                }
            }
        }
        if let Some(&bad) = self.epitope.iter().find(|&&j| j >= self.antigen.len()) {
            return Err(StructureError::EpitopeOutOfRange(bad));
        }
        Ok(())
    }

    pub fn chain(&self, kind: ChainKind) -> &[Residue] {
        match kind {
            ChainKind::Heavy => &self.heavy,
            ChainKind::Light => &self.light,
            ChainKind::Antigen => &self.antigen,
        }
    }

    pub fn chain_mut(&mut self, kind: ChainKind) -> &mut Vec<Residue> {
        match kind {
            ChainKind::Heavy => &mut self.heavy,
            ChainKind::Light => &mut self.light,
            ChainKind::Antigen => &mut self.antigen,
        }
    }

    pub fn cdr_range(&self, cdr: CdrName) -> Result<Range<usize>, StructureError> {
        let r = self
            .cdr_ranges
            .get(&cdr)
            .cloned()
            .ok_or(StructureError::MissingCdr(cdr))?;
        if r.is_empty() {
            return Err(StructureError::EmptyCdr(cdr));
        }
        Ok(r)
    }

    pub fn cdr_residues(&self, cdr: CdrName) -> Result<&[Residue], StructureError> {
        let r = self.cdr_range(cdr)?;
        Ok(&self.chain(cdr.chain())[r])
    }

    pub fn cdr_sequence(&self, cdr: CdrName) -> Result<Vec<AminoAcid>, StructureError> {
        Ok(self.cdr_residues(cdr)?.iter().map(|r| r.aa).collect())
    }

    pub fn cdr_ca(&self, cdr: CdrName) -> Result<Vec<Point>, StructureError> {
        Ok(self.cdr_residues(cdr)?.iter().map(|r| *r.ca()).collect())
    }

    pub fn epitope_ca(&self) -> Vec<Point> {
        self.epitope
            .iter()
            .map(|&j| *self.antigen[j].ca())
            .collect()
    }

    pub fn residue_count(&self) -> usize {
        self.heavy.len() + self.light.len() + self.antigen.len()
    }

    /// Copy with every coordinate moved by `m`.
    pub fn transformed(&self, m: &RigidMotion) -> Complex {
        let mv = |rs: &[Residue]| -> Vec<Residue> {
            rs.iter()
                .map(|r| {
                    let mut r = r.clone();
                    for p in r.backbone.iter_mut() {
                        *p = m.apply(p);
                    }
                    r
                })
                .collect()
        };
        Complex {
            id: self.id.clone(),
            heavy: mv(&self.heavy),
            light: mv(&self.light),
            antigen: mv(&self.antigen),
            cdr_ranges: self.cdr_ranges.clone(),
            epitope: self.epitope.clone(),
        }
    }
}

/// Antigen residues with a Cα strictly closer than `cutoff` to some Cα of `cdr`.
pub fn derive_epitope(
    c: &Complex,
    cdr: CdrName,
    cutoff: f64,
) -> Result<BTreeSet<usize>, StructureError> {
    let cdr_ca = c.cdr_ca(cdr)?;
    Ok(c.antigen
        .iter()
        .enumerate()
        .filter(|(_, r)| cdr_ca.iter().any(|x| distance(x, r.ca()) < cutoff))
        .map(|(j, _)| j)
        .collect())
}

/// Chain sequence with the CDR replaced by mask tokens, plus the CDR labels.
pub fn mask_cdr(c: &Complex, cdr: CdrName) -> Result<(Vec<Token>, Vec<AminoAcid>), StructureError> {
    let range = c.cdr_range(cdr)?;
    let chain = c.chain(cdr.chain());
    let tokens = chain
        .iter()
        .enumerate()
        .map(|(i, r)| {
            if range.contains(&i) {
                Token::MASK
            } else {
                r.aa.token()
            }
        })
        .collect();
    let labels = chain[range].iter().map(|r| r.aa).collect();
    Ok((tokens, labels))
}

/// Partitions CDR positions (0-based, relative to the CDR start) by whether the
/// residue's Cα lies within `cutoff` of any antigen Cα.
pub fn split_contact_positions(
    c: &Complex,
    cdr: CdrName,
    cutoff: f64,
) -> Result<(Vec<usize>, Vec<usize>), StructureError> {
    let residues = c.cdr_residues(cdr)?;
    let (mut contact, mut other) = (Vec::new(), Vec::new());
    for (k, r) in residues.iter().enumerate() {
        if c.antigen.iter().any(|a| distance(a.ca(), r.ca()) < cutoff) {
            contact.push(k);
        } else {
            other.push(k);
        }
    }
    Ok((contact, other))
}
