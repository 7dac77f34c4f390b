//! Minimal fixed-width PDB reader and writer for backbone atoms.
//!
//! Only `ATOM` records of the first model are read. Alternate locations other
//! than blank or `A` are skipped, as are atoms outside the backbone.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::ops::Range;

use evostruct_core::aa::AminoAcid;
use evostruct_core::geometry::Point;
use evostruct_core::structure::{
    derive_epitope, CdrName, Complex, Residue, StructureError, BACKBONE_ATOMS,
};
use thiserror::Error;

use crate::manifest::ManifestEntry;

#[derive(Debug, Error)]
pub enum PdbError {
    #[error("line {line}: malformed ATOM record: {message}")]
    MalformedRecord { line: usize, message: String },
    #[error("chain {0:?} not found in structure")]
    MissingChain(char),
    #[error("CDR {0} is empty after dropping incomplete residues")]
    EmptyCdr(CdrName),
    #[error("CDR {cdr} range {start}..{end} exceeds the {len} residues of its chain")]
    CdrOutOfBounds {
        cdr: CdrName,
        start: usize,
        end: usize,
        len: usize,
    },
    #[error("epitope index {index} exceeds the {len} antigen residues")]
    EpitopeOutOfBounds { index: usize, len: usize },
    #[error(transparent)]
    Structure(#[from] StructureError),
}

/// One residue as read from the file, before completeness checks.
#[derive(Clone, Debug, PartialEq)]
pub struct RawResidue {
    pub res_name: String,
    pub res_seq: i32,
    pub icode: char,
    /// `[N, CA, C, O]`, `None` when the record is absent.
    pub atoms: [Option<Point>; 4],
}

impl RawResidue {
    fn complete(&self, chain_id: char) -> Option<Residue> {
        let [n, ca, c, o] = self.atoms;
        Some(Residue {
            aa: AminoAcid::from_three_letter(&self.res_name),
            backbone: [n?, ca?, c?, o?],
            chain_id,
            seq_index: self.res_seq,
            icode: self.icode,
        })
    }
}

/// Chains of a PDB file, each ordered by `(resSeq, iCode)`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PdbStructure {
    pub chains: BTreeMap<char, Vec<RawResidue>>,
}

fn field(line: &str, cols: Range<usize>) -> &str {
    line.get(cols).unwrap_or("").trim()
}

fn column(line: &str, col: usize) -> char {
    line.as_bytes().get(col).map_or(' ', |&b| b as char)
}

pub fn parse_pdb(text: &str) -> Result<PdbStructure, PdbError> {
    let mut chains: BTreeMap<char, BTreeMap<(i32, char), RawResidue>> = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.starts_with("ENDMDL") {
            break;
        }
        if !line.starts_with("ATOM") {
            continue;
        }
        let bad = |message: &str| PdbError::MalformedRecord {
            line: line_no,
            message: message.into(),
        };
        if !line.is_ascii() {
            return Err(bad("non-ASCII characters"));
        }
        if line.len() < 54 {
            return Err(bad("record shorter than 54 columns"));
        }
        let alt = column(line, 16);
        if alt != ' ' && alt != 'A' {
            continue;
        }
        let name = field(line, 12..16);
        let Some(slot) = BACKBONE_ATOMS.iter().position(|a| *a == name) else {
            continue;
        };
        let res_seq: i32 = field(line, 22..26)
            .parse()
            .map_err(|_| bad("residue number is not an integer"))?;
        let mut xyz = [0.0f64; 3];
        for (k, v) in xyz.iter_mut().enumerate() {
            let s = field(line, 30 + 8 * k..38 + 8 * k);
            *v = s.parse().map_err(|_| bad("coordinate is not a number"))?;
            if !v.is_finite() {
                return Err(bad("coordinate is not finite"));
            }
        }
        let chain = column(line, 21);
        let icode = column(line, 26);
        let res = chains
            .entry(chain)
            .or_default()
            .entry((res_seq, icode))
            .or_insert_with(|| RawResidue {
                res_name: field(line, 17..20).to_string(),
                res_seq,
                icode,
                atoms: [None; 4],
            });
        res.atoms[slot].get_or_insert(xyz);
    }
    Ok(PdbStructure {
        chains: chains
            .into_iter()
            .map(|(c, m)| (c, m.into_values().collect()))
            .collect(),
    })
}

/// A complex plus the number of residues dropped for missing backbone atoms.
#[derive(Clone, Debug, PartialEq)]
pub struct ParsedComplex {
    pub complex: Complex,
    pub dropped: usize,
}

/// Keeps complete residues and reports, for each original index, its new one.
fn complete_chain(raw: &[RawResidue], chain_id: char) -> (Vec<Residue>, Vec<Option<usize>>) {
    let mut kept = Vec::new();
    let map = raw
        .iter()
        .map(|r| {
            r.complete(chain_id).map(|res| {
                kept.push(res);
                kept.len() - 1
            })
        })
        .collect();
    (kept, map)
}

fn remap_range(
    cdr: CdrName,
    r: Range<usize>,
    map: &[Option<usize>],
) -> Result<Range<usize>, PdbError> {
    if r.start > r.end || r.end > map.len() {
        return Err(PdbError::CdrOutOfBounds {
            cdr,
            start: r.start,
            end: r.end,
            len: map.len(),
        });
    }
    let kept_before = |i: usize| map[..i].iter().filter(|m| m.is_some()).count();
    let (start, end) = (kept_before(r.start), kept_before(r.end));
    if start == end {
        return Err(PdbError::EmptyCdr(cdr));
    }
    Ok(start..end)
}

/// Builds a complex from a parsed file and its manifest entry. When the entry
/// carries no epitope, it is derived from `design_cdr` at `cutoff`.
pub fn build_complex(
    pdb: &PdbStructure,
    entry: &ManifestEntry,
    design_cdr: CdrName,
    cutoff: f64,
) -> Result<ParsedComplex, PdbError> {
    let chain = |id: char| pdb.chains.get(&id).ok_or(PdbError::MissingChain(id));
    let (heavy, heavy_map) = complete_chain(chain(entry.heavy_chain_id)?, entry.heavy_chain_id);
    let (light, light_map) = match entry.light_chain_id {
        Some(id) => complete_chain(chain(id)?, id),
        None => (Vec::new(), Vec::new()),
    };
    let mut antigen = Vec::new();
    let mut antigen_map = Vec::new();
    for &id in &entry.antigen_chain_ids {
        let (res, map) = complete_chain(chain(id)?, id);
        let offset = antigen.len();
        antigen.extend(res);
        antigen_map.extend(map.into_iter().map(|m| m.map(|i| i + offset)));
    }
    let dropped = [&heavy_map, &light_map, &antigen_map]
        .iter()
        .map(|m| m.iter().filter(|x| x.is_none()).count())
        .sum();

    let mut cdr_ranges = BTreeMap::new();
    for (&cdr, &[start, end]) in &entry.cdr_ranges {
        let map = match cdr.chain() {
            evostruct_core::structure::ChainKind::Heavy => &heavy_map,
            _ => &light_map,
        };
        cdr_ranges.insert(cdr, remap_range(cdr, start..end, map)?);
    }
    let epitope: BTreeSet<usize> = match &entry.epitope_indices {
        Some(idx) => {
            let mut set = BTreeSet::new();
            for &j in idx {
                let m = antigen_map.get(j).ok_or(PdbError::EpitopeOutOfBounds {
                    index: j,
                    len: antigen_map.len(),
                })?;
                set.extend(*m);
            }
            set
        }
        None => BTreeSet::new(),
    };
    let mut complex = Complex::new(entry.id.clone(), heavy, light, antigen, cdr_ranges, epitope)?;
    if entry.epitope_indices.is_none() && complex.cdr_ranges.contains_key(&design_cdr) {
        complex.epitope = derive_epitope(&complex, design_cdr, cutoff)?;
    }
    Ok(ParsedComplex { complex, dropped })
}

fn write_chain(out: &mut String, serial: &mut usize, residues: &[Residue]) {
    let Some(last) = residues.last() else {
        return;
    };
    for r in residues {
        for (slot, name) in BACKBONE_ATOMS.iter().enumerate() {
            let [x, y, z] = r.backbone[slot];
            let _ = writeln!(
                out,
                "ATOM  {:>5} {:<4} {:>3} {}{:>4}{}   {:>8.3}{:>8.3}{:>8.3}{:>6.2}{:>6.2}          {:>2}",
                *serial,
                format!(" {name}"),
                r.aa.three_letter(),
                r.chain_id,
                r.seq_index,
                r.icode,
                x,
                y,
                z,
                1.0,
                0.0,
                &name[..1],
            );
            *serial += 1;
        }
    }
    let _ = writeln!(
        out,
        "TER   {:>5}      {:>3} {}{:>4}{}",
        *serial,
        last.aa.three_letter(),
        last.chain_id,
        last.seq_index,
        last.icode
    );
    *serial += 1;
}

/// Backbone-only PDB text: heavy, light, then antigen chains.
pub fn write_pdb(c: &Complex) -> String {
    let mut out = String::new();
    let mut serial = 1;
    write_chain(&mut out, &mut serial, &c.heavy);
    write_chain(&mut out, &mut serial, &c.light);
    let mut start = 0;
    while start < c.antigen.len() {
        let id = c.antigen[start].chain_id;
        let end = start
            + c.antigen[start..]
                .iter()
                .take_while(|r| r.chain_id == id)
                .count();
        write_chain(&mut out, &mut serial, &c.antigen[start..end]);
        start = end;
    }
    out.push_str("END\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn atom(serial: usize, name: &str, res: &str, chain: char, seq: i32, xyz: [f64; 3]) -> String {
        format!(
            "ATOM  {serial:>5} {:<4} {res:>3} {chain}{seq:>4}    {:>8.3}{:>8.3}{:>8.3}  1.00  0.00           {}\n",
            format!(" {name}"),
            xyz[0],
            xyz[1],
            xyz[2],
            &name[..1]
        )
    }

    fn three_residue_file(skip_ca_of: Option<i32>) -> String {
        let mut s = String::new();
        let mut serial = 1;
        for (k, res) in ["ALA", "CYS", "ASP"].iter().enumerate() {
            let seq = k as i32 + 1;
            for (a, name) in BACKBONE_ATOMS.iter().enumerate() {
                if skip_ca_of == Some(seq) && *name == "CA" {
                    continue;
                }
                s += &atom(serial, name, res, 'H', seq, [3.8 * k as f64, a as f64, 0.5]);
                serial += 1;
            }
        }
        s
    }

    fn entry(cdr: Range<usize>) -> ManifestEntry {
        ManifestEntry {
            id: "t".into(),
            structure_path: "t.pdb".into(),
            heavy_chain_id: 'H',
            light_chain_id: None,
            antigen_chain_ids: vec![],
            cdr_ranges: [(CdrName::H3, [cdr.start, cdr.end])].into(),
            epitope_indices: None,
        }
    }

    #[test]
    fn complete_file_parses_without_drops() {
        let pdb = parse_pdb(&three_residue_file(None)).unwrap();
        let p = build_complex(&pdb, &entry(1..3), CdrName::H3, 6.6).unwrap();
        assert_eq!(p.complex.heavy.len(), 3);
        assert_eq!(p.dropped, 0);
        assert_eq!(p.complex.heavy[1].aa, AminoAcid::from_letter('C').unwrap());
        assert_eq!(p.complex.heavy[2].backbone[1], [7.6, 1.0, 0.5]);
    }

    #[test]
    fn missing_ca_drops_residue_and_shifts_cdr() {
        let pdb = parse_pdb(&three_residue_file(Some(2))).unwrap();
        let p = build_complex(&pdb, &entry(2..3), CdrName::H3, 6.6).unwrap();
        assert_eq!(p.complex.heavy.len(), 2);
        assert_eq!(p.dropped, 1);
        assert_eq!(p.complex.cdr_ranges[&CdrName::H3], 1..2);
        let err = build_complex(&pdb, &entry(1..2), CdrName::H3, 6.6).unwrap_err();
        assert!(matches!(err, PdbError::EmptyCdr(CdrName::H3)));
    }

    #[test]
    fn missing_chain_is_reported() {
        let pdb = parse_pdb(&three_residue_file(None)).unwrap();
        let mut e = entry(1..3);
        e.antigen_chain_ids = vec!['Z'];
        assert!(matches!(
            build_complex(&pdb, &e, CdrName::H3, 6.6),
            Err(PdbError::MissingChain('Z'))
        ));
    }

    #[test]
    fn malformed_record_names_line() {
        let mut s = three_residue_file(None);
        s.push_str("ATOM      99  CA  ALA H   4    abc\n");
        match parse_pdb(&s) {
            Err(PdbError::MalformedRecord { line, .. }) => assert_eq!(line, 13),
            other => panic!("{other:?}"),
        }
        let bad = atom(1, "CA", "ALA", 'H', 1, [0.0; 3]).replace("   0.000", "     x.y");
        assert!(matches!(
            parse_pdb(&bad),
            Err(PdbError::MalformedRecord { line: 1, .. })
        ));
    }

    #[test]
    fn hetatm_alt_locations_and_insertion_codes() {
        let mut s = String::new();
        for (i, name) in BACKBONE_ATOMS.iter().enumerate() {
            s += &atom(i, name, "GLY", 'H', 5, [i as f64; 3]);
        }
        // Insertion 5A sorts after 5, and a B conformer is ignored.
        for (i, name) in BACKBONE_ATOMS.iter().enumerate() {
            let line = atom(10 + i, name, "SER", 'H', 5, [9.0; 3]);
            s += &(line[..26].to_string() + "A" + &line[27..]);
            let alt_b = atom(20 + i, name, "THR", 'H', 5, [7.0; 3]);
            s += &(alt_b[..16].to_string() + "B" + &alt_b[17..]);
        }
        s += &atom(30, "CA", "HOH", 'H', 7, [1.0; 3]).replacen("ATOM  ", "HETATM", 1);
        let pdb = parse_pdb(&s).unwrap();
        let chain = &pdb.chains[&'H'];
        assert_eq!(chain.len(), 2);
        assert_eq!(
            (chain[1].res_seq, chain[1].icode, chain[1].res_name.as_str()),
            (5, 'A', "SER")
        );
        assert_eq!(chain[0].atoms[1], Some([1.0; 3]));
    }

    #[test]
    fn write_then_parse_round_trips() {
        use evostruct_core::rng::RngStream;
        use evostruct_core::synth::{synth_complex, SynthConfig};
        let mut c = synth_complex(&mut RngStream::new(4), "rt", &SynthConfig::default());
        for r in c.heavy.iter_mut().chain(&mut c.light).chain(&mut c.antigen) {
            for p in r.backbone.iter_mut().flatten() {
                *p = (*p * 1000.0).round() / 1000.0;
            }
        }
        let text = write_pdb(&c);
        let e = crate::manifest::entry_for(&c, "rt.pdb");
        let back = build_complex(&parse_pdb(&text).unwrap(), &e, CdrName::H3, 6.6).unwrap();
        assert_eq!(back.dropped, 0);
        assert_eq!(back.complex, c);
        assert_eq!(write_pdb(&back.complex), text);
    }
}
