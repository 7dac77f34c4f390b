//! Dataset manifest: which file, chains and CDR ranges make up each complex.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use evostruct_core::structure::{CdrName, Complex};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pdb::{build_complex, parse_pdb, ParsedComplex, PdbError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    /// Relative paths resolve against the manifest's directory.
    pub structure_path: PathBuf,
    pub heavy_chain_id: char,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub light_chain_id: Option<char>,
    pub antigen_chain_ids: Vec<char>,
    /// Half-open `[start, end)` residue indices in file order, before any
    /// incomplete residues are dropped.
    pub cdr_ranges: BTreeMap<CdrName, [usize; 2]>,
    /// Indices into the concatenated antigen chains; derived when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epitope_indices: Option<Vec<usize>>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
}

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error("{path}: duplicate id {id:?}")]
    DuplicateId { path: PathBuf, id: String },
    #[error("{path} (entry {id}): {source}")]
    Structure {
        path: PathBuf,
        id: String,
        source: PdbError,
    },
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self, ManifestError> {
        let text = std::fs::read_to_string(path).map_err(|source| ManifestError::Io {
            path: path.into(),
            source,
        })?;
        let m: DatasetManifest =
            serde_json::from_str(&text).map_err(|source| ManifestError::Json {
                path: path.into(),
                source,
            })?;
        let mut seen = BTreeSet::new();
        for e in &m.entries {
            if !seen.insert(e.id.as_str()) {
                return Err(ManifestError::DuplicateId {
                    path: path.into(),
                    id: e.id.clone(),
                });
            }
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<(), ManifestError> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(path, text + "\n").map_err(|source| ManifestError::Io {
            path: path.into(),
            source,
        })
    }
}

/// Manifest entry describing `c` as written by [`crate::pdb::write_pdb`].
pub fn entry_for(c: &Complex, structure_path: impl Into<PathBuf>) -> ManifestEntry {
    let mut antigen_chain_ids: Vec<char> = Vec::new();
    for r in &c.antigen {
        if antigen_chain_ids.last() != Some(&r.chain_id) {
            antigen_chain_ids.push(r.chain_id);
        }
    }
    ManifestEntry {
        id: c.id.clone(),
        structure_path: structure_path.into(),
        heavy_chain_id: c.heavy.first().map_or('H', |r| r.chain_id),
        light_chain_id: c.light.first().map(|r| r.chain_id),
        antigen_chain_ids,
        cdr_ranges: c
            .cdr_ranges
            .iter()
            .map(|(&k, r)| (k, [r.start, r.end]))
            .collect(),
        epitope_indices: Some(c.epitope.iter().copied().collect()),
    }
}

/// Reads every structure of the manifest at `path`, in manifest order.
pub fn load_dataset(
    path: &Path,
    design_cdr: CdrName,
    cutoff: f64,
) -> Result<Vec<ParsedComplex>, ManifestError> {
    let m = DatasetManifest::load(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    m.entries
        .par_iter()
        .map(|e| {
            let file = base.join(&e.structure_path);
            let text = std::fs::read_to_string(&file).map_err(|source| ManifestError::Io {
                path: file.clone(),
                source,
            })?;
            let wrap = |source| ManifestError::Structure {
                path: file.clone(),
                id: e.id.clone(),
                source,
            };
            let pdb = parse_pdb(&text).map_err(wrap)?;
            let parsed = build_complex(&pdb, e, design_cdr, cutoff).map_err(wrap)?;
            if parsed.dropped > 0 {
                log::warn!(
                    "{}: dropped {} residues with incomplete backbones",
                    e.id,
                    parsed.dropped
                );
            }
            if parsed.complex.epitope.is_empty() {
                log::warn!("{}: empty epitope", e.id);
            }
            Ok(parsed)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_shape_and_defaults() {
        let text = r#"{"entries":[{"id":"a","structure_path":"a.pdb","heavy_chain_id":"H",
            "antigen_chain_ids":["A","B"],"cdr_ranges":{"H3":[3,9]}}]}"#;
        let m: DatasetManifest = serde_json::from_str(text).unwrap();
        let e = &m.entries[0];
        assert_eq!(e.light_chain_id, None);
        assert_eq!(e.epitope_indices, None);
        assert_eq!(e.cdr_ranges[&CdrName::H3], [3, 9]);
        let back: DatasetManifest =
            serde_json::from_str(&serde_json::to_string(&m).unwrap()).unwrap();
        assert_eq!(back, m);
        assert!(
            serde_json::from_str::<DatasetManifest>(&text.replace("\"id\"", "\"idx\"")).is_err()
        );
    }

    #[test]
    fn duplicate_ids_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let e = entry_for(
            &evostruct_core::synth::synth_complex(
                &mut evostruct_core::RngStream::new(1),
                "x",
                &Default::default(),
            ),
            "x.pdb",
        );
        let m = DatasetManifest {
            entries: vec![e.clone(), e],
        };
        let p = dir.path().join("m.json");
        m.save(&p).unwrap();
        assert!(matches!(
            DatasetManifest::load(&p),
            Err(ManifestError::DuplicateId { .. })
        ));
    }
}
