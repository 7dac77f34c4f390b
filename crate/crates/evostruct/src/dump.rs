//! Per-complex prediction files shared by `eval` and `diagnose`.
//!
//! Any method can be diagnosed by writing `<id>.<cdr>.json` files in this
//! format; logits and coordinates are optional.

use std::path::{Path, PathBuf};

use evostruct_core::aa::{parse_sequence, sequence_string, AminoAcid, NUM_AA, VOCAB_SIZE};
use evostruct_core::geometry::Point;
use evostruct_core::model::Prediction;
use evostruct_core::structure::CdrName;
use evostruct_core::Mat;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionDump {
    pub id: String,
    pub cdr: CdrName,
    pub predicted_seq: String,
    /// 20 amino-acid logits per position, in `ACDEFGHIKLMNPQRSTVWY` order.
    #[serde(default)]
    pub per_position_logits: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub predicted_cdr_coords: Option<Vec<Point>>,
}

#[derive(Debug, Error)]
pub enum DumpError {
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
    #[error("{path}: {message}")]
    Invalid { path: PathBuf, message: String },
}

impl PredictionDump {
    pub fn from_prediction(p: &Prediction) -> Self {
        PredictionDump {
            id: p.id.clone(),
            cdr: p.cdr,
            predicted_seq: sequence_string(&p.sequence),
            per_position_logits: Some(
                (0..p.logits.rows())
                    .map(|r| p.logits.row(r)[..NUM_AA].to_vec())
                    .collect(),
            ),
            predicted_cdr_coords: Some(p.cdr_ca.clone()),
        }
    }

    pub fn file_name(&self) -> String {
        format!("{}.{}.json", self.id, self.cdr)
    }

    pub fn sequence(&self) -> Option<Vec<AminoAcid>> {
        parse_sequence(&self.predicted_seq)
    }

    /// `L x 25` logits with the special-token columns at −∞.
    pub fn logits(&self) -> Option<Mat> {
        let rows = self.per_position_logits.as_ref()?;
        let mut m = Mat::filled(rows.len(), VOCAB_SIZE, f64::NEG_INFINITY);
        for (r, row) in rows.iter().enumerate() {
            m.row_mut(r)[..NUM_AA].copy_from_slice(row);
        }
        Some(m)
    }

    fn check(&self) -> Result<(), String> {
        let seq = self
            .sequence()
            .ok_or("predicted_seq has letters outside the 20 amino acids")?;
        if seq.is_empty() {
            return Err("predicted_seq is empty".into());
        }
        if let Some(l) = &self.per_position_logits {
            if l.len() != seq.len() || l.iter().any(|r| r.len() != NUM_AA) {
                return Err(format!(
                    "per_position_logits must be {} rows of {NUM_AA}",
                    seq.len()
                ));
            }
        }
        if let Some(c) = &self.predicted_cdr_coords {
            if c.len() != seq.len() {
                return Err(format!(
                    "predicted_cdr_coords must have {} points",
                    seq.len()
                ));
            }
        }
        Ok(())
    }
}

pub fn write_dump(dir: &Path, d: &PredictionDump) -> Result<PathBuf, DumpError> {
    let path = dir.join(d.file_name());
    let text = serde_json::to_string_pretty(d).expect("dump serializes");
    std::fs::write(&path, text + "\n").map_err(|source| DumpError::Io {
        path: path.clone(),
        source,
    })?;
    Ok(path)
}

pub fn read_dump(path: &Path) -> Result<PredictionDump, DumpError> {
    let text = std::fs::read_to_string(path).map_err(|source| DumpError::Io {
        path: path.into(),
        source,
    })?;
    let d: PredictionDump = serde_json::from_str(&text).map_err(|source| DumpError::Json {
        path: path.into(),
        source,
    })?;
    d.check().map_err(|message| DumpError::Invalid {
        path: path.into(),
        message,
    })?;
    Ok(d)
}

/// Every `*.json` file in `dir`, sorted by file name.
pub fn read_dump_dir(dir: &Path) -> Result<Vec<(PathBuf, PredictionDump)>, DumpError> {
    let entries = std::fs::read_dir(dir).map_err(|source| DumpError::Io {
        path: dir.into(),
        source,
    })?;
    let mut paths = Vec::new();
    for e in entries {
        let p = e
            .map_err(|source| DumpError::Io {
                path: dir.into(),
                source,
            })?
            .path();
        if p.extension().is_some_and(|x| x == "json") {
            paths.push(p);
        }
    }
    paths.sort();
    paths
        .into_iter()
        .map(|p| read_dump(&p).map(|d| (p, d)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> PredictionDump {
        PredictionDump {
            id: "c".into(),
            cdr: CdrName::H3,
            predicted_seq: "ACD".into(),
            per_position_logits: Some(vec![vec![0.5; NUM_AA]; 3]),
            predicted_cdr_coords: Some(vec![[1.0, 2.0, 3.0]; 3]),
        }
    }

    #[test]
    fn write_read_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let d = sample();
        let path = write_dump(dir.path(), &d).unwrap();
        assert!(path.ends_with("c.H3.json"));
        assert_eq!(read_dump(&path).unwrap(), d);
        let logits = d.logits().unwrap();
        assert_eq!(logits.shape(), (3, VOCAB_SIZE));
        assert_eq!(logits.row(0)[NUM_AA], f64::NEG_INFINITY);
    }

    #[test]
    fn optional_fields_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.json");
        std::fs::write(&p, r#"{"id":"x","cdr":"H3","predicted_seq":"WW"}"#).unwrap();
        let d = read_dump(&p).unwrap();
        assert!(d.logits().is_none() && d.predicted_cdr_coords.is_none());
        std::fs::write(&p, r#"{"id":"x","cdr":"H3","predicted_seq":"WB"}"#).unwrap();
        assert!(matches!(read_dump(&p), Err(DumpError::Invalid { .. })));
        let mut bad = sample();
        bad.per_position_logits = Some(vec![vec![0.0; 3]; 3]);
        write_dump(dir.path(), &bad).unwrap();
        assert!(read_dump_dir(dir.path()).is_err());
    }
}
