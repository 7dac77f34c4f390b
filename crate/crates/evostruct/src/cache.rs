//! Precomputed PLM embeddings on disk, one `EVOC` file per complex and CDR.
//!
//! Layout: `b"EVOC"`, then little-endian `u32` version, rows `L` and width
//! `d_esm`, then `L * d_esm` row-major `f32` values.

use std::io;
use std::path::{Path, PathBuf};

use evostruct_core::autograd::{Tape, Var};
use evostruct_core::plm::{PlmBackend, PlmError, PlmInput};
use evostruct_core::structure::CdrName;
use evostruct_core::Mat;

pub const MAGIC: &[u8; 4] = b"EVOC";
pub const VERSION: u32 = 1;

pub fn file_name(id: &str, cdr: CdrName) -> String {
    format!("{id}.{cdr}.evoc")
}

pub fn encode(m: &Mat) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * m.len());
    out.extend_from_slice(MAGIC);
    for v in [VERSION, m.rows() as u32, m.cols() as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for &v in m.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<Mat, String> {
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err("missing EVOC header".into());
    }
    let word = |k: usize| u32::from_le_bytes(bytes[4 + 4 * k..8 + 4 * k].try_into().unwrap());
    if word(0) != VERSION {
        return Err(format!("unsupported version {}", word(0)));
    }
    let (rows, cols) = (word(1) as usize, word(2) as usize);
    let body = &bytes[16..];
    if body.len() != 4 * rows * cols {
        return Err(format!(
            "{} payload bytes for a {rows}x{cols} matrix",
            body.len()
        ));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Ok(Mat::from_vec(rows, cols, data))
}

/// Writes through a temporary file so readers never see a partial entry.
pub fn write(path: &Path, m: &Mat) -> io::Result<()> {
    let tmp = path.with_extension("evoc.tmp");
    std::fs::write(&tmp, encode(m))?;
    std::fs::rename(tmp, path)
}

pub fn read(path: &Path) -> io::Result<Mat> {
    decode(&std::fs::read(path)?).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))
}

/// A backend that only looks embeddings up. It has no trainable blocks, so
/// unfreezing requests are clamped to zero by the trainer.
#[derive(Clone, Debug)]
pub struct CacheBackend {
    pub dir: PathBuf,
    pub d_esm: usize,
}

impl CacheBackend {
    pub fn new(dir: impl Into<PathBuf>, d_esm: usize) -> Self {
        CacheBackend {
            dir: dir.into(),
            d_esm,
        }
    }

    pub fn path(&self, id: &str, cdr: CdrName) -> PathBuf {
        self.dir.join(file_name(id, cdr))
    }
}

impl PlmBackend for CacheBackend {
    fn d_esm(&self) -> usize {
        self.d_esm
    }

    fn embed_masked(&self, t: &mut Tape, input: &PlmInput) -> Result<Var, PlmError> {
        input.check()?;
        let path = self.path(input.id, input.cdr);
        let bytes = match std::fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == io::ErrorKind::NotFound => {
                return Err(PlmError::CacheMiss {
                    id: input.id.into(),
                    cdr: input.cdr,
                })
            }
            Err(e) => {
                return Err(PlmError::CacheCorrupt {
                    id: input.id.into(),
                    message: e.to_string(),
                })
            }
        };
        let m = decode(&bytes).map_err(|message| PlmError::CacheCorrupt {
            id: input.id.into(),
            message,
        })?;
        let rows = input.cdr_range.len();
        if m.shape() != (rows, self.d_esm) {
            return Err(PlmError::CacheShape {
                id: input.id.into(),
                rows: m.rows(),
                cols: m.cols(),
                expected_rows: rows,
                expected_cols: self.d_esm,
            });
        }
        Ok(t.constant(m))
    }
}
