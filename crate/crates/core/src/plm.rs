//! Protein-language-model backends producing `H_esm` for the masked CDR.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aa::{Token, VOCAB_SIZE};
use crate::autograd::{Tape, TensorError, Var};
use crate::nn::{uniform_init, LayerNorm, Linear};
use crate::params::{ParamId, ParamStore};
use crate::rng::RngStream;
use crate::structure::CdrName;
use crate::tensor::Mat;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PlmError {
    #[error("unknown token index {0}")]
    UnknownToken(usize),
    #[error("CDR position {0} is not a mask token")]
    UnmaskedCdr(usize),
    #[error("CDR range {start}..{end} outside a sequence of length {len}")]
    RangeOutOfBounds {
        start: usize,
        end: usize,
        len: usize,
    },
    #[error("no cached embedding for {id} {cdr}")]
    CacheMiss { id: String, cdr: CdrName },
    #[error("unreadable cached embedding for {id}: {message}")]
    CacheCorrupt { id: String, message: String },
    #[error(
        "cached embedding for {id} has {rows}x{cols}, expected {expected_rows}x{expected_cols}"
    )]
    CacheShape {
        id: String,
        rows: usize,
        cols: usize,
        expected_rows: usize,
        expected_cols: usize,
    },
    #[error("cannot unfreeze {k} blocks of a {n}-block backend")]
    OutOfRange { k: usize, n: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// What a backend sees for one complex.
#[derive(Clone, Debug)]
pub struct PlmInput<'a> {
    pub id: &'a str,
    pub cdr: CdrName,
    /// Full heavy-chain tokens with the CDR masked.
    pub tokens: &'a [Token],
    pub cdr_range: Range<usize>,
}

impl PlmInput<'_> {
    pub fn check(&self) -> Result<(), PlmError> {
        let r = &self.cdr_range;
        if r.start >= r.end || r.end > self.tokens.len() {
            return Err(PlmError::RangeOutOfBounds {
                start: r.start,
                end: r.end,
                len: self.tokens.len(),
            });
        }
        if let Some(i) = r.clone().find(|&i| self.tokens[i] != Token::MASK) {
            return Err(PlmError::UnmaskedCdr(i));
        }
        Ok(())
    }
}

/// Converts raw indices to tokens.
pub fn tokens_from_indices(idx: &[usize]) -> Result<Vec<Token>, PlmError> {
    idx.iter()
        .map(|&i| Token::from_index(i).ok_or(PlmError::UnknownToken(i)))
        .collect()
}

/// A source of per-position embeddings of width `d_esm` for the masked CDR.
pub trait PlmBackend {
    fn d_esm(&self) -> usize;

    /// `L x d_esm` embeddings of the CDR rows, computed from the whole masked
    /// sequence. Trainable backends read their weights through the tape.
    fn embed_masked(&self, t: &mut Tape, input: &PlmInput) -> Result<Var, PlmError>;

    /// Number of independently freezable blocks.
    fn n_blocks(&self) -> usize {
        0
    }

    /// Every parameter the backend owns.
    fn params(&self) -> Vec<ParamId> {
        Vec::new()
    }

    /// Parameters of block `b` (0-based, bottom first).
    fn block(&self, _b: usize) -> Vec<ParamId> {
        Vec::new()
    }

    fn freeze(&self, _store: &mut ParamStore) {}

    fn thaw_top(&self, _store: &mut ParamStore, k: usize) -> Result<(), PlmError> {
        match k {
            0 => Ok(()),
            _ => Err(PlmError::OutOfRange {
                k,
                n: self.n_blocks(),
            }),
        }
    }

    fn thaw_all(&self, _store: &mut ParamStore) {}
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyPlmConfig {
    pub d_esm: usize,
    pub n_layers: usize,
    /// Each attention block sees positions within this distance.
    pub context_radius: usize,
}

impl Default for ToyPlmConfig {
    fn default() -> Self {
        ToyPlmConfig {
            d_esm: 128,
            n_layers: 6,
            context_radius: 4,
        }
    }
}

#[derive(Clone, Debug)]
struct Block {
    ln1: LayerNorm,
    q: ParamId,
    k: ParamId,
    v: ParamId,
    o: ParamId,
    ln2: LayerNorm,
    ffn1: Linear,
    ffn2: Linear,
}

impl Block {
    fn params(&self) -> Vec<ParamId> {
        let mut p = Vec::from([
            self.ln1.gain,
            self.ln1.bias,
            self.q,
            self.k,
            self.v,
            self.o,
            self.ln2.gain,
            self.ln2.bias,
            self.ffn1.w,
            self.ffn2.w,
        ]);
        p.extend(self.ffn1.b);
        p.extend(self.ffn2.b);
        p
    }
}

/// Init gains on the attention projections. Near-uniform attention would
/// blur masked positions into one another.
const QK_GAIN: f64 = 3.0;
const VO_GAIN: f64 = 2.0;
const MASKED_SCORE: f64 = -1e30;

/// Seeded stand-in for a pretrained PLM: a token-embedding table followed by
/// pre-norm local self-attention blocks. Weights live in the shared
/// [`ParamStore`] under `plm.` and start frozen.
#[derive(Clone, Debug)]
pub struct ToyPlm {
    pub cfg: ToyPlmConfig,
    embed: ParamId,
    blocks: Vec<Block>,
}

impl ToyPlm {
    pub fn new(store: &mut ParamStore, cfg: &ToyPlmConfig, seed: u64) -> Self {
        let mut rng = RngStream::named(seed, "plm");
        let d = cfg.d_esm;
        let embed = store.add(
            "plm.embed",
            Mat::from_fn(VOCAB_SIZE, d, |_, _| rng.normal()),
        );
        let blocks = (0..cfg.n_layers)
            .map(|b| {
                let name = format!("plm.block{}", b + 1);
                let mut sq = |s: &str, g: f64| {
                    store.add(
                        &format!("{name}.attn.{s}"),
                        uniform_init(&mut rng, d, d).map(|x| x * g),
                    )
                };
                let (q, k, v, o) = (
                    sq("q", QK_GAIN),
                    sq("k", QK_GAIN),
                    sq("v", VO_GAIN),
                    sq("o", VO_GAIN),
                );
                Block {
                    ln1: LayerNorm::new(store, &format!("{name}.ln1"), d),
                    q,
                    k,
                    v,
                    o,
                    ln2: LayerNorm::new(store, &format!("{name}.ln2"), d),
                    ffn1: Linear::new(store, &format!("{name}.ffn.0"), d, 2 * d, true, &mut rng),
                    ffn2: Linear::new(store, &format!("{name}.ffn.1"), 2 * d, d, true, &mut rng),
                }
            })
            .collect();
        let plm = ToyPlm {
            cfg: cfg.clone(),
            embed,
            blocks,
        };
        plm.freeze_all(store);
        plm
    }

    pub fn n_layers(&self) -> usize {
        self.blocks.len()
    }

    pub fn embedding_param(&self) -> ParamId {
        self.embed
    }

    /// Parameter ids of block `b` (0-based, bottom first).
    pub fn block_params(&self, b: usize) -> Vec<ParamId> {
        self.blocks[b].params()
    }

    pub fn all_params(&self) -> Vec<ParamId> {
        let mut p = Vec::from([self.embed]);
        for b in &self.blocks {
            p.extend(b.params());
        }
        p
    }

    pub fn freeze_all(&self, store: &mut ParamStore) {
        for id in self.all_params() {
            store.set_frozen(id, true);
        }
    }

    /// Makes the top `k` blocks trainable and freezes everything else,
    /// including the embedding table.
    pub fn unfreeze_top(&self, store: &mut ParamStore, k: usize) -> Result<(), PlmError> {
        let n = self.blocks.len();
        if k > n {
            return Err(PlmError::OutOfRange { k, n });
        }
        self.freeze_all(store);
        for b in n - k..n {
            for id in self.blocks[b].params() {
                store.set_frozen(id, false);
            }
        }
        Ok(())
    }

    /// Makes every backend parameter trainable, the embedding table included.
    pub fn unfreeze_all(&self, store: &mut ParamStore) {
        for id in self.all_params() {
            store.set_frozen(id, false);
        }
    }

    fn band_mask(&self, n: usize) -> Mat {
        let r = self.cfg.context_radius;
        Mat::from_fn(n, n, |i, j| {
            if i.abs_diff(j) <= r {
                0.0
            } else {
                MASKED_SCORE
            }
        })
    }

    /// Full-sequence encoding, one row per token.
    pub fn encode(&self, t: &mut Tape, tokens: &[Token]) -> Result<Var, PlmError> {
        let d = self.cfg.d_esm;
        let idx: Vec<usize> = tokens.iter().map(|tk| tk.index()).collect();
        let table = t.param(self.embed);
        let mut x = t.gather_rows(table, &idx)?;
        if self.blocks.is_empty() {
            return Ok(x);
        }
        let pe = t.constant(sinusoidal_positions(tokens.len(), d));
        x = t.add(x, pe)?;
        let mask = t.constant(self.band_mask(tokens.len()));
        let scale = 1.0 / (d as f64).sqrt();
        for b in &self.blocks {
            let h = b.ln1.forward(t, x)?;
            let (wq, wk, wv, wo) = (t.param(b.q), t.param(b.k), t.param(b.v), t.param(b.o));
            let q = t.matmul(h, wq)?;
            let k = t.matmul(h, wk)?;
            let v = t.matmul(h, wv)?;
            let s = t.matmul_t(q, k)?;
            let s = t.scale(s, scale);
            let s = t.add(s, mask)?;
            let a = t.softmax_rows(s);
            let ctx = t.matmul(a, v)?;
            let out = t.matmul(ctx, wo)?;
            x = t.add(x, out)?;
            let h = b.ln2.forward(t, x)?;
            let f = b.ffn1.forward(t, h)?;
            let f = t.silu(f);
            let f = b.ffn2.forward(t, f)?;
            x = t.add(x, f)?;
        }
        Ok(x)
    }
}

impl PlmBackend for ToyPlm {
    fn d_esm(&self) -> usize {
        self.cfg.d_esm
    }

    fn embed_masked(&self, t: &mut Tape, input: &PlmInput) -> Result<Var, PlmError> {
        input.check()?;
        let x = self.encode(t, input.tokens)?;
        let rows: Vec<usize> = input.cdr_range.clone().collect();
        Ok(t.gather_rows(x, &rows)?)
    }

    fn n_blocks(&self) -> usize {
        self.n_layers()
    }

    fn params(&self) -> Vec<ParamId> {
        self.all_params()
    }

    fn block(&self, b: usize) -> Vec<ParamId> {
        self.block_params(b)
    }

    fn freeze(&self, store: &mut ParamStore) {
        self.freeze_all(store)
    }

    fn thaw_top(&self, store: &mut ParamStore, k: usize) -> Result<(), PlmError> {
        self.unfreeze_top(store, k)
    }

    fn thaw_all(&self, store: &mut ParamStore) {
        self.unfreeze_all(store)
    }
}

/// Standard sinusoidal position table: `sin(p / 10000^(2i/d))` in even
/// columns, `cos` in odd ones.
pub fn sinusoidal_positions(n: usize, d: usize) -> Mat {
    Mat::from_fn(n, d, |p, c| {
        let i = (c / 2) as f64;
        let angle = p as f64 / 10000f64.powf(2.0 * i / d as f64);
        if c % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}
