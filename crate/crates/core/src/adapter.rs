//! Cross-attention adapter between PLM queries and structural keys/values,
//! the sequence head, and greedy decoding.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::aa::{AminoAcid, NUM_AA, VOCAB_SIZE};
use crate::autograd::{Result, Tape, Var};
use crate::nn::{uniform_init, LayerNorm, Linear};
use crate::params::{ParamId, ParamStore};
use crate::rng::RngStream;
use crate::tensor::Mat;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdapterConfig {
    pub d_a: usize,
    pub n_heads: usize,
    pub ffn_ratio: usize,
    pub dropout: f64,
    /// Hidden width of the sequence head.
    pub head_hidden: usize,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        AdapterConfig {
            d_a: 640,
            n_heads: 8,
            ffn_ratio: 2,
            dropout: 0.2,
            head_hidden: 640,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Adapter {
    pub cfg: AdapterConfig,
    pub w_down: ParamId,
    pub w_gnn: ParamId,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub ln_attn: LayerNorm,
    pub ffn1: Linear,
    pub ffn2: Linear,
    pub ln_ffn: LayerNorm,
    pub w_up: ParamId,
}

#[derive(Clone, Debug)]
pub struct AdapterOutput {
    /// `L x d_esm` refined embeddings.
    pub refined: Var,
    /// Attention weights per head, each `L x C`, before dropout.
    pub attention: Vec<Var>,
}

impl Adapter {
    /// Panics if `d_a` is not divisible by `n_heads`; configs are validated on load.
    pub fn new(
        store: &mut ParamStore,
        cfg: &AdapterConfig,
        d_esm: usize,
        d_gnn: usize,
        rng: &mut RngStream,
    ) -> Self {
        assert!(
            cfg.n_heads > 0 && cfg.d_a.is_multiple_of(cfg.n_heads),
            "d_a must be divisible by n_heads"
        );
        let d = cfg.d_a;
        let mut sq = |name: &str, i: usize, o: usize| {
            store.add(&format!("adapter.{name}"), uniform_init(rng, i, o))
        };
        let w_down = sq("w_down", d_esm, d);
        let w_gnn = sq("w_gnn", d_gnn, d);
        let wq = sq("attn.q", d, d);
        let wk = sq("attn.k", d, d);
        let wv = sq("attn.v", d, d);
        let wo = sq("attn.o", d, d);
        let w_up = sq("w_up", d, d_esm);
        let ln_attn = LayerNorm::new(store, "adapter.ln_attn", d);
        let ffn1 = Linear::new(store, "adapter.ffn.0", d, d * cfg.ffn_ratio, true, rng);
        let ffn2 = Linear::new(store, "adapter.ffn.1", d * cfg.ffn_ratio, d, true, rng);
        let ln_ffn = LayerNorm::new(store, "adapter.ln_ffn", d);
        Adapter {
            cfg: cfg.clone(),
            w_down,
            w_gnn,
            wq,
            wk,
            wv,
            wo,
            ln_attn,
            ffn1,
            ffn2,
            ln_ffn,
            w_up,
        }
    }

    /// `Q = H_esm·W_down`, `K = V = H_ctx·W_gnn`; multi-head cross-attention
    /// with scale `1/sqrt(d_a/H)`, residual and layer norm, FFN with residual
    /// and layer norm, then `·W_up`. Dropout applies to attention weights and
    /// the FFN hidden layer when `rng` is given.
    pub fn forward(
        &self,
        t: &mut Tape,
        h_esm: Var,
        h_ctx: Var,
        mut rng: Option<&mut RngStream>,
    ) -> Result<AdapterOutput> {
        let p = self.cfg.dropout;
        let w_down = t.param(self.w_down);
        let q = t.matmul(h_esm, w_down)?;
        let w_gnn = t.param(self.w_gnn);
        let kv = t.matmul(h_ctx, w_gnn)?;
        let (wq, wk, wv, wo) = (
            t.param(self.wq),
            t.param(self.wk),
            t.param(self.wv),
            t.param(self.wo),
        );
        let qp = t.matmul(q, wq)?;
        let kp = t.matmul(kv, wk)?;
        let vp = t.matmul(kv, wv)?;
        let dh = self.cfg.d_a / self.cfg.n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.cfg.n_heads);
        let mut attention = Vec::with_capacity(self.cfg.n_heads);
        for h in 0..self.cfg.n_heads {
            let (lo, hi) = (h * dh, (h + 1) * dh);
            let qh = t.slice_cols(qp, lo, hi)?;
            let kh = t.slice_cols(kp, lo, hi)?;
            let vh = t.slice_cols(vp, lo, hi)?;
            let s = t.matmul_t(qh, kh)?;
            let s = t.scale(s, scale);
            let a = t.softmax_rows(s);
            attention.push(a);
            let a = t.dropout(a, p, rng.as_deref_mut());
            heads.push(t.matmul(a, vh)?);
        }
        let cat = t.concat_cols(&heads)?;
        let attn = t.matmul(cat, wo)?;
        let z = t.add(q, attn)?;
        let z = self.ln_attn.forward(t, z)?;
        let f = self.ffn1.forward(t, z)?;
        let f = t.silu(f);
        let f = t.dropout(f, p, rng);
        let f = self.ffn2.forward(t, f)?;
        let z2 = t.add(z, f)?;
        let z2 = self.ln_ffn.forward(t, z2)?;
        let w_up = t.param(self.w_up);
        let refined = t.matmul(z2, w_up)?;
        Ok(AdapterOutput { refined, attention })
    }
}

/// `LN → Linear → SiLU → dropout → Linear`, producing 25 logits per position.
#[derive(Clone, Debug)]
pub struct SequenceHead {
    pub ln: LayerNorm,
    pub l1: Linear,
    pub l2: Linear,
    pub dropout: f64,
}

impl SequenceHead {
    pub fn new(
        store: &mut ParamStore,
        d_esm: usize,
        hidden: usize,
        dropout: f64,
        rng: &mut RngStream,
    ) -> Self {
        SequenceHead {
            ln: LayerNorm::new(store, "head.ln", d_esm),
            l1: Linear::new(store, "head.0", d_esm, hidden, true, rng),
            l2: Linear::new(store, "head.1", hidden, VOCAB_SIZE, true, rng),
            dropout,
        }
    }

    pub fn forward(&self, t: &mut Tape, x: Var, rng: Option<&mut RngStream>) -> Result<Var> {
        let x = self.ln.forward(t, x)?;
        let x = self.l1.forward(t, x)?;
        let x = t.silu(x);
        let x = t.dropout(x, self.dropout, rng);
        self.l2.forward(t, x)
    }
}

/// Per-position argmax over the 20 amino-acid columns; ties go to the lowest
/// index, and special-token columns never win.
pub fn greedy_decode(logits: &Mat) -> Vec<AminoAcid> {
    (0..logits.rows())
        .map(|r| {
            let row = &logits.row(r)[..NUM_AA];
            let mut best = 0;
            for (a, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = a;
                }
            }
            AminoAcid::from_index(best).expect("index below 20")
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradients, GradCheck};
    use alloc::vec;

    fn small() -> AdapterConfig {
        AdapterConfig {
            d_a: 8,
            n_heads: 2,
            ffn_ratio: 2,
            dropout: 0.2,
            head_hidden: 6,
        }
    }

    fn rand(rng: &mut RngStream, r: usize, c: usize) -> Mat {
        Mat::from_fn(r, c, |_, _| rng.normal())
    }

    #[test]
    fn single_context_row_gets_full_weight() {
        let mut store = ParamStore::new();
        let mut rng = RngStream::new(1);
        let ad = Adapter::new(&mut store, &small(), 6, 5, &mut rng);
        let mut t = Tape::new(&store);
        let q = t.constant(rand(&mut rng, 1, 6));
        let c = t.constant(rand(&mut rng, 1, 5));
        let out = ad.forward(&mut t, q, c, None).unwrap();
        for a in out.attention {
            assert_eq!(t.value(a), &Mat::scalar(1.0));
        }
    }

    #[test]
    fn attention_rows_sum_to_one_and_context_permutation_is_invisible() {
        let mut store = ParamStore::new();
        let mut rng = RngStream::new(2);
        let ad = Adapter::new(&mut store, &small(), 6, 5, &mut rng);
        let hq = rand(&mut rng, 3, 6);
        let hc = rand(&mut rng, 7, 5);
        let mut t = Tape::new(&store);
        let q = t.constant(hq.clone());
        let c = t.constant(hc.clone());
        let out = ad.forward(&mut t, q, c, None).unwrap();
        for &a in &out.attention {
            for r in 0..3 {
                assert!((t.value(a).row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
        let perm = [3, 0, 6, 1, 5, 2, 4];
        let q2 = t.constant(hq);
        let c2 = t.constant(hc.select_rows(&perm));
        let out2 = ad.forward(&mut t, q2, c2, None).unwrap();
        assert!(t.value(out.refined).max_abs_diff(t.value(out2.refined)) < 1e-12);
    }

    #[test]
    fn zero_head_gives_uniform_softmax() {
        let mut store = ParamStore::new();
        let mut rng = RngStream::new(3);
        let head = SequenceHead::new(&mut store, 6, 4, 0.0, &mut rng);
        for id in [head.l2.w, head.l2.b.unwrap()] {
            store.get_mut(id).value.scale_in_place(0.0);
        }
        let mut t = Tape::new(&store);
        let x = t.constant(rand(&mut rng, 2, 6));
        let logits = head.forward(&mut t, x, None).unwrap();
        assert_eq!(t.value(logits), &Mat::zeros(2, VOCAB_SIZE));
        let loss = t.cross_entropy(logits, &[0, 5], NUM_AA).unwrap();
        assert!((t.value(loss).item() - (20f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn eval_mode_is_deterministic_and_dropout_changes_training_output() {
        let mut store = ParamStore::new();
        let mut rng = RngStream::new(4);
        let head = SequenceHead::new(&mut store, 6, 16, 0.5, &mut rng);
        let x = rand(&mut rng, 3, 6);
        let eval = |r: Option<&mut RngStream>| {
            let mut t = Tape::new(&store);
            let xv = t.constant(x.clone());
            let l = head.forward(&mut t, xv, r).unwrap();
            t.value(l).clone()
        };
        assert_eq!(eval(None), eval(None));
        assert_ne!(eval(None), eval(Some(&mut RngStream::new(9))));
    }

    #[test]
    fn head_and_adapter_gradients() {
        let mut store = ParamStore::new();
        let mut rng = RngStream::new(5);
        let ad = Adapter::new(&mut store, &small(), 6, 5, &mut rng);
        let head = SequenceHead::new(&mut store, 6, 4, 0.3, &mut rng);
        let hq = rand(&mut rng, 3, 6);
        let hc = rand(&mut rng, 4, 5);
        let report = check_gradients(&mut store, &GradCheck::default(), |t| {
            let mut drop = RngStream::new(77);
            let q = t.constant(hq.clone());
            let c = t.constant(hc.clone());
            let out = ad.forward(t, q, c, Some(&mut drop))?;
            let logits = head.forward(t, out.refined, Some(&mut drop))?;
            t.cross_entropy(logits, &[1, 2, 19], NUM_AA)
        })
        .unwrap();
        assert!(report.passed(1e-4), "{:?}", report.worst());
    }

    #[test]
    fn greedy_decode_rules() {
        let mut one_hot = Mat::zeros(2, VOCAB_SIZE);
        one_hot[(0, 7)] = 5.0;
        one_hot[(1, 19)] = 5.0;
        one_hot[(1, 22)] = 50.0;
        let idx: Vec<usize> = greedy_decode(&one_hot).iter().map(|a| a.index()).collect();
        assert_eq!(idx, vec![7, 19]);
        let flat = Mat::filled(3, VOCAB_SIZE, 0.3);
        assert!(greedy_decode(&flat).iter().all(|a| a.index() == 0));
    }
}
