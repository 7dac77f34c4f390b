//! Parameterised layers built on the tape.

use alloc::format;

use crate::autograd::{Result, Tape, Var};
use crate::params::{ParamId, ParamStore};
use crate::rng::RngStream;
use crate::tensor::Mat;

/// Matrix with entries uniform on `±1/sqrt(fan_in)`.
pub fn uniform_init(rng: &mut RngStream, fan_in: usize, fan_out: usize) -> Mat {
    let a = 1.0 / (fan_in.max(1) as f64).sqrt();
    Mat::from_fn(fan_in, fan_out, |_, _| rng.uniform(-a, a))
}

/// `y = x·W + b`, with `W` stored `in x out`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        rng: &mut RngStream,
    ) -> Self {
        let w = store.add(&format!("{name}.w"), uniform_init(rng, fan_in, fan_out));
        let b = bias.then(|| {
            store.add(
                &format!("{name}.b"),
                uniform_init(rng, fan_in, fan_out).select_rows(&[0]),
            )
        });
        Linear { w, b }
    }

    /// All-zero weights and bias.
    pub fn zeros(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
    ) -> Self {
        let w = store.add(&format!("{name}.w"), Mat::zeros(fan_in, fan_out));
        let b = bias.then(|| store.add(&format!("{name}.b"), Mat::zeros(1, fan_out)));
        Linear { w, b }
    }

    pub fn forward(&self, t: &mut Tape, x: Var) -> Result<Var> {
        let w = t.param(self.w);
        let y = t.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = t.param(b);
                t.add_row(y, b)
            }
            None => Ok(y),
        }
    }

    pub fn fan_out(&self, store: &ParamStore) -> usize {
        store.value(self.w).cols()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        LayerNorm {
            gain: store.add(&format!("{name}.gain"), Mat::filled(1, dim, 1.0)),
            bias: store.add(&format!("{name}.bias"), Mat::zeros(1, dim)),
        }
    }

    pub fn forward(&self, t: &mut Tape, x: Var) -> Result<Var> {
        let g = t.param(self.gain);
        let b = t.param(self.bias);
        t.layer_norm(x, g, b)
    }
}

/// Two linear layers with SiLU after each: `silu(silu(x·W1 + b1)·W2 + b2)`.
#[derive(Clone, Copy, Debug)]
pub struct SiluMlp {
    pub l1: Linear,
    pub l2: Linear,
}

impl SiluMlp {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dims: (usize, usize, usize),
        rng: &mut RngStream,
    ) -> Self {
        SiluMlp {
            l1: Linear::new(store, &format!("{name}.0"), dims.0, dims.1, true, rng),
            l2: Linear::new(store, &format!("{name}.1"), dims.1, dims.2, true, rng),
        }
    }

    pub fn forward(&self, t: &mut Tape, x: Var) -> Result<Var> {
        let h = self.l1.forward(t, x)?;
        let h = t.silu(h);
        let h = self.l2.forward(t, h)?;
        Ok(t.silu(h))
    }
}
