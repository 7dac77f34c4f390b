//! Tape-based reverse-mode differentiation over dense matrices.
//!
//! A [`Tape`] borrows the [`ParamStore`] for the duration of one forward pass.
//! Every operation appends a node holding its value; [`Tape::backward`] walks
//! the nodes in reverse and returns the gradient of a scalar node with respect
//! to every parameter that was read.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use thiserror::Error;

use crate::params::{Gradients, ParamId, ParamStore};
use crate::rng::RngStream;
use crate::tensor::{dot, Mat};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },
    #[error("index {index} out of range {len} in {op}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        len: usize,
    },
    #[error("backward requires a 1x1 output, got {0:?}")]
    NonScalarLoss((usize, usize)),
}

pub type Result<T> = core::result::Result<T, TensorError>;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    ScatterAddRows(Var, Vec<usize>),
    Silu(Var),
    Relu(Var),
    Abs(Var),
    Sqrt(Var),
    SmoothL1(Var, f64),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Mat,
        inv_std: Vec<f64>,
    },
    Softmax(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Mat,
    },
    Gram4(Var),
    Outer3(Var),
    SumAll(Var),
    MeanRows(Var),
    SumCols(Var),
    MinCols(Var, Vec<usize>),
    PairDist(Var, Mat),
}

struct Node {
    value: Mat,
    op: Op,
    needs_grad: bool,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

pub struct Tape<'s> {
    store: &'s ParamStore,
    nodes: Vec<Node>,
    params: BTreeMap<ParamId, Var>,
    frozen_as_constants: bool,
}

fn check(op: &'static str, ok: bool, lhs: (usize, usize), rhs: (usize, usize)) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(TensorError::ShapeMismatch { op, lhs, rhs })
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl<'s> Tape<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Tape {
            store,
            nodes: Vec::new(),
            params: BTreeMap::new(),
            frozen_as_constants: false,
        }
    }

    /// A tape that reads frozen parameters as constants, so no gradient is
    /// computed for them. Values are identical to [`Tape::new`].
    pub fn skipping_frozen(store: &'s ParamStore) -> Self {
        Tape {
            frozen_as_constants: true,
            ..Tape::new(store)
        }
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Mat, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = match op {
            Op::Param(_) => true,
            Op::Leaf => false,
            _ => inputs.iter().any(|v| self.nodes[v.0].needs_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, &[])
    }

    /// The parameter as a tape node; repeated reads share one node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let value = self.store.value(id).clone();
        let op = if self.frozen_as_constants && self.store.get(id).frozen {
            Op::Leaf
        } else {
            Op::Param(id)
        };
        let v = self.push(value, op, &[]);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        check("matmul", sa.1 == sb.0, sa, sb)?;
        let v = self.value(a).matmul(self.value(b));
        Ok(self.push(v, Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        check("matmul_t", sa.1 == sb.1, sa, sb)?;
        let v = self.value(a).matmul_t(self.value(b));
        Ok(self.push(v, Op::MatMulT(a, b), &[a, b]))
    }

    fn zip_with(
        &self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Mat> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        check(op, sa == sb, sa, sb)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok(Mat::from_vec(sa.0, sa.1, data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_with("add", a, b, |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_with("sub", a, b, |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_with("mul", a, b, |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    /// Adds the `1 x c` row `b` to every row of `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(b));
        check("add_row", sb.0 == 1 && sb.1 == sx.1, sx, sb)?;
        let mut v = self.value(x).clone();
        let bias = self.value(b).data().to_vec();
        for r in 0..sx.0 {
            for (o, bb) in v.row_mut(r).iter_mut().zip(&bias) {
                *o += bb;
            }
        }
        Ok(self.push(v, Op::AddRow(x, b), &[x, b]))
    }

    /// Scales row `r` of `x` by `s[r]`, where `s` is `r x 1`.
    pub fn mul_col(&mut self, x: Var, s: Var) -> Result<Var> {
        let (sx, ss) = (self.shape(x), self.shape(s));
        check("mul_col", ss.1 == 1 && ss.0 == sx.0, sx, ss)?;
        let mut v = self.value(x).clone();
        let sv = self.value(s).data().to_vec();
        for (r, &k) in sv.iter().enumerate() {
            v.row_mut(r).iter_mut().for_each(|o| *o *= k);
        }
        Ok(self.push(v, Op::MulCol(x, s), &[x, s]))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let v = self.value(x).map(|a| a * s);
        self.push(v, Op::Scale(x, s), &[x])
    }

    pub fn add_const(&mut self, x: Var, c: f64) -> Var {
        let v = self.value(x).map(|a| a + c);
        self.push(v, Op::AddConst(x), &[x])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.shape(parts[0]).0;
        let mut cols = 0;
        for &p in parts {
            let sp = self.shape(p);
            check("concat_cols", sp.0 == rows, (rows, cols), sp)?;
            cols += sp.1;
        }
        let mut v = Mat::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for &p in parts {
                let src = self.nodes[p.0].value.row(r);
                v.row_mut(r)[off..off + src.len()].copy_from_slice(src);
                off += src.len();
            }
        }
        Ok(self.push(v, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.shape(parts[0]).1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let sp = self.shape(p);
            check("concat_rows", sp.1 == cols, (rows, cols), sp)?;
            data.extend_from_slice(self.value(p).data());
            rows += sp.0;
        }
        Ok(self.push(
            Mat::from_vec(rows, cols, data),
            Op::ConcatRows(parts.to_vec()),
            parts,
        ))
    }

    /// Columns `start..end` of `x`.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let sx = self.shape(x);
        check("slice_cols", start <= end && end <= sx.1, sx, (start, end))?;
        let v = Mat::from_fn(sx.0, end - start, |r, c| self.value(x)[(r, start + c)]);
        Ok(self.push(v, Op::SliceCols(x, start), &[x]))
    }

    /// Output row `k` is input row `idx[k]`.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let rows = self.shape(x).0;
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(TensorError::IndexOutOfRange {
                op: "gather_rows",
                index: bad,
                len: rows,
            });
        }
        let v = self.value(x).select_rows(idx);
        Ok(self.push(v, Op::GatherRows(x, idx.to_vec()), &[x]))
    }

    /// `out[idx[k]] += x[k]` into an `out_rows`-row zero matrix. Rows are added
    /// in input order, so sums are deterministic.
    pub fn scatter_add_rows(&mut self, x: Var, idx: &[usize], out_rows: usize) -> Result<Var> {
        let sx = self.shape(x);
        check(
            "scatter_add_rows",
            idx.len() == sx.0,
            sx,
            (idx.len(), out_rows),
        )?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= out_rows) {
            return Err(TensorError::IndexOutOfRange {
                op: "scatter_add_rows",
                index: bad,
                len: out_rows,
            });
        }
        let mut v = Mat::zeros(out_rows, sx.1);
        for (k, &i) in idx.iter().enumerate() {
            let src = self.nodes[x.0].value.row(k);
            for (o, s) in v.row_mut(i).iter_mut().zip(src) {
                *o += s;
            }
        }
        Ok(self.push(v, Op::ScatterAddRows(x, idx.to_vec()), &[x]))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| a * sigmoid(a));
        self.push(v, Op::Silu(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| a.max(0.0));
        self.push(v, Op::Relu(x), &[x])
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| a.abs());
        self.push(v, Op::Abs(x), &[x])
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| a.sqrt());
        self.push(v, Op::Sqrt(x), &[x])
    }

    /// Elementwise Huber: `0.5 x²/β` for `|x| < β`, else `|x| − β/2`.
    pub fn smooth_l1(&mut self, x: Var, beta: f64) -> Var {
        let v = self.value(x).map(|a| {
            if a.abs() < beta {
                0.5 * a * a / beta
            } else {
                a.abs() - 0.5 * beta
            }
        });
        self.push(v, Op::SmoothL1(x, beta), &[x])
    }

    /// Row-wise `(x − mean)/sqrt(var + 1e-5) ⊙ gain + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (sx, sg, sb) = (self.shape(x), self.shape(gain), self.shape(bias));
        check("layer_norm", sg == (1, sx.1) && sb == (1, sx.1), sx, sg)?;
        let n = sx.1 as f64;
        let xv = self.value(x);
        let mut xhat = Mat::zeros(sx.0, sx.1);
        let mut inv_std = Vec::with_capacity(sx.0);
        for r in 0..sx.0 {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(inv);
            for (o, a) in xhat.row_mut(r).iter_mut().zip(row) {
                *o = (a - mean) * inv;
            }
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let mut y = xhat.clone();
        for r in 0..sx.0 {
            for (c, o) in y.row_mut(r).iter_mut().enumerate() {
                *o = *o * g[c] + b[c];
            }
        }
        Ok(self.push(
            y,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[x, gain, bias],
        ))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let mut v = self.value(x).clone();
        for r in 0..v.rows() {
            softmax_in_place(v.row_mut(r));
        }
        self.push(v, Op::Softmax(x), &[x])
    }

    /// Mean over rows of `−log softmax(x_r[..n_classes])[targets[r]]`. Columns
    /// at or beyond `n_classes` take no part in the normalizer.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        n_classes: usize,
    ) -> Result<Var> {
        let s = self.shape(logits);
        check(
            "cross_entropy",
            s.0 == targets.len() && n_classes <= s.1 && s.0 > 0,
            s,
            (targets.len(), n_classes),
        )?;
        if let Some(&bad) = targets.iter().find(|&&t| t >= n_classes) {
            return Err(TensorError::IndexOutOfRange {
                op: "cross_entropy",
                index: bad,
                len: n_classes,
            });
        }
        let lv = self.value(logits);
        let mut probs = Mat::zeros(s.0, n_classes);
        let mut total = 0.0;
        for r in 0..s.0 {
            let row = &lv.row(r)[..n_classes];
            let lse = log_sum_exp(row);
            total += lse - row[targets[r]];
            for (p, &z) in probs.row_mut(r).iter_mut().zip(row) {
                *p = (z - lse).exp();
            }
        }
        let v = Mat::scalar(total / s.0 as f64);
        Ok(self.push(
            v,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Per row, the 4x4 Gram matrix of the four 3-vectors stored in the row's
    /// 12 columns, flattened row-major to 16 columns.
    pub fn gram4(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        check("gram4", s.1 == 12, s, (s.0, 12))?;
        let xv = self.value(x);
        let mut v = Mat::zeros(s.0, 16);
        for r in 0..s.0 {
            let d = xv.row(r);
            let out = v.row_mut(r);
            for a in 0..4 {
                for b in 0..4 {
                    out[a * 4 + b] = dot(&d[a * 3..a * 3 + 3], &d[b * 3..b * 3 + 3]);
                }
            }
        }
        Ok(self.push(v, Op::Gram4(x), &[x]))
    }

    /// Per row, the 3x3 outer product of the Cα displacement (columns 3..6),
    /// flattened to 9 columns.
    pub fn outer3(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        check("outer3", s.1 == 12, s, (s.0, 12))?;
        let xv = self.value(x);
        let mut v = Mat::zeros(s.0, 9);
        for r in 0..s.0 {
            let d = &xv.row(r)[3..6];
            let out = v.row_mut(r);
            for p in 0..3 {
                for q in 0..3 {
                    out[p * 3 + q] = d[p] * d[q];
                }
            }
        }
        Ok(self.push(v, Op::Outer3(x), &[x]))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let v = Mat::scalar(self.value(x).sum());
        self.push(v, Op::SumAll(x), &[x])
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1) as f64;
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n)
    }

    /// Column means as a `1 x c` row.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (r, c) = xv.shape();
        let mut v = Mat::zeros(1, c);
        for i in 0..r {
            for (o, a) in v.row_mut(0).iter_mut().zip(xv.row(i)) {
                *o += a;
            }
        }
        v.scale_in_place(1.0 / r.max(1) as f64);
        self.push(v, Op::MeanRows(x), &[x])
    }

    /// Row sums as an `r x 1` column.
    pub fn sum_cols(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let v = Mat::from_fn(xv.rows(), 1, |r, _| xv.row(r).iter().sum());
        self.push(v, Op::SumCols(x), &[x])
    }

    /// Row minima as an `r x 1` column; ties resolve to the lowest column.
    pub fn min_cols(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        check("min_cols", s.1 > 0, s, (s.0, 1))?;
        let xv = self.value(x);
        let mut arg = Vec::with_capacity(s.0);
        let mut v = Mat::zeros(s.0, 1);
        for r in 0..s.0 {
            let row = xv.row(r);
            let mut best = 0;
            for c in 1..row.len() {
                if row[c] < row[best] {
                    best = c;
                }
            }
            arg.push(best);
            v[(r, 0)] = row[best];
        }
        Ok(self.push(v, Op::MinCols(x, arg), &[x]))
    }

    /// Euclidean distances between rows of `a` (`n x 3`) and the fixed points
    /// `b` (`m x 3`), as an `n x m` matrix.
    pub fn pair_dist(&mut self, a: Var, b: &Mat) -> Result<Var> {
        let sa = self.shape(a);
        check("pair_dist", sa.1 == 3 && b.cols() == 3, sa, b.shape())?;
        let av = self.value(a);
        let v = Mat::from_fn(sa.0, b.rows(), |i, j| {
            let (p, q) = (av.row(i), b.row(j));
            ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt()
        });
        Ok(self.push(v, Op::PairDist(a, b.clone()), &[a]))
    }

    /// Inverted dropout. Identity when `rate == 0` or `rng` is `None`.
    pub fn dropout(&mut self, x: Var, rate: f64, rng: Option<&mut RngStream>) -> Var {
        let rng = match rng {
            Some(r) if rate > 0.0 => r,
            _ => return x,
        };
        let (r, c) = self.shape(x);
        let keep = 1.0 / (1.0 - rate);
        let mask = Mat::from_fn(r, c, |_, _| if rng.bernoulli(rate) { 0.0 } else { keep });
        let m = self.constant(mask);
        self.mul(x, m).expect("dropout mask has the input's shape")
    }

    /// Gradients of the scalar `loss` with respect to every parameter read on
    /// this tape, including frozen ones.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let s = self.shape(loss);
        if s != (1, 1) {
            return Err(TensorError::NonScalarLoss(s));
        }
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Mat::scalar(1.0));
        let mut out = Gradients::default();

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let mut acc = |v: Var, gv: Mat| {
                if !self.nodes[v.0].needs_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(existing) => existing.add_assign(&gv),
                    slot => *slot = Some(gv),
                }
            };
            let val = |v: Var| &self.nodes[v.0].value;
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => out.entries.push((*id, g)),
                Op::MatMul(a, b) => {
                    acc(*a, g.matmul_t(val(*b)));
                    acc(*b, val(*a).t_matmul(&g));
                }
                Op::MatMulT(a, b) => {
                    acc(*a, g.matmul(val(*b)));
                    acc(*b, g.t_matmul(val(*a)));
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g);
                }
                Op::Sub(a, b) => {
                    acc(*b, g.map(|x| -x));
                    acc(*a, g);
                }
                Op::Mul(a, b) => {
                    let ga = hadamard(&g, val(*b));
                    let gb = hadamard(&g, val(*a));
                    acc(*a, ga);
                    acc(*b, gb);
                }
                Op::AddRow(x, b) => {
                    let mut gb = Mat::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (o, v) in gb.row_mut(0).iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    acc(*b, gb);
                    acc(*x, g);
                }
                Op::MulCol(x, s) => {
                    let (xv, sv) = (val(*x), val(*s));
                    let gs = Mat::from_fn(g.rows(), 1, |r, _| dot(g.row(r), xv.row(r)));
                    let mut gx = g;
                    for r in 0..gx.rows() {
                        let k = sv[(r, 0)];
                        gx.row_mut(r).iter_mut().for_each(|o| *o *= k);
                    }
                    acc(*s, gs);
                    acc(*x, gx);
                }
                Op::Scale(x, s) => acc(*x, g.map(|v| v * s)),
                Op::AddConst(x) => acc(*x, g),
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let w = val(p).cols();
                        acc(p, Mat::from_fn(g.rows(), w, |r, c| g[(r, off + c)]));
                        off += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let h = val(p).rows();
                        let c = g.cols();
                        acc(
                            p,
                            Mat::from_vec(h, c, g.data()[off * c..(off + h) * c].to_vec()),
                        );
                        off += h;
                    }
                }
                Op::SliceCols(x, start) => {
                    let (r, c) = val(*x).shape();
                    let mut gx = Mat::zeros(r, c);
                    for i in 0..r {
                        gx.row_mut(i)[*start..*start + g.cols()].copy_from_slice(g.row(i));
                    }
                    acc(*x, gx);
                }
                Op::GatherRows(x, idx) => {
                    let (r, c) = val(*x).shape();
                    let mut gx = Mat::zeros(r, c);
                    for (k, &i) in idx.iter().enumerate() {
                        for (o, v) in gx.row_mut(i).iter_mut().zip(g.row(k)) {
                            *o += v;
                        }
                    }
                    acc(*x, gx);
                }
                Op::ScatterAddRows(x, idx) => acc(*x, g.select_rows(idx)),
                Op::Silu(x) => {
                    let gx = zip_map(&g, val(*x), |gv, a| {
                        let s = sigmoid(a);
                        gv * s * (1.0 + a * (1.0 - s))
                    });
                    acc(*x, gx);
                }
                Op::Relu(x) => acc(
                    *x,
                    zip_map(&g, val(*x), |gv, a| if a > 0.0 { gv } else { 0.0 }),
                ),
                Op::Abs(x) => acc(*x, zip_map(&g, val(*x), |gv, a| gv * sign(a))),
                Op::Sqrt(x) => {
                    let gx = zip_map(
                        &g,
                        &node.value,
                        |gv, y| if y > 0.0 { gv / (2.0 * y) } else { 0.0 },
                    );
                    acc(*x, gx);
                }
                Op::SmoothL1(x, beta) => {
                    let gx = zip_map(&g, val(*x), |gv, a| {
                        if a.abs() < *beta {
                            gv * a / beta
                        } else {
                            gv * sign(a)
                        }
                    });
                    acc(*x, gx);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let gv = val(*gain).data();
                    let (r, c) = g.shape();
                    let n = c as f64;
                    let mut ggain = Mat::zeros(1, c);
                    let mut gbias = Mat::zeros(1, c);
                    let mut gx = Mat::zeros(r, c);
                    for i in 0..r {
                        let (gr, xr) = (g.row(i), xhat.row(i));
                        let mut sum_gh = 0.0;
                        let mut sum_ghx = 0.0;
                        for k in 0..c {
                            ggain[(0, k)] += gr[k] * xr[k];
                            gbias[(0, k)] += gr[k];
                            let gh = gr[k] * gv[k];
                            sum_gh += gh;
                            sum_ghx += gh * xr[k];
                        }
                        let inv = inv_std[i];
                        for k in 0..c {
                            let gh = gr[k] * gv[k];
                            gx[(i, k)] = inv / n * (n * gh - sum_gh - xr[k] * sum_ghx);
                        }
                    }
                    acc(*gain, ggain);
                    acc(*bias, gbias);
                    acc(*x, gx);
                }
                Op::Softmax(x) => {
                    let y = &node.value;
                    let mut gx = Mat::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let s = dot(g.row(r), y.row(r));
                        for (k, o) in gx.row_mut(r).iter_mut().enumerate() {
                            *o = y[(r, k)] * (g[(r, k)] - s);
                        }
                    }
                    acc(*x, gx);
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                } => {
                    let (r, c) = val(*logits).shape();
                    let scale = g.item() / r as f64;
                    let mut gx = Mat::zeros(r, c);
                    for i in 0..r {
                        for k in 0..probs.cols() {
                            let hot = if k == targets[i] { 1.0 } else { 0.0 };
                            gx[(i, k)] = scale * (probs[(i, k)] - hot);
                        }
                    }
                    acc(*logits, gx);
                }
                Op::Gram4(x) => {
                    let xv = val(*x);
                    let mut gx = Mat::zeros(xv.rows(), 12);
                    for r in 0..xv.rows() {
                        let d = xv.row(r);
                        let gr = g.row(r);
                        let out = gx.row_mut(r);
                        for a in 0..4 {
                            for b in 0..4 {
                                let w = gr[a * 4 + b] + gr[b * 4 + a];
                                for k in 0..3 {
                                    out[a * 3 + k] += w * d[b * 3 + k];
                                }
                            }
                        }
                    }
                    acc(*x, gx);
                }
                Op::Outer3(x) => {
                    let xv = val(*x);
                    let mut gx = Mat::zeros(xv.rows(), 12);
                    for r in 0..xv.rows() {
                        let d = &xv.row(r)[3..6];
                        let gr = g.row(r);
                        for p in 0..3 {
                            let mut s = 0.0;
                            for q in 0..3 {
                                s += (gr[p * 3 + q] + gr[q * 3 + p]) * d[q];
                            }
                            gx[(r, 3 + p)] = s;
                        }
                    }
                    acc(*x, gx);
                }
                Op::SumAll(x) => {
                    let (r, c) = val(*x).shape();
                    acc(*x, Mat::filled(r, c, g.item()));
                }
                Op::MeanRows(x) => {
                    let (r, c) = val(*x).shape();
                    let inv = 1.0 / r.max(1) as f64;
                    acc(*x, Mat::from_fn(r, c, |_, k| g[(0, k)] * inv));
                }
                Op::SumCols(x) => {
                    let (r, c) = val(*x).shape();
                    acc(*x, Mat::from_fn(r, c, |i, _| g[(i, 0)]));
                }
                Op::MinCols(x, arg) => {
                    let (r, c) = val(*x).shape();
                    let mut gx = Mat::zeros(r, c);
                    for (i, &k) in arg.iter().enumerate() {
                        gx[(i, k)] = g[(i, 0)];
                    }
                    acc(*x, gx);
                }
                Op::PairDist(a, b) => {
                    let av = val(*a);
                    let d = &node.value;
                    let mut ga = Mat::zeros(av.rows(), 3);
                    for i in 0..av.rows() {
                        for j in 0..b.rows() {
                            let dij = d[(i, j)];
                            if dij == 0.0 {
                                continue;
                            }
                            let w = g[(i, j)] / dij;
                            for k in 0..3 {
                                ga[(i, k)] += w * (av[(i, k)] - b[(j, k)]);
                            }
                        }
                    }
                    acc(*a, ga);
                }
            }
        }
        out.entries.sort_by_key(|(id, _)| *id);
        Ok(out)
    }
}

fn sign(a: f64) -> f64 {
    if a > 0.0 {
        1.0
    } else if a < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn hadamard(a: &Mat, b: &Mat) -> Mat {
    zip_map(a, b, |x, y| x * y)
}

fn zip_map(a: &Mat, b: &Mat, f: impl Fn(f64, f64) -> f64) -> Mat {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Mat::from_vec(a.rows(), a.cols(), data)
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + row.iter().map(|z| (z - m).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    row.iter_mut().for_each(|v| *v /= s);
}
