//! Training objective terms, built on the tape.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use alloc::vec::Vec;

use crate::aa::NUM_AA;
use crate::autograd::{Tape, TensorError, Var};
use crate::tensor::Mat;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_coord: f64,
    pub lambda_pair: f64,
    pub lambda_dock: f64,
    pub lambda_shadow: f64,
    pub alpha_rd: f64,
    /// Temperature of the CDR-antigen pairing loss.
    pub tau_pair: f64,
    /// Docking distance threshold, Å.
    pub d_dock: f64,
    /// Huber transition for the coordinate loss, Å.
    pub huber_beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_coord: 1.376,
            lambda_pair: 0.525,
            lambda_dock: 0.5,
            lambda_shadow: 0.3,
            alpha_rd: 1.0,
            tau_pair: 0.1,
            d_dock: 6.6,
            huber_beta: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LossError {
    #[error("label {0} is not an amino acid")]
    LabelOutOfRange(usize),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Mean cross-entropy over positions, normalised over the 20 amino-acid columns.
pub fn loss_seq(t: &mut Tape, logits: Var, targets: &[usize]) -> Result<Var, LossError> {
    if let Some(&bad) = targets.iter().find(|&&y| y >= NUM_AA) {
        return Err(LossError::LabelOutOfRange(bad));
    }
    Ok(t.cross_entropy(logits, targets, NUM_AA)?)
}

/// `(1/L) Σ_k Σ_xyz huber_β(x̂ − x)`.
pub fn loss_coord(t: &mut Tape, pred: Var, truth: &Mat, beta: f64) -> Result<Var, LossError> {
    let target = t.constant(truth.clone());
    let diff = t.sub(pred, target)?;
    let h = t.smooth_l1(diff, beta);
    let s = t.sum_all(h);
    Ok(t.scale(s, 1.0 / truth.rows().max(1) as f64))
}

/// InfoNCE over a batch: row `i` of `cdr` should match row `i` of `antigen`.
/// Both are `B x d` stacks of pooled embeddings.
pub fn loss_pair(t: &mut Tape, cdr: Var, antigen: Var, tau: f64) -> Result<Var, LossError> {
    let b = t.shape(cdr).0;
    let s = t.matmul_t(cdr, antigen)?;
    let s = t.scale(s, 1.0 / tau);
    let targets: Vec<usize> = (0..b).collect();
    Ok(t.cross_entropy(s, &targets, b)?)
}

/// `(1/L) Σ_k max(0, min_j ‖x̂_k − x_j‖ − d_dock)`; `None` for an empty epitope.
pub fn loss_dock(
    t: &mut Tape,
    pred: Var,
    epitope: &Mat,
    d_dock: f64,
) -> Result<Option<Var>, LossError> {
    if epitope.rows() == 0 {
        return Ok(None);
    }
    let l = t.shape(pred).0;
    let d = t.pair_dist(pred, epitope)?;
    let nearest = t.min_cols(d)?;
    let excess = t.add_const(nearest, -d_dock);
    let hinge = t.relu(excess);
    let s = t.sum_all(hinge);
    Ok(Some(t.scale(s, 1.0 / l as f64)))
}

/// `(1/(L·|E|)) Σ_k Σ_j | ‖x̂_k − x_j‖ − ‖x_k − x_j‖ |`; `None` for an empty epitope.
pub fn loss_shadow(
    t: &mut Tape,
    pred: Var,
    truth: &Mat,
    epitope: &Mat,
) -> Result<Option<Var>, LossError> {
    if epitope.rows() == 0 {
        return Ok(None);
    }
    let d_pred = t.pair_dist(pred, epitope)?;
    let true_d = Mat::from_fn(truth.rows(), epitope.rows(), |k, j| {
        let (a, b) = (truth.row(k), epitope.row(j));
        ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
    });
    let true_d = t.constant(true_d);
    let diff = t.sub(d_pred, true_d)?;
    let a = t.abs(diff);
    let s = t.sum_all(a);
    Ok(Some(
        t.scale(s, 1.0 / (truth.rows() * epitope.rows()) as f64),
    ))
}

/// `½(base₁ + base₂) + α (seq₁ − seq₂)²`. Returns the total and the penalty.
pub fn rdrop_total(
    t: &mut Tape,
    base1: Var,
    base2: Var,
    seq1: Var,
    seq2: Var,
    alpha: f64,
) -> Result<(Var, Var), LossError> {
    let sum = t.add(base1, base2)?;
    let mean = t.scale(sum, 0.5);
    let d = t.sub(seq1, seq2)?;
    let sq = t.mul(d, d)?;
    let penalty = t.scale(sq, alpha);
    Ok((t.add(mean, penalty)?, penalty))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aa::VOCAB_SIZE;
    use crate::gradcheck::{check_gradients, GradCheck};
    use crate::params::ParamStore;
    use crate::rng::RngStream;

    fn scalar(f: impl FnOnce(&mut Tape) -> Var) -> f64 {
        let store = ParamStore::new();
        let mut t = Tape::new(&store);
        let v = f(&mut t);
        t.value(v).item()
    }

    #[test]
    fn seq_loss_values() {
        let uniform = scalar(|t| {
            let l = t.constant(Mat::zeros(4, VOCAB_SIZE));
            loss_seq(t, l, &[0, 3, 9, 19]).unwrap()
        });
        assert!((uniform - 20f64.ln()).abs() < 1e-12);
        let confident = scalar(|t| {
            let mut m = Mat::zeros(2, VOCAB_SIZE);
            m[(0, 4)] = 20.0;
            m[(1, 11)] = 20.0;
            let l = t.constant(m);
            loss_seq(t, l, &[4, 11]).unwrap()
        });
        assert!(confident < 1e-4);
        let store = ParamStore::new();
        let mut t = Tape::new(&store);
        let l = t.constant(Mat::zeros(1, VOCAB_SIZE));
        assert_eq!(
            loss_seq(&mut t, l, &[20]).unwrap_err(),
            LossError::LabelOutOfRange(20)
        );
    }

    #[test]
    fn special_token_columns_do_not_enter_the_normalizer() {
        let v = scalar(|t| {
            let mut m = Mat::zeros(1, VOCAB_SIZE);
            m[(0, 22)] = 100.0;
            let l = t.constant(m);
            loss_seq(t, l, &[0]).unwrap()
        });
        assert!((v - 20f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn coord_loss_huber_regions() {
        let truth = Mat::zeros(1, 3);
        let v = |r: f64| {
            scalar(|t| {
                let p = t.constant(Mat::from_rows(&[[r, 0.0, 0.0]]));
                loss_coord(t, p, &truth, 1.0).unwrap()
            })
        };
        assert_eq!(v(0.0), 0.0);
        assert_eq!(v(0.5), 0.125);
        assert_eq!(v(2.0), 1.5);
    }

    #[test]
    fn pair_loss_cases() {
        let one = scalar(|t| {
            let c = t.constant(Mat::from_rows(&[[1.0, 2.0]]));
            let a = t.constant(Mat::from_rows(&[[-3.0, 0.5]]));
            loss_pair(t, c, a, 0.1).unwrap()
        });
        assert_eq!(one, 0.0);
        let separated = scalar(|t| {
            let c = t.constant(Mat::from_rows(&[[1.0, 0.0], [0.0, 1.0]]));
            let a = t.constant(Mat::from_rows(&[[20.0, 0.0], [0.0, 20.0]]));
            loss_pair(t, c, a, 0.1).unwrap()
        });
        assert!(separated < 1e-3);

        let mut rng = RngStream::new(3);
        let c = Mat::from_fn(4, 5, |_, _| rng.normal());
        let a = Mat::from_fn(4, 5, |_, _| rng.normal());
        let got = scalar(|t| {
            let cv = t.constant(c.clone());
            let av = t.constant(a.clone());
            loss_pair(t, cv, av, 0.1).unwrap()
        });
        let dot = |i: usize, k: usize| (0..5).map(|d| c[(i, d)] * a[(k, d)]).sum::<f64>() / 0.1;
        let oracle = -(0..4)
            .map(|i| (dot(i, i).exp() / (0..4).map(|k| dot(i, k).exp()).sum::<f64>()).ln())
            .sum::<f64>()
            / 4.0;
        assert!((got - oracle).abs() < 1e-10);
    }

    #[test]
    fn dock_loss_cases() {
        let ep = Mat::from_rows(&[[0.0, 0.0, 0.0], [30.0, 0.0, 0.0]]);
        let inside = scalar(|t| {
            let p = t.constant(Mat::from_rows(&[[3.0, 0.0, 0.0], [29.0, 1.0, 0.0]]));
            loss_dock(t, p, &ep, 6.6).unwrap().unwrap()
        });
        assert_eq!(inside, 0.0);
        let far = scalar(|t| {
            let p = t.constant(Mat::from_rows(&[[0.0, 8.6, 0.0]]));
            loss_dock(t, p, &ep, 6.6).unwrap().unwrap()
        });
        assert!((far - 2.0).abs() < 1e-12);
        let store = ParamStore::new();
        let mut t = Tape::new(&store);
        let p = t.constant(Mat::zeros(1, 3));
        assert!(loss_dock(&mut t, p, &Mat::zeros(0, 3), 6.6)
            .unwrap()
            .is_none());
        assert!(loss_shadow(&mut t, p, &Mat::zeros(1, 3), &Mat::zeros(0, 3))
            .unwrap()
            .is_none());
    }

    #[test]
    fn shadow_loss_cases() {
        let truth = Mat::from_rows(&[[0.0, 0.0, 0.0], [3.0, 0.0, 0.0]]);
        let ep = Mat::from_rows(&[[0.0, 4.0, 0.0], [3.0, 4.0, 0.0]]);
        let same = scalar(|t| {
            let p = t.constant(truth.clone());
            loss_shadow(t, p, &truth, &ep).unwrap().unwrap()
        });
        assert_eq!(same, 0.0);
        // A shared translation of every point leaves the loss at zero.
        let shift = |m: &Mat| Mat::from_fn(m.rows(), 3, |r, c| m[(r, c)] + [5.0, -2.0, 7.0][c]);
        let moved = scalar(|t| {
            let p = t.constant(shift(&truth));
            loss_shadow(t, p, &shift(&truth), &shift(&ep))
                .unwrap()
                .unwrap()
        });
        assert!(moved.abs() < 1e-12);
        // Hand computation: true distances [[4,5],[5,4]]; pred CDR 1 moved to
        // (3,1,0) gives [[4,5],[√18,3]]: |√18−5| + 1 over 4 entries.
        let hand = scalar(|t| {
            let p = t.constant(Mat::from_rows(&[[0.0, 0.0, 0.0], [3.0, 1.0, 0.0]]));
            loss_shadow(t, p, &truth, &ep).unwrap().unwrap()
        });
        assert!((hand - ((5.0 - 18f64.sqrt()) + 1.0) / 4.0).abs() < 1e-12);
    }

    #[test]
    fn rdrop_arithmetic() {
        let v = scalar(|t| {
            let [b1, b2, s1, s2] = [2.0, 2.2, 1.0, 1.5].map(|x| t.constant(Mat::scalar(x)));
            rdrop_total(t, b1, b2, s1, s2, 1.0).unwrap().0
        });
        assert!((v - 2.35).abs() < 1e-12);
        let same = scalar(|t| {
            let b = t.constant(Mat::scalar(3.0));
            let s = t.constant(Mat::scalar(1.0));
            rdrop_total(t, b, b, s, s, 1.0).unwrap().1
        });
        assert_eq!(same, 0.0);
    }

    #[test]
    fn loss_gradients() {
        let mut store = ParamStore::new();
        let mut rng = RngStream::new(12);
        let pred = store.add("pred", Mat::from_fn(3, 3, |_, _| rng.normal() * 4.0));
        let logits = store.add("logits", Mat::from_fn(3, VOCAB_SIZE, |_, _| rng.normal()));
        let emb = store.add("emb", Mat::from_fn(3, 4, |_, _| rng.normal() * 0.3));
        let truth = Mat::from_fn(3, 3, |_, _| rng.normal() * 4.0);
        let ep = Mat::from_fn(4, 3, |_, _| rng.normal() * 6.0);
        let report = check_gradients(&mut store, &GradCheck::default(), |t| {
            let (p, l, e) = (t.param(pred), t.param(logits), t.param(emb));
            let terms = [
                loss_seq(t, l, &[1, 0, 7]).unwrap(),
                loss_coord(t, p, &truth, 1.0).unwrap(),
                loss_dock(t, p, &ep, 2.0).unwrap().unwrap(),
                loss_shadow(t, p, &truth, &ep).unwrap().unwrap(),
                {
                    let rev = t.gather_rows(e, &[2, 0, 1])?;
                    loss_pair(t, e, rev, 0.5).unwrap()
                },
            ];
            let mut total = terms[0];
            for &x in &terms[1..] {
                total = t.add(total, x)?;
            }
            Ok(total)
        })
        .unwrap();
        assert!(report.passed(1e-4), "{:?}", report.worst());
    }
}
