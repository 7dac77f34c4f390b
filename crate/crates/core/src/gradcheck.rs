//! Central-difference gradient checking.

use alloc::string::String;
use alloc::vec::Vec;

use crate::autograd::{Result, Tape, Var};
use crate::params::{ParamId, ParamStore};
use crate::rng::RngStream;

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub step: f64,
    /// Entries probed per parameter; `None` probes all of them.
    pub max_entries: Option<usize>,
    pub include_frozen: bool,
    pub seed: u64,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            step: 1e-5,
            max_entries: None,
            include_frozen: false,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Probe {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl Probe {
    pub fn abs_err(&self) -> f64 {
        (self.analytic - self.numeric).abs()
    }

    /// Error relative to the larger magnitude of the two estimates.
    pub fn rel_err(&self) -> f64 {
        let scale = self.analytic.abs().max(self.numeric.abs());
        if scale == 0.0 {
            0.0
        } else {
            self.abs_err() / scale
        }
    }

    /// `|a − n| ≤ tol · max(|a|, |n|) + 1e-8`.
    pub fn passes(&self, tol: f64) -> bool {
        self.abs_err() <= tol * self.analytic.abs().max(self.numeric.abs()) + 1e-8
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradReport {
    pub probes: Vec<Probe>,
}

impl GradReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.probes.iter().all(|p| p.passes(tol))
    }

    pub fn failures(&self, tol: f64) -> impl Iterator<Item = &Probe> {
        self.probes.iter().filter(move |p| !p.passes(tol))
    }

    pub fn worst(&self) -> Option<&Probe> {
        self.probes.iter().max_by(|a, b| {
            a.rel_err()
                .partial_cmp(&b.rel_err())
                .unwrap_or(core::cmp::Ordering::Equal)
        })
    }

    /// Parameters with at least one probed entry.
    pub fn params_checked(&self) -> usize {
        let mut names: Vec<&str> = self.probes.iter().map(|p| p.param.as_str()).collect();
        names.dedup();
        names.len()
    }
}

fn eval(store: &ParamStore, f: &impl Fn(&mut Tape) -> Result<Var>) -> Result<f64> {
    let mut t = Tape::new(store);
    let loss = f(&mut t)?;
    Ok(t.value(loss).item())
}

/// Compares tape gradients of the scalar built by `f` against central
/// differences. `f` must be deterministic: it is re-run for every probe.
pub fn check_gradients(
    store: &mut ParamStore,
    cfg: &GradCheck,
    f: impl Fn(&mut Tape) -> Result<Var>,
) -> Result<GradReport> {
    let grads = {
        let mut t = Tape::new(store);
        let loss = f(&mut t)?;
        t.backward(loss)?
    };
    let mut rng = RngStream::named(cfg.seed, "gradcheck");
    let ids: Vec<ParamId> = store.ids().collect();
    let mut report = GradReport::default();
    for id in ids {
        if store.get(id).frozen && !cfg.include_frozen {
            continue;
        }
        let n = store.value(id).len();
        let entries: Vec<usize> = match cfg.max_entries {
            Some(k) if k < n => (0..k).map(|_| rng.below(n)).collect(),
            _ => (0..n).collect(),
        };
        for idx in entries {
            let analytic = grads.get(id).map_or(0.0, |g| g.data()[idx]);
            let orig = store.value(id).data()[idx];
            store.get_mut(id).value.data_mut()[idx] = orig + cfg.step;
            let plus = eval(store, &f)?;
            store.get_mut(id).value.data_mut()[idx] = orig - cfg.step;
            let minus = eval(store, &f)?;
            store.get_mut(id).value.data_mut()[idx] = orig;
            report.probes.push(Probe {
                param: store.get(id).name.clone(),
                index: idx,
                analytic,
                numeric: (plus - minus) / (2.0 * cfg.step),
            });
        }
    }
    Ok(report)
}
