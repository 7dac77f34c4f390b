//! The single run configuration document.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::losses::LossWeights;
use crate::metrics::DiagnosticsConfig;
use crate::model::ModelConfig;
use crate::optim::AdamConfig;
use crate::plm::ToyPlmConfig;
use crate::rng::RngStream;
use crate::training::PhaseSchedule;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    #[default]
    Toy,
    Cache,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub backend: BackendKind,
    /// Used by the toy backend; `d_esm` also fixes the width expected from the cache.
    pub plm: ToyPlmConfig,
    pub losses: LossWeights,
    pub schedule: PhaseSchedule,
    pub optimizer: AdamConfig,
    pub precision: Precision,
    /// Share of the dataset held out for early stopping.
    pub val_fraction: f64,
    pub diagnostics: DiagnosticsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            model: ModelConfig::default(),
            backend: BackendKind::Toy,
            plm: ToyPlmConfig::default(),
            losses: LossWeights::default(),
            schedule: PhaseSchedule::default(),
            optimizer: AdamConfig::default(),
            precision: Precision::F64,
            val_fraction: 0.1,
            diagnostics: DiagnosticsConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("config field `{field}`: {message}")]
pub struct ConfigError {
    pub field: String,
    pub message: String,
}

fn err(field: &str, message: impl Into<String>) -> Result<(), ConfigError> {
    Err(ConfigError {
        field: field.into(),
        message: message.into(),
    })
}

fn positive(field: &str, v: f64) -> Result<(), ConfigError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        err(field, format!("must be positive, got {v}"))
    }
}

fn non_negative(field: &str, v: f64) -> Result<(), ConfigError> {
    if v >= 0.0 && v.is_finite() {
        Ok(())
    } else {
        err(field, format!("must be non-negative, got {v}"))
    }
}

fn nonzero(field: &str, v: usize) -> Result<(), ConfigError> {
    if v > 0 {
        Ok(())
    } else {
        err(field, "must be positive")
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let m = &self.model;
        positive("model.contact_cutoff", m.contact_cutoff)?;
        positive("model.graph.radial_cutoff", m.graph.radial_cutoff)?;
        if m.graph.rbf_max.partial_cmp(&m.graph.rbf_min) != Some(core::cmp::Ordering::Greater) {
            return err("model.graph.rbf_max", "must exceed rbf_min");
        }
        nonzero("model.encoder.d_gnn", m.encoder.d_gnn)?;
        nonzero("model.encoder.aa_embed_dim", m.encoder.aa_embed_dim)?;
        if m.encoder.n_edge_types != crate::graph::NUM_EDGE_TYPES {
            return err(
                "model.encoder.n_edge_types",
                format!("the graph has {} edge types", crate::graph::NUM_EDGE_TYPES),
            );
        }
        positive("model.encoder.length_scale", m.encoder.length_scale)?;
        nonzero("model.adapter.d_a", m.adapter.d_a)?;
        nonzero("model.adapter.n_heads", m.adapter.n_heads)?;
        if !m.adapter.d_a.is_multiple_of(m.adapter.n_heads) {
            return err("model.adapter.d_a", "must be divisible by n_heads");
        }
        nonzero("model.adapter.ffn_ratio", m.adapter.ffn_ratio)?;
        nonzero("model.adapter.head_hidden", m.adapter.head_hidden)?;
        if !(0.0..1.0).contains(&m.adapter.dropout) {
            return err("model.adapter.dropout", "must lie in [0, 1)");
        }
        nonzero("plm.d_esm", self.plm.d_esm)?;
        let w = &self.losses;
        for (f, v) in [
            ("losses.lambda_coord", w.lambda_coord),
            ("losses.lambda_pair", w.lambda_pair),
            ("losses.lambda_dock", w.lambda_dock),
            ("losses.lambda_shadow", w.lambda_shadow),
            ("losses.alpha_rd", w.alpha_rd),
            ("losses.d_dock", w.d_dock),
        ] {
            non_negative(f, v)?;
        }
        positive("losses.tau_pair", w.tau_pair)?;
        positive("losses.huber_beta", w.huber_beta)?;
        self.schedule.validate().map_err(|e| ConfigError {
            field: "schedule".into(),
            message: format!("{e}"),
        })?;
        let o = &self.optimizer;
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) {
            return err("optimizer", "betas must lie in [0, 1)");
        }
        positive("optimizer.eps", o.eps)?;
        positive("optimizer.clip", o.clip)?;
        if !(0.0..1.0).contains(&self.val_fraction) {
            return err("val_fraction", "must lie in [0, 1)");
        }
        nonzero("diagnostics.position_bins", self.diagnostics.position_bins)?;
        Ok(())
    }
}

/// Deterministic train/validation split of `n` items. When the fraction
/// rounds to no held-out items (or to all of them), the training set doubles
/// as the validation set.
pub fn split_indices(n: usize, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = RngStream::named(seed, "split");
    for i in (1..n).rev() {
        idx.swap(i, rng.below(i + 1));
    }
    let n_val = (n as f64 * val_fraction).floor() as usize;
    if n_val == 0 || n_val >= n {
        let mut all = idx;
        all.sort_unstable();
        return (all.clone(), all);
    }
    let mut val = idx[..n_val].to_vec();
    let mut train = idx[n_val..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    (train, val)
}
