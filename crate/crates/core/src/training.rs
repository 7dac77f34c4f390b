//! Batch objective with R-Drop and the phased unfreezing schedule.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::{Tape, TensorError, Var};
use crate::losses::{
    loss_coord, loss_dock, loss_pair, loss_seq, loss_shadow, rdrop_total, LossError, LossWeights,
};
use crate::model::{EvoStruct, ModelError, PreparedComplex};
use crate::optim::{Adam, AdamConfig, OptimError};
use crate::params::ParamStore;
use crate::plm::{PlmBackend, PlmError};
use crate::rng::RngStream;

/// What happens to the PLM backend at the start of a phase.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnfreezeAction {
    FreezeBackend,
    UnfreezeTop(usize),
    UnfreezeAll,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseSpec {
    pub max_epochs: usize,
    pub lr: f64,
    pub unfreeze: UnfreezeAction,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhaseSchedule {
    pub phases: Vec<PhaseSpec>,
    /// Per-epoch learning-rate decay within a phase.
    pub gamma: f64,
    pub patience: usize,
    pub batch_size: usize,
}

impl Default for PhaseSchedule {
    fn default() -> Self {
        PhaseSchedule {
            phases: Vec::from([
                PhaseSpec {
                    max_epochs: 50,
                    lr: 1e-4,
                    unfreeze: UnfreezeAction::FreezeBackend,
                },
                PhaseSpec {
                    max_epochs: 40,
                    lr: 5e-5,
                    unfreeze: UnfreezeAction::UnfreezeTop(4),
                },
                PhaseSpec {
                    max_epochs: 30,
                    lr: 1e-5,
                    unfreeze: UnfreezeAction::UnfreezeAll,
                },
            ]),
            gamma: 0.9,
            patience: 10,
            batch_size: 4,
        }
    }
}

impl PhaseSchedule {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::InvalidSchedule(m));
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad(format!("gamma {} outside (0, 1]", self.gamma));
        }
        for (i, p) in self.phases.iter().enumerate() {
            if !(p.lr > 0.0 && p.lr.is_finite()) {
                return bad(format!("phase {} lr {} is not positive", i + 1, p.lr));
            }
            if i > 0 && p.lr > self.phases[i - 1].lr {
                return bad(format!(
                    "phase {} lr {} exceeds the previous phase",
                    i + 1,
                    p.lr
                ));
            }
        }
        Ok(())
    }

    /// Learning rate at 0-based `epoch` of `phase`.
    pub fn lr(&self, phase: usize, epoch: usize) -> f64 {
        self.phases[phase].lr * self.gamma.powi(epoch as i32)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TrainError {
    #[error("training set is empty")]
    EmptyDataset,
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Plm(#[from] PlmError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Scalar loss components, averaged over whatever they were accumulated on.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub total: f64,
    pub seq: f64,
    pub coord: f64,
    pub pair: f64,
    pub dock: f64,
    pub shadow: f64,
    pub rdrop: f64,
}

impl LossTerms {
    fn add_scaled(&mut self, o: &LossTerms, s: f64) {
        self.total += o.total * s;
        self.seq += o.seq * s;
        self.coord += o.coord * s;
        self.pair += o.pair * s;
        self.dock += o.dock * s;
        self.shadow += o.shadow * s;
        self.rdrop += o.rdrop * s;
    }
}

/// Tape handles of one batch objective.
#[derive(Clone, Copy, Debug)]
pub struct BatchLoss {
    pub total: Var,
    pub penalty: Var,
    pub terms: LossTerms,
    /// Complexes whose dock and shadow terms were skipped for an empty epitope.
    pub skipped_epitope: usize,
}

struct PassTerms {
    base: Var,
    seq: Var,
}

/// Objective of one batch.
///
/// The structural pathway and the PLM embeddings are computed once and shared;
/// with `dropout = Some((r1, r2))` the adapter and head run twice with
/// independent masks and the R-Drop total is returned. With `None` a single
/// deterministic pass is used and the penalty is zero.
pub fn batch_loss(
    t: &mut Tape,
    model: &EvoStruct,
    backend: &dyn PlmBackend,
    batch: &[&PreparedComplex],
    w: &LossWeights,
    dropout: Option<(&mut RngStream, &mut RngStream)>,
) -> Result<BatchLoss, TrainError> {
    if batch.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    model.check_backend(backend)?;
    let inv_b = 1.0 / batch.len() as f64;
    let mut enc = Vec::with_capacity(batch.len());
    let mut esm = Vec::with_capacity(batch.len());
    for p in batch {
        enc.push(model.encode(t, p)?);
        esm.push(model.embed(t, backend, p)?);
    }

    let mean = |t: &mut Tape, xs: &[Var]| -> Result<Var, TrainError> {
        let mut acc = xs[0];
        for &x in &xs[1..] {
            acc = t.add(acc, x)?;
        }
        Ok(t.scale(acc, inv_b))
    };

    let mut coord = Vec::new();
    let mut dock = Vec::new();
    let mut shadow = Vec::new();
    let mut skipped = 0;
    for (p, e) in batch.iter().zip(&enc) {
        coord.push(loss_coord(t, e.cdr_ca, &p.true_cdr_ca, w.huber_beta)?);
        match (
            loss_dock(t, e.cdr_ca, &p.epitope_ca, w.d_dock)?,
            loss_shadow(t, e.cdr_ca, &p.true_cdr_ca, &p.epitope_ca)?,
        ) {
            (Some(d), Some(s)) => {
                dock.push(d);
                shadow.push(s);
            }
            _ => skipped += 1,
        }
    }
    let coord = mean(t, &coord)?;
    let zero = t.constant(crate::tensor::Mat::scalar(0.0));
    let dock = if dock.is_empty() {
        zero
    } else {
        mean(t, &dock)?
    };
    let shadow = if shadow.is_empty() {
        zero
    } else {
        mean(t, &shadow)?
    };
    let cdr_pool: Vec<Var> = enc.iter().map(|e| e.cdr_pool).collect();
    let ag_pool: Vec<Var> = enc.iter().map(|e| e.ag_pool).collect();
    let cdr_pool = t.concat_rows(&cdr_pool)?;
    let ag_pool = t.concat_rows(&ag_pool)?;
    let pair = loss_pair(t, cdr_pool, ag_pool, w.tau_pair)?;

    let mut geo = t.scale(coord, w.lambda_coord);
    for (v, lambda) in [
        (pair, w.lambda_pair),
        (dock, w.lambda_dock),
        (shadow, w.lambda_shadow),
    ] {
        let s = t.scale(v, lambda);
        geo = t.add(geo, s)?;
    }

    let pass = |t: &mut Tape, mut rng: Option<&mut RngStream>| -> Result<PassTerms, TrainError> {
        let mut seqs = Vec::with_capacity(batch.len());
        for ((p, e), &h) in batch.iter().zip(&enc).zip(&esm) {
            let d = model.decode(t, h, e.h_ctx, rng.as_deref_mut())?;
            seqs.push(loss_seq(t, d.logits, &p.targets)?);
        }
        let seq = mean(t, &seqs)?;
        Ok(PassTerms {
            base: t.add(seq, geo)?,
            seq,
        })
    };

    let (p1, p2) = match dropout {
        Some((r1, r2)) => {
            let p1 = pass(t, Some(r1))?;
            let p2 = pass(t, Some(r2))?;
            (p1, p2)
        }
        None => {
            let p = pass(t, None)?;
            let q = PassTerms {
                base: p.base,
                seq: p.seq,
            };
            (p, q)
        }
    };
    let (total, penalty) = rdrop_total(t, p1.base, p2.base, p1.seq, p2.seq, w.alpha_rd)?;
    let v = |t: &Tape, x: Var| t.value(x).item();
    let terms = LossTerms {
        total: v(t, total),
        seq: 0.5 * (v(t, p1.seq) + v(t, p2.seq)),
        coord: v(t, coord),
        pair: v(t, pair),
        dock: v(t, dock),
        shadow: v(t, shadow),
        rdrop: v(t, penalty),
    };
    Ok(BatchLoss {
        total,
        penalty,
        terms,
        skipped_epitope: skipped,
    })
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based phase number.
    pub phase: usize,
    /// 0-based epoch within the phase.
    pub epoch: usize,
    pub lr: f64,
    pub train: LossTerms,
    pub val_loss: f64,
    pub frozen_param_count: usize,
    pub steps: usize,
    /// Steps whose R-Drop penalty was nonzero.
    pub rdrop_nonzero_steps: usize,
    pub rdrop_max: f64,
    pub skipped_epitope: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EpochStats {
    pub train: LossTerms,
    pub steps: usize,
    pub rdrop_nonzero_steps: usize,
    pub rdrop_max: f64,
    pub skipped_epitope: usize,
}

/// Tracks the best validation loss and counts epochs without improvement.
#[derive(Clone, Debug)]
pub struct EarlyStopper {
    pub patience: usize,
    pub best: f64,
    pub bad_epochs: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        EarlyStopper {
            patience,
            best: f64::INFINITY,
            bad_epochs: 0,
        }
    }

    /// Records a validation loss; returns `true` when it is a new best.
    pub fn observe(&mut self, val: f64) -> bool {
        if val < self.best {
            self.best = val;
            self.bad_epochs = 0;
            true
        } else {
            self.bad_epochs += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.bad_epochs >= self.patience
    }
}

/// The parts of training that touch data, so the schedule can be driven by a
/// scripted runner in tests.
pub trait EpochRunner {
    fn begin_phase(
        &mut self,
        store: &mut ParamStore,
        phase: usize,
        action: UnfreezeAction,
    ) -> Result<(), TrainError>;
    fn train_epoch(
        &mut self,
        store: &mut ParamStore,
        opt: &mut Adam,
        phase: usize,
        epoch: usize,
        lr: f64,
    ) -> Result<EpochStats, TrainError>;
    fn validate(
        &mut self,
        store: &ParamStore,
        phase: usize,
        epoch: usize,
    ) -> Result<f64, TrainError>;
}

pub enum ScheduleEvent<'a> {
    Epoch(&'a EpochRecord),
    /// After the best parameters of the phase have been restored.
    PhaseEnd {
        phase: usize,
        epochs_run: usize,
        best_val: f64,
        store: &'a ParamStore,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhaseSummary {
    pub phase: usize,
    pub epochs_run: usize,
    pub best_val: f64,
    pub stopped_early: bool,
}

/// Runs the phases in order. Within a phase the learning rate decays by
/// `gamma` per epoch, the phase ends after `patience` epochs without a new best
/// validation loss, and the best parameters are restored at its end. Each
/// phase starts a fresh optimizer.
pub fn run_phase_schedule(
    runner: &mut dyn EpochRunner,
    store: &mut ParamStore,
    schedule: &PhaseSchedule,
    adam: AdamConfig,
    observer: &mut dyn FnMut(ScheduleEvent<'_>),
) -> Result<Vec<PhaseSummary>, TrainError> {
    schedule.validate()?;
    let mut out = Vec::with_capacity(schedule.phases.len());
    for (pi, spec) in schedule.phases.iter().enumerate() {
        let phase = pi + 1;
        runner.begin_phase(store, phase, spec.unfreeze)?;
        let mut opt = Adam::new(store, adam);
        let mut stopper = EarlyStopper::new(schedule.patience);
        let mut best = store.snapshot();
        let mut epochs_run = 0;
        for epoch in 0..spec.max_epochs {
            let lr = schedule.lr(pi, epoch);
            let stats = runner.train_epoch(store, &mut opt, phase, epoch, lr)?;
            let val_loss = runner.validate(store, phase, epoch)?;
            epochs_run += 1;
            if stopper.observe(val_loss) {
                best = store.snapshot();
            }
            let rec = EpochRecord {
                phase,
                epoch,
                lr,
                train: stats.train,
                val_loss,
                frozen_param_count: store.frozen_count(),
                steps: stats.steps,
                rdrop_nonzero_steps: stats.rdrop_nonzero_steps,
                rdrop_max: stats.rdrop_max,
                skipped_epitope: stats.skipped_epitope,
            };
            observer(ScheduleEvent::Epoch(&rec));
            if stopper.should_stop() {
                break;
            }
        }
        store.restore(&best);
        observer(ScheduleEvent::PhaseEnd {
            phase,
            epochs_run,
            best_val: stopper.best,
            store,
        });
        out.push(PhaseSummary {
            phase,
            epochs_run,
            best_val: stopper.best,
            stopped_early: epochs_run < spec.max_epochs,
        });
    }
    Ok(out)
}

/// Rounds every parameter to the nearest `f32`.
pub fn round_params_f32(store: &mut ParamStore) {
    for p in store.iter_mut() {
        for v in p.value.data_mut() {
            *v = *v as f32 as f64;
        }
    }
}

/// The real runner: mini-batches over prepared complexes.
pub struct Trainer<'a> {
    pub model: &'a EvoStruct,
    pub backend: &'a dyn PlmBackend,
    pub train: &'a [PreparedComplex],
    pub val: &'a [PreparedComplex],
    pub weights: LossWeights,
    pub batch_size: usize,
    pub seed: u64,
    /// Keep parameters representable in `f32` after every step.
    pub round_f32: bool,
    /// Set when a phase asked for more unfrozen blocks than the backend has.
    pub unfreeze_clamped: bool,
}

impl<'a> Trainer<'a> {
    pub fn new(
        model: &'a EvoStruct,
        backend: &'a dyn PlmBackend,
        train: &'a [PreparedComplex],
        val: &'a [PreparedComplex],
        weights: LossWeights,
        batch_size: usize,
        seed: u64,
    ) -> Result<Self, TrainError> {
        if train.is_empty() || val.is_empty() {
            return Err(TrainError::EmptyDataset);
        }
        model.check_backend(backend)?;
        Ok(Trainer {
            model,
            backend,
            train,
            val,
            weights,
            batch_size: batch_size.max(1),
            seed,
            round_f32: false,
            unfreeze_clamped: false,
        })
    }

    fn order(&self, phase: usize, epoch: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.train.len()).collect();
        let mut rng = RngStream::named(self.seed, &format!("shuffle/p{phase}/e{epoch}"));
        for i in (1..idx.len()).rev() {
            idx.swap(i, rng.below(i + 1));
        }
        idx
    }

    /// Mean deterministic total loss over `data` in batches.
    pub fn evaluate(
        &self,
        store: &ParamStore,
        data: &[PreparedComplex],
    ) -> Result<LossTerms, TrainError> {
        let mut acc = LossTerms::default();
        let n_batches = data.len().div_ceil(self.batch_size);
        for chunk in data.chunks(self.batch_size) {
            let refs: Vec<&PreparedComplex> = chunk.iter().collect();
            let mut t = Tape::skipping_frozen(store);
            let b = batch_loss(&mut t, self.model, self.backend, &refs, &self.weights, None)?;
            acc.add_scaled(&b.terms, 1.0 / n_batches as f64);
        }
        Ok(acc)
    }
}

impl EpochRunner for Trainer<'_> {
    fn begin_phase(
        &mut self,
        store: &mut ParamStore,
        _phase: usize,
        action: UnfreezeAction,
    ) -> Result<(), TrainError> {
        let b = self.backend;
        match action {
            UnfreezeAction::FreezeBackend => b.freeze(store),
            UnfreezeAction::UnfreezeTop(k) => {
                if k > b.n_blocks() {
                    self.unfreeze_clamped = true;
                }
                b.thaw_top(store, k.min(b.n_blocks()))?;
            }
            UnfreezeAction::UnfreezeAll => b.thaw_all(store),
        }
        Ok(())
    }

    fn train_epoch(
        &mut self,
        store: &mut ParamStore,
        opt: &mut Adam,
        phase: usize,
        epoch: usize,
        lr: f64,
    ) -> Result<EpochStats, TrainError> {
        let order = self.order(phase, epoch);
        let mut stats = EpochStats::default();
        let n_batches = order.len().div_ceil(self.batch_size);
        for (bi, chunk) in order.chunks(self.batch_size).enumerate() {
            let refs: Vec<&PreparedComplex> = chunk.iter().map(|&i| &self.train[i]).collect();
            let stream = |k: usize| {
                RngStream::named(
                    self.seed,
                    &format!("dropout/p{phase}/e{epoch}/b{bi}/pass{k}"),
                )
            };
            let (mut r1, mut r2) = (stream(1), stream(2));
            let grads = {
                let mut t = Tape::skipping_frozen(store);
                let b = batch_loss(
                    &mut t,
                    self.model,
                    self.backend,
                    &refs,
                    &self.weights,
                    Some((&mut r1, &mut r2)),
                )?;
                stats.train.add_scaled(&b.terms, 1.0 / n_batches as f64);
                stats.skipped_epitope += b.skipped_epitope;
                if b.terms.rdrop != 0.0 {
                    stats.rdrop_nonzero_steps += 1;
                }
                stats.rdrop_max = stats.rdrop_max.max(b.terms.rdrop);
                t.backward(b.total)?
            };
            store.accumulate(&grads);
            opt.step(store, lr)?;
            if self.round_f32 {
                round_params_f32(store);
            }
            stats.steps += 1;
        }
        Ok(stats)
    }

    fn validate(
        &mut self,
        store: &ParamStore,
        _phase: usize,
        _epoch: usize,
    ) -> Result<f64, TrainError> {
        Ok(self.evaluate(store, self.val)?.total)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::AdapterConfig;
    use crate::encoder::EncoderConfig;
    use crate::gradcheck::{check_gradients, GradCheck};
    use crate::model::{prepare, ModelConfig};
    use crate::plm::{ToyPlm, ToyPlmConfig};
    use crate::synth::{synth_dataset, SynthConfig};
    use alloc::vec;

    fn tiny(dropout: f64) -> ModelConfig {
        ModelConfig {
            k_ag: 6,
            encoder: EncoderConfig {
                n_layers: 1,
                d_gnn: 6,
                aa_embed_dim: 4,
                ..Default::default()
            },
            adapter: AdapterConfig {
                d_a: 4,
                n_heads: 2,
                ffn_ratio: 2,
                dropout,
                head_hidden: 6,
            },
            ..Default::default()
        }
    }

    fn small_synth() -> SynthConfig {
        SynthConfig {
            heavy_len: 14,
            light_len: 0,
            antigen_len: 10,
            h3_len_min: 5,
            h3_len_max: 5,
            planted_contacts: 3,
            ..Default::default()
        }
    }

    struct Setup {
        store: ParamStore,
        plm: ToyPlm,
        model: EvoStruct,
        data: Vec<PreparedComplex>,
    }

    fn setup(dropout: f64, n: usize) -> Setup {
        let cfg = tiny(dropout);
        let mut store = ParamStore::new();
        let plm = ToyPlm::new(
            &mut store,
            &ToyPlmConfig {
                d_esm: 6,
                n_layers: 2,
                context_radius: 2,
            },
            1,
        );
        let model = EvoStruct::new(&mut store, &cfg, 6, &mut RngStream::new(2));
        let data = synth_dataset(3, n, &small_synth())
            .iter()
            .map(|c| prepare(c, &cfg).unwrap())
            .collect();
        Setup {
            store,
            plm,
            model,
            data,
        }
    }

    #[test]
    fn schedule_defaults_and_lr() {
        let s = PhaseSchedule::default();
        s.validate().unwrap();
        assert_eq!(
            s.phases.iter().map(|p| p.max_epochs).collect::<Vec<_>>(),
            [50, 40, 30]
        );
        assert!((s.lr(0, 3) - 1e-4 * 0.9f64.powi(3)).abs() < 1e-20);
        let mut up = s.clone();
        up.phases[2].lr = 1.0;
        assert!(matches!(up.validate(), Err(TrainError::InvalidSchedule(_))));
    }

    #[test]
    fn early_stopper_counts() {
        let mut e = EarlyStopper::new(2);
        assert!(e.observe(3.0));
        assert!(!e.observe(3.0));
        assert!(e.observe(2.0));
        assert!(!e.observe(2.5));
        assert!(!e.should_stop());
        assert!(!e.observe(2.6));
        assert!(e.should_stop());
    }

    struct Scripted {
        losses: Vec<f64>,
        calls: usize,
    }

    impl EpochRunner for Scripted {
        fn begin_phase(
            &mut self,
            _: &mut ParamStore,
            _: usize,
            _: UnfreezeAction,
        ) -> Result<(), TrainError> {
            Ok(())
        }
        fn train_epoch(
            &mut self,
            store: &mut ParamStore,
            _: &mut Adam,
            _: usize,
            _: usize,
            _: f64,
        ) -> Result<EpochStats, TrainError> {
            for p in store.iter_mut() {
                p.value.data_mut()[0] += 1.0;
            }
            Ok(EpochStats::default())
        }
        fn validate(&mut self, _: &ParamStore, _: usize, _: usize) -> Result<f64, TrainError> {
            self.calls += 1;
            Ok(self.losses[self.calls - 1])
        }
    }

    #[test]
    fn increasing_validation_loss_stops_after_patience() {
        let mut store = ParamStore::new();
        store.add("w", crate::tensor::Mat::zeros(1, 1));
        let mut runner = Scripted {
            losses: (0..50).map(|k| k as f64).collect(),
            calls: 0,
        };
        let sched = PhaseSchedule {
            phases: vec![PhaseSpec {
                max_epochs: 50,
                lr: 1e-3,
                unfreeze: UnfreezeAction::FreezeBackend,
            }],
            ..Default::default()
        };
        let mut lrs = Vec::new();
        let summary = run_phase_schedule(
            &mut runner,
            &mut store,
            &sched,
            AdamConfig::default(),
            &mut |e| {
                if let ScheduleEvent::Epoch(r) = e {
                    lrs.push(r.lr);
                }
            },
        )
        .unwrap();
        assert_eq!(summary[0].epochs_run, 11);
        assert!(summary[0].stopped_early);
        assert_eq!(lrs.len(), 11);
        assert!((lrs[5] - 1e-3 * 0.9f64.powi(5)).abs() < 1e-18);
        // The first epoch was best, so its parameters come back.
        assert_eq!(store.value(store.id("w").unwrap())[(0, 0)], 1.0);
    }

    #[test]
    fn zero_dropout_gives_zero_penalty() {
        let s = setup(0.0, 3);
        let refs: Vec<&PreparedComplex> = s.data.iter().collect();
        let mut t = Tape::new(&s.store);
        let (mut r1, mut r2) = (RngStream::new(1), RngStream::new(2));
        let b = batch_loss(
            &mut t,
            &s.model,
            &s.plm,
            &refs,
            &LossWeights::default(),
            Some((&mut r1, &mut r2)),
        )
        .unwrap();
        assert_eq!(b.terms.rdrop, 0.0);
        let mut t2 = Tape::new(&s.store);
        let e = batch_loss(
            &mut t2,
            &s.model,
            &s.plm,
            &refs,
            &LossWeights::default(),
            None,
        )
        .unwrap();
        assert_eq!(b.terms.total, e.terms.total);
    }

    #[test]
    fn dropout_gives_positive_penalty() {
        let s = setup(0.5, 3);
        let refs: Vec<&PreparedComplex> = s.data.iter().collect();
        let mut t = Tape::new(&s.store);
        let (mut r1, mut r2) = (RngStream::new(1), RngStream::new(2));
        let b = batch_loss(
            &mut t,
            &s.model,
            &s.plm,
            &refs,
            &LossWeights::default(),
            Some((&mut r1, &mut r2)),
        )
        .unwrap();
        assert!(b.terms.rdrop > 0.0);
    }

    #[test]
    fn zero_weights_reduce_to_cross_entropy() {
        let s = setup(0.0, 3);
        let w = LossWeights {
            lambda_coord: 0.0,
            lambda_pair: 0.0,
            lambda_dock: 0.0,
            lambda_shadow: 0.0,
            alpha_rd: 0.0,
            ..Default::default()
        };
        let refs: Vec<&PreparedComplex> = s.data.iter().collect();
        let mut t = Tape::new(&s.store);
        let b = batch_loss(&mut t, &s.model, &s.plm, &refs, &w, None).unwrap();
        let ce: f64 = s
            .data
            .iter()
            .map(|p| {
                let logits = s.model.predict(&s.store, &s.plm, p).unwrap().logits;
                (0..p.targets.len())
                    .map(|i| {
                        let row = &logits.row(i)[..20];
                        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
                        lse - row[p.targets[i]]
                    })
                    .sum::<f64>()
                    / p.targets.len() as f64
            })
            .sum::<f64>()
            / 3.0;
        assert!(
            (b.terms.total - ce).abs() < 1e-10,
            "{} vs {}",
            b.terms.total,
            ce
        );
    }

    #[test]
    fn total_loss_gradient_through_both_passes() {
        let mut s = setup(0.3, 2);
        s.plm.unfreeze_all(&mut s.store);
        for lin in s.model.encoder.layers.iter().flat_map(|l| &l.coord_out) {
            let w = s.store.get_mut(lin.w);
            let r = w.value.rows();
            w.value = crate::tensor::Mat::from_fn(r, 1, |i, _| 0.02 * ((i % 3) as f64 - 1.0));
        }
        let (model, plm, data) = (&s.model, &s.plm, &s.data);
        let cfg = GradCheck {
            max_entries: Some(4),
            ..Default::default()
        };
        let report = check_gradients(&mut s.store, &cfg, |t| {
            let refs: Vec<&PreparedComplex> = data.iter().collect();
            let (mut r1, mut r2) = (RngStream::new(7), RngStream::new(8));
            let b = batch_loss(
                t,
                model,
                plm,
                &refs,
                &LossWeights::default(),
                Some((&mut r1, &mut r2)),
            )
            .unwrap();
            Ok(b.total)
        })
        .unwrap();
        assert!(report.passed(1e-4), "{:?}", report.worst());
        assert_eq!(report.params_checked(), s.store.len());
    }

    #[test]
    fn phase_one_keeps_backend_fixed_and_phase_two_moves_top_blocks() {
        let mut s = setup(0.2, 4);
        let (train, val) = s.data.split_at(3);
        let mut trainer =
            Trainer::new(&s.model, &s.plm, train, val, LossWeights::default(), 2, 5).unwrap();
        let before = s.store.snapshot();
        let sched = PhaseSchedule {
            phases: vec![
                PhaseSpec {
                    max_epochs: 2,
                    lr: 1e-2,
                    unfreeze: UnfreezeAction::FreezeBackend,
                },
                PhaseSpec {
                    max_epochs: 2,
                    lr: 1e-2,
                    unfreeze: UnfreezeAction::UnfreezeTop(1),
                },
            ],
            patience: 5,
            ..Default::default()
        };
        let mut after_phase = Vec::new();
        run_phase_schedule(
            &mut trainer,
            &mut s.store,
            &sched,
            AdamConfig::default(),
            &mut |e| {
                if let ScheduleEvent::PhaseEnd { store, .. } = e {
                    after_phase.push(store.snapshot());
                }
            },
        )
        .unwrap();
        let plm_ids = s.plm.all_params();
        for id in &plm_ids {
            assert_eq!(after_phase[0][id.index()], before[id.index()]);
        }
        let top: Vec<_> = s.plm.block_params(1);
        for id in &plm_ids {
            let changed = after_phase[1][id.index()] != after_phase[0][id.index()];
            assert_eq!(changed, top.contains(id), "{}", s.store.get(*id).name);
        }
    }

    #[test]
    fn training_is_deterministic() {
        let run = || {
            let mut s = setup(0.2, 3);
            let (train, val) = s.data.split_at(2);
            let mut trainer =
                Trainer::new(&s.model, &s.plm, train, val, LossWeights::default(), 2, 5).unwrap();
            let sched = PhaseSchedule {
                phases: vec![PhaseSpec {
                    max_epochs: 2,
                    lr: 1e-2,
                    unfreeze: UnfreezeAction::FreezeBackend,
                }],
                ..Default::default()
            };
            let mut log = Vec::new();
            run_phase_schedule(
                &mut trainer,
                &mut s.store,
                &sched,
                AdamConfig::default(),
                &mut |e| {
                    if let ScheduleEvent::Epoch(r) = e {
                        log.push(r.clone());
                    }
                },
            )
            .unwrap();
            log
        };
        assert_eq!(run(), run());
    }
}
