//! Command-line driver: `synth`, `train`, `eval`, `diagnose` and `graph`.
//!
//! Exit codes: 0 on success, 1 on a runtime failure, 2 on a usage, config or
//! input error. `EVOSTRUCT_THREADS` caps the worker threads used for loading
//! and evaluation; training itself is sequential and deterministic.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use evostruct_core::config::{split_indices, BackendKind, Precision, RunConfig};
use evostruct_core::graph::build_graph;
use evostruct_core::metrics::Scored;
use evostruct_core::model::{prepare, EvoStruct, Prediction, PreparedComplex};
use evostruct_core::plm::{PlmBackend, ToyPlm};
use evostruct_core::structure::{mask_cdr, Complex};
use evostruct_core::synth::{synth_dataset, SynthConfig};
use evostruct_core::training::{round_params_f32, run_phase_schedule, ScheduleEvent, Trainer};
use evostruct_core::{ParamStore, RngStream, Tape};
use rayon::prelude::*;

use crate::cache::{self, CacheBackend};
use crate::checkpoint::{config_hash, Checkpoint, CheckpointMeta};
use crate::dump::{read_dump_dir, write_dump, PredictionDump};
use crate::graph_dump::GraphDump;
use crate::manifest::{entry_for, load_dataset, DatasetManifest};
use crate::pdb::write_pdb;
use crate::report::{build_report, write_diagnostics, write_report};

pub const THREADS_ENV: &str = "EVOSTRUCT_THREADS";

#[derive(Debug, Parser)]
#[command(
    name = "evostruct",
    version,
    about = "Structure-conditioned antibody CDR design"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset and its manifest.
    Synth(SynthArgs),
    /// Run the three-phase training schedule.
    Train(TrainArgs),
    /// Predict with a checkpoint and write predictions plus a metrics report.
    Eval(EvalArgs),
    /// Build the failure-mode bundle from a directory of prediction dumps.
    Diagnose(DiagnoseArgs),
    /// Dump the residue graph of every manifest entry as JSON.
    Graph(GraphArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum BackendArg {
    Toy,
    Cache,
}

impl From<BackendArg> for BackendKind {
    fn from(b: BackendArg) -> Self {
        match b {
            BackendArg::Toy => BackendKind::Toy,
            BackendArg::Cache => BackendKind::Cache,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PrecisionArg {
    F32,
    F64,
}

impl From<PrecisionArg> for Precision {
    fn from(p: PrecisionArg) -> Self {
        match p {
            PrecisionArg::F32 => Precision::F32,
            PrecisionArg::F64 => Precision::F64,
        }
    }
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, default_value_t = 8)]
    pub n: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write `EVOC` embeddings of this width, from a toy PLM seeded with
    /// `--seed`, under `<out>/cache`.
    #[arg(long)]
    pub cache_dim: Option<usize>,
}

/// Settings shared by the commands that build a model.
#[derive(Debug, Args)]
pub struct ModelArgs {
    /// Run configuration (JSON); defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub backend: Option<BackendArg>,
    #[arg(long, value_enum)]
    pub precision: Option<PrecisionArg>,
    /// Directory of `EVOC` files for the cache backend [default: `cache` next
    /// to the manifest].
    #[arg(long)]
    pub cache_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DiagnoseArgs {
    /// Directory of `<id>.<cdr>.json` prediction dumps.
    #[arg(long)]
    pub predictions: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GraphArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, config or input files.
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(e) | CliError::Runtime(e) => write!(f, "{e:#}"),
        }
    }
}

impl std::error::Error for CliError {}

fn usage(e: impl Into<anyhow::Error>) -> CliError {
    CliError::Usage(e.into())
}

fn runtime(e: impl Into<anyhow::Error>) -> CliError {
    CliError::Runtime(e.into())
}

type Result<T> = std::result::Result<T, CliError>;

/// Thread cap from `EVOSTRUCT_THREADS`; unset means rayon's default.
pub fn thread_count() -> Result<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(usage(anyhow!(
                "{THREADS_ENV} must be a positive integer, got {v:?}"
            ))),
        },
    }
}

/// Runs a parsed command inside a thread pool sized by `EVOSTRUCT_THREADS`.
pub fn run(cli: Cli) -> Result<()> {
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = thread_count()? {
        pool = pool.num_threads(n);
    }
    let pool = pool.build().map_err(runtime)?;
    pool.install(|| match &cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Diagnose(a) => cmd_diagnose(a),
        Command::Graph(a) => cmd_graph(a),
    })
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))
        .map_err(usage)?;
    let cfg: RunConfig = serde_json::from_str(&text)
        .with_context(|| format!("config {}", path.display()))
        .map_err(usage)?;
    cfg.validate()
        .with_context(|| format!("config {}", path.display()))
        .map_err(usage)?;
    Ok(cfg)
}

/// Config file (or `base`) with command-line overrides applied, validated.
pub fn resolve_config(a: &ModelArgs, base: RunConfig) -> Result<RunConfig> {
    let mut cfg = match &a.config {
        Some(p) => load_config(p)?,
        None => base,
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(b) = a.backend {
        cfg.backend = b.into();
    }
    if let Some(p) = a.precision {
        cfg.precision = p.into();
    }
    cfg.validate().context("resolved config").map_err(usage)?;
    Ok(cfg)
}

fn create_dir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p)
        .with_context(|| format!("creating {}", p.display()))
        .map_err(runtime)
}

fn write_text(p: &Path, text: &str) -> Result<()> {
    std::fs::write(p, text)
        .with_context(|| format!("writing {}", p.display()))
        .map_err(runtime)
}

/// Parameters, backend and model built in a fixed order, so parameter names
/// and initial values depend only on the config.
pub struct Session {
    pub cfg: RunConfig,
    pub store: ParamStore,
    pub backend: Box<dyn PlmBackend + Sync>,
    pub model: EvoStruct,
}

impl Session {
    pub fn new(cfg: &RunConfig, cache_dir: &Path) -> Self {
        let mut store = ParamStore::new();
        let backend: Box<dyn PlmBackend + Sync> = match cfg.backend {
            BackendKind::Toy => Box::new(ToyPlm::new(&mut store, &cfg.plm, cfg.seed)),
            BackendKind::Cache => Box::new(CacheBackend::new(cache_dir, cfg.plm.d_esm)),
        };
        let mut rng = RngStream::named(cfg.seed, "model");
        let model = EvoStruct::new(&mut store, &cfg.model, cfg.plm.d_esm, &mut rng);
        Session {
            cfg: cfg.clone(),
            store,
            backend,
            model,
        }
    }

    pub fn checkpoint(&self, phase: usize, epoch: usize) -> Checkpoint {
        Checkpoint::from_store(
            &self.store,
            CheckpointMeta {
                phase,
                epoch,
                seed: self.cfg.seed,
                config_hash: config_hash(&self.cfg),
                config: self.cfg.clone(),
            },
        )
    }

    pub fn predict(&self, data: &[PreparedComplex]) -> Result<Vec<Prediction>> {
        data.par_iter()
            .map(|p| self.model.predict(&self.store, self.backend.as_ref(), p))
            .collect::<std::result::Result<_, _>>()
            .map_err(runtime)
    }
}

fn cache_dir_for(a: &ModelArgs, manifest: &Path) -> PathBuf {
    a.cache_dir
        .clone()
        .unwrap_or_else(|| manifest.parent().unwrap_or(Path::new(".")).join("cache"))
}

/// Complexes of a manifest. A missing or malformed manifest is an input error.
pub fn load_complexes(manifest: &Path, cfg: &RunConfig) -> Result<Vec<Complex>> {
    let parsed = load_dataset(manifest, cfg.model.cdr, cfg.model.contact_cutoff).map_err(usage)?;
    if parsed.is_empty() {
        return Err(usage(anyhow!(
            "manifest {} has no entries",
            manifest.display()
        )));
    }
    Ok(parsed.into_iter().map(|p| p.complex).collect())
}

fn prepare_all(complexes: &[Complex], cfg: &RunConfig) -> Result<Vec<PreparedComplex>> {
    complexes
        .par_iter()
        .map(|c| prepare(c, &cfg.model))
        .collect::<std::result::Result<_, _>>()
        .map_err(usage)
}

pub fn cmd_synth(a: &SynthArgs) -> Result<()> {
    if a.n == 0 {
        return Err(usage(anyhow!("--n must be positive")));
    }
    create_dir(&a.out)?;
    let complexes = synth_dataset(a.seed, a.n, &SynthConfig::default());
    let mut manifest = DatasetManifest::default();
    for c in &complexes {
        let name = format!("{}.pdb", c.id);
        write_text(&a.out.join(&name), &write_pdb(c))?;
        let mut e = entry_for(c, name);
        // Left for the loader to derive from the contact cutoff.
        e.epitope_indices = None;
        manifest.entries.push(e);
    }
    manifest
        .save(&a.out.join("manifest.json"))
        .map_err(runtime)?;
    if let Some(d) = a.cache_dim {
        let dir = a.out.join("cache");
        create_dir(&dir)?;
        let cfg = evostruct_core::plm::ToyPlmConfig {
            d_esm: d,
            ..Default::default()
        };
        let mut store = ParamStore::new();
        let plm = ToyPlm::new(&mut store, &cfg, a.seed);
        for c in &complexes {
            for (&cdr, range) in &c.cdr_ranges {
                let (tokens, _) = mask_cdr(c, cdr).map_err(runtime)?;
                let mut t = Tape::new(&store);
                let input = evostruct_core::plm::PlmInput {
                    id: &c.id,
                    cdr,
                    tokens: &tokens,
                    cdr_range: range.clone(),
                };
                let v = plm.embed_masked(&mut t, &input).map_err(runtime)?;
                let path = dir.join(cache::file_name(&c.id, cdr));
                cache::write(&path, t.value(v))
                    .with_context(|| format!("writing {}", path.display()))
                    .map_err(runtime)?;
            }
        }
    }
    log::info!("wrote {} complexes to {}", complexes.len(), a.out.display());
    Ok(())
}

pub fn cmd_train(a: &TrainArgs) -> Result<()> {
    let cfg = resolve_config(&a.model, RunConfig::default())?;
    let complexes = load_complexes(&a.manifest, &cfg)?;
    let data = prepare_all(&complexes, &cfg)?;
    let (train_idx, val_idx) = split_indices(data.len(), cfg.val_fraction, cfg.seed);
    let pick = |idx: &[usize]| idx.iter().map(|&i| data[i].clone()).collect::<Vec<_>>();
    let (train, val) = (pick(&train_idx), pick(&val_idx));
    create_dir(&a.out)?;
    write_text(
        &a.out.join("config.json"),
        &(serde_json::to_string_pretty(&cfg).expect("config serializes") + "\n"),
    )?;

    let mut s = Session::new(&cfg, &cache_dir_for(&a.model, &a.manifest));
    let f32_mode = cfg.precision == Precision::F32;
    if f32_mode {
        round_params_f32(&mut s.store);
    }
    s.checkpoint(0, 0)
        .save(&a.out.join("init.evck"))
        .map_err(runtime)?;

    let log_path = a.out.join("train_log.jsonl");
    let mut log = BufWriter::new(
        File::create(&log_path)
            .with_context(|| format!("creating {}", log_path.display()))
            .map_err(runtime)?,
    );
    let mut trainer = Trainer::new(
        &s.model,
        s.backend.as_ref(),
        &train,
        &val,
        cfg.losses.clone(),
        cfg.schedule.batch_size,
        cfg.seed,
    )
    .map_err(usage)?;
    trainer.round_f32 = f32_mode;
    let mut io_error: Option<anyhow::Error> = None;
    let mut last = (0, 0);
    let out = &a.out;
    let meta = |phase: usize, epoch: usize| CheckpointMeta {
        phase,
        epoch,
        seed: cfg.seed,
        config_hash: config_hash(&cfg),
        config: cfg.clone(),
    };
    let summaries = run_phase_schedule(
        &mut trainer,
        &mut s.store,
        &cfg.schedule,
        cfg.optimizer,
        &mut |ev| {
            if io_error.is_some() {
                return;
            }
            let res: anyhow::Result<()> = match ev {
                ScheduleEvent::Epoch(r) => {
                    log::info!(
                        "phase {} epoch {}: lr {:.3e} train {:.4} (seq {:.4}) val {:.4}",
                        r.phase,
                        r.epoch,
                        r.lr,
                        r.train.total,
                        r.train.seq,
                        r.val_loss
                    );
                    serde_json::to_writer(&mut log, r)
                        .map_err(anyhow::Error::from)
                        .and_then(|_| log.write_all(b"\n").map_err(anyhow::Error::from))
                }
                ScheduleEvent::PhaseEnd {
                    phase,
                    epochs_run,
                    store,
                    ..
                } => {
                    last = (phase, epochs_run);
                    Checkpoint::from_store(store, meta(phase, epochs_run))
                        .save(&out.join(format!("phase{phase}.evck")))
                        .map_err(anyhow::Error::from)
                }
            };
            io_error = res.err();
        },
    );
    let clamped = trainer.unfreeze_clamped;
    log.flush()
        .with_context(|| format!("writing {}", log_path.display()))
        .map_err(runtime)?;
    if let Some(e) = io_error {
        return Err(runtime(e));
    }
    let summaries = summaries.map_err(runtime)?;
    if clamped {
        log::warn!(
            "the backend has fewer blocks than a phase asked to unfreeze; the request was clamped"
        );
    }
    for p in &summaries {
        log::info!(
            "phase {}: {} epochs, best validation loss {:.4}",
            p.phase,
            p.epochs_run,
            p.best_val
        );
    }
    s.checkpoint(last.0, last.1)
        .save(&a.out.join("model.evck"))
        .map_err(runtime)?;
    Ok(())
}

fn scored<'a>(complexes: &'a [Complex], preds: &[Prediction]) -> Vec<Scored<'a>> {
    complexes
        .iter()
        .zip(preds)
        .map(|(c, p)| Scored {
            native: c,
            cdr: p.cdr,
            sequence: p.sequence.clone(),
            cdr_ca: Some(p.cdr_ca.clone()),
            logits: Some(p.logits.clone()),
        })
        .collect()
}

pub fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint).map_err(usage)?;
    // Without `--config` the checkpoint's own config is the base, so the hash
    // check only fails when an override changes something.
    let cfg = resolve_config(&a.model, ck.meta.config.clone())?;
    ck.verify_config(&cfg).map_err(usage)?;

    let complexes = load_complexes(&a.manifest, &cfg)?;
    let data = prepare_all(&complexes, &cfg)?;
    let mut s = Session::new(&cfg, &cache_dir_for(&a.model, &a.manifest));
    ck.apply(&mut s.store).map_err(usage)?;
    let preds = s.predict(&data)?;

    let pred_dir = a.out.join("predictions");
    create_dir(&pred_dir)?;
    for p in &preds {
        write_dump(&pred_dir, &PredictionDump::from_prediction(p)).map_err(runtime)?;
    }
    let report = build_report(&scored(&complexes, &preds), &cfg.diagnostics).map_err(runtime)?;
    write_report(&a.out, &report).map_err(runtime)?;
    if let Some(aar) = report.summary.aar {
        log::info!("AAR {:.4} over {} complexes", aar.mean, aar.n);
    }
    Ok(())
}

pub fn cmd_diagnose(a: &DiagnoseArgs) -> Result<()> {
    let cfg = match &a.config {
        Some(p) => load_config(p)?,
        None => RunConfig::default(),
    };
    let complexes = load_complexes(&a.manifest, &cfg)?;
    let dumps = read_dump_dir(&a.predictions).map_err(usage)?;
    if dumps.is_empty() {
        return Err(usage(anyhow!(
            "no prediction files in {}",
            a.predictions.display()
        )));
    }
    let mut items = Vec::with_capacity(dumps.len());
    for (path, d) in &dumps {
        let native = complexes.iter().find(|c| c.id == d.id).ok_or_else(|| {
            usage(anyhow!(
                "{}: id {:?} is not in the manifest",
                path.display(),
                d.id
            ))
        })?;
        let len = native
            .cdr_ranges
            .get(&d.cdr)
            .map(|r| r.len())
            .ok_or_else(|| usage(anyhow!("{}: {} has no CDR {}", path.display(), d.id, d.cdr)))?;
        if d.predicted_seq.len() != len {
            return Err(usage(anyhow!(
                "{}: predicted_seq has {} residues, the native CDR {}",
                path.display(),
                d.predicted_seq.len(),
                len
            )));
        }
        items.push(Scored {
            native,
            cdr: d.cdr,
            sequence: d.sequence().expect("validated on read"),
            cdr_ca: d.predicted_cdr_coords.clone(),
            logits: d.logits(),
        });
    }
    let report = build_report(&items, &cfg.diagnostics).map_err(runtime)?;
    create_dir(&a.out)?;
    write_diagnostics(&a.out, &report).map_err(runtime)?;
    log::info!(
        "V_eff {:.3} (native {:.3}) over {} predictions",
        report.summary.v_eff,
        report.summary.v_eff_native,
        items.len()
    );
    Ok(())
}

pub fn cmd_graph(a: &GraphArgs) -> Result<()> {
    let cfg = match &a.config {
        Some(p) => load_config(p)?,
        None => RunConfig::default(),
    };
    let complexes = load_complexes(&a.manifest, &cfg)?;
    create_dir(&a.out)?;
    let dumps: Vec<GraphDump> = complexes
        .par_iter()
        .map(|c| build_graph(c, &cfg.model.graph).map(|g| GraphDump::new(&c.id, &g)))
        .collect::<std::result::Result<_, _>>()
        .map_err(runtime)?;
    for d in &dumps {
        write_text(
            &a.out.join(format!("{}.graph.json", d.id)),
            &(serde_json::to_string(d).expect("graph serializes") + "\n"),
        )?;
    }
    Ok(())
}
