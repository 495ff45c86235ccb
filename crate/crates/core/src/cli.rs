//! Command-line front end. Every command reads an optional TOML config,
//! applies flag overrides (flags win) and writes its artifacts plus a
//! `<command>.json` provenance file into the output directory.

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{RunConfig, OUTPUT_ROOT_ENV};
use crate::domain::{Dataset, Split};
use crate::engine::{bench_latency, write_latency_csv, ServeMode};
use crate::error::{Error, Result};
use crate::eval::{self, Delay, EvalReport, Variant};
use crate::model::CupidModel;
use crate::training::{self, Corpus, EpochLog};
use crate::worldsim::{generate_dataset, run_online, ModelPolicy, OnlineReport, Policy, RandomPolicy};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "cupid", version, about = "Session-based reciprocal recommendation toolkit")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Root seed; subsystem seeds are derived from it.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, env = OUTPUT_ROOT_ENV)]
    pub out: Option<PathBuf>,
    /// Update-worker threads; 1 keeps every command deterministic.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a world under random pairing and log a dataset.
    Generate(WorldArgs),
    /// Train a model on a dataset.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the test split.
    Eval(EvalArgs),
    /// Evaluate a checkpoint under delayed session lookups.
    DelaySweep(EvalArgs),
    /// Train and evaluate the ablation variants.
    Ablate(DataArgs),
    /// Run the online switchback simulation.
    Simulate(SimulateArgs),
    /// Measure scoring latency with inline versus memory-backed sessions.
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
pub struct WorldArgs {
    #[arg(long)]
    pub users: Option<usize>,
    #[arg(long)]
    pub horizon_hours: Option<f64>,
    /// Compatibility gain; 0 gives the null world.
    #[arg(long)]
    pub alpha: Option<f64>,
}

impl WorldArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        if let Some(n) = self.users {
            cfg.world.num_users = n;
        }
        if let Some(h) = self.horizon_hours {
            cfg.world.horizon_ms = (h * 3_600_000.0).round() as u64;
        }
        if let Some(a) = self.alpha {
            cfg.world.alpha = a;
        }
    }
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Dataset directory; defaults to `<out>/dataset`.
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum TrainMode {
    TwoPhase,
    Joint,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Ablate {
    None,
    NoSession,
    NoSp,
    NoEt,
    SessionStats,
}

impl Ablate {
    fn variant(self) -> Variant {
        match self {
            Ablate::None => Variant::Full,
            Ablate::NoSession => Variant::NoSession,
            Ablate::NoSp => Variant::NoSecondPhase,
            Ablate::NoEt => Variant::NoExp,
            Ablate::SessionStats => Variant::SessionStats,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, value_enum, default_value_t = TrainMode::TwoPhase)]
    pub mode: TrainMode,
    #[arg(long, value_enum, default_value_t = Ablate::None)]
    pub ablate: Ablate,
    /// Continue from this checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Checkpoint to write; defaults to `<out>/model.ckpt`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub phase1_epochs: Option<usize>,
    #[arg(long)]
    pub phase2_epochs: Option<usize>,
    #[arg(long)]
    pub joint_epochs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Defaults to `<out>/model.ckpt`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PolicyKind {
    Random,
    FeatureOnly,
    Cupid,
}

impl PolicyKind {
    fn label(self) -> &'static str {
        match self {
            PolicyKind::Random => "random",
            PolicyKind::FeatureOnly => "feature-only",
            PolicyKind::Cupid => "cupid",
        }
    }
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long, value_enum, default_value_t = PolicyKind::Cupid)]
    pub policy: PolicyKind,
    /// Second arm of a switchback comparison.
    #[arg(long, value_enum)]
    pub against: Option<PolicyKind>,
    /// Checkpoint for the cupid policy.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Checkpoint for the feature-only policy.
    #[arg(long)]
    pub feature_checkpoint: Option<PathBuf>,
    #[command(flatten)]
    pub world: WorldArgs,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Trained checkpoint; an untrained model of the configured size otherwise.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    pub pool_sizes: Option<Vec<usize>>,
    #[arg(long)]
    pub reps: Option<usize>,
}

/// Maps an error to the documented exit code.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::NonFinite(_) => EXIT_NUMERIC,
        Error::Config(_) => EXIT_USAGE,
        _ => EXIT_DATA,
    }
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match run(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(o) = &common.out {
        cfg.output_dir = o.clone();
    }
    if let Some(t) = common.threads {
        cfg.threads = t;
        cfg.engine.workers = t;
    }
    cfg.apply_root_seed();
    Ok(cfg)
}

pub fn run(cli: Cli) -> Result<()> {
    let mut cfg = load_config(&cli.common)?;
    match cli.command {
        Command::Generate(a) => {
            a.apply(&mut cfg);
            cfg.validate()?;
            cmd_generate(&cfg).map(drop)
        }
        Command::Train(a) => {
            if let Some(n) = a.phase1_epochs {
                cfg.training.phase1_epochs = n;
            }
            if let Some(n) = a.phase2_epochs {
                cfg.training.phase2_epochs = n;
            }
            if let Some(n) = a.joint_epochs {
                cfg.training.joint_epochs = n;
            }
            cfg.validate()?;
            let data = data_dir(&cfg, &a.data);
            let ckpt = a.checkpoint.unwrap_or_else(|| cfg.output_dir.join("model.ckpt"));
            cmd_train(&cfg, &data, a.mode, a.ablate.variant(), a.resume.as_deref(), &ckpt).map(drop)
        }
        Command::Eval(a) => {
            cfg.validate()?;
            let ckpt = a.checkpoint.unwrap_or_else(|| cfg.output_dir.join("model.ckpt"));
            cmd_eval(&cfg, &data_dir(&cfg, &a.data), &ckpt).map(drop)
        }
        Command::DelaySweep(a) => {
            cfg.validate()?;
            let ckpt = a.checkpoint.unwrap_or_else(|| cfg.output_dir.join("model.ckpt"));
            cmd_delay_sweep(&cfg, &data_dir(&cfg, &a.data), &ckpt).map(drop)
        }
        Command::Ablate(a) => {
            cfg.validate()?;
            cmd_ablate(&cfg, &data_dir(&cfg, &a)).map(drop)
        }
        Command::Simulate(a) => {
            a.world.apply(&mut cfg);
            cfg.validate()?;
            let mut arms = vec![a.policy];
            arms.extend(a.against);
            cmd_simulate(&cfg, &arms, a.checkpoint.as_deref(), a.feature_checkpoint.as_deref()).map(drop)
        }
        Command::Bench(a) => {
            if let Some(p) = a.pool_sizes {
                cfg.bench.pool_sizes = p;
            }
            if let Some(r) = a.reps {
                cfg.bench.reps = r;
            }
            cfg.validate()?;
            cmd_bench(&cfg, a.checkpoint.as_deref()).map(drop)
        }
    }
}

fn data_dir(cfg: &RunConfig, a: &DataArgs) -> PathBuf {
    a.data.clone().unwrap_or_else(|| cfg.output_dir.join("dataset"))
}

fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingInput(path.to_path_buf()))
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut w = create(path)?;
    w.write_all(text.as_bytes())?;
    w.flush()?;
    Ok(())
}

fn write_provenance(cfg: &RunConfig, command: &str, inputs: serde_json::Value) -> Result<()> {
    let doc = serde_json::json!({ "command": command, "inputs": inputs, "config": cfg.provenance() });
    let mut w = create(&cfg.output_dir.join(format!("{command}.json")))?;
    serde_json::to_writer_pretty(&mut w, &doc)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn load_dataset(dir: &Path) -> Result<Dataset> {
    require(dir)?;
    Dataset::read_dir(dir)
}

fn load_checkpoint(path: &Path) -> Result<CupidModel> {
    require(path)?;
    CupidModel::load(path)
}

fn threshold(cfg: &RunConfig, ds: &Dataset) -> Result<f64> {
    match cfg.eval.threshold_ms {
        Some(t) => Ok(t),
        None => eval::quality_threshold(ds),
    }
}

/// Writes `<out>/dataset/` and returns the dataset.
pub fn cmd_generate(cfg: &RunConfig) -> Result<Dataset> {
    cfg.world.validate(&crate::domain::FeatureSchema::default())?;
    let ds = generate_dataset(&cfg.world, Default::default())?.with_provenance(cfg.provenance());
    let dir = cfg.output_dir.join("dataset");
    ds.write_dir(&dir)?;
    write_provenance(cfg, "generate", serde_json::json!({ "dataset": dir }))?;
    println!(
        "{} matches, {} records, {} users -> {}",
        ds.matches().len(),
        ds.events().len(),
        ds.static_features.len(),
        dir.display()
    );
    Ok(ds)
}

fn write_log(path: &Path, log: &[EpochLog]) -> Result<()> {
    let mut out = csv::Writer::from_writer(create(path)?);
    for row in log {
        out.serialize(row)?;
    }
    out.flush()?;
    Ok(())
}

/// Trains (or resumes) a model and writes the checkpoint and epoch log.
pub fn cmd_train(
    cfg: &RunConfig,
    data: &Path,
    mode: TrainMode,
    variant: Variant,
    resume: Option<&Path>,
    checkpoint: &Path,
) -> Result<(CupidModel, Vec<EpochLog>)> {
    let ds = load_dataset(data)?;
    let corpus = Corpus::new(&ds)?;
    let thr = threshold(cfg, &ds)?;
    let wanted = variant.model_config(&cfg.model);
    let mut model = match resume {
        Some(p) => {
            let m = load_checkpoint(p)?;
            if m.config != wanted {
                return Err(Error::Checkpoint(format!(
                    "{} was trained with a different model config (dim {}, requested {})",
                    p.display(),
                    m.config.dim,
                    wanted.dim
                )));
            }
            if m.schema != ds.schema {
                return Err(Error::Checkpoint(
                    "checkpoint feature schema differs from the dataset".into(),
                ));
            }
            m
        }
        None => CupidModel::new(wanted, ds.schema, cfg.training.seed)?,
    };
    let mut log = Vec::new();
    match mode {
        TrainMode::Joint => {
            training::train_joint_baseline(&mut model, &corpus, &cfg.training, thr, &mut log)?;
        }
        TrainMode::TwoPhase => {
            training::train_phase1(&mut model, &corpus, &cfg.training, thr, &mut log)?;
            if variant != Variant::NoSecondPhase {
                training::train_phase2(&mut model, &corpus, &cfg.training, thr, &mut log)?;
            }
        }
    }
    if !model.store.all_finite() {
        return Err(Error::NonFinite("trained parameters"));
    }
    let extra = serde_json::json!({
        "variant": variant.label(),
        "mode": format!("{mode:?}"),
        "threshold_ms": thr,
        "transformer_forward_count": model.counter().get(),
        "config": cfg.provenance(),
    });
    if let Some(parent) = checkpoint.parent() {
        std::fs::create_dir_all(parent)?;
    }
    model.save(checkpoint, extra)?;
    write_log(&cfg.output_dir.join("train_log.csv"), &log)?;
    write_provenance(
        cfg,
        "train",
        serde_json::json!({ "data": data, "resume": resume, "checkpoint": checkpoint }),
    )?;
    println!(
        "trained {} ({:?}): {} epochs, {} transformer forwards -> {}",
        variant.label(),
        mode,
        log.len(),
        model.counter().get(),
        checkpoint.display()
    );
    Ok((model, log))
}

fn write_reports(cfg: &RunConfig, stem: &str, rows: &[(String, EvalReport)]) -> Result<()> {
    let mut w = create(&cfg.output_dir.join(format!("{stem}.csv")))?;
    eval::write_reports_csv(&mut w, rows)?;
    w.flush()?;
    let text = eval::format_reports(rows);
    write_text(&cfg.output_dir.join(format!("{stem}.txt")), &text)?;
    print!("{text}");
    Ok(())
}

pub fn cmd_eval(cfg: &RunConfig, data: &Path, checkpoint: &Path) -> Result<EvalReport> {
    let ds = load_dataset(data)?;
    let model = load_checkpoint(checkpoint)?;
    let corpus = Corpus::new(&ds)?;
    let report = eval::evaluate(&model, &corpus, Split::Test, threshold(cfg, &ds)?, Delay::Live)?;
    write_reports(cfg, "eval", &[("model".to_string(), report.clone())])?;
    write_provenance(
        cfg,
        "eval",
        serde_json::json!({ "data": data, "checkpoint": checkpoint }),
    )?;
    Ok(report)
}

pub fn cmd_delay_sweep(cfg: &RunConfig, data: &Path, checkpoint: &Path) -> Result<Vec<EvalReport>> {
    let ds = load_dataset(data)?;
    let model = load_checkpoint(checkpoint)?;
    let corpus = Corpus::new(&ds)?;
    let rows = eval::run_delay_sweep(&model, &corpus, Split::Test, threshold(cfg, &ds)?, &cfg.eval.delays_ms)?;
    let labeled: Vec<(String, EvalReport)> = rows.iter().map(|r| ("model".to_string(), r.clone())).collect();
    write_reports(cfg, "delay_sweep", &labeled)?;
    write_provenance(
        cfg,
        "delay-sweep",
        serde_json::json!({ "data": data, "checkpoint": checkpoint }),
    )?;
    Ok(rows)
}

pub fn cmd_ablate(cfg: &RunConfig, data: &Path) -> Result<Vec<(Variant, EvalReport)>> {
    let ds = load_dataset(data)?;
    let corpus = Corpus::new(&ds)?;
    let rows = eval::run_ablations(&ds, &corpus, &cfg.model, &cfg.training, threshold(cfg, &ds)?)?;
    let labeled: Vec<(String, EvalReport)> = rows.iter().map(|(v, r)| (v.label().to_string(), r.clone())).collect();
    write_reports(cfg, "ablation", &labeled)?;
    write_provenance(cfg, "ablate", serde_json::json!({ "data": data }))?;
    Ok(rows)
}

/// Runs the switchback over `arms`; model policies read their checkpoints.
pub fn cmd_simulate(
    cfg: &RunConfig,
    arms: &[PolicyKind],
    checkpoint: Option<&Path>,
    feature_checkpoint: Option<&Path>,
) -> Result<OnlineReport> {
    let default_ckpt = cfg.output_dir.join("model.ckpt");
    let mut policies: Vec<Box<dyn Policy>> = Vec::new();
    for &kind in arms {
        let p: Box<dyn Policy> = match kind {
            PolicyKind::Random => Box::new(RandomPolicy),
            PolicyKind::Cupid => {
                let m = load_checkpoint(checkpoint.unwrap_or(&default_ckpt))?;
                Box::new(ModelPolicy::new(
                    kind.label(),
                    Arc::new(m),
                    cfg.engine.compute_delay_ms,
                )?)
            }
            PolicyKind::FeatureOnly => {
                let path = feature_checkpoint.ok_or_else(|| {
                    Error::Config("the feature-only policy needs --feature-checkpoint (a no-session model)".into())
                })?;
                let m = load_checkpoint(path)?;
                if m.config.use_session {
                    return Err(Error::Checkpoint(format!(
                        "{} is not a no-session model",
                        path.display()
                    )));
                }
                Box::new(ModelPolicy::new(
                    kind.label(),
                    Arc::new(m),
                    cfg.engine.compute_delay_ms,
                )?)
            }
        };
        policies.push(p);
    }
    let refs: Vec<&mut dyn Policy> = policies.iter_mut().map(|p| p.as_mut() as &mut dyn Policy).collect();
    let report = run_online(&cfg.world, Default::default(), &cfg.online, refs)?;
    let stem = arms.iter().map(|a| a.label()).collect::<Vec<_>>().join("_vs_");
    let mut w = create(&cfg.output_dir.join(format!("online_{stem}.csv")))?;
    report.write_windows_csv(&mut w)?;
    w.flush()?;
    let text = report.summary();
    write_text(&cfg.output_dir.join(format!("online_{stem}.txt")), &text)?;
    print!("{text}");
    write_provenance(
        cfg,
        "simulate",
        serde_json::json!({ "arms": stem, "checkpoint": checkpoint }),
    )?;
    Ok(report)
}

pub fn cmd_bench(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<Vec<crate::engine::LatencyRow>> {
    let model = match checkpoint {
        Some(p) => load_checkpoint(p)?,
        None => {
            let mut m = CupidModel::new(cfg.model.clone(), Default::default(), cfg.training.seed)?;
            m.state.phase2_done = true;
            m
        }
    };
    let mut rows = Vec::new();
    for mode in [ServeMode::Sync, ServeMode::Async] {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.bench.seed);
        rows.extend(bench_latency(
            &model,
            mode,
            &cfg.bench.pool_sizes,
            cfg.bench.reps,
            cfg.bench.session_len,
            &mut rng,
        )?);
    }
    let mut w = create(&cfg.output_dir.join("bench.csv"))?;
    write_latency_csv(&mut w, &rows)?;
    w.flush()?;
    for r in &rows {
        println!(
            "{:<6} pool {:>4}  p50 {:>10.1} us  p90 {:>10.1} us  p99 {:>10.1} us",
            r.mode, r.pool_size, r.p50_us, r.p90_us, r.p99_us
        );
    }
    write_provenance(cfg, "bench", serde_json::json!({ "checkpoint": checkpoint }))?;
    Ok(rows)
}
