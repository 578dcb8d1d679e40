//! `srctrace` command-line tool.
//!
//! Exit codes: 0 success, 2 usage/config error, 3 data or format error,
//! 4 numerical failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use srctrace::config::RunConfig;
use srctrace::dataio::{load_manifest, read_embeddings, Manifest, Split};
use srctrace::fusion::{fuse_systems, FusionMode};
use srctrace::linalg::estimate_moments;
use srctrace::losses::beta_at;
use srctrace::metrics::{eer, frechet_distance, MetricReport};
use srctrace::ood::Scaling;
use srctrace::pipeline::{export, train, Dataset, Stage};
use srctrace::synth::{generate, SynthConfig};
use srctrace::system::{evaluate_view, EvalConfig, Evaluation, System, SystemView};
use srctrace::trainer::{lr_at, Checkpoint, StageResult};

/// Version of the report and run-record layouts.
const REPORT_SCHEMA: u32 = 1;

#[derive(Parser)]
#[command(
    name = "srctrace",
    version,
    about = "Source tracing of audio deepfakes: training, evaluation, novelty detection and fusion"
)]
struct Cli {
    /// Worker threads for similarity scoring (default: available cores).
    #[arg(long, global = true, env = "SRCTRACE_THREADS")]
    threads: Option<usize>,

    /// Log verbosity (error, warn, info, debug, trace).
    #[arg(long, global = true, default_value = "warn")]
    log_level: String,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a seeded synthetic dataset directory.
    GenSynth(GenSynthArgs),
    /// Train the back-end classifier on a dataset directory.
    Train(TrainArgs),
    /// Run a checkpoint over every split and write a system directory.
    Export(ExportArgs),
    /// Compute in-domain (and OOD) metric reports for a system.
    Evaluate(EvaluateArgs),
    /// Fit the novelty detector and write per-sample decisions.
    Ood(OodArgs),
    /// Fuse two systems and evaluate the result.
    Fuse(FuseArgs),
    /// Fréchet distance between the Gaussians fitted to two embedding files.
    Frechet(FrechetArgs),
}

#[derive(Args)]
struct GenSynthArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 5)]
    k_sources: usize,
    /// Train samples per source (dev/eval sizes via --n-dev/--n-eval).
    #[arg(long)]
    n_per_source: Option<usize>,
    #[arg(long)]
    n_dev: Option<usize>,
    #[arg(long)]
    n_eval: Option<usize>,
    #[arg(long, default_value_t = 1)]
    ood_sources: usize,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    Re,
    Fd,
    TwoStage,
    FdOnly,
}

impl From<StageArg> for Stage {
    fn from(s: StageArg) -> Self {
        match s {
            StageArg::Re => Stage::Re,
            StageArg::Fd => Stage::Fd,
            StageArg::TwoStage => Stage::TwoStage,
            StageArg::FdOnly => Stage::FdOnly,
        }
    }
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn load(&self) -> anyhow::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => {
                RunConfig::load(p).with_context(|| format!("reading config {}", p.display()))?
            }
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "two-stage")]
    stage: StageArg,
    #[command(flatten)]
    config: ConfigArgs,
    /// Checkpoint to start from (required for --stage fd).
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScalingArg {
    None,
    MaxSoftmax,
}

#[derive(Args)]
struct NsdArgs {
    /// Number of nearest references averaged into the similarity score.
    #[arg(long)]
    k: Option<usize>,
    /// Fixed threshold instead of fitting one on dev.
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long, value_enum)]
    scaling: Option<ScalingArg>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Args)]
struct EvaluateArgs {
    /// System directory with {train,dev,eval}.{steb,stlg}.
    #[arg(long)]
    system: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Require and write the OOD report.
    #[arg(long)]
    ood: bool,
    #[arg(long, value_enum, default_value = "json")]
    format: Format,
    #[command(flatten)]
    nsd: NsdArgs,
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct OodArgs {
    #[arg(long)]
    system: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[command(flatten)]
    nsd: NsdArgs,
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Probability,
    Logit,
}

#[derive(Args)]
struct FuseArgs {
    #[arg(long)]
    a: PathBuf,
    #[arg(long)]
    b: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long, value_enum, default_value = "json")]
    format: Format,
    #[command(flatten)]
    nsd: NsdArgs,
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FrechetArgs {
    #[arg(long)]
    a: PathBuf,
    #[arg(long)]
    b: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::new()
        .parse_filters(&cli.log_level)
        .format_timestamp(None)
        .init();
    let threads = cli
        .threads
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
        .max(1);
    match run(cli.command, threads) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<srctrace::Error>() {
        Some(srctrace::Error::Config(_)) => 2,
        Some(err) if err.is_numerical() => 4,
        Some(_) => 3,
        None if e.downcast_ref::<UsageError>().is_some() => 2,
        None => 3,
    }
}

#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn run(command: Command, threads: usize) -> anyhow::Result<()> {
    match command {
        Command::GenSynth(a) => gen_synth(a),
        Command::Train(a) => train_cmd(a),
        Command::Export(a) => export_cmd(a),
        Command::Evaluate(a) => evaluate_cmd(a, threads),
        Command::Ood(a) => ood_cmd(a, threads),
        Command::Fuse(a) => fuse_cmd(a, threads),
        Command::Frechet(a) => frechet_cmd(a),
    }
}

fn write_json(path: &Path, value: &Value) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn run_record(command: &str, args: Value, config: Option<&RunConfig>, summary: Value) -> Value {
    json!({
        "report_schema": REPORT_SCHEMA,
        "tool_version": env!("CARGO_PKG_VERSION"),
        "command": command,
        "args": args,
        "config": config.map(|c| serde_json::to_value(c).expect("config serializes")),
        "summary": summary,
    })
}

fn path_str(p: &Path) -> String {
    p.display().to_string()
}

fn gen_synth(a: GenSynthArgs) -> anyhow::Result<()> {
    let mut cfg = SynthConfig {
        k_sources: a.k_sources,
        ood_sources: a.ood_sources,
        ..SynthConfig::default()
    };
    if let Some(n) = a.n_per_source {
        cfg.n_train = n;
    }
    if let Some(n) = a.n_dev {
        cfg.n_dev = n;
    }
    if let Some(n) = a.n_eval {
        cfg.n_eval = n;
    }
    if let Some(d) = a.dim {
        cfg.dim = d;
    }
    let ds = generate(a.seed, &cfg)?;
    ds.write(&a.out)?;
    let record = json!({
        "report_schema": REPORT_SCHEMA,
        "tool_version": env!("CARGO_PKG_VERSION"),
        "command": "gen-synth",
        "seed": a.seed,
        "synth": serde_json::to_value(&cfg)?,
    });
    write_json(&a.out.join("run.json"), &record)?;
    log::info!(
        "wrote {} manifest rows to {}",
        ds.manifest.records().len(),
        a.out.display()
    );
    Ok(())
}

fn trace_csv(
    result: &StageResult,
    cfg: &srctrace::trainer::TrainConfig,
    run: &RunConfig,
    with_beta: bool,
) -> String {
    let mut out = String::from(if with_beta {
        "epoch,lr,beta,loss,dev_accuracy\n"
    } else {
        "epoch,lr,loss,dev_accuracy\n"
    });
    for (i, (loss, acc)) in result
        .loss_trace
        .iter()
        .zip(&result.dev_accuracy)
        .enumerate()
    {
        let epoch = i + 1;
        let lr = lr_at(epoch, cfg.lr, cfg.lr_decay, &cfg.lr_milestones);
        if with_beta {
            out.push_str(&format!(
                "{epoch},{lr},{},{loss},{acc}\n",
                beta_at(epoch, &run.schedule)
            ));
        } else {
            out.push_str(&format!("{epoch},{lr},{loss},{acc}\n"));
        }
    }
    out
}

fn stage_summary(result: &StageResult) -> Value {
    json!({
        "best_epoch": result.best_epoch,
        "best_dev_accuracy": result.best_dev_accuracy(),
        "final_loss": result.loss_trace.last(),
    })
}

fn train_cmd(a: TrainArgs) -> anyhow::Result<()> {
    if matches!(a.stage, StageArg::Fd) && a.resume.is_none() {
        return Err(UsageError("--stage fd needs --resume <checkpoint>".into()).into());
    }
    let cfg = a.config.load()?;
    let ds =
        Dataset::load(&a.data).with_context(|| format!("loading dataset {}", a.data.display()))?;
    let resume = a
        .resume
        .as_ref()
        .map(Checkpoint::read)
        .transpose()
        .context("reading resume checkpoint")?;
    let stage: Stage = a.stage.into();
    let outcome = train(&ds, &cfg, stage, resume.as_ref())?;
    fs::create_dir_all(&a.out)?;
    let mut summary = serde_json::Map::new();
    if let Some((result, ckpt)) = &outcome.re {
        ckpt.write(a.out.join("re.stck"))?;
        fs::write(
            a.out.join("re_trace.csv"),
            trace_csv(result, &cfg.re, &cfg, false),
        )?;
        summary.insert("re".into(), stage_summary(result));
    }
    if let Some((result, ckpt)) = &outcome.fd {
        ckpt.write(a.out.join("fd.stck"))?;
        fs::write(
            a.out.join("fd_trace.csv"),
            trace_csv(result, &cfg.fd, &cfg, true),
        )?;
        summary.insert("fd".into(), stage_summary(result));
    }
    if let Some((before, after)) = outcome.separation {
        summary.insert("separation_before".into(), json!(before));
        summary.insert("separation_after".into(), json!(after));
    }
    let args = json!({
        "data": path_str(&a.data),
        "stage": serde_json::to_value(stage)?,
        "resume": a.resume.as_deref().map(path_str),
    });
    write_json(
        &a.out.join("run.json"),
        &run_record("train", args, Some(&cfg), Value::Object(summary)),
    )
}

fn export_cmd(a: ExportArgs) -> anyhow::Result<()> {
    let ckpt = Checkpoint::read(&a.checkpoint)
        .with_context(|| format!("reading {}", a.checkpoint.display()))?;
    let ds = Dataset::load(&a.data)?;
    let system = export(&ckpt, &ds)?;
    system.write(&a.out)?;
    let args = json!({ "checkpoint": path_str(&a.checkpoint), "data": path_str(&a.data) });
    let summary = json!({ "labels": ckpt.labels, "embedding_dim": ckpt.model.embedding_dim() });
    write_json(
        &a.out.join("run.json"),
        &run_record("export", args, None, summary),
    )
}

fn eval_config(cfg: &RunConfig, nsd: &NsdArgs, threads: usize) -> anyhow::Result<EvalConfig> {
    let mut nsd_cfg = cfg.nsd;
    if let Some(k) = nsd.k {
        nsd_cfg.k = k;
    }
    if let Some(tau) = nsd.tau {
        if !tau.is_finite() {
            return Err(UsageError(format!("--tau must be finite, got {tau}")).into());
        }
        nsd_cfg.tau = Some(tau);
    }
    if let Some(s) = nsd.scaling {
        nsd_cfg.scaling = match s {
            ScalingArg::None => Scaling::None,
            ScalingArg::MaxSoftmax => Scaling::MaxSoftmax,
        };
    }
    if nsd_cfg.k == 0 {
        return Err(UsageError("--k must be at least 1".into()).into());
    }
    Ok(EvalConfig {
        nsd: nsd_cfg,
        ece: cfg.ece,
        threads,
    })
}

fn report_csv(r: &MetricReport) -> String {
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
    format!(
        "accuracy,macro_f1,eer,nll,ece,frechet\n{},{},{},{},{},{}\n",
        r.accuracy,
        r.macro_f1,
        opt(r.eer),
        r.nll,
        r.ece,
        opt(r.frechet)
    )
}

fn write_reports(
    out: &Path,
    ev: &Evaluation,
    format: Format,
    want_ood: bool,
) -> anyhow::Result<()> {
    fs::create_dir_all(out)?;
    let write = |name: &str, r: &MetricReport| -> anyhow::Result<()> {
        match format {
            Format::Json => fs::write(out.join(format!("{name}.json")), r.to_json() + "\n")?,
            Format::Csv => fs::write(out.join(format!("{name}.csv")), report_csv(r))?,
        }
        Ok(())
    };
    write("in_domain", &ev.in_domain)?;
    match (&ev.ood, want_ood) {
        (Some(r), _) => write("ood", r)?,
        (None, true) => bail!(srctrace::Error::Degenerate(
            "OOD report requested but the eval split has no OOD rows".into()
        )),
        (None, false) => {}
    }
    Ok(())
}

fn load_inputs(system: &Path, manifest: &Path) -> anyhow::Result<(System, Manifest)> {
    let sys =
        System::load(system).with_context(|| format!("loading system {}", system.display()))?;
    let manifest = load_manifest(manifest)
        .with_context(|| format!("loading manifest {}", manifest.display()))?;
    Ok((sys, manifest))
}

fn evaluation_summary(ev: &Evaluation) -> Value {
    json!({
        "tau": ev.detector.tau(),
        "k": ev.detector.k(),
        "flagged_fraction": ev.flagged_fraction,
        "in_domain": serde_json::to_value(&ev.in_domain).expect("report serializes"),
        "ood": ev.ood.as_ref().map(|r| serde_json::to_value(r).expect("report serializes")),
    })
}

fn evaluate_cmd(a: EvaluateArgs, threads: usize) -> anyhow::Result<()> {
    let cfg = a.config.load()?;
    let eval_cfg = eval_config(&cfg, &a.nsd, threads)?;
    let (sys, manifest) = load_inputs(&a.system, &a.manifest)?;
    if a.ood && !manifest.split(Split::Eval).any(|r| r.is_ood) {
        bail!(srctrace::Error::Degenerate(
            "--ood requested but the manifest has no OOD eval rows".into()
        ));
    }
    let ev = evaluate_view(&SystemView::from(&sys), &manifest, &eval_cfg)?;
    write_reports(&a.out, &ev, a.format, a.ood)?;
    let args =
        json!({ "system": path_str(&a.system), "manifest": path_str(&a.manifest), "ood": a.ood });
    write_json(
        &a.out.join("run.json"),
        &run_record("evaluate", args, Some(&cfg), evaluation_summary(&ev)),
    )
}

fn ood_cmd(a: OodArgs, threads: usize) -> anyhow::Result<()> {
    let cfg = a.config.load()?;
    let eval_cfg = eval_config(&cfg, &a.nsd, threads)?;
    let (sys, manifest) = load_inputs(&a.system, &a.manifest)?;
    let ev = evaluate_view(&SystemView::from(&sys), &manifest, &eval_cfg)?;
    fs::create_dir_all(&a.out)?;
    let mut lines = String::new();
    for d in &ev.decisions {
        lines.push_str(&serde_json::to_string(d)?);
        lines.push('\n');
    }
    fs::write(a.out.join("decisions.jsonl"), lines)?;
    ev.detector.write(a.out.join("nsd.stnd"))?;
    let detection_eer = if manifest.split(Split::Eval).any(|r| r.is_ood) {
        let scores: Vec<f64> = ev.decisions.iter().map(|d| d.score).collect();
        let known: Vec<bool> = ev
            .decisions
            .iter()
            .map(|d| !manifest.get(&d.id).expect("eval id").is_ood)
            .collect();
        Some(eer(&scores, &known)?)
    } else {
        None
    };
    let summary = json!({
        "tau": ev.detector.tau(),
        "k": ev.detector.k(),
        "scaling": serde_json::to_value(ev.detector.scaling())?,
        "n": ev.decisions.len(),
        "flagged_fraction": ev.flagged_fraction,
        "detection_eer": detection_eer,
    });
    write_json(&a.out.join("summary.json"), &summary)?;
    let args = json!({ "system": path_str(&a.system), "manifest": path_str(&a.manifest) });
    write_json(
        &a.out.join("run.json"),
        &run_record("ood", args, Some(&cfg), summary),
    )
}

fn fuse_cmd(a: FuseArgs, threads: usize) -> anyhow::Result<()> {
    let mut cfg = a.config.load()?;
    if let Some(m) = a.mode {
        cfg.fusion.mode = match m {
            ModeArg::Probability => FusionMode::Probability,
            ModeArg::Logit => FusionMode::Logit,
        };
    }
    let eval_cfg = eval_config(&cfg, &a.nsd, threads)?;
    let sys_a = System::load(&a.a).with_context(|| format!("loading system {}", a.a.display()))?;
    let sys_b = System::load(&a.b).with_context(|| format!("loading system {}", a.b.display()))?;
    let manifest = load_manifest(&a.manifest)?;
    let fused = fuse_systems(
        &sys_a,
        &sys_b,
        (&path_str(&a.a), &path_str(&a.b)),
        cfg.fusion.mode,
    )?;
    let ev = evaluate_view(&fused.view, &manifest, &eval_cfg)?;
    fused.outputs.write(a.out.join("system"))?;
    write_reports(&a.out, &ev, a.format, false)?;
    let args =
        json!({ "a": path_str(&a.a), "b": path_str(&a.b), "manifest": path_str(&a.manifest) });
    write_json(
        &a.out.join("run.json"),
        &run_record("fuse", args, Some(&cfg), evaluation_summary(&ev)),
    )
}

fn frechet_cmd(a: FrechetArgs) -> anyhow::Result<()> {
    let ea = read_embeddings(&a.a).with_context(|| format!("reading {}", a.a.display()))?;
    let eb = read_embeddings(&a.b).with_context(|| format!("reading {}", a.b.display()))?;
    let d = frechet_distance(&estimate_moments(ea.data())?, &estimate_moments(eb.data())?)?;
    println!("{}", json!({ "frechet": d }));
    Ok(())
}
