//! The `lapose` command line: dataset generation, pretraining, post-training, evaluation and
//! latent probing. Exit codes are 0 on success, 1 for invalid input and 2 for runtime failures.

pub mod manifest;
pub mod plot;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use candle_core::Device;
use clap::{Args, Parser, Subcommand};
use lapose_core::geometry::{compose_trajectory, MetricScale};
use lapose_core::metrics::probe::{latent_probe, pca_2d, ProbeConfig};
use lapose_core::metrics::report::{EvalReport, FPS_SWEEP};
use lapose_core::synthworld::{generate_dataset, load_dataset, DatasetConfig, DatasetError, MotionMix, Split, EVAL_FPS};
use lapose_model::data::ClipSource;
use lapose_model::eval::{evaluate, predict_all, probe_features, PROBE_CLASSES};
use lapose_model::trainer::{run_posttrain, run_pretrain, Backbone, CurvePoint, RunOptions};
use lapose_model::{load_checkpoint, Codebook, Model, ModelError, Profile, Stage, TrainConfig};
use serde_json::json;

use manifest::{content_hash, git_commit, unix_now, RunManifest};

pub const SEED_ENV: &str = "LAPOSE_SEED";
/// Frames at which trajectory plots draw camera frustums.
pub const FRUSTUM_FRAMES: [usize; 4] = [0, 5, 10, 15];

#[derive(Debug, Parser)]
#[command(name = "lapose", version, about = "Latent-action camera pose estimation on synthetic driving clips")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic dataset split.
    Generate(GenerateArgs),
    /// Fit the codebook and train the latent action model.
    Pretrain(PretrainArgs),
    /// Train the pose head, optionally on a frozen backbone.
    Posttrain(PosttrainArgs),
    /// Evaluate pose predictions and write a report with plots.
    Eval(EvalArgs),
    /// Linear probe from latent actions to motion labels.
    Probe(ProbeArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub clips: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Dataset root; clips go under `<out>/<split>/`.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = lapose_core::synthworld::dataset::DEFAULT_REVERSE_RATE)]
    pub reverse_rate: f64,
    #[arg(long, default_value = "train")]
    pub split: Split,
    /// `default`, or `probe` for straight and turning clips only.
    #[arg(long, default_value = "default")]
    pub mix: String,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset root containing a `train/` split.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// TOML file with any subset of the training configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dotted-key override such as `model.latent_dim=16`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long, default_value = "toy")]
    pub profile: Profile,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub latent_dim: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Use only the first N training clips.
    #[arg(long)]
    pub max_clips: Option<usize>,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    /// Progress line interval in steps; 0 disables.
    #[arg(long, default_value_t = 100)]
    pub log_every: usize,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[command(flatten)]
    pub train: TrainArgs,
    /// Reuse a fitted codebook file instead of fitting one.
    #[arg(long)]
    pub codebook: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PosttrainArgs {
    #[command(flatten)]
    pub train: TrainArgs,
    /// Pretrained checkpoint directory, or `none` for a randomly initialized backbone.
    #[arg(long)]
    pub from: String,
    #[arg(long)]
    pub freeze_backbone: Option<bool>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Dataset root containing the evaluated split.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "eval")]
    pub split: Split,
    #[arg(long, default_value_t = EVAL_FPS)]
    pub fps: f64,
    #[arg(long, value_delimiter = ',', default_values_t = FPS_SWEEP.to_vec())]
    pub fps_sweep: Vec<f64>,
    /// Bucket tables printed to stdout: any of curvature, accel, motion.
    #[arg(long, value_delimiter = ',', default_values_t = vec!["curvature".to_string(), "accel".to_string()])]
    pub buckets: Vec<String>,
    /// Defaults to `<out>/plots`.
    #[arg(long)]
    pub plot_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    pub max_plots: usize,
    #[arg(long, default_value_t = 16)]
    pub batch: usize,
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    /// Checkpoint directory, or `none` for an untrained backbone.
    #[arg(long)]
    pub ckpt: String,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "eval")]
    pub split: Split,
    #[arg(long, default_value_t = EVAL_FPS)]
    pub fps: f64,
    /// Exit with status 1 when held-out accuracy falls below this fraction.
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Network size for `--ckpt none`.
    #[arg(long, default_value = "toy")]
    pub profile: Profile,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub plot_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 16)]
    pub batch: usize,
}

#[derive(Debug)]
pub enum CliError {
    /// Bad arguments, configuration or inputs.
    Invalid(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Invalid(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Invalid(m) | CliError::Runtime(m) => m,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.message())
    }
}

fn is_not_found(e: &std::io::Error) -> bool {
    e.kind() == std::io::ErrorKind::NotFound
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        let msg = e.to_string();
        match &e {
            ModelError::Config(_) | ModelError::Architecture(_) | ModelError::Shape(_) | ModelError::Target(_) | ModelError::Format(_) => {
                CliError::Invalid(msg)
            }
            ModelError::Io { source, .. } if is_not_found(source) => CliError::Invalid(msg),
            ModelError::Dataset(d) => CliError::from_dataset(d, msg),
            _ => CliError::Runtime(msg),
        }
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        let msg = e.to_string();
        CliError::from_dataset(&e, msg)
    }
}

impl CliError {
    fn from_dataset(e: &DatasetError, msg: String) -> Self {
        match e {
            DatasetError::Config(_) | DatasetError::Format { .. } => CliError::Invalid(msg),
            DatasetError::Io { source, .. } if is_not_found(source) => CliError::Invalid(msg),
            DatasetError::Io { .. } => CliError::Runtime(msg),
        }
    }
}

fn io_runtime(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Runtime(format!("{}: {e}", path.display()))
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(io_runtime(parent))?;
    }
    std::fs::write(path, contents).map_err(io_runtime(path))
}

/// What a command reports back for its run manifest.
struct Outcome {
    out_dir: PathBuf,
    config: serde_json::Value,
    seed: Option<u64>,
    outputs: Vec<String>,
    /// Set when the command succeeded but a requested check did not pass.
    check_failed: Option<String>,
}

/// Parses `args` (including the program name), runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let started = unix_now();
    let (name, out_dir) = match &cli.command {
        Command::Generate(a) => ("generate", a.out.join(a.split.name())),
        Command::Pretrain(a) => ("pretrain", a.train.out.clone()),
        Command::Posttrain(a) => ("posttrain", a.train.out.clone()),
        Command::Eval(a) => ("eval", a.out.clone()),
        Command::Probe(a) => ("probe", a.out.clone()),
    };
    let result = match cli.command {
        Command::Generate(a) => cmd_generate(&a),
        Command::Pretrain(a) => cmd_pretrain(&a),
        Command::Posttrain(a) => cmd_posttrain(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Probe(a) => cmd_probe(&a),
    };
    let (code, error, outcome) = match result {
        Ok(o) => match &o.check_failed {
            Some(m) => (1, Some(m.clone()), Some(o)),
            None => (0, None, Some(o)),
        },
        Err(e) => (e.exit_code(), Some(e.to_string()), None),
    };
    if let Some(e) = &error {
        eprintln!("error: {e}");
    }
    let config = outcome.as_ref().map_or(serde_json::Value::Null, |o| o.config.clone());
    let record = RunManifest {
        command: name.to_string(),
        args: args.iter().skip(1).map(|a| a.to_string_lossy().into_owned()).collect(),
        content_hash: content_hash(name, &config),
        config,
        seed: outcome.as_ref().and_then(|o| o.seed),
        git_commit: git_commit(),
        started_unix: started,
        finished_unix: unix_now(),
        outputs: outcome.as_ref().map_or(vec![], |o| o.outputs.clone()),
        exit_code: code,
        error,
    };
    let dir = outcome.as_ref().map_or(out_dir, |o| o.out_dir.clone());
    if dir.exists() {
        if let Err(e) = record.write(&dir) {
            eprintln!("warning: could not write run manifest: {e}");
        }
    }
    code
}

fn env_seed() -> Result<Option<u64>, CliError> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v.trim().parse().map(Some).map_err(|_| CliError::Invalid(format!("{SEED_ENV}={v} is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

/// Flag, then explicit configuration, then the environment, then the profile default.
fn resolve_seed(flag: Option<u64>, configured: bool, current: u64) -> Result<u64, CliError> {
    if let Some(s) = flag {
        return Ok(s);
    }
    if configured {
        return Ok(current);
    }
    Ok(env_seed()?.unwrap_or(current))
}

fn cmd_generate(a: &GenerateArgs) -> Result<Outcome, CliError> {
    let seed = resolve_seed(a.seed, false, 0)?;
    let mut cfg = DatasetConfig::new(a.clips, a.split, seed);
    cfg.reverse_rate = a.reverse_rate;
    cfg.mix = match a.mix.as_str() {
        "default" => MotionMix::default(),
        "probe" => MotionMix::probe(),
        other => return Err(CliError::Invalid(format!("unknown mix `{other}` (expected default|probe)"))),
    };
    let specs = generate_dataset(&cfg, &a.out, a.jobs)?;
    println!("wrote {} clips to {}", specs.len(), a.out.join(a.split.name()).display());
    Ok(Outcome {
        out_dir: a.out.join(a.split.name()),
        config: serde_json::to_value(&cfg).expect("config serializes"),
        seed: Some(seed),
        outputs: specs.iter().map(|s| s.clip_id()).collect(),
        check_failed: None,
    })
}

fn build_config(a: &TrainArgs, stage: Stage, model_from: Option<&lapose_model::ModelConfig>) -> Result<TrainConfig, CliError> {
    let mut cfg = TrainConfig::for_profile(stage, a.profile);
    let mut explicit: Vec<String> = Vec::new();
    if let Some(path) = &a.config {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Invalid(format!("{}: {e}", path.display())))?;
        explicit.extend(cfg.merge_toml(&text)?);
    }
    if let Some(m) = model_from {
        cfg.model = m.clone();
    }
    for o in &a.overrides {
        let (k, v) = o.split_once('=').ok_or_else(|| CliError::Invalid(format!("override `{o}` is not KEY=VALUE")))?;
        cfg.set(k.trim(), v.trim())?;
        explicit.push(k.trim().to_string());
    }
    if let Some(d) = a.latent_dim {
        cfg.model.latent_dim = d;
    }
    if let Some(s) = a.steps {
        cfg.steps = s;
        cfg.warmup_steps = cfg.warmup_steps.min(s.saturating_sub(1));
    }
    cfg.stage = stage;
    cfg.seed = resolve_seed(a.seed, explicit.iter().any(|k| k == "seed"), cfg.seed)?;
    cfg.validate()?;
    Ok(cfg)
}

fn train_source(a: &TrainArgs, cfg: &TrainConfig) -> Result<ClipSource, CliError> {
    let mut specs = load_dataset(&a.data, Split::Train)?;
    if let Some(n) = a.max_clips {
        specs.truncate(n.max(1));
    }
    let mut source = ClipSource::new(specs, cfg.model.clip_frames, cfg.model.patch);
    eprintln!("rendering {} clips at fps {:?}", source.len(), cfg.fps_choices);
    source.prefetch(&cfg.fps_choices, a.jobs)?;
    Ok(source)
}

fn progress<'a>(every: usize, total: usize) -> Option<Box<dyn FnMut(&CurvePoint) + 'a>> {
    (every > 0).then(|| {
        Box::new(move |p: &CurvePoint| {
            if p.step % every == 0 || p.step == total {
                eprintln!("step {}/{total} loss {:.5} lr {:.3e}", p.step, p.loss, p.lr);
            }
        }) as Box<dyn FnMut(&CurvePoint) + 'a>
    })
}

fn config_json(cfg: &TrainConfig) -> serde_json::Value {
    serde_json::to_value(cfg).expect("config serializes")
}

fn cmd_pretrain(a: &PretrainArgs) -> Result<Outcome, CliError> {
    let cfg = build_config(&a.train, Stage::Pretrain, None)?;
    let codebook = a.codebook.as_deref().map(Codebook::load).transpose()?;
    let mut source = train_source(&a.train, &cfg)?;
    write_file(&a.train.out.join("config.toml"), &cfg.to_toml())?;
    let mut opts = RunOptions { checkpoint_dir: Some(a.train.out.clone()), progress: progress(a.train.log_every, cfg.steps) };
    let out = run_pretrain(&cfg, &mut source, codebook, &Device::Cpu, &mut opts)?;
    let summary = json!({
        "initial_ce": out.initial_ce,
        "final_ce": out.final_ce,
        "uniform_ce": (cfg.model.codebook_size as f64).ln(),
        "relative_reduction": 1.0 - out.final_ce / out.initial_ce,
        "codebook_sha256": out.codebook.hash(),
    });
    write_file(&a.train.out.join("summary.json"), &serde_json::to_string_pretty(&summary).expect("json"))?;
    println!("cross-entropy {:.4} -> {:.4} ({:.1}% lower)", out.initial_ce, out.final_ce, 100.0 * (1.0 - out.final_ce / out.initial_ce));
    Ok(Outcome {
        out_dir: a.train.out.clone(),
        config: config_json(&cfg),
        seed: Some(cfg.seed),
        outputs: vec!["final".into(), "loss.csv".into(), "config.toml".into(), "summary.json".into()],
        check_failed: None,
    })
}

/// A checkpoint directory, or a training output directory holding `final/`.
pub fn resolve_checkpoint(path: &Path) -> Result<PathBuf, CliError> {
    let direct = path.join(lapose_model::checkpoint::MANIFEST_FILE);
    if direct.is_file() {
        return Ok(path.to_path_buf());
    }
    let nested = path.join("final");
    if nested.join(lapose_model::checkpoint::MANIFEST_FILE).is_file() {
        return Ok(nested);
    }
    Err(CliError::Invalid(format!("no checkpoint at {}", path.display())))
}

fn cmd_posttrain(a: &PosttrainArgs) -> Result<Outcome, CliError> {
    let ckpt = match a.from.as_str() {
        "none" => None,
        p => Some(resolve_checkpoint(Path::new(p))?),
    };
    let ckpt_model = match &ckpt {
        Some(dir) => Some(lapose_model::checkpoint::read_manifest(dir)?.config.model),
        None => None,
    };
    let mut cfg = build_config(&a.train, Stage::Posttrain, ckpt_model.as_ref())?;
    if let Some(f) = a.freeze_backbone {
        cfg.freeze_backbone = f;
    }
    let mut source = train_source(&a.train, &cfg)?;
    write_file(&a.train.out.join("config.toml"), &cfg.to_toml())?;
    let backbone = match &ckpt {
        Some(dir) => Backbone::Checkpoint(dir),
        None => Backbone::Random,
    };
    let mut opts = RunOptions { checkpoint_dir: Some(a.train.out.clone()), progress: progress(a.train.log_every, cfg.steps) };
    let out = run_posttrain(&cfg, &mut source, backbone, &Device::Cpu, &mut opts)?;
    let summary = json!({
        "from": a.from,
        "freeze_backbone": cfg.freeze_backbone,
        "backbone_hash_before": out.backbone_hash_before,
        "backbone_hash_after": out.backbone_hash_after,
        "final_loss": out.curve.last().map(|p| p.loss),
    });
    write_file(&a.train.out.join("summary.json"), &serde_json::to_string_pretty(&summary).expect("json"))?;
    if cfg.freeze_backbone && out.backbone_hash_before != out.backbone_hash_after {
        return Err(CliError::Runtime("frozen backbone changed during post-training".into()));
    }
    Ok(Outcome {
        out_dir: a.train.out.clone(),
        config: config_json(&cfg),
        seed: Some(cfg.seed),
        outputs: vec!["final".into(), "loss.csv".into(), "config.toml".into(), "summary.json".into()],
        check_failed: None,
    })
}

fn eval_source(data: &Path, split: Split, model: &Model) -> Result<ClipSource, CliError> {
    let specs = load_dataset(data, split)?;
    Ok(ClipSource::new(specs, model.cfg.clip_frames, model.cfg.patch))
}

fn bucket_table<K: std::fmt::Debug>(name: &str, rows: &std::collections::BTreeMap<K, lapose_core::metrics::report::Bucket>) -> String {
    let mut s = format!("| {name} | clips | AUC@5 |\n|---|---|---|\n");
    for (k, b) in rows {
        let f = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.2}"));
        s.push_str(&format!("| {k:?} | {} | {} |\n", b.n_clips, f(b.mean_auc5)));
    }
    s
}

fn print_report(report: &EvalReport, buckets: &[String]) -> Result<(), CliError> {
    let a = &report.aggregate;
    let f = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.3}"));
    println!("clips {}  AUC@5 {}  ATE-S {}  ATE-M {}  filtered {}", a.n_clips, f(a.mean_auc5), f(a.mean_ate_s), f(a.mean_ate_m), a.n_filtered);
    for b in buckets {
        match b.as_str() {
            "curvature" => println!("{}", bucket_table("curvature", &report.by_curvature)),
            "accel" => println!("{}", bucket_table("acceleration", &report.by_accel)),
            "motion" => println!("{}", bucket_table("motion", &report.by_motion_kind)),
            other => return Err(CliError::Invalid(format!("unknown bucket `{other}` (expected curvature|accel|motion)"))),
        }
    }
    if !report.fps_sweep.is_empty() {
        println!("{}", report.fps_table());
    }
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> Result<Outcome, CliError> {
    if a.fps < 1.0 || a.fps_sweep.iter().any(|f| *f < 1.0) {
        return Err(CliError::Invalid("frame rates must be at least 1".into()));
    }
    let ckpt = resolve_checkpoint(&a.ckpt)?;
    let (model, _, _) = load_checkpoint(&ckpt, &Device::Cpu)?;
    let mut source = eval_source(&a.data, a.split, &model)?;
    let report = evaluate(&model, &mut source, a.fps, &a.fps_sweep, a.batch)?;
    write_file(&a.out.join("report.json"), &report.to_json())?;
    write_file(&a.out.join("clips.csv"), &report.clips_csv())?;
    write_file(&a.out.join("fps_table.md"), &report.fps_table())?;
    let plot_dir = a.plot_dir.clone().unwrap_or_else(|| a.out.join("plots"));
    write_file(&plot_dir.join("auc_histogram.svg"), &plot::histogram_svg("AUC@5 across clips", &report.auc_histogram))?;
    let n = a.max_plots.min(source.len());
    let mut subset = ClipSource::new(source.specs()[..n].to_vec(), model.cfg.clip_frames, model.cfg.patch);
    let mut plots = Vec::new();
    for p in predict_all(&model, &mut subset, a.fps, a.batch)? {
        let spec = &subset.specs()[p.clip];
        let gt = subset.ground_truth(p.clip, a.fps)?;
        let gt_traj = compose_trajectory(&gt.metric, None);
        let pred_traj = compose_trajectory(&p.pose.to_sequence(a.fps), Some(MetricScale(p.pose.scale)));
        let auc = report.clips[p.clip].auc5.map_or("-".into(), |v| format!("{v:.1}"));
        let title = format!("{} ({}) AUC@5 {auc}", spec.clip_id(), spec.motion.kind.name());
        let name = format!("traj_{}.svg", spec.clip_id());
        write_file(&plot_dir.join(&name), &plot::trajectory_svg(&title, &gt_traj, &pred_traj, &FRUSTUM_FRAMES))?;
        plots.push(name);
    }
    print_report(&report, &a.buckets)?;
    let mut outputs = vec!["report.json".to_string(), "clips.csv".into(), "fps_table.md".into()];
    outputs.extend(std::iter::once("auc_histogram.svg".to_string()).chain(plots).map(|p| plot_dir.join(p).display().to_string()));
    Ok(Outcome {
        out_dir: a.out.clone(),
        config: json!({"ckpt": ckpt, "data": a.data, "split": a.split, "fps": a.fps, "fps_sweep": a.fps_sweep, "buckets": a.buckets}),
        seed: None,
        outputs,
        check_failed: None,
    })
}

fn cmd_probe(a: &ProbeArgs) -> Result<Outcome, CliError> {
    if let Some(t) = a.threshold {
        if !(0.0..=1.0).contains(&t) {
            return Err(CliError::Invalid(format!("threshold {t} must be a fraction in [0, 1]")));
        }
    }
    let seed = resolve_seed(a.seed, false, 0)?;
    let model = match a.ckpt.as_str() {
        "none" => Model::new(&TrainConfig::for_profile(Stage::Pretrain, a.profile).model, seed, &Device::Cpu)?,
        p => load_checkpoint(&resolve_checkpoint(Path::new(p))?, &Device::Cpu)?.0,
    };
    let mut source = eval_source(&a.data, a.split, &model)?;
    let (features, labels) = probe_features(&model, &mut source, a.fps, a.batch)?;
    let cfg = ProbeConfig { seed, ..ProbeConfig::default() };
    let result = latent_probe(&features, &labels, &cfg).map_err(|e| CliError::Invalid(e.to_string()))?;
    let names: Vec<&str> = PROBE_CLASSES.iter().map(|k| k.name()).collect();
    let points = pca_2d(&features).map_err(|e| CliError::Runtime(e.to_string()))?;
    let plot_dir = a.plot_dir.clone().unwrap_or_else(|| a.out.join("plots"));
    let title = format!("latent actions, probe accuracy {:.1}%", 100.0 * result.accuracy);
    write_file(&plot_dir.join("latent_scatter.svg"), &plot::scatter_svg(&title, &points, &labels, &names))?;
    let summary = json!({
        "ckpt": a.ckpt,
        "classes": names,
        "accuracy": result.accuracy,
        "train_accuracy": result.train_accuracy,
        "n_train": result.n_train,
        "n_test": result.n_test,
        "confusion": result.confusion,
        "threshold": a.threshold,
    });
    write_file(&a.out.join("probe.json"), &serde_json::to_string_pretty(&summary).expect("json"))?;
    println!("probe accuracy {:.1}% on {} held-out clips (train {:.1}%)", 100.0 * result.accuracy, result.n_test, 100.0 * result.train_accuracy);
    let check_failed = a
        .threshold
        .filter(|t| result.accuracy < *t)
        .map(|t| format!("probe accuracy {:.3} below threshold {t}", result.accuracy));
    Ok(Outcome {
        out_dir: a.out.clone(),
        config: json!({"ckpt": a.ckpt, "data": a.data, "split": a.split, "fps": a.fps, "profile": a.profile, "probe": cfg}),
        seed: Some(seed),
        outputs: vec!["probe.json".into(), plot_dir.join("latent_scatter.svg").display().to_string()],
        check_failed,
    })
}
