//! The `veriframe` command.
//!
//! Exit codes: 0 on success, 1 when a command fails, 2 on usage errors.
//! Diagnostics go to standard error; data goes to files or standard output.

pub mod config;

use std::io::Write;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use veriframe::datapipe::{BatchStream, StreamConfig};
use veriframe::evaluator::{compare_models, evaluate, reference_results, ModelResult};
use veriframe::faces::DetectorRegistry;
use veriframe::ingest::{ingest_videos, read_index, IngestOptions, SamplingMode};
use veriframe::manifest::{load_manifest, Split};
use veriframe::model::{build_model, Backbone, HeadOutput, ModelConfig};
use veriframe::service::{classify_media, PredictParams};
use veriframe::trainer::{export_model, load_model, train, Preprocessing, TrainConfig};
use veriframe::video::detect_media_kind;
use veriframe::{Real, Scalar};
use veriframe_server::{AppState, ServerConfig};

use crate::config::CliConfig;

type BoxError = Box<dyn std::error::Error + Send + Sync>;

#[derive(Debug, Parser)]
#[command(name = "veriframe", version, about = "Detect GAN-generated faces in images and videos")]
pub struct Cli {
    /// Config file; defaults to ./veriframe.toml when present.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Log progress to standard error (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample frames from labelled videos and write face crops plus index.csv.
    Ingest(IngestArgs),
    /// Train a classifier on an ingested corpus and export the best model.
    Train(TrainArgs),
    /// Score a sample of the test split and write report.csv / report.json.
    Evaluate(EvaluateArgs),
    /// Export an initialised or re-encoded model artifact.
    Export(ExportArgs),
    /// Run the HTTP inference API.
    Serve(ServeArgs),
    /// Classify one image or video and print the report as JSON.
    Predict(PredictArgs),
    /// Compare confusion matrices of several models.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    /// Manifest CSV (name,label,split,original).
    #[arg(long)]
    pub manifest: PathBuf,
    /// Directory holding the videos named in the manifest.
    #[arg(long)]
    pub videos: PathBuf,
    /// Output corpus directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub frames: Option<usize>,
    #[arg(long)]
    pub sampling: Option<SamplingMode>,
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long)]
    pub detector: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// index.csv written by `ingest`.
    #[arg(long)]
    pub index: PathBuf,
    /// Artifact directory for the best model.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub backbone: Option<Backbone>,
    #[arg(long)]
    pub head: Option<HeadOutput>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub width: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub checkpoint_dir: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub artifact: PathBuf,
    #[arg(long)]
    pub index: PathBuf,
    /// Test samples to draw.
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Directory for report.csv and report.json.
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
    /// Row name in the report; defaults to the backbone.
    #[arg(long)]
    pub name: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    /// Re-export this artifact instead of initialising a new model.
    #[arg(long)]
    pub artifact: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub backbone: Option<Backbone>,
    #[arg(long)]
    pub head: Option<HeadOutput>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub width: Option<f64>,
    /// Weight precision: f32 or f64.
    #[arg(long, default_value = "f64")]
    pub dtype: String,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub artifact: Option<PathBuf>,
    #[arg(long)]
    pub port: Option<u16>,
    #[arg(long)]
    pub host: Option<std::net::IpAddr>,
    #[arg(long)]
    pub detector: Option<String>,
    #[arg(long)]
    pub max_upload_mb: Option<u64>,
    /// Accepted for uniformity; request seeds come from the query string.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub artifact: Option<PathBuf>,
    #[arg(long)]
    pub file: PathBuf,
    #[arg(long)]
    pub frames: Option<usize>,
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub detector: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// JSON list of {model, confusion: {tp, fp, tn, fn}, claimed_accuracy_pct};
    /// the published reference counts are used when omitted.
    #[arg(long)]
    pub results: Option<PathBuf>,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
    /// Accepted for uniformity; reports involve no sampling.
    #[arg(long)]
    pub seed: Option<u64>,
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => tracing::Level::WARN,
        1 => tracing::Level::INFO,
        _ => tracing::Level::DEBUG,
    };
    let _ = tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_max_level(level)
        .try_init();
}

/// Parses `argv` (including the program name) and runs the command.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    init_logging(cli.verbose);
    let cfg = match CliConfig::discover(cli.config.as_deref()) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return 2;
        }
    };
    match dispatch(cli.command, cfg) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn dispatch(command: Command, cfg: CliConfig) -> Result<(), BoxError> {
    match command {
        Command::Ingest(a) => cmd_ingest(a, cfg),
        Command::Train(a) => cmd_train(a, cfg),
        Command::Evaluate(a) => cmd_evaluate(a, cfg),
        Command::Export(a) => cmd_export(a, cfg),
        Command::Serve(a) => cmd_serve(a, cfg),
        Command::Predict(a) => cmd_predict(a, cfg),
        Command::Report(a) => cmd_report(a),
    }
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<(), BoxError> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

fn cmd_ingest(a: IngestArgs, cfg: CliConfig) -> Result<(), BoxError> {
    let manifest = load_manifest(&a.manifest)?;
    let detector = DetectorRegistry::default().create(a.detector.as_deref().unwrap_or(&cfg.faces.backend))?;
    let opts = IngestOptions {
        frames_per_video: a.frames.unwrap_or(cfg.ingest.frames_per_video),
        sampling: a.sampling.unwrap_or(cfg.ingest.sampling),
        seed: a.seed.unwrap_or(cfg.seed),
        crop_size: cfg.faces.crop_size,
        crop_margin: cfg.faces.crop_margin,
        workers: a.workers.or(cfg.ingest.workers),
    };
    let report = ingest_videos(&manifest, &a.videos, &a.out, &opts, detector.as_ref())?;
    print_json(&report)
}

fn model_config(
    cfg: &CliConfig,
    backbone: Option<Backbone>,
    head: Option<HeadOutput>,
    hidden: Option<usize>,
    width: Option<f64>,
    seed: u64,
) -> ModelConfig {
    ModelConfig::new(backbone.unwrap_or(cfg.model.backbone))
        .with_head(head.unwrap_or(cfg.model.head_output), hidden.unwrap_or(cfg.model.head_hidden_units))
        .with_width(width.unwrap_or(cfg.model.width_multiplier))
        .with_seed(seed)
}

fn preprocessing(cfg: &CliConfig, input_size: u32) -> Preprocessing {
    Preprocessing {
        input_size,
        normalization: "unit_range".into(),
        crop_margin: cfg.faces.crop_margin,
        crop_size: cfg.faces.crop_size,
    }
}

fn cmd_train(a: TrainArgs, cfg: CliConfig) -> Result<(), BoxError> {
    let seed = a.seed.unwrap_or(cfg.seed);
    let mcfg = model_config(&cfg, a.backbone, a.head, a.hidden, a.width, seed);
    mcfg.validate()?;
    let index = read_index(&a.index)?;
    let batch_size = a.batch_size.unwrap_or(cfg.datapipe.batch_size);
    let stream = |split: Split, shuffle: Option<u64>, augment: bool| {
        let mut s = StreamConfig::new(split, mcfg.input_size())
            .with_batch_size(batch_size)
            .with_seed(shuffle);
        s.cache = cfg.datapipe.cache;
        s.prefetch_depth = cfg.datapipe.prefetch_depth;
        s.augment = augment;
        BatchStream::<Real>::new(&index, s)
    };
    let mut train_stream = stream(Split::Train, Some(seed), cfg.datapipe.augment)?;
    let mut val_stream = stream(Split::Val, None, false)?;
    let tcfg = TrainConfig {
        batch_size,
        learning_rate: a.lr.unwrap_or(cfg.train.learning_rate),
        epochs: a.epochs.unwrap_or(cfg.train.epochs),
        seed,
        checkpoint_dir: a.checkpoint_dir.or(cfg.train.checkpoint_dir.clone()),
    };
    let outcome = train(&mcfg, &mut train_stream, &mut val_stream, &tcfg)?;
    let artifact = export_model(&outcome.model, &preprocessing(&cfg, mcfg.input_size()), &a.out)?;
    print_json(&serde_json::json!({
        "artifact": artifact.path,
        "model_id": artifact.model_id(),
        "best_epoch": outcome.best_epoch,
        "history": outcome.history,
    }))
}

fn cmd_evaluate(a: EvaluateArgs, cfg: CliConfig) -> Result<(), BoxError> {
    let loaded = load_model::<Real>(&a.artifact)?;
    let index = read_index(&a.index)?;
    let eval = evaluate(
        &loaded.model,
        &index,
        a.n.unwrap_or(cfg.evaluator.n),
        a.seed.unwrap_or(cfg.seed),
        a.threshold.unwrap_or(cfg.evaluator.threshold),
    )?;
    let name = a
        .name
        .unwrap_or_else(|| loaded.artifact.descriptor.backbone.as_str().to_string());
    let report = compare_models(&[ModelResult {
        model: name,
        confusion: eval.confusion,
        claimed_accuracy_pct: None,
    }])?;
    report.write(&a.out)?;
    print_json(&eval)
}

fn export_as<T: Scalar>(a: &ExportArgs, cfg: &CliConfig) -> Result<veriframe::trainer::ModelArtifact, BoxError> {
    Ok(match &a.artifact {
        Some(src) => {
            let loaded = load_model::<T>(src)?;
            export_model(&loaded.model, &loaded.artifact.descriptor.preprocessing(), &a.out)?
        }
        None => {
            let mcfg = model_config(cfg, a.backbone, a.head, a.hidden, a.width, a.seed.unwrap_or(cfg.seed));
            let model = build_model::<T>(&mcfg)?;
            export_model(&model, &preprocessing(cfg, mcfg.input_size()), &a.out)?
        }
    })
}

fn cmd_export(a: ExportArgs, cfg: CliConfig) -> Result<(), BoxError> {
    let artifact = match a.dtype.as_str() {
        "f32" => export_as::<f32>(&a, &cfg)?,
        "f64" => export_as::<f64>(&a, &cfg)?,
        other => return Err(format!("unknown dtype `{other}` (expected f32 or f64)").into()),
    };
    print_json(&serde_json::json!({
        "artifact": artifact.path,
        "model_id": artifact.model_id(),
        "checksum": artifact.checksum,
        "descriptor": artifact.descriptor,
    }))
}

fn server_config(cfg: &CliConfig, artifact: Option<PathBuf>, detector: Option<String>) -> ServerConfig {
    let mut s = cfg.service.clone();
    if artifact.is_some() {
        s.model_artifact = artifact;
    }
    if let Some(d) = detector {
        s.detector = d;
    }
    s
}

fn cmd_serve(a: ServeArgs, cfg: CliConfig) -> Result<(), BoxError> {
    let mut scfg = server_config(&cfg, a.artifact, a.detector);
    if let Some(p) = a.port {
        scfg.port = p;
    }
    if let Some(m) = a.max_upload_mb {
        scfg.max_upload_mb = m;
    }
    let state = Arc::new(AppState::new(&scfg, &DetectorRegistry::default())?);
    let host = a.host.unwrap_or(std::net::IpAddr::from([0, 0, 0, 0]));
    let addr = SocketAddr::new(host, scfg.port);
    eprintln!("serving on http://{addr}");
    tokio::runtime::Runtime::new()?.block_on(veriframe_server::serve(state, addr))?;
    Ok(())
}

fn cmd_predict(a: PredictArgs, cfg: CliConfig) -> Result<(), BoxError> {
    let scfg = server_config(&cfg, a.artifact, a.detector);
    let artifact = scfg
        .model_artifact
        .ok_or("no model artifact: pass --artifact or set service.model_artifact")?;
    let loaded = load_model::<Real>(&artifact)?;
    let detector = DetectorRegistry::default().create(&scfg.detector)?;
    let payload = std::fs::read(&a.file).map_err(|e| format!("{}: {e}", a.file.display()))?;
    let name = a.file.file_name().and_then(|n| n.to_str());
    let kind = detect_media_kind(&payload, name)
        .ok_or_else(|| format!("{}: unsupported media type", a.file.display()))?;
    let defaults = PredictParams::default();
    let params = PredictParams {
        frames: a.frames.unwrap_or(defaults.frames),
        threshold: a.threshold.unwrap_or(defaults.threshold),
        seed: Some(a.seed.unwrap_or(cfg.seed)),
    };
    let report = classify_media(&payload, kind, &loaded, detector.as_ref(), &params)?;
    print_json(&report)
}

fn cmd_report(a: ReportArgs) -> Result<(), BoxError> {
    let results: Vec<ModelResult> = match &a.results {
        Some(p) => serde_json::from_slice(&std::fs::read(p).map_err(|e| format!("{}: {e}", p.display()))?)?,
        None => reference_results(),
    };
    let report = compare_models(&results)?;
    report.write(&a.out)?;
    print_json(&report)
}
