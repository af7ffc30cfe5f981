//! Fine-tuning with Adam on binary cross-entropy, plus the on-disk model
//! artifact: `descriptor.json`, `weights.bin` and `checksum.txt`.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use tracing::info;

use crate::datapipe::{BatchStream, DataError};
use crate::faces::DEFAULT_CROP_MARGIN;
use crate::ingest::DEFAULT_CROP_SIZE;
use crate::model::{build_model, Backbone, Classifier, Gradient, HeadOutput, ModelConfig, ModelError};
use crate::scalar::decode_blob;
use crate::Scalar;

pub const FORMAT_VERSION: u32 = 1;
pub const DESCRIPTOR_FILE: &str = "descriptor.json";
pub const WEIGHTS_FILE: &str = "weights.bin";
pub const CHECKSUM_FILE: &str = "checksum.txt";
/// Samples per gradient work unit. Fixed so the reduction order, and hence
/// the result, does not depend on the thread count.
const GRAD_CHUNK: usize = 4;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("{0} stream is empty")]
    EmptyStream(&'static str),
    #[error("stream target size {stream} does not match model input size {model}")]
    SizeMismatch { stream: u32, model: u32 },
    #[error("loss became non-finite in epoch {epoch}")]
    Diverged { epoch: usize },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Artifact(#[from] ArtifactError),
}

#[derive(Debug, Error)]
pub enum ArtifactError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid descriptor: {0}")]
    Format(String),
    #[error("unsupported version {found} (this build reads version {FORMAT_VERSION})")]
    UnsupportedVersion { found: u64 },
    #[error("checksum mismatch: expected {expected}, weights hash to {actual}")]
    ChecksumMismatch { expected: String, actual: String },
    #[error("weights blob does not decode as {dtype}")]
    Blob { dtype: String },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    /// Parameter-initialisation seed; overrides the model config's seed.
    pub seed: u64,
    /// When set, the best model so far is exported here after each
    /// improving epoch.
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            learning_rate: 1e-4,
            epochs: 10,
            seed: 0,
            checkpoint_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.epochs == 0 {
            return Err(TrainError::Config("epochs must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    /// Parameters from the epoch with the best validation accuracy.
    pub model: Classifier<T>,
    pub history: Vec<EpochRecord>,
    /// 1-based epoch the returned parameters come from.
    pub best_epoch: usize,
}

/// Adam with the usual defaults (β1 0.9, β2 0.999, ε 1e-8).
#[derive(Debug, Clone)]
pub struct Adam<T> {
    lr: T,
    b1: T,
    b2: T,
    eps: T,
    t: i32,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(model: &Classifier<T>, learning_rate: f64) -> Self {
        let zeros: Vec<Vec<T>> = model.params().iter().map(|p| vec![T::zero(); p.len()]).collect();
        Self {
            lr: T::of(learning_rate),
            b1: T::of(0.9),
            b2: T::of(0.999),
            eps: T::of(1e-8),
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, model: &mut Classifier<T>, grad: &Gradient<T>) {
        self.t += 1;
        let c1 = T::one() - self.b1.powi(self.t);
        let c2 = T::one() - self.b2.powi(self.t);
        let one = T::one();
        for (((p, g), m), v) in model.params_mut().into_iter().zip(&grad.0).zip(&mut self.m).zip(&mut self.v) {
            for i in 0..p.len() {
                m[i] = self.b1 * m[i] + (one - self.b1) * g[i];
                v[i] = self.b2 * v[i] + (one - self.b2) * g[i] * g[i];
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                p[i] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

/// Mean loss, correct count and mean gradient over a batch.
pub fn batch_gradient<T: Scalar>(
    model: &Classifier<T>,
    pixels: &[T],
    labels: &[T],
) -> (T, usize, Gradient<T>) {
    let per = model.sample_len();
    let half = T::of(0.5);
    let parts: Vec<(T, usize, Gradient<T>)> = labels
        .par_chunks(GRAD_CHUNK)
        .zip(pixels.par_chunks(per * GRAD_CHUNK))
        .map(|(ys, xs)| {
            let mut acc: Option<(T, usize, Gradient<T>)> = None;
            for (&y, x) in ys.iter().zip(xs.chunks(per)) {
                let (l, p, g) = model.loss_and_gradient(x, y);
                let hit = usize::from((p >= half) == (y >= half));
                match &mut acc {
                    None => acc = Some((l, hit, g)),
                    Some((al, ah, ag)) => {
                        *al += l;
                        *ah += hit;
                        ag.add_assign(&g);
                    }
                }
            }
            acc.expect("chunks are non-empty")
        })
        .collect();
    let mut it = parts.into_iter();
    let (mut loss, mut hits, mut grad) = it.next().expect("batch is non-empty");
    for (l, h, g) in it {
        loss += l;
        hits += h;
        grad.add_assign(&g);
    }
    let n = T::of(labels.len() as f64);
    grad.scale(T::one() / n);
    (loss / n, hits, grad)
}

fn bce<T: Scalar>(p: T, y: T) -> T {
    let eps = T::of(1e-12);
    let p = p.max(eps).min(T::one() - eps);
    -(y * p.ln() + (T::one() - y) * (T::one() - p).ln())
}

/// Mean loss and accuracy of `model` over one pass of `stream`.
pub fn evaluate_stream<T: Scalar>(model: &Classifier<T>, stream: &mut BatchStream<T>) -> Result<(f64, f64), TrainError> {
    let half = T::of(0.5);
    let (mut loss, mut hits, mut n) = (0.0, 0usize, 0usize);
    for batch in stream.epoch() {
        let batch = batch?;
        let probs = model.predict(&batch.pixels, batch.len())?;
        for (&p, &y) in probs.iter().zip(&batch.labels) {
            loss += bce(p, y).as_f64();
            hits += usize::from((p >= half) == (y >= half));
        }
        n += batch.len();
    }
    Ok((loss / n as f64, hits as f64 / n as f64))
}

/// Builds a model from `config` (seeded with `tcfg.seed`) and fits it.
pub fn train<T: Scalar>(
    config: &ModelConfig,
    train_stream: &mut BatchStream<T>,
    val_stream: &mut BatchStream<T>,
    tcfg: &TrainConfig,
) -> Result<TrainOutcome<T>, TrainError> {
    let model = build_model(&config.clone().with_seed(tcfg.seed))?;
    fit(model, train_stream, val_stream, tcfg)
}

/// Trains an existing model, e.g. one with bound pretrained weights.
pub fn fit<T: Scalar>(
    mut model: Classifier<T>,
    train_stream: &mut BatchStream<T>,
    val_stream: &mut BatchStream<T>,
    tcfg: &TrainConfig,
) -> Result<TrainOutcome<T>, TrainError> {
    tcfg.validate()?;
    for (name, s) in [("train", &*train_stream), ("validation", &*val_stream)] {
        if s.is_empty() {
            return Err(TrainError::EmptyStream(name));
        }
        if s.config().target_size != model.input_size() {
            return Err(TrainError::SizeMismatch {
                stream: s.config().target_size,
                model: model.input_size(),
            });
        }
    }

    let mut opt = Adam::new(&model, tcfg.learning_rate);
    let mut history = Vec::with_capacity(tcfg.epochs);
    let mut best: Option<(f64, usize, Vec<T>)> = None;
    for epoch in 1..=tcfg.epochs {
        let (mut loss_sum, mut hits, mut n) = (0.0, 0usize, 0usize);
        for batch in train_stream.epoch() {
            let batch = batch?;
            let (loss, h, grad) = batch_gradient(&model, &batch.pixels, &batch.labels);
            if !loss.is_finite() {
                return Err(TrainError::Diverged { epoch });
            }
            opt.step(&mut model, &grad);
            loss_sum += loss.as_f64() * batch.len() as f64;
            hits += h;
            n += batch.len();
        }
        let (val_loss, val_accuracy) = evaluate_stream(&model, val_stream)?;
        if !val_loss.is_finite() {
            return Err(TrainError::Diverged { epoch });
        }
        let rec = EpochRecord {
            epoch,
            train_loss: loss_sum / n as f64,
            train_accuracy: hits as f64 / n as f64,
            val_loss,
            val_accuracy,
        };
        info!(epoch, train_loss = rec.train_loss, val_accuracy, "epoch done");
        history.push(rec);

        if best.as_ref().is_none_or(|(acc, _, _)| val_accuracy > *acc) {
            best = Some((val_accuracy, epoch, model.flat_params()));
            if let Some(dir) = &tcfg.checkpoint_dir {
                export_model(&model, &Preprocessing::for_model(&model), dir)?;
            }
        }
    }
    let (_, best_epoch, params) = best.expect("at least one epoch");
    model.set_flat_params(&params)?;
    Ok(TrainOutcome {
        model,
        history,
        best_epoch,
    })
}

/// How crops must be prepared before they reach the network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Preprocessing {
    pub input_size: u32,
    /// Always `"unit_range"`: bytes divided by 255.
    pub normalization: String,
    pub crop_margin: f64,
    pub crop_size: u32,
}

impl Preprocessing {
    pub fn for_model<T: Scalar>(model: &Classifier<T>) -> Self {
        Self {
            input_size: model.input_size(),
            normalization: "unit_range".into(),
            crop_margin: DEFAULT_CROP_MARGIN,
            crop_size: DEFAULT_CROP_SIZE,
        }
    }
}

/// Contents of `descriptor.json`. Every field is required.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Descriptor {
    pub format_version: u32,
    pub backbone: Backbone,
    pub input_size: u32,
    pub head_output: HeadOutput,
    pub head_hidden_units: usize,
    pub width_multiplier: f64,
    pub init_seed: u64,
    pub pretrained: bool,
    pub normalization: String,
    pub crop_margin: f64,
    pub crop_size: u32,
    pub positive_class: String,
    pub dtype: String,
    pub param_count: usize,
}

impl Descriptor {
    pub fn model_config(&self) -> ModelConfig {
        let mut cfg = ModelConfig::new(self.backbone)
            .with_head(self.head_output, self.head_hidden_units)
            .with_width(self.width_multiplier)
            .with_seed(self.init_seed);
        cfg.backbone.pretrained = self.pretrained;
        cfg
    }

    pub fn preprocessing(&self) -> Preprocessing {
        Preprocessing {
            input_size: self.input_size,
            normalization: self.normalization.clone(),
            crop_margin: self.crop_margin,
            crop_size: self.crop_size,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelArtifact {
    pub path: PathBuf,
    pub descriptor: Descriptor,
    /// Lower-case hex SHA-256 of `weights.bin`.
    pub checksum: String,
}

impl ModelArtifact {
    pub fn model_id(&self) -> &str {
        &self.checksum[..12]
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ArtifactError + '_ {
    move |source| ArtifactError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes the artifact directory, creating it if needed.
pub fn export_model<T: Scalar>(
    model: &Classifier<T>,
    prep: &Preprocessing,
    dir: &Path,
) -> Result<ModelArtifact, ArtifactError> {
    if prep.input_size != model.input_size() {
        return Err(ArtifactError::Format(format!(
            "preprocessing input_size {} differs from model input size {}",
            prep.input_size,
            model.input_size()
        )));
    }
    let cfg = model.config();
    let descriptor = Descriptor {
        format_version: FORMAT_VERSION,
        backbone: cfg.backbone.name,
        input_size: cfg.input_size(),
        head_output: cfg.head_output,
        head_hidden_units: cfg.head_hidden_units,
        width_multiplier: cfg.width_multiplier,
        init_seed: cfg.init_seed,
        pretrained: cfg.backbone.pretrained,
        normalization: prep.normalization.clone(),
        crop_margin: prep.crop_margin,
        crop_size: prep.crop_size,
        positive_class: "FAKE".into(),
        dtype: T::DTYPE.into(),
        param_count: model.param_count(),
    };
    let mut blob = Vec::with_capacity(model.param_count() * T::BYTES);
    for v in model.flat_params() {
        v.write_le(&mut blob);
    }
    let checksum = sha256_hex(&blob);

    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let p = dir.join(WEIGHTS_FILE);
    fs::write(&p, &blob).map_err(io_err(&p))?;
    let p = dir.join(CHECKSUM_FILE);
    fs::write(&p, format!("{checksum}\n")).map_err(io_err(&p))?;
    let p = dir.join(DESCRIPTOR_FILE);
    let json = serde_json::to_string_pretty(&descriptor).expect("descriptor serializes");
    fs::write(&p, json + "\n").map_err(io_err(&p))?;
    Ok(ModelArtifact {
        path: dir.to_path_buf(),
        descriptor,
        checksum,
    })
}

/// A verified, ready-to-serve model.
#[derive(Debug, Clone)]
pub struct LoadedModel<T> {
    pub model: Classifier<T>,
    pub artifact: ModelArtifact,
}

impl<T: Scalar> LoadedModel<T> {
    pub fn model_id(&self) -> &str {
        self.artifact.model_id()
    }

    pub fn preprocessing(&self) -> Preprocessing {
        self.artifact.descriptor.preprocessing()
    }
}

/// Reads and verifies an artifact directory.
pub fn load_model<T: Scalar>(dir: &Path) -> Result<LoadedModel<T>, ArtifactError> {
    let p = dir.join(DESCRIPTOR_FILE);
    let text = fs::read_to_string(&p).map_err(io_err(&p))?;
    let raw: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| ArtifactError::Format(e.to_string()))?;
    match raw.get("format_version").and_then(serde_json::Value::as_u64) {
        Some(v) if v == FORMAT_VERSION as u64 => {}
        Some(found) => return Err(ArtifactError::UnsupportedVersion { found }),
        None => return Err(ArtifactError::Format("missing field `format_version`".into())),
    }
    let descriptor: Descriptor =
        serde_json::from_value(raw).map_err(|e| ArtifactError::Format(e.to_string()))?;
    if descriptor.positive_class != "FAKE" {
        return Err(ArtifactError::Format(format!(
            "positive_class must be FAKE, got {}",
            descriptor.positive_class
        )));
    }
    if descriptor.normalization != "unit_range" {
        return Err(ArtifactError::Format(format!(
            "unknown normalization `{}`",
            descriptor.normalization
        )));
    }

    let p = dir.join(WEIGHTS_FILE);
    let blob = fs::read(&p).map_err(io_err(&p))?;
    let p = dir.join(CHECKSUM_FILE);
    let expected = fs::read_to_string(&p).map_err(io_err(&p))?.trim().to_ascii_lowercase();
    let actual = sha256_hex(&blob);
    if expected != actual {
        return Err(ArtifactError::ChecksumMismatch { expected, actual });
    }

    let values = decode_blob::<T>(&descriptor.dtype, &blob).ok_or_else(|| ArtifactError::Blob {
        dtype: descriptor.dtype.clone(),
    })?;
    let config = descriptor.model_config();
    if config.input_size() != descriptor.input_size {
        return Err(ArtifactError::Format(format!(
            "input_size {} does not match backbone {}",
            descriptor.input_size,
            descriptor.backbone.as_str()
        )));
    }
    let mut model = build_model::<T>(&config)?;
    model.set_flat_params(&values)?;
    Ok(LoadedModel {
        model,
        artifact: ModelArtifact {
            path: dir.to_path_buf(),
            descriptor,
            checksum: actual,
        },
    })
}
