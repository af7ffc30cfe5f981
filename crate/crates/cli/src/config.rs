//! Layered configuration: defaults, then `veriframe.toml`, then
//! `VERIFRAME_*` environment variables. Command-line flags are applied last
//! by each subcommand.
//!
//! Environment names map onto keys by dropping the prefix, lower-casing and
//! replacing the first `_` with `.`: `VERIFRAME_SERVICE_MAX_UPLOAD_MB` sets
//! `service.max_upload_mb` and `VERIFRAME_SEED` sets `seed`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::{Table, Value};
use veriframe::faces::DEFAULT_CROP_MARGIN;
use veriframe::ingest::{SamplingMode, DEFAULT_CROP_SIZE, DEFAULT_FRAMES_PER_VIDEO};
use veriframe::model::{Backbone, HeadOutput};
use veriframe_server::ServerConfig;

pub const CONFIG_FILE: &str = "veriframe.toml";
pub const ENV_PREFIX: &str = "VERIFRAME_";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FacesConfig {
    pub backend: String,
    pub crop_margin: f64,
    pub crop_size: u32,
}

impl Default for FacesConfig {
    fn default() -> Self {
        Self {
            backend: "stub".into(),
            crop_margin: DEFAULT_CROP_MARGIN,
            crop_size: DEFAULT_CROP_SIZE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IngestConfig {
    pub frames_per_video: usize,
    pub sampling: SamplingMode,
    pub workers: Option<usize>,
}

impl Default for IngestConfig {
    fn default() -> Self {
        Self {
            frames_per_video: DEFAULT_FRAMES_PER_VIDEO,
            sampling: SamplingMode::Uniform,
            workers: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatapipeConfig {
    pub batch_size: usize,
    pub prefetch_depth: usize,
    pub cache: bool,
    pub augment: bool,
}

impl Default for DatapipeConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            prefetch_depth: 2,
            cache: true,
            augment: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub backbone: Backbone,
    pub head_output: HeadOutput,
    pub head_hidden_units: usize,
    pub width_multiplier: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            backbone: Backbone::InceptionResnetV2,
            head_output: HeadOutput::Softmax2,
            head_hidden_units: 64,
            width_multiplier: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub learning_rate: f64,
    pub epochs: usize,
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            epochs: 10,
            checkpoint_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluatorConfig {
    pub n: usize,
    pub threshold: f64,
}

impl Default for EvaluatorConfig {
    fn default() -> Self {
        Self { n: 128, threshold: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CliConfig {
    pub seed: u64,
    pub faces: FacesConfig,
    pub ingest: IngestConfig,
    pub datapipe: DatapipeConfig,
    pub model: ModelSection,
    pub train: TrainSection,
    pub evaluator: EvaluatorConfig,
    pub service: ServerConfig,
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: String, message: String },
    #[error("environment variable {var}: {message}")]
    Env { var: String, message: String },
}

/// Parses an environment value as a TOML scalar, falling back to a string.
fn env_value(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .filter(|v| !v.is_table() && !v.is_array())
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn set_key(table: &mut Table, var: &str, value: Value) -> Result<(), ConfigError> {
    let key = var[ENV_PREFIX.len()..].to_ascii_lowercase();
    match key.split_once('_') {
        Some((section, rest)) if CliConfig::SECTIONS.contains(&section) => {
            let entry = table
                .entry(section.to_string())
                .or_insert_with(|| Value::Table(Table::new()));
            let Value::Table(t) = entry else {
                return Err(ConfigError::Env {
                    var: var.into(),
                    message: format!("`{section}` is not a table in the config file"),
                });
            };
            t.insert(rest.to_string(), value);
        }
        _ => {
            table.insert(key, value);
        }
    }
    Ok(())
}

impl CliConfig {
    pub const SECTIONS: [&'static str; 7] =
        ["faces", "ingest", "datapipe", "model", "train", "evaluator", "service"];

    /// Merges the optional config file with `vars` (usually
    /// `std::env::vars()`).
    pub fn load(
        file: Option<&Path>,
        vars: impl IntoIterator<Item = (String, String)>,
    ) -> Result<Self, ConfigError> {
        let mut table = match file {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
                    path: path.to_path_buf(),
                    source,
                })?;
                text.parse::<Table>().map_err(|e| ConfigError::Parse {
                    path: path.display().to_string(),
                    message: e.to_string(),
                })?
            }
            None => Table::new(),
        };
        let mut vars: Vec<(String, String)> = vars.into_iter().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
        vars.sort();
        for (k, v) in vars {
            set_key(&mut table, &k, env_value(&v))?;
        }
        Value::Table(table).try_into().map_err(|e: toml::de::Error| ConfigError::Parse {
            path: file.map_or("<environment>".into(), |p| p.display().to_string()),
            message: e.to_string(),
        })
    }

    /// Uses `explicit` if given, else `./veriframe.toml` when present.
    pub fn discover(explicit: Option<&Path>) -> Result<Self, ConfigError> {
        let default = Path::new(CONFIG_FILE);
        let file = explicit.or(default.exists().then_some(default));
        Self::load(file, std::env::vars())
    }
}
