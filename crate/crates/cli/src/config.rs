//! Run configuration, read from TOML with `--set` overrides on top.

use std::path::{Path, PathBuf};

use quase_core::editing::{SearchParams, DEFAULT_LOG_TAU};
use quase_core::eval::EvalConfig;
use quase_core::model::ModelConfig;
use quase_core::pairing::{DEFAULT_GAP_MIN, DEFAULT_JI_MIN};
use quase_core::synth::SynthParams;
use quase_core::training::TrainConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

pub const RESULTS_ENV: &str = "QUASE_RESULTS";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Directory holding every stage's artifacts.
    pub work_dir: PathBuf,
    /// Raw corpus for `prepare`; defaults to the synthetic one in `work_dir`.
    pub raw: Option<PathBuf>,
    pub lexicon: Option<PathBuf>,
    /// Template grammar for `synth`; the built-in grammar when absent.
    pub grammar: Option<PathBuf>,
    /// Root for reports; the `QUASE_RESULTS` variable takes precedence.
    pub results_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            work_dir: "work".into(),
            raw: None,
            lexicon: None,
            grammar: None,
            results_dir: "results".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub size: usize,
    pub positive_ratio: f64,
    pub neutral_ratio: f64,
}

impl Default for SynthSection {
    fn default() -> Self {
        let p = SynthParams::default();
        Self {
            size: p.size,
            positive_ratio: p.positive_ratio,
            neutral_ratio: p.neutral_ratio,
        }
    }
}

impl SynthSection {
    pub fn params(&self) -> SynthParams {
        SynthParams {
            size: self.size,
            positive_ratio: self.positive_ratio,
            neutral_ratio: self.neutral_ratio,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrepareSection {
    pub valid_fraction: f64,
    pub test_fraction: f64,
}

impl Default for PrepareSection {
    fn default() -> Self {
        Self {
            valid_fraction: 0.1,
            test_fraction: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MiningSection {
    pub ji_min: f64,
    pub gap_min: f64,
}

impl Default for MiningSection {
    fn default() -> Self {
        Self {
            ji_min: DEFAULT_JI_MIN,
            gap_min: DEFAULT_GAP_MIN,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub d_y: usize,
    pub d_z: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub align_hidden_dim: usize,
    pub max_decode_len: usize,
    pub min_token_freq: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let d = ModelConfig::desk(0, 24);
        Self {
            d_y: d.d_y,
            d_z: d.d_z,
            embed_dim: d.embed_dim,
            hidden_dim: d.hidden_dim,
            align_hidden_dim: d.align_hidden_dim,
            max_decode_len: d.max_decode_len,
            min_token_freq: 1,
        }
    }
}

impl ModelSection {
    pub fn config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            d_y: self.d_y,
            d_z: self.d_z,
            embed_dim: self.embed_dim,
            hidden_dim: self.hidden_dim,
            align_hidden_dim: self.align_hidden_dim,
            vocab_size,
            max_decode_len: self.max_decode_len,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TuneSection {
    /// Stage-1 `lambda_rec` candidates; empty keeps `train.lambda_rec`.
    pub grid: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EditSection {
    pub log_tau: f64,
    pub beam: usize,
    pub step_size: f64,
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for EditSection {
    fn default() -> Self {
        let s = SearchParams::default();
        Self {
            log_tau: DEFAULT_LOG_TAU,
            beam: 1,
            step_size: s.step_size,
            tolerance: s.tolerance,
            max_iterations: s.max_iterations,
        }
    }
}

impl EditSection {
    pub fn search(&self) -> SearchParams {
        SearchParams {
            step_size: self.step_size,
            tolerance: self.tolerance,
            max_iterations: self.max_iterations,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationSection {
    pub targets: Vec<f64>,
    /// Test sentences evaluated per cell; all when absent.
    pub limit: Option<usize>,
    /// Training points per epoch in each cell; `train.points_per_epoch` when absent.
    pub points_per_epoch: Option<usize>,
}

impl Default for AblationSection {
    fn default() -> Self {
        Self {
            targets: vec![1.0, 3.0, 5.0],
            limit: None,
            points_per_epoch: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: Paths,
    pub synth: SynthSection,
    pub prepare: PrepareSection,
    pub mining: MiningSection,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub tune: TuneSection,
    pub edit: EditSection,
    pub eval: EvalConfig,
    pub ablation: AblationSection,
}

/// A configuration together with the directory its relative paths start from.
#[derive(Debug, Clone)]
pub struct Loaded {
    pub config: RunConfig,
    pub base: PathBuf,
}

impl Loaded {
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base.join(p)
        }
    }

    pub fn work(&self, name: &str) -> PathBuf {
        self.resolve(&self.config.paths.work_dir).join(name)
    }

    pub fn results_root(&self) -> PathBuf {
        match std::env::var_os(RESULTS_ENV) {
            Some(v) if !v.is_empty() => PathBuf::from(v),
            _ => self.resolve(&self.config.paths.results_dir),
        }
    }
}

fn parse_override(raw: &str) -> Result<(Vec<String>, toml::Value), CliError> {
    let (key, value) = raw
        .split_once('=')
        .ok_or_else(|| CliError::config(format!("override {raw:?} is not KEY=VALUE")))?;
    let path: Vec<String> = key.trim().split('.').map(str::to_string).collect();
    if path.iter().any(String::is_empty) {
        return Err(CliError::config(format!("bad override key {key:?}")));
    }
    let value = value.trim();
    let parsed = toml::from_str::<toml::Table>(&format!("v = {value}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()));
    Ok((path, parsed))
}

fn apply_override(table: &mut toml::Table, path: &[String], value: toml::Value) -> Result<(), CliError> {
    let (last, parents) = path.split_last().expect("non-empty key");
    let mut cur = table;
    for p in parents {
        let entry = cur.entry(p.clone()).or_insert_with(|| toml::Value::Table(Default::default()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| CliError::config(format!("override path {} crosses a non-table", path.join("."))))?;
    }
    cur.insert(last.clone(), value);
    Ok(())
}

/// Reads `path` (if any), applies `KEY=VALUE` overrides and the seed flag.
pub fn load(path: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<Loaded, CliError> {
    let (mut table, base) = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::missing(p, e))?;
            let table: toml::Table = toml::from_str(&text).map_err(|e| CliError::schema(p, e.to_string()))?;
            let base = p.parent().map(Path::to_path_buf).unwrap_or_default();
            (table, base)
        }
        None => (toml::Table::new(), PathBuf::new()),
    };
    for raw in overrides {
        let (key, value) = parse_override(raw)?;
        apply_override(&mut table, &key, value)?;
    }
    let shown = path.map_or_else(|| PathBuf::from("<overrides>"), Path::to_path_buf);
    let mut config: RunConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| CliError::schema(&shown, e.message().to_string()))?;
    if let Some(s) = seed {
        config.seed = s;
    }
    config.train.seed = config.seed;
    config.train.validate().map_err(CliError::from)?;
    let base = if base.as_os_str().is_empty() { PathBuf::from(".") } else { base };
    Ok(Loaded { config, base })
}

/// Short hex digest over labelled JSON renderings of `parts`.
pub fn fingerprint(parts: &[(&str, serde_json::Value)]) -> String {
    let mut h = Sha256::new();
    for (label, value) in parts {
        h.update(label.as_bytes());
        h.update([0]);
        h.update(value.to_string().as_bytes());
        h.update([0]);
    }
    hex::encode(&h.finalize()[..8])
}

pub fn file_digest(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::missing(path, e))?;
    Ok(hex::encode(&Sha256::digest(&bytes)[..8]))
}

pub fn json<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("config serializes")
}
