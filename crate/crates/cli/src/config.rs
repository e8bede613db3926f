//! Declarative experiment configuration (TOML) with `key.path=value`
//! overrides.

use std::path::{Path, PathBuf};

use ctxseg::augment::AugmentConfig;
use ctxseg::model::{ModelConfig, Variant};
use ctxseg::train::{SamplePolicy, TrainConfig};
use ctxseg::windowing::WindowGeometry;
use ctxseg::{Error, Result};
use serde::{Deserialize, Serialize};

/// Environment variable naming the directory relative paths resolve against.
pub const ROOT_ENV: &str = "CTXSEG_ROOT";

fn cfg_err(msg: impl std::fmt::Display) -> Error {
    Error::Config(msg.to_string())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValidationMode {
    /// Score the centered local window of each tile.
    Windows,
    /// Slide the local window over each whole tile.
    Sliding,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Dataset directory holding `manifest.tsv`.
    pub dir: PathBuf,
    /// Parent of the per-run output directories.
    pub runs_dir: PathBuf,
    pub sampling: SamplePolicy,
    pub validation: ValidationMode,
    /// Per-band z-scoring with training-set statistics.
    pub normalize: bool,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            dir: "data".into(),
            runs_dir: "runs".into(),
            sampling: SamplePolicy::Random { per_tile: 16 },
            validation: ValidationMode::Sliding,
            normalize: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub variant: Variant,
    pub num_classes: usize,
    pub bands: usize,
    pub local_size: usize,
    pub ratio: usize,
    pub ctx_downsample: usize,
    /// Divides every layer width; 1 is the full-size network.
    pub width_divisor: usize,
    /// Overrides `width_divisor` for the local encoder alone.
    pub local_width_divisor: Option<usize>,
    pub depth: usize,
    pub heads: usize,
    pub patch: usize,
    pub context_self_attention: bool,
    pub dropout: f64,
    /// `f32` or `f64`.
    pub dtype: String,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            variant: Variant::WideContext,
            num_classes: 6,
            bands: 3,
            local_size: 256,
            ratio: 3,
            ctx_downsample: 4,
            width_divisor: 1,
            local_width_divisor: None,
            depth: 4,
            heads: 4,
            patch: 1,
            context_self_attention: false,
            dropout: 0.0,
            dtype: "f32".into(),
        }
    }
}

impl ModelSection {
    pub fn geometry(&self) -> WindowGeometry {
        WindowGeometry::square(self.local_size, self.ratio, self.ctx_downsample)
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let mut cfg = ModelConfig::toy(self.variant, self.num_classes, self.bands, self.geometry(), self.width_divisor);
        if let Some(d) = self.local_width_divisor {
            cfg = cfg.with_local_divisor(d);
        }
        cfg.transformer.depth = self.depth;
        cfg.transformer.heads = self.heads;
        cfg.transformer.patch = self.patch;
        cfg.transformer.context_self_attention = self.context_self_attention;
        cfg.transformer.dropout = self.dropout;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn dtype(&self) -> Result<candle_core::DType> {
        match self.dtype.as_str() {
            "f32" => Ok(candle_core::DType::F32),
            "f64" => Ok(candle_core::DType::F64),
            other => Err(cfg_err(format!("model.dtype must be f32 or f64, got {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub momentum: f64,
    pub lr_power: f64,
    pub weight_decay: f64,
    pub augment: AugmentConfig,
    pub ignore_index: Option<u32>,
    pub eval_batch_size: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            epochs: t.epochs,
            batch_size: t.batch_size,
            base_lr: t.base_lr,
            momentum: t.momentum,
            lr_power: t.lr_power,
            weight_decay: t.weight_decay,
            augment: t.augment,
            ignore_index: t.ignore_index,
            eval_batch_size: t.eval_batch_size,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    /// Marker side in pixels; a quarter of the local window when absent.
    pub marker_size: Option<usize>,
    pub noise_std: f32,
    pub marker_amplitude: f32,
    pub class_weights: Option<Vec<f64>>,
}

impl Default for SynthSection {
    fn default() -> Self {
        Self {
            train: 2000,
            val: 400,
            test: 400,
            marker_size: None,
            noise_std: 0.5,
            marker_amplitude: 2.0,
            class_weights: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Sliding-window step; the local window size when absent.
    pub stride: Option<usize>,
    /// Classes left out of mean F1 / mIoU (e.g. clutter).
    pub excluded_classes: Vec<usize>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { stride: None, excluded_classes: Vec::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Run directory name under `data.runs_dir`.
    pub name: String,
    /// Seeds model initialization, data generation and sampling.
    pub seed: u64,
    /// Worker threads; 0 leaves the default.
    pub workers: usize,
    pub data: DataSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub synth: SynthSection,
    pub eval: EvalSection,
    /// Command-line overrides applied on top of the file, in order.
    pub overrides: Vec<String>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "default".into(),
            seed: 0,
            workers: 0,
            data: DataSection::default(),
            model: ModelSection::default(),
            train: TrainSection::default(),
            synth: SynthSection::default(),
            eval: EvalSection::default(),
            overrides: Vec::new(),
        }
    }
}

/// Parses the right-hand side of an override as a TOML value, falling back
/// to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Sets `path` (dot separated) inside `table` to `value`.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| cfg_err(format!("override {assignment:?} is not of the form key.path=value")))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(cfg_err(format!("bad override key {path:?}")));
    }
    let (last, parents) = keys.split_last().expect("non-empty");
    let mut node = table;
    for k in parents {
        let entry = node.entry(k.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| cfg_err(format!("override {path:?}: {k} is not a table")))?;
    }
    node.insert(last.to_string(), parse_value(raw.trim()));
    Ok(())
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(cfg_err)?;
        let mut recorded = match table.remove("overrides") {
            Some(v) => v.try_into::<Vec<String>>().map_err(cfg_err)?,
            None => Vec::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
            recorded.push(o.clone());
        }
        let mut cfg: ExperimentConfig = toml::Value::Table(table).try_into().map_err(cfg_err)?;
        cfg.overrides = recorded;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path` (defaults when `None`) and applies `overrides`.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p)
                .map_err(|e| cfg_err(format!("cannot read config {}: {e}", p.display())))?,
            None => String::new(),
        };
        Self::from_toml_str(&text, overrides)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(cfg_err)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.dtype()?;
        self.model.model_config()?;
        self.train_config().validate()?;
        if let SamplePolicy::Random { per_tile: 0 } = self.data.sampling {
            return Err(cfg_err("data.sampling.per_tile must be positive"));
        }
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            epochs: t.epochs,
            batch_size: t.batch_size,
            base_lr: t.base_lr,
            momentum: t.momentum,
            lr_power: t.lr_power,
            weight_decay: t.weight_decay,
            seed: self.seed,
            augment: t.augment,
            ignore_index: t.ignore_index,
            eval_batch_size: t.eval_batch_size,
            restore_best: true,
        }
    }

    pub fn synth_config(&self) -> ctxseg::synth::SynthConfig {
        let s = &self.synth;
        let mut cfg = ctxseg::synth::SynthConfig::new(s.train + s.val + s.test, self.model.num_classes, self.model.geometry(), self.seed);
        cfg.bands = self.model.bands;
        if let Some(m) = s.marker_size {
            cfg.marker_size = m;
        }
        cfg.noise_std = s.noise_std;
        cfg.marker_amplitude = s.marker_amplitude;
        cfg.class_weights = s.class_weights.clone();
        cfg
    }
}

/// Experiment root: `$CTXSEG_ROOT`, else the current directory.
pub fn experiment_root() -> PathBuf {
    std::env::var_os(ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("."))
}

/// Joins relative paths onto `root`.
pub fn resolve(root: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        root.join(p)
    }
}
