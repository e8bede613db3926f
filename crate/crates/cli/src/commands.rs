//! The four subcommands as library functions.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ctxseg::checkpoint;
use ctxseg::dataset::{read_image, write_dataset, write_labels, BandStats, TileDataset};
use ctxseg::inference::{sliding_predict, SlidingConfig};
use ctxseg::metrics::{compute_metrics_excluding, MetricsReport};
use ctxseg::split::Role;
use ctxseg::synth::synth_sample;
use ctxseg::train::{evaluate, train, SamplePolicy, Samples, TrainOutput, TrainReport};
use ctxseg::windowing::extract_window_pair;
use ctxseg::{Error, RasterTile, Result, SegmentationModel};
use ndarray::Array2;

use crate::config::{resolve, ExperimentConfig, ValidationMode};

pub const RESOLVED_CONFIG: &str = "config.toml";
pub const STATS_FILE: &str = "stats.json";

pub fn dataset_dir(cfg: &ExperimentConfig, root: &Path) -> PathBuf {
    resolve(root, &cfg.data.dir)
}

pub fn run_dir(cfg: &ExperimentConfig, root: &Path) -> PathBuf {
    resolve(root, &cfg.data.runs_dir).join(&cfg.name)
}

/// Worker-thread knob; only the first call in a process takes effect.
pub fn configure_workers(n: usize) {
    if n > 0 {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

/// Writes the synthetic dataset described by `cfg.synth` and returns its
/// directory.
pub fn cmd_synth(cfg: &ExperimentConfig, root: &Path) -> Result<PathBuf> {
    let dir = dataset_dir(cfg, root);
    let scfg = cfg.synth_config();
    let s = &cfg.synth;
    if scfg.n_samples > 0 {
        scfg.validate()?;
    }
    let samples = (0..scfg.n_samples).map(|i| synth_sample(&scfg, i)).collect::<Result<Vec<_>>>()?;
    let role = |i: usize| {
        if i < s.train {
            Role::Train
        } else if i < s.train + s.val {
            Role::Val
        } else {
            Role::Test
        }
    };
    let mut meta = BTreeMap::new();
    meta.insert("generator".into(), "synth".into());
    meta.insert("seed".into(), scfg.seed.to_string());
    meta.insert("num_classes".into(), scfg.num_classes.to_string());
    meta.insert("local_size".into(), cfg.model.local_size.to_string());
    meta.insert("ratio".into(), cfg.model.ratio.to_string());
    write_dataset(&dir, samples.iter().enumerate().map(|(i, smp)| (&smp.tile, role(i))), meta)?;
    Ok(dir)
}

/// Parses a split name for evaluation.
pub fn parse_split(name: &str) -> Result<Role> {
    Role::parse(name).ok_or_else(|| Error::Config(format!("unknown split {name:?} (expected train, val or test)")))
}

fn load_stats(dir: &Path, bands: usize) -> Result<BandStats> {
    let p = dir.join(STATS_FILE);
    if p.exists() {
        Ok(serde_json::from_str(&std::fs::read_to_string(p)?)?)
    } else {
        Ok(BandStats::identity(bands))
    }
}

fn normalized(mut tiles: Vec<RasterTile>, stats: &BandStats) -> Vec<RasterTile> {
    for t in &mut tiles {
        stats.normalize(&mut t.pixels);
    }
    tiles
}

/// Evaluation samples for `tiles` under the configured validation mode.
pub fn eval_samples(cfg: &ExperimentConfig, tiles: Vec<RasterTile>) -> Result<Samples> {
    Ok(match cfg.data.validation {
        ValidationMode::Windows => {
            let geom = cfg.model.geometry();
            let pairs = tiles
                .iter()
                .map(|t| {
                    let origin = (t.height().saturating_sub(geom.local_h) / 2, t.width().saturating_sub(geom.local_w) / 2);
                    extract_window_pair(t, origin, &geom)
                })
                .collect::<Result<Vec<_>>>()?;
            Samples::Pairs(pairs)
        }
        ValidationMode::Sliding => Samples::Tiles { tiles, policy: SamplePolicy::Grid },
    })
}

/// Trains per `cfg`, writing checkpoints, logs and the report into the run
/// directory. `stop_after` bounds the epochs run by this call.
pub fn cmd_train(
    cfg: &ExperimentConfig,
    root: &Path,
    resume: bool,
    stop_after: Option<usize>,
) -> Result<(PathBuf, TrainReport)> {
    let data = TileDataset::open(&dataset_dir(cfg, root))?;
    let train_tiles = data.load_role(Role::Train)?;
    let val_tiles = data.load_role(Role::Val)?;
    if train_tiles.is_empty() || val_tiles.is_empty() {
        return Err(Error::Data(format!(
            "dataset {} needs train and val tiles ({} / {})",
            data.root.display(),
            train_tiles.len(),
            val_tiles.len()
        )));
    }
    for t in train_tiles.iter().chain(&val_tiles) {
        t.validate_labels(cfg.model.num_classes, cfg.train.ignore_index)?;
    }
    let stats = if cfg.data.normalize {
        BandStats::compute(&train_tiles)?
    } else {
        BandStats::identity(cfg.model.bands)
    };
    let dir = run_dir(cfg, root);
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join(RESOLVED_CONFIG), cfg.to_toml_string()?)?;
    std::fs::write(dir.join(STATS_FILE), serde_json::to_string_pretty(&stats)?)?;

    let model = SegmentationModel::new(&cfg.model.model_config()?, cfg.model.dtype()?, cfg.seed)?;
    log::info!("{} parameters", model.num_parameters());
    let train_set = Samples::Tiles { tiles: normalized(train_tiles, &stats), policy: cfg.data.sampling };
    let val_set = eval_samples(cfg, normalized(val_tiles, &stats))?;
    let output = TrainOutput { dir: Some(dir.clone()), resume, stop_after_epochs: stop_after };
    let report = train(&model, &train_set, &val_set, &cfg.train_config(), &output)?;
    Ok((dir, report))
}

/// Scores `checkpoint` on `split`. Normalization statistics are taken from
/// the checkpoint's run directory.
pub fn cmd_eval(cfg: &ExperimentConfig, root: &Path, checkpoint_path: &Path, split: &str) -> Result<MetricsReport> {
    let role = parse_split(split)?;
    let loaded = checkpoint::load(checkpoint_path)?;
    let model = loaded.model;
    let stats = load_stats(checkpoint_path.parent().unwrap_or(Path::new(".")), model.config().bands())?;
    let data = TileDataset::open(&dataset_dir(cfg, root))?;
    let tiles = data.load_role(role)?;
    if tiles.is_empty() {
        return Err(Error::Data(format!("split {split} of {} is empty", data.root.display())));
    }
    let samples = eval_samples(cfg, normalized(tiles, &stats))?;
    let cm = evaluate(&model, &samples, cfg.train.ignore_index, cfg.train.eval_batch_size)?;
    compute_metrics_excluding(&cm, &cfg.eval.excluded_classes)
}

/// Predicts a class map for an image file (`.npy`, `[bands, H, W]`) and
/// writes it as a single-band u32 `.npy`.
pub fn cmd_predict(cfg: &ExperimentConfig, checkpoint_path: &Path, image: &Path, output: &Path) -> Result<Array2<u32>> {
    let loaded = checkpoint::load(checkpoint_path)?;
    let model = loaded.model;
    let stats = load_stats(checkpoint_path.parent().unwrap_or(Path::new(".")), model.config().bands())?;
    let mut pixels = read_image(image)?;
    if pixels.dim().0 != model.config().bands() {
        return Err(Error::Data(format!(
            "image has {} bands, model expects {}",
            pixels.dim().0,
            model.config().bands()
        )));
    }
    stats.normalize(&mut pixels);
    let (_, h, w) = pixels.dim();
    let tile = RasterTile::new(image.display().to_string(), pixels, Array2::zeros((h, w)))?;
    let sliding = SlidingConfig {
        stride: cfg.eval.stride.map(|s| (s, s)),
        batch_size: cfg.train.eval_batch_size,
        keep_logits: false,
    };
    let pred = sliding_predict(&model, &tile, &sliding)?;
    if let Some(dir) = output.parent() {
        std::fs::create_dir_all(dir)?;
    }
    write_labels(output, &pred.classes)?;
    Ok(pred.classes)
}
