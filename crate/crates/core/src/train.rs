//! Dual-branch loss, SGD with momentum and the epoch loop with best-OA
//! checkpointing.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use candle_core::backprop::GradStore;
use candle_core::{DType, Tensor};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{augment, AugmentConfig};
use crate::batch::Batch;
use crate::checkpoint;
use crate::error::{config_err, contract, Error, Result};
use crate::inference::{argmax_lowest, sliding_predict, SlidingConfig, WindowPredictor};
use crate::metrics::{compute_metrics, ConfusionMatrix, MetricsReport};
use crate::model::SegmentationModel;
use crate::nn::{ops, Mode, ParamEntry};
use crate::raster::RasterTile;
use crate::schedule::{alpha_schedule, lr_schedule};
use crate::windowing::{extract_window_pair, WindowGeometry, WindowPair};

/// Mean cross-entropy over the pixels whose label is not `ignore`.
///
/// `logits`: `[B, u, h, w]`, `labels`: `[B, h, w]` (u32).
pub fn cross_entropy(logits: &Tensor, labels: &Tensor, ignore: Option<u32>) -> Result<Tensor> {
    let (b, u, h, w) = logits.dims4()?;
    if labels.dims() != [b, h, w] {
        return Err(contract!("labels {:?} do not match logits {:?}", labels.dims(), logits.dims()));
    }
    let raw = labels.flatten_all()?.to_vec1::<u32>()?;
    let mut valid = 0usize;
    let mut mask = Vec::with_capacity(raw.len());
    let mut index = Vec::with_capacity(raw.len());
    for &l in &raw {
        if Some(l) == ignore {
            mask.push(0.0);
            index.push(0u32);
        } else {
            if l as usize >= u {
                return Err(Error::Data(format!("label {l} out of range for {u} classes")));
            }
            valid += 1;
            mask.push(1.0);
            index.push(l);
        }
    }
    if valid == 0 {
        return Err(contract!("every pixel carries the ignore label"));
    }
    let device = logits.device();
    let index = Tensor::from_vec(index, (b, 1, h, w), device)?;
    let mask = Tensor::from_vec(mask, (b, h, w), device)?.to_dtype(logits.dtype())?;
    let picked = ops::log_softmax(logits, 1)?.gather(&index, 1)?.squeeze(1)?;
    Ok(((picked * mask)?.sum_all()?.neg()? / valid as f64)?)
}

#[derive(Debug, Clone)]
pub struct DualLoss {
    /// `local + alpha * context`
    pub total: Tensor,
    pub local: Tensor,
    pub context: Option<Tensor>,
}

/// `L = MCE(P_l, L_l) + alpha * MCE(P_c, L_c)`. With `alpha = 0` the
/// context term is dropped entirely.
pub fn dual_loss(
    local: (&Tensor, &Tensor),
    context: Option<(&Tensor, &Tensor)>,
    alpha: f64,
    ignore: Option<u32>,
) -> Result<DualLoss> {
    if !(alpha >= 0.0) {
        return Err(contract!("loss weight alpha must be non-negative, got {alpha}"));
    }
    let l = cross_entropy(local.0, local.1, ignore)?;
    let c = context.map(|(p, t)| cross_entropy(p, t, ignore)).transpose()?;
    let total = match &c {
        Some(c) if alpha > 0.0 => (&l + (c * alpha)?)?,
        _ => l.clone(),
    };
    Ok(DualLoss { total, local: l, context: c })
}

/// SGD with heavy-ball momentum: `v = mu v + g`, `p -= lr v`.
#[derive(Debug)]
pub struct Sgd {
    params: Vec<ParamEntry>,
    velocity: Vec<Option<Tensor>>,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Sgd {
    pub fn new(params: Vec<ParamEntry>, momentum: f64, weight_decay: f64) -> Self {
        let velocity = vec![None; params.len()];
        Self { params, velocity, momentum, weight_decay }
    }

    pub fn for_model(model: &SegmentationModel, momentum: f64, weight_decay: f64) -> Self {
        Self::new(model.store().trainable(), momentum, weight_decay)
    }

    /// Parameters without a gradient are left untouched.
    pub fn step(&mut self, grads: &GradStore, lr: f64) -> Result<()> {
        for (p, v) in self.params.iter().zip(self.velocity.iter_mut()) {
            let Some(g) = grads.get(p.var.as_tensor()) else { continue };
            // Detached so the momentum buffer never pins a step's graph.
            let mut g = g.detach();
            if self.weight_decay != 0.0 {
                g = (g + (p.var.as_tensor() * self.weight_decay)?)?;
            }
            let new_v = match v.take() {
                Some(prev) if self.momentum != 0.0 => ((prev * self.momentum)? + g)?,
                _ => g,
            }
            .detach();
            p.var.set(&(p.var.as_tensor() - (&new_v * lr)?)?)?;
            *v = Some(new_v);
        }
        Ok(())
    }

    /// Momentum buffers keyed by parameter name, for checkpointing.
    pub fn state(&self) -> Vec<(String, Tensor)> {
        self.params
            .iter()
            .zip(&self.velocity)
            .filter_map(|(p, v)| v.as_ref().map(|v| (format!("momentum/{}", p.name), v.clone())))
            .collect()
    }

    pub fn load_state(&mut self, state: &HashMap<String, Tensor>) -> Result<()> {
        for (p, v) in self.params.iter().zip(self.velocity.iter_mut()) {
            *v = match state.get(&format!("momentum/{}", p.name)) {
                Some(t) if t.dims() == p.var.dims() => Some(t.to_dtype(p.var.dtype())?),
                Some(t) => {
                    return Err(Error::Checkpoint(format!("momentum for {} has shape {:?}", p.name, t.dims())))
                }
                None => None,
            };
        }
        Ok(())
    }
}

/// How windows are drawn from a set of tiles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SamplePolicy {
    /// One window at the tile center.
    Center,
    /// `per_tile` windows at uniformly random valid origins, redrawn each epoch.
    Random { per_tile: usize },
    /// Non-overlapping grid covering the tile (last row/column flush).
    Grid,
}

/// Training or validation samples.
#[derive(Debug, Clone)]
pub enum Samples {
    /// Fixed, pre-extracted window pairs. Evaluated on their local windows.
    Pairs(Vec<WindowPair>),
    /// Whole tiles. Training draws windows by `policy`; evaluation runs
    /// sliding-window prediction over each tile.
    Tiles { tiles: Vec<RasterTile>, policy: SamplePolicy },
}

impl Samples {
    pub fn is_empty(&self) -> bool {
        match self {
            Samples::Pairs(p) => p.is_empty(),
            Samples::Tiles { tiles, .. } => tiles.is_empty(),
        }
    }

    /// Windows drawn per epoch.
    pub fn epoch_len(&self, geom: &WindowGeometry) -> Result<usize> {
        Ok(match self {
            Samples::Pairs(p) => p.len(),
            Samples::Tiles { tiles, policy } => match policy {
                SamplePolicy::Center => tiles.len(),
                SamplePolicy::Random { per_tile } => tiles.len() * per_tile,
                SamplePolicy::Grid => tiles
                    .iter()
                    .map(|t| grid_origins(t, geom).map(|o| o.len()))
                    .sum::<Result<usize>>()?,
            },
        })
    }

    /// Window `index` of `epoch`, before augmentation.
    fn window(&self, geom: &WindowGeometry, epoch: usize, index: usize, seed: u64) -> Result<WindowPair> {
        match self {
            Samples::Pairs(p) => Ok(p[index].clone()),
            Samples::Tiles { tiles, policy } => match policy {
                SamplePolicy::Center => {
                    let t = &tiles[index];
                    let origin = (t.height().saturating_sub(geom.local_h) / 2, t.width().saturating_sub(geom.local_w) / 2);
                    extract_window_pair(t, origin, geom)
                }
                SamplePolicy::Random { per_tile } => {
                    let t = &tiles[index / per_tile];
                    if t.height() < geom.local_h || t.width() < geom.local_w {
                        return Err(crate::error::geometry!("tile {} is smaller than the local window", t.id));
                    }
                    let mut rng = stream_rng(seed.wrapping_add(1), epoch, index);
                    let origin = (
                        rng.random_range(0..=t.height() - geom.local_h),
                        rng.random_range(0..=t.width() - geom.local_w),
                    );
                    extract_window_pair(t, origin, geom)
                }
                SamplePolicy::Grid => {
                    let mut rest = index;
                    for t in tiles {
                        let origins = grid_origins(t, geom)?;
                        if rest < origins.len() {
                            return extract_window_pair(t, origins[rest], geom);
                        }
                        rest -= origins.len();
                    }
                    Err(contract!("window index {index} out of range"))
                }
            },
        }
    }
}

fn grid_origins(tile: &RasterTile, geom: &WindowGeometry) -> Result<Vec<(usize, usize)>> {
    crate::inference::window_origins(tile.height(), tile.width(), geom, (geom.local_h, geom.local_w))
}

/// Independent generator per (seed, epoch, index).
fn stream_rng(seed: u64, epoch: usize, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add((epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)));
    rng.set_stream(index as u64);
    rng
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub momentum: f64,
    pub lr_power: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub augment: AugmentConfig,
    pub ignore_index: Option<u32>,
    pub eval_batch_size: usize,
    /// Reload the best weights into the model when training ends.
    pub restore_best: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 32,
            base_lr: 0.1,
            momentum: 0.9,
            lr_power: 1.5,
            weight_decay: 0.0,
            seed: 0,
            augment: AugmentConfig::default(),
            ignore_index: None,
            eval_batch_size: 16,
            restore_best: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return Err(config_err!("batch sizes must be positive"));
        }
        if !(self.base_lr > 0.0) || self.momentum < 0.0 || self.lr_power < 0.0 || self.weight_decay < 0.0 {
            return Err(config_err!("learning rate must be positive; momentum, power and decay non-negative"));
        }
        Ok(())
    }

    pub fn total_iterations(&self, epoch_len: usize) -> u64 {
        (self.epochs * epoch_len.div_ceil(self.batch_size)) as u64
    }
}

/// One line of the JSONL training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: u64,
    pub epoch: usize,
    pub lr: f64,
    pub alpha: f64,
    pub loss: f64,
    pub loss_local: f64,
    pub loss_context: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Optimizer steps completed at the end of the epoch.
    pub iteration: u64,
    pub mean_loss: f64,
    pub val_oa: f64,
    pub val_mean_f1: f64,
    pub val_miou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub best_epoch: usize,
    pub best_oa: f64,
    pub best_metrics: MetricsReport,
    pub total_iterations: u64,
    pub parameters: usize,
    pub history: Vec<EpochRecord>,
    pub best_checkpoint: Option<PathBuf>,
}

pub const BEST_CHECKPOINT: &str = "best.safetensors";
pub const LAST_CHECKPOINT: &str = "last.safetensors";
pub const TRAIN_LOG: &str = "train_log.jsonl";
pub const REPORT_FILE: &str = "report.json";

/// Where training writes its artifacts; `None` keeps everything in memory.
#[derive(Debug, Clone, Default)]
pub struct TrainOutput {
    pub dir: Option<PathBuf>,
    /// Continue from `dir/last.safetensors` when it exists.
    pub resume: bool,
    /// Return after this many epochs of this invocation (resumable later).
    pub stop_after_epochs: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ResumeState {
    epoch: usize,
    iteration: u64,
    best: Option<(usize, f64, MetricsReport)>,
    history: Vec<EpochRecord>,
}

/// One forward/backward/update on `batch`. Returns the loss before the step.
pub fn train_step(
    model: &SegmentationModel,
    sgd: &mut Sgd,
    batch: &Batch,
    alpha: f64,
    lr: f64,
    ignore: Option<u32>,
) -> Result<(f64, f64, Option<f64>)> {
    let loss = batch_loss(model, batch, alpha, ignore, Mode::Train)?;
    let value = loss.total.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if !value.is_finite() {
        return Err(Error::Divergence(format!("non-finite loss {value} at lr {lr}, alpha {alpha}")));
    }
    let local = loss.local.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    let context = loss.context.map(|c| c.to_dtype(DType::F64)?.to_scalar::<f64>()).transpose()?;
    let grads = loss.total.backward()?;
    sgd.step(&grads, lr)?;
    Ok((value, local, context))
}

pub fn batch_loss(
    model: &SegmentationModel,
    batch: &Batch,
    alpha: f64,
    ignore: Option<u32>,
    mode: Mode,
) -> Result<DualLoss> {
    let out = model.forward(&batch.local, Some(&batch.context), mode)?;
    let context = out.context.as_ref().map(|p| (p, &batch.context_labels));
    dual_loss((&out.local, &batch.local_labels), context, alpha, ignore)
}

/// Global confusion matrix of `model` over `samples`.
pub fn evaluate<P: WindowPredictor + ?Sized>(
    model: &P,
    samples: &Samples,
    ignore: Option<u32>,
    batch_size: usize,
) -> Result<ConfusionMatrix> {
    let u = model.num_classes();
    let mut cm = ConfusionMatrix::new(u);
    match samples {
        Samples::Pairs(pairs) => {
            for chunk in pairs.chunks(batch_size.max(1)) {
                let logits = model.predict_windows(chunk)?;
                for (pair, l) in chunk.iter().zip(&logits) {
                    let (_, h, w) = l.dim();
                    let pred = Array2::from_shape_fn((h, w), |(i, j)| argmax_lowest((0..u).map(|k| l[[k, i, j]] as f64)) as u32);
                    cm.accumulate(pred.view(), pair.local_label.view(), ignore)?;
                }
            }
        }
        Samples::Tiles { tiles, .. } => {
            let cfg = SlidingConfig { batch_size, ..Default::default() };
            for tile in tiles {
                let pred = sliding_predict(model, tile, &cfg)?;
                cm.accumulate(pred.classes.view(), tile.labels.view(), ignore)?;
            }
        }
    }
    Ok(cm)
}

fn snapshot(model: &SegmentationModel) -> Result<Vec<Tensor>> {
    model.store().entries().iter().map(|e| Ok(e.var.as_tensor().copy()?)).collect()
}

fn restore(model: &SegmentationModel, snap: &[Tensor]) -> Result<()> {
    for (e, t) in model.store().entries().iter().zip(snap) {
        e.var.set(t)?;
    }
    Ok(())
}

fn append_jsonl(file: &mut Option<File>, record: &impl Serialize) -> Result<()> {
    if let Some(f) = file {
        writeln!(f, "{}", serde_json::to_string(record)?)?;
    }
    Ok(())
}

/// Full training run: SGD over `train`, validation after each epoch, best-OA
/// selection.
pub fn train(
    model: &SegmentationModel,
    train_set: &Samples,
    val_set: &Samples,
    cfg: &TrainConfig,
    output: &TrainOutput,
) -> Result<TrainReport> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Data("training and validation sets must both be non-empty".into()));
    }
    let geom = model.config().geometry;
    let epoch_len = train_set.epoch_len(&geom)?;
    let total = cfg.total_iterations(epoch_len);
    if total == 0 {
        return Err(config_err!("zero total iterations ({} epochs of {epoch_len} windows)", cfg.epochs));
    }
    let mut sgd = Sgd::for_model(model, cfg.momentum, cfg.weight_decay);
    let mut state = ResumeState { epoch: 0, iteration: 0, best: None, history: Vec::new() };
    let dir = output.dir.as_deref();
    if let Some(d) = dir {
        std::fs::create_dir_all(d)?;
        let last = d.join(LAST_CHECKPOINT);
        if output.resume && last.exists() {
            let tensors = candle_core::safetensors::load(&last, model.store().device())?;
            checkpoint::load_into(model, &tensors)?;
            let extra: HashMap<String, Tensor> = tensors
                .into_iter()
                .filter_map(|(k, v)| k.strip_prefix(checkpoint::EXTRA_PREFIX).map(|s| (s.to_string(), v)))
                .collect();
            sgd.load_state(&extra)?;
            state = serde_json::from_value(checkpoint::read_meta(&last)?.state)?;
            log::info!("resuming at epoch {} (iteration {})", state.epoch, state.iteration);
        }
    }
    let mut log_file = match dir {
        Some(d) => Some(
            OpenOptions::new()
                .create(true)
                .append(output.resume)
                .write(true)
                .truncate(!output.resume)
                .open(d.join(TRAIN_LOG))?,
        ),
        None => None,
    };
    let mut best_snapshot = None;
    let (dtype, device) = (model.dtype(), model.store().device().clone());

    let end = output.stop_after_epochs.map_or(cfg.epochs, |n| (state.epoch + n).min(cfg.epochs));
    for epoch in state.epoch..end {
        let mut order: Vec<usize> = (0..epoch_len).collect();
        order.shuffle(&mut stream_rng(cfg.seed, epoch, usize::MAX));
        model.reseed_dropout(stream_rng(cfg.seed, epoch, usize::MAX - 1).random());
        let mut loss_sum = 0.0;
        let mut steps = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let pairs = chunk
                .par_iter()
                .map(|&i| {
                    let pair = train_set.window(&geom, epoch, i, cfg.seed)?;
                    let mut rng = stream_rng(cfg.seed, epoch, i);
                    Ok(augment(&pair, &geom, &cfg.augment, &mut rng))
                })
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<&WindowPair> = pairs.iter().collect();
            let batch = Batch::from_pairs(&refs, dtype, &device)?;
            let it = state.iteration;
            let alpha = alpha_schedule(it, total)?;
            let lr = lr_schedule(it, total, cfg.base_lr, cfg.lr_power)?;
            let (loss, loss_local, loss_context) = train_step(model, &mut sgd, &batch, alpha, lr, cfg.ignore_index)?;
            state.iteration += 1;
            loss_sum += loss;
            steps += 1;
            let rec = IterationRecord { iteration: it, epoch, lr, alpha, loss, loss_local, loss_context };
            append_jsonl(&mut log_file, &rec)?;
            log::debug!("it {it} loss {loss:.4} lr {lr:.5} alpha {alpha:.4}");
        }

        let cm = evaluate(model, val_set, cfg.ignore_index, cfg.eval_batch_size)?;
        let metrics = compute_metrics(&cm)?;
        let record = EpochRecord {
            epoch,
            iteration: state.iteration,
            mean_loss: loss_sum / steps.max(1) as f64,
            val_oa: metrics.oa,
            val_mean_f1: metrics.mean_f1,
            val_miou: metrics.miou,
        };
        log::info!("epoch {epoch}: loss {:.4}, val OA {:.4}", record.mean_loss, record.val_oa);
        state.history.push(record);
        if state.best.as_ref().is_none_or(|(_, oa, _)| metrics.oa > *oa) {
            state.best = Some((epoch, metrics.oa, metrics));
            if let Some(d) = dir {
                checkpoint::save(model, &d.join(BEST_CHECKPOINT), serde_json::json!({"epoch": epoch}), &[])?;
            }
            if cfg.restore_best {
                best_snapshot = Some(snapshot(model)?);
            }
        }
        state.epoch = epoch + 1;
        if let Some(d) = dir {
            checkpoint::save(model, &d.join(LAST_CHECKPOINT), serde_json::to_value(&state)?, &sgd.state())?;
        }
    }

    let (best_epoch, best_oa, best_metrics) =
        state.best.clone().ok_or_else(|| contract!("no epoch was run (already complete?)"))?;
    if cfg.restore_best {
        match (&best_snapshot, dir) {
            (Some(s), _) => restore(model, s)?,
            (None, Some(d)) => {
                let tensors = candle_core::safetensors::load(d.join(BEST_CHECKPOINT), &device)?;
                checkpoint::load_into(model, &tensors)?;
            }
            (None, None) => {}
        }
    }
    let report = TrainReport {
        best_epoch,
        best_oa,
        best_metrics,
        total_iterations: total,
        parameters: model.num_parameters(),
        history: state.history,
        best_checkpoint: dir.map(|d| d.join(BEST_CHECKPOINT)),
    };
    if let Some(d) = dir {
        std::fs::write(d.join(REPORT_FILE), serde_json::to_string_pretty(&report)?)?;
    }
    Ok(report)
}

/// Reads a JSONL training log.
pub fn read_log(path: &Path) -> Result<Vec<IterationRecord>> {
    std::fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}
