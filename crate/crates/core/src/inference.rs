//! Whole-tile prediction by sliding the local window over the tile.
//!
//! Only the local logits are used. Where windows overlap their logits are
//! averaged before the argmax.

use ndarray::{s, Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::batch::{stack_images, unstack_logits};
use crate::error::{geometry, Result};
use crate::model::SegmentationModel;
use crate::nn::Mode;
use crate::raster::RasterTile;
use crate::windowing::{extract_window_pair, WindowGeometry, WindowPair};

/// Anything that maps window pairs to local logits `[u, h_l, w_l]`.
pub trait WindowPredictor {
    fn num_classes(&self) -> usize;
    fn geometry(&self) -> WindowGeometry;
    fn predict_windows(&self, pairs: &[WindowPair]) -> Result<Vec<Array3<f32>>>;
}

impl WindowPredictor for SegmentationModel {
    fn num_classes(&self) -> usize {
        self.config().num_classes
    }

    fn geometry(&self) -> WindowGeometry {
        self.config().geometry
    }

    fn predict_windows(&self, pairs: &[WindowPair]) -> Result<Vec<Array3<f32>>> {
        if pairs.is_empty() {
            return Ok(Vec::new());
        }
        let (dtype, device) = (self.dtype(), self.store().device());
        let local: Vec<_> = pairs.iter().map(|p| p.local_image.view()).collect();
        let local = stack_images(&local, dtype, device)?;
        let context = if self.config().variant.uses_context() {
            let c: Vec<_> = pairs.iter().map(|p| p.context_image.view()).collect();
            Some(stack_images(&c, dtype, device)?)
        } else {
            None
        };
        let out = self.forward(&local, context.as_ref(), Mode::Eval)?;
        unstack_logits(&out.local)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlidingConfig {
    /// Window step `(rows, cols)`; `None` means the local window size.
    pub stride: Option<(usize, usize)>,
    /// Windows per forward pass.
    pub batch_size: usize,
    /// Keep the averaged logits in the output.
    pub keep_logits: bool,
}

impl Default for SlidingConfig {
    fn default() -> Self {
        Self { stride: None, batch_size: 8, keep_logits: false }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionMap {
    /// `[H, W]` class indices.
    pub classes: Array2<u32>,
    /// `[u, H, W]` averaged logits when requested.
    pub logits: Option<Array3<f32>>,
}

/// Start offsets along one axis: every `stride` pixels, plus a final window
/// flush with the far edge when the grid does not land on it.
pub fn axis_offsets(len: usize, window: usize, stride: usize) -> Result<Vec<usize>> {
    if len < window {
        return Err(geometry!("tile side {len} is smaller than the window {window}"));
    }
    if stride == 0 {
        return Err(geometry!("sliding stride must be positive"));
    }
    let mut out: Vec<usize> = (0..=len - window).step_by(stride).collect();
    if *out.last().expect("non-empty") != len - window {
        out.push(len - window);
    }
    Ok(out)
}

pub fn window_origins(h: usize, w: usize, geom: &WindowGeometry, stride: (usize, usize)) -> Result<Vec<(usize, usize)>> {
    let rows = axis_offsets(h, geom.local_h, stride.0)?;
    let cols = axis_offsets(w, geom.local_w, stride.1)?;
    Ok(rows.iter().flat_map(|&r| cols.iter().map(move |&c| (r, c))).collect())
}

/// Index of the largest value; ties go to the lower index.
pub fn argmax_lowest(values: impl IntoIterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (k, v) in values.into_iter().enumerate() {
        if v > best.1 {
            best = (k, v);
        }
    }
    best.0
}

pub fn sliding_predict<P: WindowPredictor + ?Sized>(
    model: &P,
    tile: &RasterTile,
    cfg: &SlidingConfig,
) -> Result<PredictionMap> {
    let geom = model.geometry();
    let u = model.num_classes();
    let (h, w) = (tile.height(), tile.width());
    let stride = cfg.stride.unwrap_or((geom.local_h, geom.local_w));
    let origins = window_origins(h, w, &geom, stride)?;
    let mut sum = Array3::<f64>::zeros((u, h, w));
    let mut count = Array2::<u32>::zeros((h, w));
    for chunk in origins.chunks(cfg.batch_size.max(1)) {
        let pairs = chunk
            .iter()
            .map(|&o| extract_window_pair(tile, o, &geom))
            .collect::<Result<Vec<_>>>()?;
        let logits = model.predict_windows(&pairs)?;
        for (&(r, c), l) in chunk.iter().zip(&logits) {
            let mut region = sum.slice_mut(s![.., r..r + geom.local_h, c..c + geom.local_w]);
            region.zip_mut_with(l, |acc, &v| *acc += v as f64);
            count.slice_mut(s![r..r + geom.local_h, c..c + geom.local_w]).mapv_inplace(|n| n + 1);
        }
    }
    for k in 0..u {
        let mut plane = sum.slice_mut(s![k, .., ..]);
        plane.zip_mut_with(&count, |v, &n| *v /= n as f64);
    }
    let classes = Array2::from_shape_fn((h, w), |(i, j)| argmax_lowest((0..u).map(|k| sum[[k, i, j]])) as u32);
    let logits = cfg.keep_logits.then(|| sum.mapv(|v| v as f32));
    Ok(PredictionMap { classes, logits })
}
