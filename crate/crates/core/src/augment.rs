//! Joint geometric augmentation of window pairs.
//!
//! Random crops are zooms about a point of the local window: the context
//! crop is zoomed by the same factor about the same tile point, so the local
//! window stays centered in the context window and the side ratio is kept.

use ndarray::{s, Array2, Array3, ArrayView2, ArrayView3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::windowing::{WindowGeometry, WindowPair};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub flip_prob: f64,
    /// Crop side as a fraction of the window side, drawn uniformly.
    pub crop_scale: (f64, f64),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip_prob: 0.5,
            crop_scale: (0.75, 1.0),
        }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        Self {
            flip_prob: 0.0,
            crop_scale: (1.0, 1.0),
        }
    }
}

/// Zoom crop: side fraction `scale`, offset fractions of the free space.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CropDraw {
    pub scale: f64,
    pub fy: f64,
    pub fx: f64,
}

/// One realized augmentation, applied identically to all four arrays.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct AugmentDraw {
    pub hflip: bool,
    pub vflip: bool,
    pub crop: Option<CropDraw>,
}

impl AugmentDraw {
    pub fn identity() -> Self {
        Self::default()
    }

    pub fn sample<R: Rng + ?Sized>(cfg: &AugmentConfig, rng: &mut R) -> Self {
        let hflip = rng.random::<f64>() < cfg.flip_prob;
        let vflip = rng.random::<f64>() < cfg.flip_prob;
        let (lo, hi) = cfg.crop_scale;
        let scale = if hi > lo { rng.random_range(lo..hi) } else { lo };
        let (fy, fx) = (rng.random::<f64>(), rng.random::<f64>());
        let crop = (scale < 1.0).then_some(CropDraw { scale, fy, fx });
        Self { hflip, vflip, crop }
    }
}

pub fn augment<R: Rng + ?Sized>(
    pair: &WindowPair,
    geom: &WindowGeometry,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> WindowPair {
    apply(pair, geom, &AugmentDraw::sample(cfg, rng))
}

pub fn apply(pair: &WindowPair, geom: &WindowGeometry, draw: &AugmentDraw) -> WindowPair {
    let mut out = pair.clone();
    if let Some(crop) = draw.crop {
        out = zoom_crop(&out, geom, crop);
    }
    if draw.hflip {
        out.local_image = flip3(&out.local_image, false);
        out.context_image = flip3(&out.context_image, false);
        out.local_label = out.local_label.slice(s![.., ..;-1]).to_owned();
        out.context_label = out.context_label.slice(s![.., ..;-1]).to_owned();
    }
    if draw.vflip {
        out.local_image = flip3(&out.local_image, true);
        out.context_image = flip3(&out.context_image, true);
        out.local_label = out.local_label.slice(s![..;-1, ..]).to_owned();
        out.context_label = out.context_label.slice(s![..;-1, ..]).to_owned();
    }
    out
}

fn flip3(a: &Array3<f32>, vertical: bool) -> Array3<f32> {
    if vertical {
        a.slice(s![.., ..;-1, ..]).to_owned()
    } else {
        a.slice(s![.., .., ..;-1]).to_owned()
    }
}

fn zoom_crop(pair: &WindowPair, geom: &WindowGeometry, crop: CropDraw) -> WindowPair {
    let (hl, wl) = (geom.local_h as f64, geom.local_w as f64);
    let (sh, sw) = (crop.scale * hl, crop.scale * wl);
    let y0 = crop.fy * (hl - sh);
    let x0 = crop.fx * (wl - sw);
    let local = Region { y0, x0, h: sh, w: sw };

    // Same zoom about the same tile point, expressed in context-array pixels.
    let (mh, mw) = geom.margins();
    let r = geom.ratio as f64;
    let ds = geom.ctx_downsample as f64;
    let cy = mh as f64 + y0 + sh / 2.0;
    let cx = mw as f64 + x0 + sw / 2.0;
    let (csh, csw) = (crop.scale * r * hl, crop.scale * r * wl);
    let context = Region {
        y0: (cy - csh / 2.0) / ds,
        x0: (cx - csw / 2.0) / ds,
        h: csh / ds,
        w: csw / ds,
    };

    let (_, lh, lw) = pair.local_image.dim();
    let (_, ch, cw) = pair.context_image.dim();
    WindowPair {
        local_image: resample_bilinear(pair.local_image.view(), local, (lh, lw)),
        context_image: resample_bilinear(pair.context_image.view(), context, (ch, cw)),
        local_label: resample_nearest(pair.local_label.view(), local, (lh, lw)),
        context_label: resample_nearest(pair.context_label.view(), context, (ch, cw)),
        origin: pair.origin,
    }
}

/// Continuous source rectangle in pixel units.
#[derive(Debug, Clone, Copy)]
pub struct Region {
    pub y0: f64,
    pub x0: f64,
    pub h: f64,
    pub w: f64,
}

fn source_coord(start: f64, extent: f64, out: usize, i: usize) -> f64 {
    start + (i as f64 + 0.5) * extent / out as f64 - 0.5
}

/// Samples `region` onto an `out` grid with half-pixel-centered bilinear
/// interpolation (coordinates clamped to the array).
pub fn resample_bilinear(img: ArrayView3<f32>, region: Region, out: (usize, usize)) -> Array3<f32> {
    let (c, h, w) = img.dim();
    let taps = |start, extent, n_out, n_in: usize| -> Vec<(usize, usize, f64)> {
        (0..n_out)
            .map(|i| {
                let y = source_coord(start, extent, n_out, i).clamp(0.0, (n_in - 1) as f64);
                let i0 = y.floor() as usize;
                let i1 = (i0 + 1).min(n_in - 1);
                (i0, i1, y - i0 as f64)
            })
            .collect()
    };
    let ty = taps(region.y0, region.h, out.0, h);
    let tx = taps(region.x0, region.w, out.1, w);
    Array3::from_shape_fn((c, out.0, out.1), |(b, i, j)| {
        let (y0, y1, wy) = ty[i];
        let (x0, x1, wx) = tx[j];
        let p = |y: usize, x: usize| img[[b, y, x]] as f64;
        let top = p(y0, x0) * (1.0 - wx) + p(y0, x1) * wx;
        let bot = p(y1, x0) * (1.0 - wx) + p(y1, x1) * wx;
        (top * (1.0 - wy) + bot * wy) as f32
    })
}

pub fn resample_nearest(labels: ArrayView2<u32>, region: Region, out: (usize, usize)) -> Array2<u32> {
    let (h, w) = labels.dim();
    let pick = |start, extent, n_out, i, n_in: usize| -> usize {
        let y = source_coord(start, extent, n_out, i).round();
        y.clamp(0.0, (n_in - 1) as f64) as usize
    };
    Array2::from_shape_fn(out, |(i, j)| {
        labels[[
            pick(region.y0, region.h, out.0, i, h),
            pick(region.x0, region.w, out.1, j, w),
        ]]
    })
}
