//! Local/context window extraction.
//!
//! A context window is `ratio` times the local window per side and shares its
//! center, so it reaches `(ratio - 1) / 2` local-window sizes past each edge.
//! Where that reaches outside the tile the tile is mirrored about its border
//! pixel (the border pixel itself is not repeated, period `2 (n - 1)`).

use ndarray::{s, Array2, Array3, ArrayView2, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, geometry, Result};
use crate::raster::{LabelMap, RasterTile};

/// Mirrors `i` into `0..n` without repeating the border sample.
///
/// Only valid for a single bounce, `-(n-1) <= i <= 2(n-1)`; callers check
/// margins before indexing.
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut j = i.rem_euclid(period);
    if j >= n as isize {
        j = period - j;
    }
    j as usize
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Margins {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

impl Margins {
    pub fn uniform(m: usize) -> Self {
        Self {
            top: m,
            bottom: m,
            left: m,
            right: m,
        }
    }

    fn check(&self, h: usize, w: usize) -> Result<()> {
        if self.top.max(self.bottom) > 0 && self.top.max(self.bottom) >= h {
            return Err(geometry!(
                "vertical margins ({}, {}) must be smaller than height {h}",
                self.top,
                self.bottom
            ));
        }
        if self.left.max(self.right) > 0 && self.left.max(self.right) >= w {
            return Err(geometry!(
                "horizontal margins ({}, {}) must be smaller than width {w}",
                self.left,
                self.right
            ));
        }
        Ok(())
    }
}

/// Pads a `[c x H x W]` array with mirror reflections of its border region.
pub fn reflect_pad<T: Clone>(image: ArrayView3<T>, margins: Margins) -> Result<Array3<T>> {
    let (c, h, w) = image.dim();
    margins.check(h, w)?;
    let out_h = h + margins.top + margins.bottom;
    let out_w = w + margins.left + margins.right;
    Ok(Array3::from_shape_fn((c, out_h, out_w), |(b, i, j)| {
        let si = reflect_index(i as isize - margins.top as isize, h);
        let sj = reflect_index(j as isize - margins.left as isize, w);
        image[[b, si, sj]].clone()
    }))
}

/// Single-band version of [`reflect_pad`].
pub fn reflect_pad_2d<T: Clone>(map: ArrayView2<T>, margins: Margins) -> Result<Array2<T>> {
    let padded = reflect_pad(map.insert_axis(Axis(0)), margins)?;
    Ok(padded.index_axis_move(Axis(0), 0))
}

/// Local window size, context ratio and context input downsampling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowGeometry {
    pub local_h: usize,
    pub local_w: usize,
    /// Context window side over local window side; odd so the local window
    /// sits exactly in the middle.
    pub ratio: usize,
    /// Area-downsampling factor applied to the context crop.
    pub ctx_downsample: usize,
}

impl Default for WindowGeometry {
    fn default() -> Self {
        Self {
            local_h: 256,
            local_w: 256,
            ratio: 3,
            ctx_downsample: 4,
        }
    }
}

impl WindowGeometry {
    pub fn square(local: usize, ratio: usize, ctx_downsample: usize) -> Self {
        Self {
            local_h: local,
            local_w: local,
            ratio,
            ctx_downsample,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.local_h == 0 || self.local_w == 0 {
            return Err(config_err!("local window must be non-empty"));
        }
        if self.ratio == 0 || self.ratio % 2 == 0 {
            return Err(config_err!(
                "context ratio must be odd for a centered local window, got {}",
                self.ratio
            ));
        }
        if self.ctx_downsample == 0
            || self.local_h % self.ctx_downsample != 0
            || self.local_w % self.ctx_downsample != 0
        {
            return Err(config_err!(
                "local window {}x{} is not divisible by context downsample {}",
                self.local_h,
                self.local_w,
                self.ctx_downsample
            ));
        }
        Ok(())
    }

    /// Context window size in tile pixels.
    pub fn context_size(&self) -> (usize, usize) {
        (self.ratio * self.local_h, self.ratio * self.local_w)
    }

    /// Context window size after downsampling, i.e. the context encoder input.
    pub fn context_input_size(&self) -> (usize, usize) {
        let (h, w) = self.context_size();
        (h / self.ctx_downsample, w / self.ctx_downsample)
    }

    /// Distance the context window extends past each side of the local window.
    pub fn margins(&self) -> (usize, usize) {
        (
            (self.ratio - 1) / 2 * self.local_h,
            (self.ratio - 1) / 2 * self.local_w,
        )
    }
}

/// One training/inference sample.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowPair {
    /// `[c x h_l x w_l]`
    pub local_image: Array3<f32>,
    /// `[c x h_c/s x w_c/s]`
    pub context_image: Array3<f32>,
    pub local_label: LabelMap,
    pub context_label: LabelMap,
    /// Top-left corner of the local window in the source tile.
    pub origin: (usize, usize),
}

/// Cuts the local window at `origin` and its surrounding context window.
pub fn extract_window_pair(
    tile: &RasterTile,
    origin: (usize, usize),
    geom: &WindowGeometry,
) -> Result<WindowPair> {
    geom.validate()?;
    let (h, w) = (tile.height(), tile.width());
    let (row, col) = origin;
    if row + geom.local_h > h || col + geom.local_w > w {
        return Err(geometry!(
            "local window {}x{} at ({row}, {col}) leaves the {h}x{w} tile",
            geom.local_h,
            geom.local_w
        ));
    }
    let (mh, mw) = geom.margins();
    let needed = Margins {
        top: mh.saturating_sub(row),
        bottom: (row + geom.local_h + mh).saturating_sub(h),
        left: mw.saturating_sub(col),
        right: (col + geom.local_w + mw).saturating_sub(w),
    };
    needed.check(h, w)?;

    let local_image = tile
        .pixels
        .slice(s![.., row..row + geom.local_h, col..col + geom.local_w])
        .to_owned();
    let local_label = tile
        .labels
        .slice(s![row..row + geom.local_h, col..col + geom.local_w])
        .to_owned();

    let (ch, cw) = geom.context_size();
    let top = row as isize - mh as isize;
    let left = col as isize - mw as isize;
    let rows: Vec<usize> = (0..ch).map(|i| reflect_index(top + i as isize, h)).collect();
    let cols: Vec<usize> = (0..cw).map(|j| reflect_index(left + j as isize, w)).collect();
    let context_pixels =
        Array3::from_shape_fn((tile.bands(), ch, cw), |(b, i, j)| tile.pixels[[b, rows[i], cols[j]]]);
    let context_labels = Array2::from_shape_fn((ch, cw), |(i, j)| tile.labels[[rows[i], cols[j]]]);

    Ok(WindowPair {
        local_image,
        context_image: mean_pool(context_pixels.view(), geom.ctx_downsample),
        local_label,
        context_label: nearest_downsample(context_labels.view(), geom.ctx_downsample),
        origin,
    })
}

/// Area (mean) downsampling by an integer factor. Dimensions must divide.
pub fn mean_pool(image: ArrayView3<f32>, factor: usize) -> Array3<f32> {
    let (c, h, w) = image.dim();
    if factor == 1 {
        return image.to_owned();
    }
    let (oh, ow) = (h / factor, w / factor);
    let norm = (factor * factor) as f64;
    Array3::from_shape_fn((c, oh, ow), |(b, i, j)| {
        let block = image.slice(s![b, i * factor..(i + 1) * factor, j * factor..(j + 1) * factor]);
        (block.iter().map(|&v| v as f64).sum::<f64>() / norm) as f32
    })
}

/// Nearest-neighbour label downsampling: each output cell takes the label at
/// the (lower-right) center of its block, so no new values can appear.
pub fn nearest_downsample(labels: ArrayView2<u32>, factor: usize) -> LabelMap {
    let (h, w) = labels.dim();
    let off = factor / 2;
    Array2::from_shape_fn((h / factor, w / factor), |(i, j)| {
        labels[[i * factor + off, j * factor + off]]
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, Array1};

    fn ramp(c: usize, h: usize, w: usize) -> Array3<f32> {
        Array3::from_shape_fn((c, h, w), |(b, i, j)| (b * 1000 + i * w + j) as f32)
    }

    #[test]
    fn reflect_row_left_two() {
        let row: Array1<i32> = arr1(&[1, 2, 3]);
        let img = row.insert_axis(Axis(0)).insert_axis(Axis(0));
        let padded = reflect_pad(
            img.view(),
            Margins {
                left: 2,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(padded.iter().copied().collect::<Vec<_>>(), vec![3, 2, 1, 2, 3]);
    }

    #[test]
    fn zero_margins_is_identity() {
        let img = ramp(2, 4, 5);
        assert_eq!(reflect_pad(img.view(), Margins::default()).unwrap(), img);
    }

    #[test]
    fn margin_at_dimension_is_rejected() {
        let img = ramp(1, 3, 3);
        let err = reflect_pad(img.view(), Margins::uniform(3)).unwrap_err();
        assert_eq!(err.category(), "geometry");
    }

    #[test]
    fn default_geometry_sizes() {
        let g = WindowGeometry::default();
        assert_eq!(g.context_size(), (768, 768));
        assert_eq!(g.context_input_size(), (192, 192));
        assert_eq!(g.margins(), (256, 256));
    }

    #[test]
    fn even_ratio_rejected() {
        assert!(WindowGeometry::square(64, 2, 4).validate().is_err());
        assert!(WindowGeometry::square(66, 3, 4).validate().is_err());
    }

    #[test]
    fn window_outside_tile_is_geometry_error() {
        let tile = RasterTile::new("t", ramp(1, 40, 40), Array2::zeros((40, 40))).unwrap();
        let g = WindowGeometry::square(16, 3, 4);
        let err = extract_window_pair(&tile, (30, 0), &g).unwrap_err();
        assert_eq!(err.category(), "geometry");
    }

    #[test]
    fn label_downsample_takes_block_center() {
        let labels = Array2::from_shape_fn((4, 4), |(i, j)| (i * 4 + j) as u32);
        let d = nearest_downsample(labels.view(), 2);
        assert_eq!(d, ndarray::arr2(&[[5, 7], [13, 15]]));
    }
}
