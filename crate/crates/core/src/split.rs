//! Cutting a large tile into train/validation/test crops.
//!
//! Validation and test crops go on shelves of height `crop_size` along the
//! bottom of the tile. A shelf holds `floor(W / crop)` non-overlapping slots,
//! shared between the two roles. Training crops fill the area above the
//! shelves on an evenly spaced grid, overlapping each other when the area is
//! not a multiple of the crop size. No crop ever crosses a role boundary.

use ndarray::s;
use serde::{Deserialize, Serialize};

use crate::error::{geometry, Result};
use crate::raster::RasterTile;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Train,
    Val,
    Test,
}

impl Role {
    pub fn as_str(&self) -> &'static str {
        match self {
            Role::Train => "train",
            Role::Val => "val",
            Role::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Role> {
        match s {
            "train" => Some(Role::Train),
            "val" | "validation" => Some(Role::Val),
            "test" => Some(Role::Test),
            _ => None,
        }
    }
}

impl std::fmt::Display for Role {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub crop_size: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

/// Position of one crop in the source tile.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropPlacement {
    pub role: Role,
    pub row: usize,
    pub col: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitLayout {
    pub crop_size: usize,
    pub crops: Vec<CropPlacement>,
    /// Largest overlap in pixels between neighbouring training crops.
    pub train_overlap: (usize, usize),
}

#[derive(Debug, Clone, Default)]
pub struct SplitTiles {
    pub train: Vec<RasterTile>,
    pub val: Vec<RasterTile>,
    pub test: Vec<RasterTile>,
}

/// Evenly spaced start offsets of `n` windows of `size` inside `len`.
fn spread(n: usize, size: usize, len: usize) -> Vec<usize> {
    if n <= 1 {
        return vec![0; n];
    }
    let free = (len - size) as f64;
    (0..n)
        .map(|i| (i as f64 * free / (n - 1) as f64).round() as usize)
        .collect()
}

fn overlap(n: usize, size: usize, len: usize) -> usize {
    if n <= 1 {
        return 0;
    }
    (n * size).saturating_sub(len).div_ceil(n - 1)
}

pub fn plan_split(height: usize, width: usize, spec: &SplitSpec) -> Result<SplitLayout> {
    let crop = spec.crop_size;
    if crop == 0 {
        return Err(geometry!("crop size must be positive"));
    }
    if height < crop || width < crop {
        return Err(geometry!("{height}x{width} tile is smaller than crop size {crop}"));
    }
    let mut crops = Vec::with_capacity(spec.train + spec.val + spec.test);

    let slots_per_shelf = width / crop;
    let held_out = spec.val + spec.test;
    let shelves = held_out.div_ceil(slots_per_shelf);
    let train_height = height
        .checked_sub(shelves * crop)
        .filter(|&h| spec.train == 0 || h >= crop)
        .ok_or_else(|| {
            geometry!(
                "{height}x{width} tile cannot hold {} training crops above {shelves} held-out shelves of {crop}",
                spec.train
            )
        })?;

    let roles = std::iter::repeat_n(Role::Val, spec.val).chain(std::iter::repeat_n(Role::Test, spec.test));
    let xs = spread(slots_per_shelf, crop, width);
    for (k, role) in roles.enumerate() {
        let shelf = k / slots_per_shelf;
        let row = height - (shelf + 1) * crop;
        crops.push(CropPlacement { role, row, col: xs[k % slots_per_shelf] });
    }

    let mut train_overlap = (0, 0);
    if spec.train > 0 {
        // Grid shape with the smallest worst-case overlap.
        let (rows, cols) = (1..=spec.train)
            .map(|r| (r, spec.train.div_ceil(r)))
            .min_by_key(|&(r, c)| {
                let worst = overlap(r, crop, train_height).max(overlap(c, crop, width));
                (worst, r * c)
            })
            .expect("non-empty range");
        train_overlap = (overlap(rows, crop, train_height), overlap(cols, crop, width));
        let ys = spread(rows, crop, train_height);
        let xs = spread(cols, crop, width);
        for k in 0..spec.train {
            crops.push(CropPlacement { role: Role::Train, row: ys[k / cols], col: xs[k % cols] });
        }
    }
    Ok(SplitLayout { crop_size: crop, crops, train_overlap })
}

pub fn split_tile(tile: &RasterTile, spec: &SplitSpec) -> Result<SplitTiles> {
    let layout = plan_split(tile.height(), tile.width(), spec)?;
    let c = layout.crop_size;
    let mut out = SplitTiles::default();
    let mut counters = [0usize; 3];
    for p in &layout.crops {
        let idx = match p.role {
            Role::Train => 0,
            Role::Val => 1,
            Role::Test => 2,
        };
        let sub = RasterTile {
            id: format!("{}_{}{:03}", tile.id, p.role, counters[idx]),
            pixels: tile.pixels.slice(s![.., p.row..p.row + c, p.col..p.col + c]).to_owned(),
            labels: tile.labels.slice(s![p.row..p.row + c, p.col..p.col + c]).to_owned(),
        };
        counters[idx] += 1;
        match p.role {
            Role::Train => out.train.push(sub),
            Role::Val => out.val.push(sub),
            Role::Test => out.test.push(sub),
        }
    }
    Ok(out)
}
