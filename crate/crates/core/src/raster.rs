use ndarray::{Array2, Array3};

use crate::error::{geometry, Error, Result};

/// Class index raster, `[H x W]`.
pub type LabelMap = Array2<u32>;

/// A multi-band image with an aligned label map.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterTile {
    pub id: String,
    /// `[bands x H x W]`
    pub pixels: Array3<f32>,
    pub labels: LabelMap,
}

impl RasterTile {
    pub fn new(id: impl Into<String>, pixels: Array3<f32>, labels: LabelMap) -> Result<Self> {
        let (_, h, w) = pixels.dim();
        if labels.dim() != (h, w) {
            return Err(geometry!(
                "pixels are {h}x{w} but labels are {}x{}",
                labels.nrows(),
                labels.ncols()
            ));
        }
        Ok(Self {
            id: id.into(),
            pixels,
            labels,
        })
    }

    pub fn bands(&self) -> usize {
        self.pixels.dim().0
    }

    pub fn height(&self) -> usize {
        self.pixels.dim().1
    }

    pub fn width(&self) -> usize {
        self.pixels.dim().2
    }

    /// Checks every non-ignored label is a valid class index.
    pub fn validate_labels(&self, num_classes: usize, ignore: Option<u32>) -> Result<()> {
        for (idx, &l) in self.labels.indexed_iter() {
            if Some(l) != ignore && l as usize >= num_classes {
                return Err(Error::Data(format!(
                    "tile {}: label {l} at {:?} is not below {num_classes}",
                    self.id, idx
                )));
            }
        }
        Ok(())
    }
}
