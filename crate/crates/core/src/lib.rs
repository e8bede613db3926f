//! Wide-context semantic segmentation.
//!
//! A local residual encoder segments a window of a large raster while a
//! shallow context encoder looks at a 3x wider (and 4x downsampled) view of
//! the same area. Local feature tokens attend over context tokens before the
//! classifier head, so predictions can depend on evidence outside the window.
//!
//! The crate covers the whole pipeline: window extraction with reflection
//! padding ([`windowing`]), dataset splits and synthetic context tasks
//! ([`split`], [`synth`]), the network ([`backbones`], [`transformer`],
//! [`model`]), training ([`train`]), and tile-level inference and metrics
//! ([`inference`], [`metrics`]).

pub mod augment;
pub mod backbones;
pub mod batch;
pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod gradcheck;
pub mod inference;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod raster;
pub mod schedule;
pub mod split;
pub mod synth;
pub mod train;
pub mod transformer;
pub mod windowing;

pub use error::{Error, Result};
pub use metrics::{ConfusionMatrix, MetricsReport};
pub use model::{ModelConfig, SegmentationModel, Variant};
pub use raster::RasterTile;
pub use windowing::{WindowGeometry, WindowPair};
