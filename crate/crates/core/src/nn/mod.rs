//! Minimal layer toolkit on top of `candle-core` tensors and autograd.

mod layers;
pub mod ops;
mod store;

pub use layers::{BatchNorm2d, Conv2d, Conv2dSpec, LayerNorm, Linear};
pub use store::{Init, ParamEntry, ParamKind, ParamStore, Scope};

/// Train mode uses batch statistics and updates running statistics;
/// eval mode uses the frozen running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}
