//! Minimal reverse-mode differentiation for 4-D feature maps.
//!
//! Every value flowing through a [`Graph`] is an `(N, C, H, W)` array. Vectors
//! such as latent codes are carried as `(N, L, 1, 1)`.

mod graph;
mod kernels;
mod layers;
mod params;

pub use graph::{Graph, Mode, Var};
pub use layers::{BatchNorm, Conv2d};
pub use params::{Gradients, Param, ParamGroup, ParamId, ParamStore, RunningStats, StatsId};

/// Batched feature map, `(N, C, H, W)`.
pub type Tensor = ndarray::Array4<f64>;
