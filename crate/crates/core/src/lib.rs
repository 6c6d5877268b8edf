//! Hierarchical multi-task vessel segmentation with a whole-vessel spatial
//! attention, latent-variable uncertainty and uncertainty-filtered
//! self-training.
//!
//! The crate is organised bottom-up:
//!
//! - [`preprocess`]: illumination correction and edge maps forming the network input.
//! - [`tiler`]: multi-scale training crops and sliding-window stitching.
//! - [`nn`]: a small reverse-mode autodiff engine over `(N, C, H, W)` tensors.
//! - [`hcnet`]: the segmentation network and its spatial activation.
//! - [`losses`]: weighted BCE, deep supervision, masked pseudo-label loss, KL.
//! - [`uncertainty`]: latent encoders, Monte-Carlo pseudo-labels.
//! - [`model`]: network + latent path + checkpoints.
//! - [`pipeline`]: pretraining, self-labeling, retraining, prediction.
//! - [`metrics`], [`synth`]: evaluation and phantom data.

pub mod config;
pub mod container;
pub mod error;
pub mod hcnet;
pub mod imageio;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod preprocess;
pub mod synth;
pub mod tiler;
pub mod uncertainty;

pub use config::RunConfig;
pub use error::{Error, Result};
pub use hcnet::{spatial_activation, ActivationParams, BackboneConfig, ForwardOptions, HcNet, NetworkOutput};
pub use losses::{ClassWeights, LossConfig};
pub use metrics::{AvReport, EvalDomain, MetricReport};
pub use model::{ModelConfig, VesselModel};
pub use pipeline::TrainConfig;
pub use preprocess::{ChannelLabel, ChannelStack, PreprocessConfig, RawImage};
pub use synth::{DatasetHandle, Phantom, PhantomSpec, Record, Split};
pub use tiler::{LogitCanvas, PatchSpec};
pub use uncertainty::{LatentConfig, LatentGaussian, PseudoLabelBundle};
