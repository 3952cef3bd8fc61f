//! Local-global sine coordinate networks.
//!
//! A signal is split into a grid of hyperrectangular partitions. Each
//! partition owns a small sine MLP (its local sub-network); a shared global
//! sub-network supplies signal-wide context that is merged into the local
//! features at every hidden stage. Because each partition's weights are a
//! separate block, deleting partitions from a trained model removes exactly
//! their share of parameters, and new partitions can be added and
//! fine-tuned.

pub mod edit;
pub mod error;
pub mod metrics;
pub mod model;
pub mod partition;
pub mod signalio;
pub mod store;
pub mod tensors;
pub mod train;

pub use edit::{crop, extend, Extension, MirrorMode};
pub use error::{Error, Result};
pub use model::{ArchKind, CropMask, MergeKind, Model, ModelSpec, ParamBreakdown, Params};
pub use partition::{Bounds, PartitionGrid, PartitionPlan};
pub use signalio::{Audio, ImageFormat, Signal};
pub use tensors::{BatchedMatrix, Matrix, Real, Rng};
pub use train::{fit, reconstruct, FreezeMask, HistoryRecord, TrainConfig};
