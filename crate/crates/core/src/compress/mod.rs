//! One-shot pruning, layerwise sparsity profiles and INT8 quantization.

pub mod apply;
pub mod calib;
pub mod mask;
pub mod profile;
pub mod prune;
pub mod quant;

pub use calib::CalibrationSet;
pub use mask::{Mask, SparsityMask};
pub use profile::{ProfileKind, SparsityProfile};
pub use prune::{prune_magnitude, prune_obs, PruneScope};
pub use quant::{QuantRecipe, QuantizedMatrix};
