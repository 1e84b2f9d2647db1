//! Minimal CPU neural-network kernels with explicit forward/backward passes.

pub mod conv;
pub mod layers;
pub mod norm;
pub mod param;

pub use conv::{conv2d, conv2d_backward, Conv2d, ConvCache};
pub use layers::{global_avg_pool, Linear};
pub use norm::{
    batch_norm, group_norm, weight_standardize, BatchNorm, BnMode, GroupNorm, Norm, NormCache, RunningStats,
};
pub use param::{Param, Parameterized, SlotKind, SlotMut};
