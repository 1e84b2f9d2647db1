//! SimSiam pretraining on ResNet-V2 backbones initialized from GroupNorm +
//! weight-standardized checkpoints through BatchNorm weight surgery, with
//! collapse monitoring and kNN / linear-probe evaluation.

pub mod backbone;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod nn;
pub mod par;
pub mod pipeline;
pub mod ssl;
pub mod surgery;
pub mod viz;

pub use error::{Error, Result};
