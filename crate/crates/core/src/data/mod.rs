//! Manifests, splits, image loading and dataset generation/ingestion.

pub mod image;
pub mod ingest;
pub mod manifest;
pub mod source;
pub mod split;
pub mod synth;

pub use self::image::{load_image, Normalize};
pub use manifest::{Entry, Manifest, Split};
pub use source::{Files, ImageSource, InMemory};
pub use split::{build_splits, SplitSpec};
pub use synth::{synth_dataset, SynthSpec};
