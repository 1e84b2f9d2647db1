//! Representation evaluation: kNN, linear probe, metrics, collapse statistic
//! and embedding export.

pub mod collapse;
pub mod embed;
pub mod features;
pub mod knn;
pub mod metrics;
pub mod probe;
pub mod tsne;

pub use collapse::collapse_std;
pub use embed::{export_embeddings, write_embeddings};
pub use features::{extract_both, extract_features};
pub use knn::{knn_predict, KnnConfig};
pub use metrics::{balanced_metrics, focal_loss, Metrics};
pub use probe::{linear_evaluate, linear_probe, EvalReport, ProbeConfig};
pub use tsne::{silhouette, tsne, TsneConfig};
