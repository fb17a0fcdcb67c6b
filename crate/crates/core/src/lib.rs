//! Pattern discovery over tiled, labeled image corpora.
//!
//! Tiles are clustered by cosine-distance k-means over their feature
//! vectors. The cluster count is chosen either at the knee of the distortion
//! curve or by minimizing a per-image compactness score, and the resulting
//! clusters are exported as a reviewable pattern catalog and evaluated as a
//! cluster-frequency classifier.

pub mod catalog;
pub mod classifier;
pub mod clustering;
pub mod error;
pub mod feature_store;
pub mod model_selection;
pub mod numeric;
pub mod preprocess;
pub mod stats;
pub mod synthetic;

pub use error::{Error, Result};
