//! Object-level spatial verification for large-scale image retrieval.
//!
//! Database images are indexed by their local descriptors. A query's
//! nearest-neighbor matches are grouped per database image, projected into
//! object-centroid votes and clustered, and each image is ranked by the
//! quality of its best shared object. See the `os2os` command-line tool for
//! the end-to-end workflow.

pub mod error;
pub mod eval;
pub mod index;
pub mod io;
pub mod pipeline;
pub mod synth;
pub mod types;
pub mod verify;

pub use error::{Error, Result};
pub use index::{build_index, knn_matches, Index, IndexConfig, IndexKind};
pub use pipeline::{run_baseline_feature_only, run_query, QueryOptions, RankedEntry, RankedResult};
pub use types::{Dataset, FeatureSet, Keypoint, MatchRecord};
pub use verify::{AblationFlags, VerifyConfig};
