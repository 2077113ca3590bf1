//! Multi-view class-incremental learning.
//!
//! Each view of each class arrives once. A frozen random encoder per view is
//! refined by a FISTA-fitted sparse decoder, a fusion layer learns under an
//! orthogonal projector that shields directions used by earlier sessions, and
//! an expandable softmax head is regularized by a running diagonal Fisher.

pub mod consolidation;
pub mod container;
pub mod dataset;
pub mod evaluation;
pub mod linalg;
pub mod orthogonal_fusion;
pub mod sparse_features;
pub mod trainer;

pub use consolidation::{DecisionHead, FisherEstimate};
pub use dataset::{SplitDataset, StreamProtocol, ViewBatch};
pub use evaluation::AccuracyMatrix;
pub use orthogonal_fusion::{FusionLayer, Projector};
pub use sparse_features::{EncoderConfig, RandomEncoder};
pub use trainer::{run, RunConfig, Trainer};
