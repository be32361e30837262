//! Deep feature reweighting.
//!
//! A feature extractor trained with plain ERM often still encodes the core
//! features of a task even when its classification head leans on a spurious
//! shortcut. This crate retrains only the last linear layer, on a small
//! group-balanced reweighting set, with ℓ1-regularized logistic regression
//! averaged over several balanced subsamples.
//!
//! Modules:
//! - [`data`] and [`io`]: embedding datasets, group schemas, file formats
//! - [`synth`]: block-Gaussian spurious-correlation generators
//! - [`mlp`]: a small ERM-trained feature extractor with gradient checking
//! - [`preprocess`]: standard scaling
//! - [`solver`]: the regularized logistic regression head
//! - [`dfr`]: subsampling, averaging, tuning, variants and baselines
//! - [`metrics`]: group accuracies
//! - [`analysis`]: decoding, core-only evaluation, logit additivity, sweeps

pub mod analysis;
pub mod data;
pub mod dfr;
pub mod error;
pub mod io;
pub mod metrics;
pub mod mlp;
pub mod preprocess;
pub mod rng;
pub mod solver;
pub mod synth;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub use dfr::{run_dfr, DfrConfig, DfrResult, Variant};
pub use data::{split, validate, DatasetSplit, EmbeddingDataset, GroupEntry, GroupSchema, Stratify};
pub use error::{DfrError, LoadError, Result};
pub use io::{load_embeddings, save_embeddings, EmbeddingFormat};
pub use metrics::GroupMetrics;
pub use mlp::{MlpModel, TrainConfig};
pub use preprocess::{fit_scaler, Scaler};
pub use solver::{fit_logreg, LinearHead, Penalty, SolverConfig};
pub use synth::{RawDataset, SpuriousSpec};

