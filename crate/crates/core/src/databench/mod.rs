//! Synthetic out-of-distribution benchmarks and the EMBA archive format.
//!
//! A benchmark draws well-separated class prototypes (they double as the
//! frozen class bank), lifts them into input space and applies a per-domain
//! rotation and offset plus Gaussian noise. Splitting holds out one domain
//! and a seeded subset of classes.

mod archive;
mod generate;
mod split;

use thiserror::Error;

pub use archive::{fixed_size, EmbeddingArchive, ARCHIVE_MAGIC, ARCHIVE_VERSION};
pub use generate::{
    domain_transforms, generate, BenchmarkSpec, DomainTransform, MAX_PROTOTYPE_COSINE,
};
pub use split::{partition_classes, split, Samples, SplitConfig, SplitKind, Splits};

use crate::model::ModelError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DataError {
    #[error("invalid benchmark spec: {0}")]
    InvalidSpec(String),
    #[error("could not place well-separated prototypes after {attempts} attempts; increase the embedding dimension (currently {embed_dim})")]
    Crowded { attempts: usize, embed_dim: usize },
    #[error("test domain {index} out of range for {domains} domains")]
    TestDomain { index: usize, domains: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}
