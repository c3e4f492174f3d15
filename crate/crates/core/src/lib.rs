//! Fine-tuning toolkit for contrastive two-tower classifiers: a margin
//! metric softmax loss driven by frozen class-embedding distances, a Beta
//! moving average over the parameter trajectory, and synthetic benchmarks
//! with domain shift and open classes.
//!
//! The class bank (one unit vector per class) stays frozen; only the
//! encoder that maps input features into the bank's space is trained.

pub mod ablation;
pub mod binio;
pub mod databench;
pub mod ensemble;
pub mod eval;
pub mod experiment;
pub mod losses;
pub mod model;
pub mod par;
pub mod runfile;
pub mod tensorcore;
pub mod trainer;

pub use binio::FormatError;
pub use ensemble::ParamVector;
pub use eval::{EvalOptions, EvalReport};
pub use losses::{LossConfig, MarginMode};
pub use model::{ClassBank, Classifier, HeadKind};
pub use par::Execution;
pub use trainer::{EnsembleMode, TrainerConfig};
