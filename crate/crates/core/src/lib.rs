//! GroupFS: unsupervised group feature selection.
//!
//! Features are softly assigned to groups with a Gumbel-Softmax relaxation,
//! each group is opened or closed by a stochastic gate, and the model is
//! trained to keep the retained features smooth on a sample graph rebuilt
//! from the gated data while the groups stay smooth on a fixed feature graph.

pub mod data;
pub mod error;
pub mod eval;
pub mod gates;
pub mod graph;
pub mod grouping;
pub mod losses;
pub mod optim;
pub mod par;
pub mod select;

pub use error::{Error, Result};
pub use losses::{FeatureGraph, LossBreakdown, LossConfig};
pub use optim::train::{train, Checkpoint, TrainConfig, TrainOutcome, TrainStatus, TrainedModel};
pub use optim::ParamSet;
pub use par::Exec;
