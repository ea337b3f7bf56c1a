//! DistMult knowledge base completion.
//!
//! Entities and relations are embedded as real vectors and a triple
//! `<h, r, t>` is scored by the trilinear product `sum_i h_i r_i t_i`.
//! Training minimizes the softmax negative log-likelihood of the true entity
//! against sampled negatives with a sparse Adam optimizer; evaluation ranks
//! the true entity under the filtered protocol and reports MR, MRR and
//! Hits@k, for single models or probability-averaging ensembles.

pub mod cli;
pub mod ensemble;
pub mod error;
pub mod evaluator;
pub mod kb;
pub mod model;
pub mod trainer;

pub use ensemble::Ensemble;
pub use error::{Error, Result};
pub use evaluator::{evaluate, Evaluation, Metrics, Scorer, TiePolicy};
pub use kb::{Dataset, Direction, FilterIndex, Query, RawTriple, Triple, Vocabulary};
pub use model::{ModelParams, ScoredCandidates};
pub use trainer::{fit, TrainConfig, TrainHistory};
