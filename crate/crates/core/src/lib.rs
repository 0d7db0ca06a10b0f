//! Knowledge-aware conditional attention networks for recommendation over a
//! user-item graph merged with a knowledge graph.
//!
//! Training alternates a knowledge-embedding phase (hyperplane translations,
//! then a global attention cache over all edges) with a target phase that
//! samples an attention-weighted subgraph around each user-item pair and
//! re-weights it conditioned on that pair.

pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod explain;
pub mod gradcheck;
pub mod graph;
pub mod kagcn;
pub mod lcsan;
pub mod linalg;
pub mod model;
pub mod par;
pub mod params;
pub mod predictor;
pub mod rng;
pub mod sampler;
pub mod synth;
pub mod trainer;
pub mod transh;

pub use config::{Ablation, TrainConfig};
pub use dataset::Dataset;
pub use error::{KcanError, Result};
pub use eval::{evaluate, EvalOptions, EvalReport, PairScorer};
pub use graph::{EntityId, RelationId, UnifiedGraph};
pub use model::KcanModel;
pub use par::ExecPolicy;
pub use params::ParameterStore;
pub use trainer::{run_ablation, train, train_and_evaluate, LossTrace, TrainOutcome};
