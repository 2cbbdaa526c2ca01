//! Collaborative filtering on the unit hypersphere.
//!
//! The crate trains user/item representations for implicit-feedback
//! recommendation with a joint alignment + uniformity objective (and the
//! BPR / dynamically-sampled BPR baselines), using either a plain embedding
//! table or a linear graph-propagation encoder. It also measures the
//! geometry of learned representations over a full interaction set and runs
//! full-ranking Recall/NDCG evaluation.
//!
//! Module map:
//!
//! * [`dataset`]: interaction ingestion, k-core filtering, per-user splits, batching.
//! * [`encoder`]: embedding tables, graph propagation, row normalization, dump format.
//! * [`loss`]: loss values with analytic gradients, negative sampling.
//! * [`optim`]: row-sparse Adam.
//! * [`trainer`]: the training loop, early stopping, trace export, configs.
//! * [`eval`]: ranking metrics, geometry metrics, BPR lower-bound harness.

pub mod dataset;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod loss;
pub mod matrix;
pub mod optim;
pub mod rng;
pub mod trainer;

pub use dataset::{DatasetSplit, Interaction, InteractionSet, PositiveBatch, RawInteraction, SplitRatios};
pub use encoder::{EmbeddingTable, GraphPropagator};
pub use error::{Error, Result};
pub use eval::{GeometryReport, RankingMetrics};
pub use loss::LossOutput;
pub use matrix::Matrix;
pub use optim::AdamState;
pub use trainer::{EncoderKind, EpochTrace, Objective, TrainConfig, TrainOutcome};
