//! Metric-agnostic ranking optimization.
//!
//! The crate simulates costly, noisy, list-level black-box ranking metrics
//! behind a budgeted oracle, learns offline surrogate metric models from the
//! sparse observations, optimizes stochastic ranking policies against those
//! surrogates, and drives data collection with uncertainty-based exploration.
//!
//! Module map:
//! - [`numeric_core`]: matrices, MLP with exact gradients, dropout
//!   uncertainty, Gaussian CDF, seeded RNG.
//! - [`data_ingest`]: LETOR/SVMlight parsing, splits, normalization.
//! - [`metric_oracle`]: NDCG/ERR/engagement behind a noisy budgeted black box.
//! - [`surrogate_lab`]: noise-aware pairwise surrogate training, local-context
//!   featurization, offline actor-critic with the flip-Jaccard pseudometric.
//! - [`rank_optim`]: Plackett-Luce stochastic ranking, detached scoring and
//!   ranking heads, noisy-channel flips, multi-task gradient mixing,
//!   uncertainty-driven active selection.
//! - [`experiment`]: the configuration-driven offline simulation harness.

pub mod data_ingest;
pub mod experiment;
pub mod metric_oracle;
pub mod numeric_core;
pub mod rank_optim;
pub mod surrogate_lab;

pub use data_ingest::{Dataset, Item, RankingSession};
pub use metric_oracle::{MetricKind, MetricSpec, NoiseModel, OracleHandle, Ranking};
pub use numeric_core::{MlpParams, Rng};
