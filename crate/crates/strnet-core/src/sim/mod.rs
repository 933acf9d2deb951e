//! Desk-scale navigation worlds: procedurally generated 2-D occupancy grids,
//! a breadth-first expert demonstrator, egocentric observation rendering,
//! policy rollouts, dataset serialization, and evaluation metrics.

pub mod dataset;
pub mod expert;
pub mod metrics;
pub mod render;
pub mod rollout;
pub mod world;

pub use dataset::{generate_dataset, load_dataset, save_dataset, DataGenConfig, Dataset, Trajectory};
pub use expert::Expert;
pub use metrics::{compute_metrics, MetricsSummary};
pub use render::{render_observation, Heading};
pub use rollout::{rollout_policy, EpisodeMetrics, NavPolicy, RolloutOptions, StepContext};
pub use world::{generate_world, World, WorldConfig};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("world generation failed: {0}")]
    WorldGeneration(String),
    #[error("goal unreachable from {0:?}")]
    Unreachable((usize, usize)),
    #[error("dataset format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type SimResult<T> = std::result::Result<T, SimError>;
