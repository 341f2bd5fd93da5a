//! Evaluation: relevance and metrics, synthetic worlds, experiment runner.

pub mod experiment;
pub mod metrics;
pub mod world;

pub use experiment::{run_experiment, Dataset, ExperimentConfig, Method, Report};
pub use metrics::{anr, average_precision, mean_average_precision, RelevanceSpec};
pub use world::{generate_world, write_world, DomainTransform, SyntheticWorld, SyntheticWorldConfig};
