//! Experiment plumbing: metrics, weight files and the staged pipeline.

pub mod experiment;
pub mod metrics;
pub mod weights;

pub use experiment::{run_experiment, ExperimentOutcome, ExperimentSpec, Stage};
pub use metrics::{evaluate_classifier, MetricsReport};
pub use weights::{load_detector, load_generator, read_weights, save_detector, save_generator, WeightsHeader};
