// SPDX-License-Identifier: MIT OR Apache-2.0

//! Toy decoder, synthetic drift scenarios and end-to-end experiments.

pub mod experiment;
pub mod model;
pub mod scenario;

pub use experiment::{region_mass, run_experiment, run_experiment_on, run_pipeline, ExperimentReport, PipelineRun};
pub use model::{run_generation, Generation, GenerationHook, ToyModel, ToyModelConfig};
pub use scenario::{gamma_schedule, make_scenario, random_trace, DriftScenario};
