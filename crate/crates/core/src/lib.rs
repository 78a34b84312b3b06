//! Restoration-pipeline search: synthetic degradations, a tool registry,
//! exhaustive pipeline search, an agent harness, data generation and
//! benchmarking.

pub mod agent;
pub mod bench;
pub mod degrade;
pub mod error;
pub mod filters;
pub mod forge;
pub mod image;
pub mod par;
pub mod provider;
pub mod quality;
pub mod scene;
pub mod space;
pub mod toolbox;

pub use degrade::{apply_recipe, DegradationRecipe, DegradationStep, StepParams, TaskId};
pub use error::{Error, Result};
pub use image::{load_image, save_image, ImageBuffer};
pub use par::Execution;
pub use quality::{Metric, ScoreConfig, ScoreReport, ZScoreStats};
pub use space::{
    count_decisions, enumerate_decisions, oracle_search, rank_of, search_space, DecisionSpace, OracleResult,
    PipelineDecision, Step,
};
pub use toolbox::{ToolDescriptor, ToolRegistry};
