//! Multimodal prompt tuning on top of frozen vision and language backbones.

pub mod accounting;
pub mod attention;
pub mod checkpoint;
pub mod config;
mod error;
pub mod eval;
pub mod experiment;
pub mod fusion;
pub mod model;
pub mod pipeline;
pub mod prompt;
pub mod seed;
pub mod sequence;
pub mod spec;
pub mod tasks;
pub mod trainer;

pub use config::RunConfig;
pub use error::{Error, Result};
pub use pipeline::{Architecture, Example, M2ptModel};
pub use prompt::{InitPolicy, PromptPlan, ScheduleVariant};
pub use spec::{LanguageModelSpec, ModelSpec, VisionEncoderSpec};
