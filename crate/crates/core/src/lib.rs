//! Typed multimedia generation plans: tool registry, static checking,
//! execution, scoring, self-correction and training-data export.

pub mod correction;
pub mod dataset;
pub mod digest;
pub mod exec;
pub mod media;
pub mod metrics;
pub mod modality;
pub mod plan;
pub mod registry;
pub mod remote;
pub mod synth;
pub mod text;

pub use modality::{Extension, Format, Modality};
pub use plan::{parse_plan, serialize_plan, Plan, PlanError, PlanStep, TaskType};
pub use registry::{ToolLibrary, ToolSpec};
