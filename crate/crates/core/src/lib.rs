//! Analytic model of a reconfigurable systolic near-memory accelerator for
//! LLM decoding.

pub mod analysis;
pub mod array;
pub mod error;
pub mod perf;
pub mod scheduler;
pub mod system;
pub mod workload;

pub use array::{ArrayConfig, Dataflow, LogicalShape};
pub use error::{Error, Result};
pub use perf::CostReport;
pub use system::{MemorySystem, SystemConfig};
pub use workload::{GemmOp, ModelConfig, OperatorGraph};
