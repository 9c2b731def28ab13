//! Temporal interaction graph embeddings with dual node memory and a learned
//! memory restarter.

pub mod autograd;
pub mod config;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod graph;
pub mod memory;
pub mod model;
pub mod nn;
pub mod params;
pub mod restarter;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use config::{RestarterKind, TrainConfig};
pub use error::{Error, Result};
pub use eval::{average_precision, auroc, EvalMode, EvalReport, RestartInit};
pub use graph::{Event, NodeId, Split, SplitPoints, TemporalGraph};
pub use memory::{DualMemory, MemoryUnit};
pub use model::{Model, Scores};
pub use synth::SynthConfig;
pub use trainer::{Checkpoint, EpochMetrics, EpochRecord, FitReport, Trainer};
