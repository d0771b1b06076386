//! Toy-scale mixture-of-experts training with variable expert counts, elastic
//! evaluation and router diagnostics.

pub mod analysis;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod graph;
pub mod model;
pub mod moe;
pub mod optim;
pub mod param;
pub mod schedule;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use model::{Model, ModelConfig};
pub use moe::{select_topk, select_topp, ExpertSelection, FfnKind, ScoreFn};
pub use optim::{adamw_step, OptimizerConfig};
pub use param::{ParamId, ParamStore, Parameter};
pub use schedule::{GranularityEvent, KSchedule, Routing, StrategyConfig, StrategyKind};
pub use tensor::{Scalar, Tensor};
pub use train::{TrainConfig, Trainer};
