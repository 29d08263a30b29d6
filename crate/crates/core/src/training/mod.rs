//! Three-step training of the decomposed reader on a synthetic lookup task.

pub mod losses;
pub mod optim;
pub mod task;
pub mod trainer;

pub use optim::{OptimConfig, OptimizerKind};
pub use task::{SyntheticTask, TaskConfig};
pub use trainer::{
    evaluate, run_ablations, three_step_train, train_stage, AblationReport, EvalMode, Stage, StepBudget,
    ThreeStepOutcome, TraceRow, TrainConfig,
};
