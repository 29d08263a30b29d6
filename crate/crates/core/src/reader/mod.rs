//! The decomposed reader model.

pub mod config;
pub mod io;
mod layers;
pub mod model;
pub mod ops;
pub mod params;
pub mod schedule;

pub use config::ReaderConfig;
pub use model::{
    Binarization, CachedPassage, EncoderPath, Example, InferTrace, LossParts, LossSpec, Reader, StageTimings, TeacherSignal,
};
pub use params::ReaderParams;
pub use schedule::{MergeRule, MergeSchedule};
