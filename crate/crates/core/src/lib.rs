//! Semi-supervised domain adaptation with a learned instance graph, moving
//! class centroids and prototype-based source label adaptation, on top of a
//! small tape-based reverse-mode autodiff engine over `f64` matrices.
//!
//! Start at [`trainer::Trainer`] or [`trainer::run`]; data comes from
//! [`data::make_gaussian_shift`] or [`data::SsdaDataset::read_csv`].

pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod losses;
pub mod model;
pub mod prototypes;
pub mod tensor;
pub mod trainer;

pub use autodiff::{Gradients, Tape, Var};
pub use data::{make_gaussian_shift, GaussianShiftParams, SsdaDataset};
pub use error::{Error, Result};
pub use experiment::ExperimentConfig;
pub use model::{Model, ModelConfig};
pub use tensor::{Matrix, Shape};
pub use trainer::{run, EvalReport, LossReport, Preset, Trainer, TrainerConfig};
