//! Core library for multimodal liver-fibrosis staging from volumetric MRI
//! with missing modalities.
//!
//! Modules follow the data path: [`nifti_io`] reads scans, [`preprocess`]
//! turns them into fixed-shape bundles, [`model`] defines the network on top
//! of the [`numerics`] autodiff kernels, [`training`] runs cross-validation
//! and [`evaluate`] scores ensembles. [`synthetic`] generates toy cohorts.

pub mod evaluate;
pub mod model;
pub mod nifti_io;
pub mod numerics;
pub mod preprocess;
pub mod synthetic;
pub mod training;
pub mod volume;

pub use evaluate::{EvalError, EvalReport, PredictionSet};
pub use model::{Model, ModelConfig, ModelError};
pub use nifti_io::{NiftiError, NiftiHeader};
pub use numerics::{NumericsError, Params, Tensor};
pub use preprocess::{CaseBundle, Modality, PreprocessConfig, PreprocessError};
pub use synthetic::{SynthConfig, SynthError};
pub use training::{Task, TrainConfig, TrainingError};
pub use volume::{Grid, Volume};
