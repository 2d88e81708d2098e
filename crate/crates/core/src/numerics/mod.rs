//! Tensors, differentiable kernels, the autodiff tape, AdamW and the
//! learning-rate schedule.

pub mod graph;
pub mod kernels;
pub mod optim;
pub mod params;
pub mod schedule;
pub mod tensor;

pub use graph::{Graph, Var};
pub use kernels::{
    conv3d, ffn, gelu, instance_norm, layer_norm, multi_head_attention, positional_encoding, softmax,
    AttentionWeights, ConvSpec, FfnWeights, Padding,
};
pub use optim::{adamw_step, AdamWConfig, OptimizerState};
pub use params::{ParamGrads, ParamId, Parameter, Params};
pub use schedule::{cosine_lr, ScheduleConfig};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("reflect padding needs extent >= 2 on axis {axis}, got {extent}")]
    InputTooSmallForReflect { axis: usize, extent: usize },
    #[error("no recorded graph to differentiate")]
    NoRecordedGraph,
    #[error("non-finite gradient for parameter #{0}")]
    NonFiniteGradient(usize),
    #[error("non-finite value in {0}")]
    NonFiniteValue(String),
    #[error("epoch {epoch} outside 0..={total}")]
    EpochOutOfRange { epoch: usize, total: usize },
    #[error("duplicate parameter name {0}")]
    DuplicateParameter(String),
    #[error("label {label} out of range for {classes} classes")]
    BadLabel { label: usize, classes: usize },
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
}
