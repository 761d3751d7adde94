//! Attention as a kernel smoother.
//!
//! The crate is layered bottom-up: [`tensor`] and [`tape`] provide dense
//! arithmetic with reverse-mode gradients, [`kernel`] and [`positional`]
//! compute joint scores over content and position, [`attention`] filters
//! and normalizes them into a smoother, [`harness`] trains small models on
//! synthetic tasks, and [`verify`] runs the property checks.

pub mod attention;
pub mod error;
pub mod exec;
pub mod gradcheck;
pub mod harness;
pub mod kernel;
pub mod positional;
pub mod tape;
pub mod tensor;
pub mod verify;

pub use attention::{
    attention_forward, build_mask, reference_softmax_attention, smooth, AttentionConfig, AttentionInputs,
    AttentionParams, FilterKind, FilterSpec, ValueMode,
};
pub use error::{Error, Result};
pub use exec::Execution;
pub use gradcheck::{finite_diff_grad, relative_error};
pub use kernel::{is_valid_smoother_kernel, kernel_scores, KernelForm, KernelParams, KernelSpec};
pub use positional::{
    attention_param_count, joint_scores, sinusoidal_pe, xl_time_kernel, FreqDenominator, PeIntegration, PeMode,
    PeTable, PeTableKind,
};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
