//! Attention as a kernel smoother: set filtering, masked normalization,
//! value functions and the multi-head layer, plus a plain softmax reference.

pub mod layer;
pub mod mask;
pub mod reference;
pub mod smoother;

pub use layer::{
    attend, attention_forward, attention_weights, AttentionConfig, AttentionInputs, AttentionParams, AttentionVars,
    AttnInput, AttnOutput, ValueMode,
};
pub use mask::{build_mask, FilterKind, FilterSpec, Mask};
pub use reference::reference_softmax_attention;
pub use smoother::{smooth, smoothing_weights, DEFAULT_EPS};
