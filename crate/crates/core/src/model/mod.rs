//! The multiscale-fusion Transformer: pooled scale paths, per-scale
//! encoders, alignment back to the window length, attention-weighted fusion
//! and a window-level scoring head.

mod audit;
mod checkpoint;
mod config;
mod network;
mod params;

pub use audit::{audit_gradients, batch_loss, GradientAudit};
pub use checkpoint::{Checkpoint, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use config::ModelConfig;
pub use network::{
    align_scale, build_scale_inputs, detection_head, encoder_layer, fuse_scales, positional_encode,
    self_attention, AttentionOutput, ForwardPass, Fusion, LayerVars, Prediction,
};
pub use params::{
    layout, Init, LayerIndex, ModelParams, NamedArray, ParamIndex, ParamSpec, ScaleIndex,
};

#[cfg(test)]
mod tests;
