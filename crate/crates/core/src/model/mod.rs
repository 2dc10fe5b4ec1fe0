//! The multi-scale encoder: initial embedding, the conv-like transformer
//! layer stack with cross-scale fusion, per-level reconstruction decoders,
//! the pretraining objective, and checkpoints.

mod checkpoint;
mod config;
mod forward;
mod loss;
mod params;
mod pretrain;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::ModelConfig;
pub use forward::{
    ctl_forward, cross_scale_fuse, embed_initial, encode, encode_all, forward_pyramid, FeatureMap, Pyramid,
};
pub use loss::{
    pretrain_loss, reconstruct_layer, reconstruction_targets, LossTerms, LossValues,
    Reconstruction,
};
pub use params::{CrossScaleParams, CtlParams, EmbedParams, ModelParams, ReconParams};
pub use pretrain::{
    evaluate_pretrain, pretrain, sample_loss_and_grad, PretrainConfig, PretrainRecord,
};
