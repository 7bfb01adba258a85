//! Small feed-forward networks with layernorm and hand-written reverse-mode gradients.

mod checkpoint;
mod layernorm;
mod net;
mod optim;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CheckpointHeader};
pub use layernorm::{layernorm, layernorm_backward, LayerNormGrad, VARIANCE_FLOOR};
pub use net::{Activation, Architecture, ForwardTrace, Layer, LayerSpec, LayerTrace, NetConfig, NetParams, Scratch, Topology};
pub use optim::{feature_norms, freeze_all_but_last, freeze_mask, sgd_adam_step, AdamHyper, AdamState, ParamMask};
