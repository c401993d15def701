//! Dense-block U-Net for OCT to OCTA patch translation, written from scratch
//! with explicit backward passes so it can be trained on the CPU.

mod config;
mod infer;
mod median;
mod net;
pub mod ops;
mod params;
mod tensor;
mod train;

pub use config::{Architecture, ChannelPlan, ConvSpec, UNetConfig};
pub use infer::{infer_bscan, infer_volume};
pub use median::median_filter_3;
pub use net::{backward, backward_from, forward, loss_l2, loss_l2_grad, predict, ForwardPass, Tape};
pub use ops::Mode;
pub use params::{
    build_params, decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Gradients,
    ModelParams, ParamTensor, Params, CHECKPOINT_MAGIC,
};
pub use tensor::{Real, Tensor};
pub use train::{
    continue_training, train, train_with_progress, Adam, EpochStats, TrainConfig, TrainReport,
    TrainingSample, TrainingSet,
};

use crate::patch::PatchError;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("parameter shape audit failed: {0}")]
    ShapeAudit(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("training set is empty")]
    EmptyDataset,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("I/O failure on {0}: {1}")]
    Io(String, #[source] std::io::Error),
    #[error(transparent)]
    Patch(#[from] PatchError),
}
