//! Classifier zoo, source pretraining and checkpoint files.

mod checkpoint;
mod train;
mod zoo;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CheckpointMeta,
    CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use train::{cross_entropy, evaluate, pretrain, EpochStats, TrainConfig};
pub use zoo::{
    anchor_order, anchor_select, Forward, Model, ModelKind, ModelSpec, NormKind, Trainable,
};
