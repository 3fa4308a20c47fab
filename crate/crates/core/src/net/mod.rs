//! A miniature trainable convnet: trunk, part-filter branches pooled by
//! max- or def-pooling, and a linear head trained with per-class hinge losses.

pub mod checkpoint;
pub mod layers;
pub mod loss;
pub mod model;
pub mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointManifest};
pub use layers::{Layer, LayerStack, ParamKind};
pub use loss::hinge_loss;
pub use model::{Architecture, BranchSpec, ConvSpec, Grads, HingeHead, Network, PoolSpec, Pooling, PENALTY_INIT};
pub use train::{
    batch_gradient, finetune_from, pretrain_then_finetune, pretrain_trunk, sgd_step, train, PretrainData,
    PretrainScheme, Sample, TrainConfig, TrainReport,
};
