//! The 3D dense detector: backbone, feature pyramid, twin heads, losses,
//! Adam, the training loop, and a finite-difference gradient checker.

mod gradcheck;
mod loss;
mod model;
mod ops;
mod optim;
pub mod tensor;
mod train;

pub use gradcheck::{grad_check, parameter_count};
pub use loss::{compute_loss, loss_and_grads, LossError, LossParts, TrainConfig};
pub use model::{
    BackboneConfig, DetectorModel, FeaturePyramid, Grads, HeadOutputs, LevelOutput, NetConfig,
    NetError, ParamStore,
};
pub use optim::AdamState;
pub use tensor::Tensor;
pub use train::{
    prepare_sample, train, EpochStats, StageCheckpoint, TrainError, TrainLog, TrainSample,
    TrainSetup,
};
