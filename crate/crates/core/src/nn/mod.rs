//! A small convolutional flow predictor with hand-written reverse-mode
//! gradients, the three physics losses, AdamW and the training loop.
//!
//! Everything runs in `f64` on one thread, so a fixed seed reproduces
//! training bit for bit.

pub mod layers;
pub mod loss;
pub mod model;
pub mod optim;
pub mod train;

pub use layers::{BatchNorm2d, Conv2d, Gelu, Param};
pub use loss::{loss_cont, loss_phase, loss_vf, LossBreakdown, LossGrad, LossWeights};
pub use model::{FlowConfig, FlowModel};
pub use optim::{AdamW, AdamWConfig};
pub use train::{
    evaluate, init_training, load_checkpoint, load_model, save_checkpoint, train_epoch, train_flowtie, train_until,
    EpochRecord, Normalization, Sample, TrainConfig, TrainState,
};
