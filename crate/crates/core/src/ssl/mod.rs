//! SimSiam pretraining: augmentation, loss, optimizer and training loop.

pub mod augment;
pub mod loss;
pub mod optim;
pub mod train;

pub use augment::{augment_pair, AugConfig, AugPolicy, ViewPair};
pub use loss::{simsiam_loss, simsiam_loss_grad};
pub use optim::{lr_at, OptimConfig, Sgd};
pub use train::{pretrain, Monitor, PretrainOptions, PretrainOutcome, TrainRecord};
