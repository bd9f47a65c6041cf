//! Contrastive pretraining: encoder, InfoNCE, the adaptive training loop and
//! the linear probe.

mod encoder;
mod loss;
mod probe;
mod train;

pub use encoder::{images_to_nchw, Encoder, EncoderConfig, EncoderOutput};
pub use loss::{info_nce, info_nce_stacked, info_nce_value};
pub use probe::{linear_probe, random_crop, ProbeConfig, ProbeReport};
pub use train::{
    batch_info_nce, build_views, lr_at, pretrain, AugmentationStrategy, ContrastiveConfig,
    ContrastiveTrainer, EpochStats, InfoNceEnv, PolicySource, PretrainConfig, PretrainObserver,
    PretrainOutcome, QueueConfig,
};
