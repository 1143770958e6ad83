//! Joint multi-level training and coarse-to-fine synthesis.

mod config;
mod eval;
mod sample;
mod train;

pub use config::TrainConfig;
pub use eval::{compare_psnr, copy_source_report, evaluate, level_psnr, score, Evaluation};
pub use sample::{sample_hierarchical, SampleTrace};
pub use train::{loss_and_grads, train_step, StepLosses, Trainer};
