//! Toy DDPM harness: noise schedule, synthetic data, training and sampling.

pub mod data;
pub mod eval;
pub mod noise;
pub mod sample;
pub mod train;

pub use data::{count_blobs, SyntheticDataset};
pub use eval::{eval_proxy, EvalStats};
pub use noise::{NoiseConfig, NoiseSchedule};
pub use sample::{cfg_predict, ddim_sample, ddim_timesteps, ddpm_sample, SampleOptions, SampleRun};
pub use train::{NoisedExample, Optimizer, OptimizerConfig, StepMetrics, TrainConfig, Trainer};
