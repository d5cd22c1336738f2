//! Everything around the network: configuration, synthetic data, the
//! training loop, checkpoints, evaluation and the gradient-check suite.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod eval;
pub mod gradcheck;
pub mod optim;
pub mod synth;
pub mod train;

pub use checkpoint::Checkpoint;
pub use config::{learning_rate, Config};
pub use data::{corrupt_dataset, Dataset, Sample};
pub use eval::{evaluate, load_model, occlusion_sweep, predict, EvalReport, Prediction};
pub use optim::Adam;
pub use synth::{gen_dataset, SynthConfig};
pub use train::{train, EpochMetrics, TrainOutcome, Trainer};
