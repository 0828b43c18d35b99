//! Training, inference and file formats built on the algorithm modules.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod evaluate;
pub mod io;
pub mod models;
pub mod optim;
pub mod selftest;
pub mod train;
pub mod video_swap;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use config::{Config, ModelConfig, TrainConfig, VideoConfig, VideoMode};
pub use data::{Dataset, Sample};
pub use models::{swap_image, Models, SwapBatch, SwapResult};
pub use train::{pretrain_generator, train_iteration, train_step, StepReport, TrainState};
pub use video_swap::{swap_video, VideoSwap};
pub use selftest::{run_self_test, CheckOutcome};
pub use evaluate::{evaluate, EvalPair, EvalReport, PairManifest};
