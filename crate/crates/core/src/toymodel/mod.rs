//! A small trainable transformer and a coin-flip task, used to produce
//! traces without a real checkpoint.

pub mod emit;
pub mod model;
pub mod params_io;
pub mod sample;
pub mod task;
pub mod train;

pub use emit::{build_trace, forward_with_trace, reference_trace, TraceConfig, ToyTrace};
pub use model::{forward, logits_at, ToyConfig, ToyParams};
pub use params_io::{read_params, write_params};
pub use sample::{sample_paths, SamplingConfig};
pub use task::{gen_task, Question, SyntheticTask};
pub use train::{train_toy, TrainConfig, TrainReport};
