//! Operational shell: configuration, windowing, training, evaluation,
//! streaming inference, checkpoints and ribbons.

pub mod checkpoint;
pub mod config;
pub mod eval;
pub mod metrics;
pub mod ribbon;
pub mod stream;
pub mod train;
pub mod windows;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, TrainState};
pub use config::{Precision, RunConfig};
pub use eval::{evaluate, evaluate_procedures, trace_outcomes};
pub use metrics::{FrameOutcome, MetricReport};
pub use ribbon::{export_ribbon, read_ribbon};
pub use stream::{stream_procedure, FramePrediction, PredictionTrace, StreamRunner, StreamStats, WindowPrediction};
pub use train::{train, train_dataset, EpochReport, TrainOutcome, Trainer};
pub use windows::{make_windows, window_indices};
