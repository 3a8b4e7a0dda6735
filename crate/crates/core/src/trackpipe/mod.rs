//! Training and inference loops around [`crate::model::Model`].

mod track;
mod train;

pub use track::{format_results, parse_results, track_sequence, FrameTrace, Mode, TrackOutput, TrackResult};
pub use train::{sample_from_sequence, sample_loss, TrainSample, Trainer};
