pub mod bbox;
pub mod checkpoint;
pub mod config;
pub mod decoder_head;
pub mod encoder;
pub mod error;
pub mod gradsuite;
pub mod imaging;
pub mod losses;
pub mod model;
pub mod nn;
pub mod numerics;
pub mod reasoning;
pub mod state_codec;
pub mod synthgen;
pub mod trackpipe;

pub use error::{Error, Result};
