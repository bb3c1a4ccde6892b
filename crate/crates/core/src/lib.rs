//! Mel-spectrogram neural codec: transformer encoder and decoder around a
//! residual vector quantizer, with a conditional flow-matching U-Net that
//! regenerates the mel spectrogram at decode time.

pub mod bitstream;
pub mod cfm;
pub mod codec;
pub mod codes;
pub mod config;
pub mod dsp;
pub mod error;
pub mod gradcheck;
pub mod model;
pub mod nn;
pub mod quantizer;
pub mod sampler;
pub mod toy;
pub mod trainer;

pub use codes::CodeGrid;
pub use config::{CodecConfig, RunConfig, SamplerConfig, TrainConfig};
pub use error::{CodecError, Result};
