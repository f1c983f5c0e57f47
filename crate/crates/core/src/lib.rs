//! Cepstral feature extraction and CNN detection of adversarial speech.

pub mod audio_io;
pub mod cli;
pub mod cache;
pub mod dataset;
pub mod dsp;
pub mod eval;
pub mod filterbanks;
pub mod model;
pub mod noise;
pub mod pipeline;
pub mod synth;
pub mod vad;
