//! Energy-based speech/non-speech segmentation.
//!
//! Frames follow the feature geometry (512 samples, 256 shift). A frame is
//! speech when its RMS is nonzero and reaches either three times the
//! utterance's 10th-percentile frame RMS or an absolute activity level of
//! -40 dBFS. The raw decisions are then smoothed: gaps of up to three frames
//! between speech frames are closed, and speech islands of two frames or
//! fewer are dropped.
//!
//! Masks produced by an external VAD can be loaded from CSV instead.

use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::audio_io::{AudioError, AudioSignal};
use crate::dsp::{frame_count, FRAME_LEN, FRAME_SHIFT};

/// Multiple of the noise floor a frame must reach.
pub const THRESHOLD_RATIO: f64 = 3.0;
/// Percentile of frame RMS used as the noise floor.
pub const FLOOR_PERCENTILE: f64 = 10.0;
/// Frame RMS at or above this level is always speech (-40 dBFS).
pub const ABSOLUTE_ACTIVITY_RMS: f64 = 0.01;
/// Longest non-speech run (in frames) closed between speech frames.
pub const MAX_GAP_FRAMES: usize = 3;
/// Speech runs this short or shorter are removed.
pub const MAX_ISLAND_FRAMES: usize = 2;

#[derive(Debug, Error)]
pub enum VadError {
    #[error("signal has {0} samples, at least {FRAME_LEN} required")]
    TooShort(usize),
    #[error("mask has {mask} frames but signal has {signal}")]
    GeometryMismatch { mask: usize, signal: usize },
    #[error("mask parse error at line {line}: {msg}")]
    ParseError { line: usize, msg: String },
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Per-frame speech decisions for a whole utterance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpeechMask {
    flags: Vec<bool>,
}

impl SpeechMask {
    pub fn new(flags: Vec<bool>) -> Self {
        Self { flags }
    }

    pub fn all(num_frames: usize, speech: bool) -> Self {
        Self {
            flags: vec![speech; num_frames],
        }
    }

    pub fn flags(&self) -> &[bool] {
        &self.flags
    }

    pub fn len(&self) -> usize {
        self.flags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flags.is_empty()
    }

    pub fn speech_frames(&self) -> usize {
        self.flags.iter().filter(|&&f| f).count()
    }

    /// Sample range owned by frame `i`: its 256-sample shift window, with the
    /// last frame also owning the tail of its 512-sample extent.
    pub fn owned_range(&self, i: usize) -> std::ops::Range<usize> {
        let start = i * FRAME_SHIFT;
        if i + 1 == self.flags.len() {
            start..start + FRAME_LEN
        } else {
            start..start + FRAME_SHIFT
        }
    }

    /// Number of samples covered by the mask geometry.
    pub fn covered_samples(&self) -> usize {
        match self.flags.len() {
            0 => 0,
            n => (n - 1) * FRAME_SHIFT + FRAME_LEN,
        }
    }

    pub fn to_csv(&self) -> String {
        self.flags
            .iter()
            .enumerate()
            .map(|(i, &f)| format!("{i},{}\n", u8::from(f)))
            .collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), VadError> {
        fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn parse_csv(text: &str) -> Result<Self, VadError> {
        let mut flags = Vec::new();
        for (line_no, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| VadError::ParseError {
                line: line_no + 1,
                msg,
            };
            let (idx, flag) = line
                .split_once(',')
                .ok_or_else(|| err("expected `frame_index,flag`".into()))?;
            let idx: usize = match idx.trim().parse() {
                Ok(i) => i,
                // tolerate a header row
                Err(_) if line_no == 0 && flags.is_empty() => continue,
                Err(e) => return Err(err(e.to_string())),
            };
            if idx != flags.len() {
                return Err(err(format!("expected frame index {}, found {idx}", flags.len())));
            }
            let flag = match flag.trim() {
                "1" | "true" => true,
                "0" | "false" => false,
                other => return Err(err(format!("bad flag `{other}`"))),
            };
            flags.push(flag);
        }
        if flags.is_empty() {
            return Err(VadError::ParseError {
                line: 0,
                msg: "mask file holds no frames".into(),
            });
        }
        Ok(Self { flags })
    }
}

/// Loads a `frame_index,flag` CSV produced by an external VAD.
pub fn load_external_mask(path: impl AsRef<Path>) -> Result<SpeechMask, VadError> {
    SpeechMask::parse_csv(&fs::read_to_string(path)?)
}

fn frame_rms(samples: &[f64]) -> Vec<f64> {
    (0..frame_count(samples.len()))
        .map(|i| {
            let f = &samples[i * FRAME_SHIFT..i * FRAME_SHIFT + FRAME_LEN];
            (f.iter().map(|s| s * s).sum::<f64>() / FRAME_LEN as f64).sqrt()
        })
        .collect()
}

/// Nearest-rank percentile of a nonempty slice.
fn percentile(values: &[f64], pct: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = ((pct / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

fn close_gaps(flags: &mut [bool], max_gap: usize) {
    let mut last_speech: Option<usize> = None;
    for i in 0..flags.len() {
        if flags[i] {
            if let Some(prev) = last_speech {
                let gap = i - prev - 1;
                if gap > 0 && gap <= max_gap {
                    flags[prev + 1..i].iter_mut().for_each(|f| *f = true);
                }
            }
            last_speech = Some(i);
        }
    }
}

fn drop_islands(flags: &mut [bool], max_island: usize) {
    let mut i = 0;
    while i < flags.len() {
        if flags[i] {
            let start = i;
            while i < flags.len() && flags[i] {
                i += 1;
            }
            if i - start <= max_island {
                flags[start..i].iter_mut().for_each(|f| *f = false);
            }
        } else {
            i += 1;
        }
    }
}

/// Marks speech frames of an utterance.
pub fn detect_speech(signal: &AudioSignal) -> Result<SpeechMask, VadError> {
    if signal.len() < FRAME_LEN {
        return Err(VadError::TooShort(signal.len()));
    }
    let energies = frame_rms(signal.samples());
    let floor = percentile(&energies, FLOOR_PERCENTILE);
    let threshold = (THRESHOLD_RATIO * floor).min(ABSOLUTE_ACTIVITY_RMS);
    let mut flags: Vec<bool> = energies.iter().map(|&e| e > 0.0 && e >= threshold).collect();
    close_gaps(&mut flags, MAX_GAP_FRAMES);
    drop_islands(&mut flags, MAX_ISLAND_FRAMES);
    Ok(SpeechMask { flags })
}

/// Concatenates speech-owned and non-speech-owned samples into two signals.
/// Samples past the last frame's extent (fewer than 256) belong to neither.
pub fn split_speech_nonspeech(
    signal: &AudioSignal,
    mask: &SpeechMask,
) -> Result<(AudioSignal, AudioSignal), VadError> {
    let expected = frame_count(signal.len());
    if mask.len() != expected {
        return Err(VadError::GeometryMismatch {
            mask: mask.len(),
            signal: expected,
        });
    }
    let samples = signal.samples();
    let mut speech = Vec::new();
    let mut rest = Vec::new();
    for (i, &flag) in mask.flags().iter().enumerate() {
        let target = if flag { &mut speech } else { &mut rest };
        target.extend_from_slice(&samples[mask.owned_range(i)]);
    }
    Ok((
        AudioSignal::new(speech, signal.sample_rate())?,
        AudioSignal::new(rest, signal.sample_rate())?,
    ))
}
