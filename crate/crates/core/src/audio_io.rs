//! PCM16 WAV input/output, labelled blocks and block manifests.
//!
//! Every signal entering the pipeline is mono 16-bit PCM at 16 kHz. Utterances
//! are chopped into non-overlapping 8192-sample (512 ms) blocks; a trailing
//! remainder shorter than one block is dropped rather than zero-padded.

use std::fmt;
use std::io;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Sample rate required for every pipeline input.
pub const SAMPLE_RATE: u32 = 16_000;
/// Block length in samples (512 ms at 16 kHz).
pub const BLOCK_LEN: usize = 8192;
/// PCM16 normalization divisor.
pub const PCM16_SCALE: f64 = 32768.0;

#[derive(Debug, Error)]
pub enum AudioError {
    #[error("not a RIFF/WAVE file: {0}")]
    NotWav(String),
    #[error("unsupported encoding: expected 16-bit integer PCM, found {0}")]
    UnsupportedEncoding(String),
    #[error("unsupported channel count {0}, only mono is accepted")]
    UnsupportedChannels(u16),
    #[error("unsupported sample rate {0} Hz, expected 16000 Hz")]
    UnsupportedRate(u32),
    #[error("sample {0} is not finite")]
    NonFinite(usize),
    #[error("sample rate must be positive")]
    ZeroRate,
    #[error("block must hold exactly {BLOCK_LEN} samples, got {0}")]
    BadBlockLength(usize),
    #[error("empty input")]
    EmptyInput,
    #[error("manifest error: {0}")]
    Manifest(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Mono PCM signal with real-valued samples, nominally in [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct AudioSignal {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl AudioSignal {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self, AudioError> {
        if sample_rate == 0 {
            return Err(AudioError::ZeroRate);
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(AudioError::NonFinite(i));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    /// Convenience constructor for 16 kHz material.
    pub fn from_samples(samples: Vec<f64>) -> Result<Self, AudioError> {
        Self::new(samples, SAMPLE_RATE)
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Benign,
    Adversarial,
}

impl Label {
    /// Binary target: 0 for benign, 1 for adversarial.
    pub fn as_target(self) -> u8 {
        match self {
            Label::Benign => 0,
            Label::Adversarial => 1,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Benign => "benign",
            Label::Adversarial => "adversarial",
        })
    }
}

impl FromStr for Label {
    type Err = AudioError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "benign" | "0" => Ok(Label::Benign),
            "adversarial" | "attack" | "1" => Ok(Label::Adversarial),
            other => Err(AudioError::Manifest(format!("unknown label `{other}`"))),
        }
    }
}

/// Attack family of the source corpus.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Attack {
    White,
    Black,
}

impl fmt::Display for Attack {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Attack::White => "white",
            Attack::Black => "black",
        })
    }
}

impl FromStr for Attack {
    type Err = AudioError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "white" | "white-box" | "a" => Ok(Attack::White),
            "black" | "black-box" | "b" => Ok(Attack::Black),
            other => Err(AudioError::Manifest(format!("unknown attack type `{other}`"))),
        }
    }
}

/// Which portion of an utterance a block was cut from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Part {
    Full,
    Speech,
    Nonspeech,
}

impl fmt::Display for Part {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Part::Full => "full",
            Part::Speech => "speech",
            Part::Nonspeech => "nonspeech",
        })
    }
}

impl FromStr for Part {
    type Err = AudioError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "full" => Ok(Part::Full),
            "speech" => Ok(Part::Speech),
            "nonspeech" | "non-speech" | "silence" => Ok(Part::Nonspeech),
            other => Err(AudioError::Manifest(format!("unknown part `{other}`"))),
        }
    }
}

/// Condition tags attached to every block.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Condition {
    pub attack: Attack,
    /// `None` for clean audio.
    pub noise: Option<String>,
    pub snr_db: Option<i32>,
    pub part: Part,
}

impl Condition {
    pub fn clean(attack: Attack, part: Part) -> Self {
        Self {
            attack,
            noise: None,
            snr_db: None,
            part,
        }
    }

    pub fn noisy(attack: Attack, noise: impl Into<String>, snr_db: i32) -> Self {
        Self {
            attack,
            noise: Some(noise.into()),
            snr_db: Some(snr_db),
            part: Part::Full,
        }
    }

    /// Stable directory-safe key, e.g. `white_clean_full` or `white_bbl_10db_full`.
    pub fn key(&self) -> String {
        match (&self.noise, self.snr_db) {
            (Some(n), Some(s)) => format!("{}_{}_{}db_{}", self.attack, n, s, self.part),
            (Some(n), None) => format!("{}_{}_{}", self.attack, n, self.part),
            _ => format!("{}_clean_{}", self.attack, self.part),
        }
    }
}

/// A fixed 8192-sample window of an utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    samples: Vec<f64>,
    pub label: Label,
    pub source_id: String,
    pub block_index: usize,
    pub condition: Condition,
}

impl Block {
    pub fn new(
        samples: Vec<f64>,
        label: Label,
        source_id: impl Into<String>,
        block_index: usize,
        condition: Condition,
    ) -> Result<Self, AudioError> {
        if samples.len() != BLOCK_LEN {
            return Err(AudioError::BadBlockLength(samples.len()));
        }
        Ok(Self {
            samples,
            label,
            source_id: source_id.into(),
            block_index,
            condition,
        })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    /// Offset of the first sample in the source signal.
    pub fn sample_offset(&self) -> usize {
        self.block_index * BLOCK_LEN
    }

    pub fn record(&self) -> BlockRecord {
        BlockRecord::new(&self.source_id, self.block_index, self.label, &self.condition)
    }
}

/// Reads a mono PCM16 16 kHz WAV file into normalized samples.
pub fn read_wav(path: impl AsRef<Path>) -> Result<AudioSignal, AudioError> {
    let reader = hound::WavReader::open(path.as_ref()).map_err(map_hound)?;
    let spec = reader.spec();
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(AudioError::UnsupportedEncoding(format!(
            "{:?} {}-bit",
            spec.sample_format, spec.bits_per_sample
        )));
    }
    if spec.channels != 1 {
        return Err(AudioError::UnsupportedChannels(spec.channels));
    }
    if spec.sample_rate != SAMPLE_RATE {
        return Err(AudioError::UnsupportedRate(spec.sample_rate));
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f64 / PCM16_SCALE))
        .collect::<Result<Vec<_>, _>>()
        .map_err(map_hound)?;
    AudioSignal::new(samples, spec.sample_rate)
}

/// Quantizes one amplitude to a PCM16 code, clamping to the representable range.
pub fn quantize(sample: f64) -> i16 {
    (sample * PCM16_SCALE)
        .round()
        .clamp(i16::MIN as f64, i16::MAX as f64) as i16
}

/// Writes a mono PCM16 WAV. Amplitudes outside [-1, 1] are clamped.
pub fn write_wav(signal: &AudioSignal, path: impl AsRef<Path>) -> Result<(), AudioError> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: signal.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path.as_ref(), spec).map_err(map_hound)?;
    for &s in signal.samples() {
        writer.write_sample(quantize(s)).map_err(map_hound)?;
    }
    writer.finalize().map_err(map_hound)
}

fn map_hound(err: hound::Error) -> AudioError {
    match err {
        hound::Error::IoError(e) if e.kind() == io::ErrorKind::UnexpectedEof => {
            AudioError::NotWav(format!("truncated file: {e}"))
        }
        hound::Error::IoError(e) => AudioError::Io(e),
        hound::Error::FormatError(msg) => AudioError::NotWav(msg.to_string()),
        hound::Error::Unsupported => AudioError::UnsupportedEncoding("unsupported WAV format".into()),
        hound::Error::TooWide => AudioError::UnsupportedEncoding("sample width too large".into()),
        other => AudioError::NotWav(other.to_string()),
    }
}

/// Chops a signal into contiguous, non-overlapping 8192-sample blocks.
/// The trailing partial block, if any, is discarded.
pub fn chop_blocks(
    signal: &AudioSignal,
    label: Label,
    source_id: &str,
    condition: &Condition,
) -> Vec<Block> {
    signal
        .samples()
        .chunks_exact(BLOCK_LEN)
        .enumerate()
        .map(|(i, chunk)| Block {
            samples: chunk.to_vec(),
            label,
            source_id: source_id.to_string(),
            block_index: i,
            condition: condition.clone(),
        })
        .collect()
}

/// Root mean square of a nonempty sample sequence.
pub fn rms(samples: &[f64]) -> Result<f64, AudioError> {
    if samples.is_empty() {
        return Err(AudioError::EmptyInput);
    }
    let sum_sq: f64 = samples.iter().map(|s| s * s).sum();
    Ok((sum_sq / samples.len() as f64).sqrt())
}

/// One row of a block manifest CSV.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BlockRecord {
    pub source_id: String,
    pub block_index: usize,
    pub label: Label,
    pub attack: Attack,
    pub noise: String,
    pub snr_db: String,
    pub part: Part,
}

impl BlockRecord {
    pub fn new(source_id: &str, block_index: usize, label: Label, condition: &Condition) -> Self {
        Self {
            source_id: source_id.to_string(),
            block_index,
            label,
            attack: condition.attack,
            noise: condition.noise.clone().unwrap_or_else(|| "clean".into()),
            snr_db: condition.snr_db.map(|s| s.to_string()).unwrap_or_default(),
            part: condition.part,
        }
    }

    pub fn condition(&self) -> Result<Condition, AudioError> {
        let noise = (self.noise != "clean" && !self.noise.is_empty()).then(|| self.noise.clone());
        let snr_db = if self.snr_db.is_empty() {
            None
        } else {
            Some(self.snr_db.parse::<i32>().map_err(|e| {
                AudioError::Manifest(format!("bad snr_db `{}`: {e}", self.snr_db))
            })?)
        };
        Ok(Condition {
            attack: self.attack,
            noise,
            snr_db,
            part: self.part,
        })
    }
}

pub fn write_block_manifest(
    records: &[BlockRecord],
    path: impl AsRef<Path>,
) -> Result<(), AudioError> {
    let mut w = csv::Writer::from_path(path.as_ref()).map_err(csv_err)?;
    for r in records {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_block_manifest(path: impl AsRef<Path>) -> Result<Vec<BlockRecord>, AudioError> {
    let mut r = csv::Reader::from_path(path.as_ref()).map_err(csv_err)?;
    r.deserialize().map(|rec| rec.map_err(csv_err)).collect()
}

fn csv_err(e: csv::Error) -> AudioError {
    AudioError::Manifest(e.to_string())
}
