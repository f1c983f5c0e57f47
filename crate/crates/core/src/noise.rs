//! Additive noise mixing at a target speech-part SNR.
//!
//! The scale factor is `α = rms(speech part) / rms(noise) · 10^(-snr/20)`, with
//! the speech part taken from the clean signal's VAD mask and the noise RMS
//! from the whole slice. Scaled noise is added over the entire utterance.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::audio_io::{self, AudioError, AudioSignal, BLOCK_LEN};
use crate::dataset::Split;
use crate::vad::{self, SpeechMask, VadError};

/// SNR levels used for every noisy condition.
pub const SNR_LEVELS_DB: [i32; 5] = [0, 5, 10, 15, 20];
/// Train/validation/test proportions of each noise file.
pub const NOISE_SPLIT_RATIOS: (f64, f64, f64) = (0.7, 0.1, 0.2);

#[derive(Debug, Error)]
pub enum NoiseError {
    #[error("noise has {0} samples, at least {min} required", min = 3 * BLOCK_LEN)]
    TooShort(usize),
    #[error("speech mask marks no speech frames")]
    NoSpeech,
    #[error("speech part is silent")]
    SilentSpeech,
    #[error("noise slice is silent")]
    SilentNoise,
    #[error("noise slice has {noise} samples, signal has {signal}")]
    LengthMismatch { signal: usize, noise: usize },
    #[error("SNR {0} dB is not one of 0, 5, 10, 15, 20")]
    BadSnr(i32),
    #[error("unknown noise type `{0}`")]
    UnknownNoise(String),
    #[error("invalid split ratios")]
    BadRatios,
    #[error("{0} split of the noise is empty")]
    EmptySplit(Split),
    #[error(transparent)]
    Vad(#[from] VadError),
    #[error(transparent)]
    Audio(#[from] AudioError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseType {
    Cafeteria,
    Bus,
    Square,
    Kitchen,
    Ssn,
    Bbl,
}

impl NoiseType {
    /// Order used in result tables.
    pub const ALL: [NoiseType; 6] = [
        NoiseType::Bbl,
        NoiseType::Ssn,
        NoiseType::Kitchen,
        NoiseType::Cafeteria,
        NoiseType::Square,
        NoiseType::Bus,
    ];

    pub fn name(self) -> &'static str {
        match self {
            NoiseType::Cafeteria => "cafeteria",
            NoiseType::Bus => "bus",
            NoiseType::Square => "square",
            NoiseType::Kitchen => "kitchen",
            NoiseType::Ssn => "ssn",
            NoiseType::Bbl => "bbl",
        }
    }
}

impl fmt::Display for NoiseType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for NoiseType {
    type Err = NoiseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "cafeteria" | "pcafeter" => Ok(NoiseType::Cafeteria),
            "bus" | "tbus" => Ok(NoiseType::Bus),
            "square" | "spsquare" => Ok(NoiseType::Square),
            "kitchen" | "dkitchen" => Ok(NoiseType::Kitchen),
            "ssn" => Ok(NoiseType::Ssn),
            "bbl" | "babble" => Ok(NoiseType::Bbl),
            other => Err(NoiseError::UnknownNoise(other.to_string())),
        }
    }
}

/// A noise recording divided into disjoint train/validation/test ranges.
#[derive(Debug, Clone)]
pub struct NoiseSource {
    pub name: NoiseType,
    pub signal: AudioSignal,
    pub train: Range<usize>,
    pub validation: Range<usize>,
    pub test: Range<usize>,
}

impl NoiseSource {
    pub fn range(&self, split: Split) -> Range<usize> {
        match split {
            Split::Train => self.train.clone(),
            Split::Validation => self.validation.clone(),
            Split::Test => self.test.clone(),
        }
    }

    pub fn part(&self, split: Split) -> &[f64] {
        &self.signal.samples()[self.range(split)]
    }
}

/// Validated mixing request.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MixSpec {
    pub snr_db: i32,
    pub noise: NoiseType,
    pub rng_seed: u64,
}

impl MixSpec {
    pub fn new(snr_db: i32, noise: NoiseType, rng_seed: u64) -> Result<Self, NoiseError> {
        if !SNR_LEVELS_DB.contains(&snr_db) {
            return Err(NoiseError::BadSnr(snr_db));
        }
        Ok(Self {
            snr_db,
            noise,
            rng_seed,
        })
    }
}

/// Divides a noise signal into contiguous segments in file order.
/// Segment lengths are floored; the remainder goes to the test segment.
pub fn split_noise(
    name: NoiseType,
    noise: AudioSignal,
    ratios: (f64, f64, f64),
) -> Result<NoiseSource, NoiseError> {
    let n = noise.len();
    if n < 3 * BLOCK_LEN {
        return Err(NoiseError::TooShort(n));
    }
    let (a, b, c) = ratios;
    if a <= 0.0 || b <= 0.0 || c <= 0.0 || ((a + b + c) - 1.0).abs() > 1e-9 {
        return Err(NoiseError::BadRatios);
    }
    // round before flooring so 0.7 · 100000 lands on 70000
    let floor = |r: f64| ((r * n as f64 * 1e6).round() / 1e6).floor() as usize;
    let n_train = floor(a);
    let n_val = floor(b);
    Ok(NoiseSource {
        name,
        signal: noise,
        train: 0..n_train,
        validation: n_train..n_train + n_val,
        test: n_train + n_val..n,
    })
}

/// Contiguous slice of `part` starting at `offset`, wrapping within `part`.
pub fn noise_slice_at(part: &[f64], offset: usize, length: usize) -> Vec<f64> {
    let n = part.len();
    (0..length).map(|i| part[(offset + i) % n]).collect()
}

/// A random-offset slice of one split; returns the samples and the offset used.
pub fn sample_noise_segment<R: Rng + ?Sized>(
    src: &NoiseSource,
    split: Split,
    length: usize,
    rng: &mut R,
) -> Result<(Vec<f64>, usize), NoiseError> {
    let part = src.part(split);
    if part.is_empty() {
        return Err(NoiseError::EmptySplit(split));
    }
    let offset = rng.gen_range(0..part.len());
    Ok((noise_slice_at(part, offset, length), offset))
}

/// Result of one mixing operation.
#[derive(Debug, Clone)]
pub struct MixOutcome {
    pub signal: AudioSignal,
    pub alpha: f64,
}

/// Speech-part RMS of a signal under a mask.
pub fn speech_rms(signal: &AudioSignal, mask: &SpeechMask) -> Result<f64, NoiseError> {
    if mask.speech_frames() == 0 {
        return Err(NoiseError::NoSpeech);
    }
    let (speech, _) = vad::split_speech_nonspeech(signal, mask)?;
    Ok(audio_io::rms(speech.samples())?)
}

/// Adds `α · noise` to the signal so the speech-part SNR equals `snr_db`.
pub fn mix_at_snr(
    signal: &AudioSignal,
    mask: &SpeechMask,
    noise_slice: &[f64],
    snr_db: f64,
) -> Result<MixOutcome, NoiseError> {
    if noise_slice.len() != signal.len() {
        return Err(NoiseError::LengthMismatch {
            signal: signal.len(),
            noise: noise_slice.len(),
        });
    }
    let s_rms = speech_rms(signal, mask)?;
    if s_rms == 0.0 {
        return Err(NoiseError::SilentSpeech);
    }
    let n_rms = audio_io::rms(noise_slice)?;
    if n_rms == 0.0 {
        return Err(NoiseError::SilentNoise);
    }
    let alpha = s_rms / n_rms * 10f64.powf(-snr_db / 20.0);
    let mixed = signal
        .samples()
        .iter()
        .zip(noise_slice)
        .map(|(s, n)| s + alpha * n)
        .collect();
    Ok(MixOutcome {
        signal: AudioSignal::new(mixed, signal.sample_rate())?,
        alpha,
    })
}

/// Speech-part SNR in dB between a clean signal and an added noise component.
pub fn measured_snr_db(
    clean: &AudioSignal,
    mask: &SpeechMask,
    added_noise: &[f64],
) -> Result<f64, NoiseError> {
    let s = speech_rms(clean, mask)?;
    let n = audio_io::rms(added_noise)?;
    Ok(20.0 * (s / n).log10())
}

/// Scales a signal by `1 / peak` when its peak exceeds 1. Returns the scale applied.
pub fn export_rescale(signal: &AudioSignal) -> Result<(AudioSignal, f64), NoiseError> {
    let peak = signal.samples().iter().fold(0.0f64, |m, s| m.max(s.abs()));
    if peak <= 1.0 {
        return Ok((signal.clone(), 1.0));
    }
    let scale = 1.0 / peak;
    let scaled = signal.samples().iter().map(|s| s * scale).collect();
    Ok((AudioSignal::new(scaled, signal.sample_rate())?, scale))
}

/// Per-utterance seed derived from a global seed and a source id.
pub fn utterance_seed(global_seed: u64, source_id: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(global_seed.to_le_bytes());
    h.update(source_id.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

/// One row of the mixing manifest CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixRecord {
    pub source_id: String,
    pub noise_name: NoiseType,
    pub split: Split,
    pub offset: usize,
    pub snr_db: i32,
    pub alpha: f64,
    pub rescale: f64,
    /// Output path relative to the noisy tree root.
    pub path: String,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::frame_count;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeSet;

    fn sig(x: Vec<f64>) -> AudioSignal {
        AudioSignal::from_samples(x).unwrap()
    }

    #[test]
    fn split_exact_ratios() {
        let src = split_noise(NoiseType::Bbl, sig(vec![0.0; 100_000]), NOISE_SPLIT_RATIOS).unwrap();
        assert_eq!(src.train, 0..70_000);
        assert_eq!(src.validation, 70_000..80_000);
        assert_eq!(src.test, 80_000..100_000);
        assert!(matches!(
            split_noise(NoiseType::Bbl, sig(vec![0.0; 100]), NOISE_SPLIT_RATIOS),
            Err(NoiseError::TooShort(100))
        ));
    }

    #[test]
    fn split_ranges_partition() {
        for n in [24_576usize, 30_001, 99_999, 123_457] {
            let src = split_noise(NoiseType::Ssn, sig(vec![0.0; n]), NOISE_SPLIT_RATIOS).unwrap();
            assert_eq!(src.train.end, src.validation.start);
            assert_eq!(src.validation.end, src.test.start);
            let sets: Vec<BTreeSet<usize>> = [Split::Train, Split::Validation, Split::Test]
                .iter()
                .map(|&s| src.range(s).collect())
                .collect();
            assert!(sets[0].is_disjoint(&sets[1]) && sets[1].is_disjoint(&sets[2]) && sets[0].is_disjoint(&sets[2]));
            let all: BTreeSet<usize> = sets.iter().flatten().copied().collect();
            assert_eq!(all, (0..n).collect());
        }
    }

    #[test]
    fn slicing() {
        let part: Vec<f64> = (0..50).map(|i| i as f64).collect();
        assert_eq!(noise_slice_at(&part, 0, 50), part);
        let wrapped = noise_slice_at(&part, 37, 120);
        let seen: BTreeSet<i64> = wrapped.iter().map(|&v| v as i64).collect();
        assert_eq!(seen.len(), 50);
        assert_eq!(wrapped[13], 0.0);

        let src = split_noise(
            NoiseType::Bus,
            sig((0..40_000).map(|i| i as f64 / 40_000.0).collect()),
            NOISE_SPLIT_RATIOS,
        )
        .unwrap();
        let a = sample_noise_segment(&src, Split::Test, 5000, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = sample_noise_segment(&src, Split::Test, 5000, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(a, b);
        let test_range = src.range(Split::Test);
        for v in &a.0 {
            let idx = (v * 40_000.0).round() as usize;
            assert!(test_range.contains(&idx));
        }
    }

    #[test]
    fn alpha_values() {
        let n = 8192;
        let s: Vec<f64> = (0..n).map(|i| if i % 2 == 0 { 0.5 } else { -0.5 }).collect();
        let noise: Vec<f64> = (0..n).map(|i| if i % 3 == 0 { 0.5 } else { -0.5 }).collect();
        let mask = SpeechMask::all(frame_count(n), true);
        let m0 = mix_at_snr(&sig(s.clone()), &mask, &noise, 0.0).unwrap();
        assert!((m0.alpha - 1.0).abs() < 1e-12);
        let m20 = mix_at_snr(&sig(s.clone()), &mask, &noise, 20.0).unwrap();
        assert!((m20.alpha - 0.1).abs() < 1e-12);
    }

    #[test]
    fn mixing_errors() {
        let n = 4096;
        let frames = frame_count(n);
        let s = sig(vec![0.1; n]);
        let noise = vec![0.1; n];
        assert!(matches!(
            mix_at_snr(&s, &SpeechMask::all(frames, false), &noise, 0.0),
            Err(NoiseError::NoSpeech)
        ));
        assert!(matches!(
            mix_at_snr(&sig(vec![0.0; n]), &SpeechMask::all(frames, true), &noise, 0.0),
            Err(NoiseError::SilentSpeech)
        ));
        assert!(matches!(
            mix_at_snr(&s, &SpeechMask::all(frames, true), &noise[..10], 0.0),
            Err(NoiseError::LengthMismatch { .. })
        ));
        assert!(MixSpec::new(7, NoiseType::Bbl, 0).is_err());
        assert!(MixSpec::new(15, NoiseType::Bbl, 0).is_ok());
    }

    #[test]
    fn measure_back_and_linearity() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..10 {
            let n = rng.gen_range(8000..20000);
            let s: Vec<f64> = (0..n).map(|_| rng.gen_range(-0.3..0.3)).collect();
            let noise: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let frames = frame_count(n);
            let mask = SpeechMask::new((0..frames).map(|i| i % 4 != 0).collect());
            let clean = sig(s.clone());
            for snr in SNR_LEVELS_DB {
                let out = mix_at_snr(&clean, &mask, &noise, snr as f64).unwrap();
                let scaled: Vec<f64> = noise.iter().map(|v| out.alpha * v).collect();
                for ((m, c), a) in out.signal.samples().iter().zip(&s).zip(&scaled) {
                    assert_eq!(*m, c + a);
                    assert!(((m - c) - a).abs() <= 1e-15);
                }
                let measured = measured_snr_db(&clean, &mask, &scaled).unwrap();
                assert!((measured - snr as f64).abs() < 1e-6, "{measured} vs {snr}");
            }
        }
    }

    #[test]
    fn rescale_only_when_clipping() {
        let (s, k) = export_rescale(&sig(vec![0.5, -0.9])).unwrap();
        assert_eq!(k, 1.0);
        assert_eq!(s.samples(), &[0.5, -0.9]);
        let (s, k) = export_rescale(&sig(vec![2.0, -1.0])).unwrap();
        assert_eq!(k, 0.5);
        assert_eq!(s.samples(), &[1.0, -0.5]);
    }

    #[test]
    fn seeds_are_stable() {
        assert_eq!(utterance_seed(0, "a.wav"), utterance_seed(0, "a.wav"));
        assert_ne!(utterance_seed(0, "a.wav"), utterance_seed(1, "a.wav"));
        assert_ne!(utterance_seed(0, "a.wav"), utterance_seed(0, "b.wav"));
    }

    #[test]
    fn noise_names() {
        for n in NoiseType::ALL {
            assert_eq!(n.name().parse::<NoiseType>().unwrap(), n);
        }
        assert_eq!("PCAFETER".parse::<NoiseType>().unwrap(), NoiseType::Cafeteria);
        assert!("rain".parse::<NoiseType>().is_err());
    }
}
