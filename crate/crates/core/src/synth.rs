//! Synthetic audio: speech-like signals, band-limited attack perturbations,
//! stand-ins for the six noise recordings, and a small labelled corpus used
//! for smoke runs.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::audio_io::{self, Attack, AudioError, AudioSignal, Label, SAMPLE_RATE};
use crate::dataset::{split_of, Split};
use crate::noise::NoiseType;

const FS: f64 = SAMPLE_RATE as f64;

/// Standard normal draw (Box-Muller), so callers only need `Rng`.
fn gauss<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * PI * u2).cos()
}

/// Two-pole resonator, peak gain roughly normalized to one.
struct Resonator {
    a1: f64,
    a2: f64,
    gain: f64,
    y1: f64,
    y2: f64,
}

impl Resonator {
    fn new(freq: f64, bandwidth: f64) -> Self {
        let r = (-PI * bandwidth / FS).exp();
        let theta = 2.0 * PI * freq / FS;
        Self {
            a1: 2.0 * r * theta.cos(),
            a2: -r * r,
            gain: (1.0 - r) * (1.0 + r * r - 2.0 * r * (2.0 * theta).cos()).sqrt(),
            y1: 0.0,
            y2: 0.0,
        }
    }

    fn retune(&mut self, freq: f64, bandwidth: f64) {
        let n = Self::new(freq, bandwidth);
        self.a1 = n.a1;
        self.a2 = n.a2;
        self.gain = n.gain;
    }

    fn step(&mut self, x: f64) -> f64 {
        let y = self.gain * x + self.a1 * self.y1 + self.a2 * self.y2;
        self.y2 = self.y1;
        self.y1 = y;
        y
    }
}

fn normalize_rms(x: &mut [f64], target: f64) {
    let r = audio_io::rms(x).unwrap_or(0.0);
    if r > 0.0 {
        x.iter_mut().for_each(|v| *v *= target / r);
    }
}

/// Continuous speech-like signal at RMS `level`: a jittered glottal pulse
/// train and aspiration noise through three moving formants, with a
/// syllabic envelope and occasional fricatives.
pub fn speech_like<R: Rng + ?Sized>(rng: &mut R, len: usize, level: f64) -> Vec<f64> {
    let mut out = vec![0.0; len];
    let mut formants = [
        Resonator::new(500.0, 90.0),
        Resonator::new(1500.0, 120.0),
        Resonator::new(2500.0, 180.0),
    ];
    let mut fric = Resonator::new(4500.0, 1500.0);
    let f0_base = rng.gen_range(95.0..230.0);
    let mut phase = 0.0;
    let mut lp = 0.0;
    let mut i = 0;
    while i < len {
        // one syllable: voiced nucleus, optional fricative onset, short gap
        let syl = rng.gen_range(1600..4800).min(len - i);
        let f = [
            rng.gen_range(300.0..850.0),
            rng.gen_range(900.0..2300.0),
            rng.gen_range(2200.0..3300.0),
        ];
        for (r, &fr) in formants.iter_mut().zip(&f) {
            r.retune(fr, 60.0 + fr * 0.06);
        }
        fric.retune(rng.gen_range(3000.0..5500.0), 1500.0);
        let fric_len = if rng.gen_bool(0.4) { syl / 4 } else { 0 };
        let f0 = f0_base * rng.gen_range(0.85..1.15);
        let gap = (syl / 8).min(len - i);
        for k in 0..syl {
            let t = k as f64 / syl as f64;
            let env = if k + gap >= syl { 0.02 } else { (PI * t).sin().powf(0.7) };
            phase += f0 * (1.0 + 0.01 * gauss(rng)) / FS;
            let pulse = if phase >= 1.0 {
                phase -= 1.0;
                1.0
            } else {
                0.0
            };
            let excitation = pulse + 0.03 * gauss(rng);
            let mut v = 0.0;
            for r in formants.iter_mut() {
                v += r.step(excitation);
            }
            // gentle spectral tilt
            lp = 0.6 * lp + 0.4 * v;
            let mut s = lp * env;
            if k < fric_len {
                s += 0.015 * fric.step(gauss(rng)) * (PI * k as f64 / fric_len as f64).sin();
            }
            out[i + k] = s;
        }
        i += syl;
    }
    normalize_rms(&mut out, level);
    out
}

/// An utterance of `secs` seconds: leading and trailing silence, a pause in
/// the middle and a faint noise floor everywhere.
pub fn utterance<R: Rng + ?Sized>(rng: &mut R, secs: f64) -> Vec<f64> {
    let len = (secs * FS) as usize;
    let lead = rng.gen_range(0.45..0.7);
    let trail = rng.gen_range(0.45..0.7);
    let pause = rng.gen_range(0.3..0.5);
    let speech_len = len.saturating_sub(((lead + trail + pause) * FS) as usize);
    let first = speech_len / 2;
    let level = rng.gen_range(0.06..0.15);
    let mut out: Vec<f64> = (0..len).map(|_| 3e-4 * gauss(rng)).collect();
    let a = (lead * FS) as usize;
    let b = a + first + (pause * FS) as usize;
    for (start, n) in [(a, first), (b, speech_len - first)] {
        for (o, s) in out[start..start + n].iter_mut().zip(speech_like(rng, n, level)) {
            *o += s;
        }
    }
    out
}

/// White Gaussian noise with every FFT bin outside `[lo_hz, hi_hz]` zeroed,
/// scaled to RMS `level`.
pub fn band_limited_noise<R: Rng + ?Sized>(rng: &mut R, len: usize, lo_hz: f64, hi_hz: f64, level: f64) -> Vec<f64> {
    let mut buf: Vec<Complex<f64>> = (0..len).map(|_| Complex::new(gauss(rng), 0.0)).collect();
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(len).process(&mut buf);
    for (k, c) in buf.iter_mut().enumerate() {
        let bin = k.min(len - k);
        let f = bin as f64 * FS / len as f64;
        if f < lo_hz || f > hi_hz {
            *c = Complex::new(0.0, 0.0);
        }
    }
    planner.plan_fft_inverse(len).process(&mut buf);
    let mut out: Vec<f64> = buf.iter().map(|c| c.re).collect();
    normalize_rms(&mut out, level);
    out
}

/// The attack band used throughout: 6 to 8 kHz.
pub const ATTACK_BAND_HZ: (f64, f64) = (6000.0, 8000.0);

/// Adds a band-limited perturbation whose RMS sits `rel_db` below the RMS of `signal`.
pub fn perturb<R: Rng + ?Sized>(signal: &[f64], rng: &mut R, rel_db: f64, band: (f64, f64)) -> Vec<f64> {
    let level = audio_io::rms(signal).unwrap_or(0.0) * 10f64.powf(rel_db / 20.0);
    let p = band_limited_noise(rng, signal.len(), band.0, band.1, level);
    signal.iter().zip(p).map(|(s, d)| s + d).collect()
}

/// Speech-shaped noise: white noise through a fixed long-term-average formant shape.
fn speech_shaped<R: Rng + ?Sized>(rng: &mut R, len: usize) -> Vec<f64> {
    let mut rs = [
        Resonator::new(500.0, 400.0),
        Resonator::new(1400.0, 700.0),
        Resonator::new(2600.0, 1000.0),
    ];
    let mut lp = 0.0;
    (0..len)
        .map(|_| {
            let x = gauss(rng);
            let v: f64 = rs.iter_mut().map(|r| r.step(x)).sum();
            lp = 0.7 * lp + 0.3 * v;
            lp
        })
        .collect()
}

fn lowpassed<R: Rng + ?Sized>(rng: &mut R, len: usize, pole: f64) -> Vec<f64> {
    let mut y = 0.0;
    (0..len)
        .map(|_| {
            y = pole * y + (1.0 - pole) * gauss(rng);
            y
        })
        .collect()
}

/// Short decaying high-pitched transients (dishes, cutlery).
fn clatter<R: Rng + ?Sized>(rng: &mut R, out: &mut [f64], per_sec: f64, amp: f64) {
    let n = (out.len() as f64 / FS * per_sec) as usize;
    for _ in 0..n {
        let at = rng.gen_range(0..out.len());
        let f = rng.gen_range(2000.0..6000.0);
        let decay = rng.gen_range(0.002..0.01);
        for k in 0..(0.08 * FS) as usize {
            if at + k >= out.len() {
                break;
            }
            let t = k as f64 / FS;
            out[at + k] += amp * (-t / decay).exp() * (2.0 * PI * f * t).sin();
        }
    }
}

/// A stand-in for one of the six noise recordings, at RMS 0.1.
pub fn noise_signal<R: Rng + ?Sized>(kind: NoiseType, rng: &mut R, len: usize) -> Vec<f64> {
    let mut out = match kind {
        NoiseType::Bbl | NoiseType::Cafeteria => {
            let talkers = if kind == NoiseType::Bbl { 6 } else { 3 };
            let mut acc = vec![0.0; len];
            for _ in 0..talkers {
                for (a, s) in acc.iter_mut().zip(speech_like(rng, len, 0.1)) {
                    *a += s;
                }
            }
            if kind == NoiseType::Cafeteria {
                normalize_rms(&mut acc, 0.1);
                clatter(rng, &mut acc, 3.0, 0.2);
            }
            acc
        }
        NoiseType::Ssn => speech_shaped(rng, len),
        NoiseType::Kitchen => {
            let mut v: Vec<f64> = (0..len).map(|_| gauss(rng)).collect();
            normalize_rms(&mut v, 0.1);
            clatter(rng, &mut v, 2.0, 0.3);
            v
        }
        NoiseType::Bus => {
            let mut v = lowpassed(rng, len, 0.98);
            normalize_rms(&mut v, 0.1);
            let f_engine = rng.gen_range(35.0..60.0);
            for (k, s) in v.iter_mut().enumerate() {
                let t = k as f64 / FS;
                *s += 0.05 * (2.0 * PI * f_engine * t).sin() + 0.02 * (4.0 * PI * f_engine * t).sin();
            }
            v
        }
        NoiseType::Square => {
            let mut v = lowpassed(rng, len, 0.9);
            normalize_rms(&mut v, 0.1);
            for (a, s) in v.iter_mut().zip(speech_like(rng, len, 0.03)) {
                *a += s;
            }
            v
        }
    };
    normalize_rms(&mut out, 0.1);
    out
}

/// Layout of a generated smoke corpus.
#[derive(Debug, Clone)]
pub struct SmokeCorpus {
    /// Directory holding the WAV tree and `labels.csv`.
    pub data_dir: PathBuf,
    /// Directory holding one WAV per noise type.
    pub noise_dir: PathBuf,
    pub entries: Vec<LabelEntry>,
}

/// One row of a labels manifest: a WAV path relative to the data root, its
/// label and which attack dataset it belongs to.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
pub struct LabelEntry {
    pub path: String,
    pub label: Label,
    pub attack: Attack,
}

/// Utterances per (attack, label) group and how they spread over the splits.
const SMOKE_QUOTA: [(Split, usize); 3] = [(Split::Train, 3), (Split::Validation, 1), (Split::Test, 1)];

/// File stems for one group, picked so the split quota is met exactly.
fn smoke_stems(attack: Attack, label: Label) -> Vec<String> {
    let mut out = Vec::new();
    for (split, want) in SMOKE_QUOTA {
        let mut got = 0;
        let mut k = 0;
        while got < want {
            let stem = format!("{attack}_{label}_{k:03}");
            if split_of(&stem) == split {
                out.push(stem);
                got += 1;
            }
            k += 1;
        }
    }
    out
}

/// Writes the 20-utterance smoke corpus (5 per attack and label, 3/1/1 across
/// the splits) plus 30 s of each synthetic noise. Deterministic in `seed`.
pub fn write_smoke_corpus(root: &Path, seed: u64) -> Result<SmokeCorpus, AudioError> {
    let data_dir = root.join("data");
    let noise_dir = root.join("noise");
    let mut entries = Vec::new();
    for attack in [Attack::White, Attack::Black] {
        for label in [Label::Benign, Label::Adversarial] {
            for stem in smoke_stems(attack, label) {
                let mut rng = ChaCha8Rng::seed_from_u64(crate::noise::utterance_seed(seed, &stem));
                let secs = rng.gen_range(2.6..3.4);
                let mut x = utterance(&mut rng, secs);
                if label == Label::Adversarial {
                    let (rel_db, band) = match attack {
                        Attack::White => (-30.0, ATTACK_BAND_HZ),
                        Attack::Black => (-25.0, (4000.0, 8000.0)),
                    };
                    x = perturb(&x, &mut rng, rel_db, band);
                }
                let rel = format!("{attack}/{label}/{stem}.wav");
                let path = data_dir.join(&rel);
                fs::create_dir_all(path.parent().expect("has parent"))?;
                audio_io::write_wav(&AudioSignal::from_samples(x)?, &path)?;
                entries.push(LabelEntry { path: rel, label, attack });
            }
        }
    }
    write_labels(&data_dir.join("labels.csv"), &entries)?;
    fs::create_dir_all(&noise_dir)?;
    for (i, kind) in NoiseType::ALL.into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (0x9e37_79b9 + i as u64));
        let n = noise_signal(kind, &mut rng, 30 * SAMPLE_RATE as usize);
        audio_io::write_wav(&AudioSignal::from_samples(n)?, noise_dir.join(format!("{}.wav", kind.name())))?;
    }
    Ok(SmokeCorpus {
        data_dir,
        noise_dir,
        entries,
    })
}

pub fn write_labels(path: &Path, entries: &[LabelEntry]) -> Result<(), AudioError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| AudioError::Manifest(e.to_string()))?;
    for e in entries {
        w.serialize(e).map_err(|e| AudioError::Manifest(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_labels(path: &Path) -> Result<Vec<LabelEntry>, AudioError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| AudioError::Manifest(format!("{}: {e}", path.display())))?;
    r.deserialize()
        .map(|x| x.map_err(|e| AudioError::Manifest(format!("{}: {e}", path.display()))))
        .collect()
}
