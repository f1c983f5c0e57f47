//! Filter banks over FFT bins and the cepstral feature pipeline.
//!
//! Five families share the same geometry (20 filters over 257 bins, 0 to 8 kHz):
//! linear and Mel-spaced triangular banks, a gammatone bank with ERB-derived
//! bandwidths, and the inverse variants of the Mel and gammatone banks, which
//! mirror the bank across the frequency axis so that resolution concentrated at
//! low frequencies moves to the high end.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio_io::Block;
use crate::dsp::{self, Dct2, PowerSpectrum, PowerSpectrumSet, FRAMES_PER_BLOCK, FRAME_LEN, NUM_BINS};

/// Filters per bank.
pub const NUM_FILTERS: usize = 20;
/// Cepstral coefficients kept per frame.
pub const NUM_CEPS: usize = 20;
/// Floor added to filter-bank energies before the logarithm.
pub const LOG_FLOOR: f64 = 1e-10;
/// Length of a flattened feature matrix.
pub const SUPERVECTOR_LEN: usize = FRAMES_PER_BLOCK * NUM_CEPS;

#[derive(Debug, Error, PartialEq)]
pub enum FilterBankError {
    #[error("invalid filter bank spec: {0}")]
    BadSpec(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("unknown feature `{0}`")]
    UnknownFeature(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterFamily {
    Linear,
    Mel,
    InverseMel,
    Gammatone,
    InverseGammatone,
}

/// Cepstral feature variants, one per filter family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum FeatureKind {
    Gfcc,
    Igfcc,
    Imfcc,
    Lfcc,
    Mfcc,
}

impl FeatureKind {
    /// Column order used in result tables.
    pub const ALL: [FeatureKind; 5] = [
        FeatureKind::Gfcc,
        FeatureKind::Igfcc,
        FeatureKind::Imfcc,
        FeatureKind::Lfcc,
        FeatureKind::Mfcc,
    ];

    pub fn family(self) -> FilterFamily {
        match self {
            FeatureKind::Lfcc => FilterFamily::Linear,
            FeatureKind::Mfcc => FilterFamily::Mel,
            FeatureKind::Imfcc => FilterFamily::InverseMel,
            FeatureKind::Gfcc => FilterFamily::Gammatone,
            FeatureKind::Igfcc => FilterFamily::InverseGammatone,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            FeatureKind::Lfcc => "LFCC",
            FeatureKind::Mfcc => "MFCC",
            FeatureKind::Imfcc => "IMFCC",
            FeatureKind::Gfcc => "GFCC",
            FeatureKind::Igfcc => "IGFCC",
        }
    }
}

impl fmt::Display for FeatureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FeatureKind {
    type Err = FilterBankError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        FeatureKind::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| FilterBankError::UnknownFeature(s.to_string()))
    }
}

/// Geometry and constants shared by every bank.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterBankSpec {
    pub family: FilterFamily,
    pub num_filters: usize,
    pub fft_bins: usize,
    pub sample_rate: f64,
    pub f_low: f64,
    pub f_high: f64,
    pub gammatone_order: u32,
    pub gammatone_c: f64,
    pub frame_length: usize,
}

impl FilterBankSpec {
    /// Pipeline defaults: 20 filters, 257 bins, 16 kHz, 0 to 8000 Hz, order-4 gammatone.
    pub fn new(family: FilterFamily) -> Self {
        Self {
            family,
            num_filters: NUM_FILTERS,
            fft_bins: NUM_BINS,
            sample_rate: 16_000.0,
            f_low: 0.0,
            f_high: 8000.0,
            gammatone_order: 4,
            gammatone_c: 228.83,
            frame_length: FRAME_LEN,
        }
    }

    pub fn validate(&self) -> Result<(), FilterBankError> {
        let bad = |m: &str| Err(FilterBankError::BadSpec(m.to_string()));
        if self.num_filters == 0 {
            return bad("num_filters must be at least 1");
        }
        // written negated so NaN is rejected too
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if !(self.sample_rate > 0.0) || self.frame_length == 0 {
            return bad("sample_rate and frame_length must be positive");
        }
        if self.fft_bins != self.frame_length / 2 + 1 {
            return bad("fft_bins must equal frame_length / 2 + 1");
        }
        if !(0.0 <= self.f_low && self.f_low < self.f_high && self.f_high <= self.sample_rate / 2.0) {
            return bad("require 0 <= f_low < f_high <= sample_rate / 2");
        }
        if self.gammatone_order == 0 {
            return bad("gammatone order must be positive");
        }
        Ok(())
    }

    /// Hz to continuous bin units, `N / F_s · f`.
    fn hz_to_bin(&self, f: f64) -> f64 {
        self.frame_length as f64 / self.sample_rate * f
    }

    fn bin_to_hz(&self, k: f64) -> f64 {
        k * self.sample_rate / self.frame_length as f64
    }

    fn expect_family(&self, family: FilterFamily) -> Result<(), FilterBankError> {
        if self.family != family {
            return Err(FilterBankError::BadSpec(format!(
                "expected family {family:?}, spec says {:?}",
                self.family
            )));
        }
        self.validate()
    }
}

pub fn mel(f: f64) -> f64 {
    1125.0 * (1.0 + f / 700.0).ln()
}

pub fn mel_inv(m: f64) -> f64 {
    700.0 * ((m / 1125.0).exp() - 1.0)
}

/// Equivalent rectangular bandwidth in Hz.
pub fn erb(f: f64) -> f64 {
    f / 9.26 + 24.7
}

/// Gammatone centre frequency of filter `g` in `1..=G`.
///
/// The base-10 logarithm inside the natural exponential is intentional; with
/// the default range this places the centres between about 1.5 and 7.4 kHz.
pub fn gammatone_center(spec: &FilterBankSpec, g: usize) -> f64 {
    let c = spec.gammatone_c;
    let ratio = ((spec.f_low + c) / (spec.f_high + c)).log10();
    -c + (spec.f_high + c) * (g as f64 * ratio / spec.num_filters as f64).exp()
}

/// Boundary points `f_b(0..=M+1)` in continuous bin units for the triangular families.
pub fn triangular_boundaries(spec: &FilterBankSpec) -> Vec<f64> {
    let m1 = (spec.num_filters + 1) as f64;
    (0..=spec.num_filters + 1)
        .map(|m| {
            let hz = match spec.family {
                FilterFamily::Mel | FilterFamily::InverseMel => {
                    let lo = mel(spec.f_low);
                    let hi = mel(spec.f_high);
                    mel_inv(lo + m as f64 * (hi - lo) / m1)
                }
                _ => spec.f_low + m as f64 * (spec.f_high - spec.f_low) / m1,
            };
            spec.hz_to_bin(hz)
        })
        .collect()
}

/// Row-major `M × K` matrix of filter gains.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterBankMatrix {
    gains: Vec<f64>,
    spec: FilterBankSpec,
}

impl FilterBankMatrix {
    /// Builds any of the five families from its spec.
    pub fn build(spec: &FilterBankSpec) -> Result<Self, FilterBankError> {
        spec.validate()?;
        let fb = match spec.family {
            FilterFamily::Linear => linear_filterbank(spec)?,
            FilterFamily::Mel => mel_filterbank(spec)?,
            FilterFamily::Gammatone => gammatone_filterbank(spec)?,
            FilterFamily::InverseMel => {
                let base = mel_filterbank(&FilterBankSpec {
                    family: FilterFamily::Mel,
                    ..spec.clone()
                })?;
                invert_filterbank(&base)
            }
            FilterFamily::InverseGammatone => {
                let base = gammatone_filterbank(&FilterBankSpec {
                    family: FilterFamily::Gammatone,
                    ..spec.clone()
                })?;
                invert_filterbank(&base)
            }
        };
        fb.warn_empty_filters();
        Ok(fb)
    }

    pub fn for_feature(kind: FeatureKind) -> Self {
        Self::build(&FilterBankSpec::new(kind.family())).expect("default spec is valid")
    }

    pub fn spec(&self) -> &FilterBankSpec {
        &self.spec
    }

    pub fn num_filters(&self) -> usize {
        self.spec.num_filters
    }

    pub fn num_bins(&self) -> usize {
        self.spec.fft_bins
    }

    pub fn row(&self, m: usize) -> &[f64] {
        let k = self.num_bins();
        &self.gains[m * k..(m + 1) * k]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.gains.chunks_exact(self.num_bins())
    }

    pub fn get(&self, m: usize, k: usize) -> f64 {
        self.gains[m * self.num_bins() + k]
    }

    /// Indices of filters whose support contains no bin.
    pub fn empty_filters(&self) -> Vec<usize> {
        self.rows()
            .enumerate()
            .filter(|(_, r)| r.iter().all(|&g| g == 0.0))
            .map(|(m, _)| m)
            .collect()
    }

    fn warn_empty_filters(&self) {
        let empty = self.empty_filters();
        if !empty.is_empty() {
            log::warn!(
                "{:?} filter bank has filters without any FFT bin in their support: {:?}",
                self.spec.family,
                empty
            );
        }
    }

    /// Filter-bank energies `fb · p` for one power spectrum row.
    pub fn energies(&self, power: &[f64]) -> Vec<f64> {
        self.rows()
            .map(|r| r.iter().zip(power).map(|(g, p)| g * p).sum())
            .collect()
    }
}

fn triangular(spec: &FilterBankSpec) -> FilterBankMatrix {
    let fb = triangular_boundaries(spec);
    let k_count = spec.fft_bins;
    let mut gains = vec![0.0; spec.num_filters * k_count];
    for m in 1..=spec.num_filters {
        let (lo, mid, hi) = (fb[m - 1], fb[m], fb[m + 1]);
        let row = &mut gains[(m - 1) * k_count..m * k_count];
        for (k, g) in row.iter_mut().enumerate() {
            let k = k as f64;
            *g = if lo <= k && k <= mid && mid > lo {
                2.0 * (k - lo) / ((hi - lo) * (mid - lo))
            } else if mid < k && k <= hi && hi > mid {
                2.0 * (hi - k) / ((hi - lo) * (hi - mid))
            } else {
                0.0
            };
        }
    }
    FilterBankMatrix {
        gains,
        spec: spec.clone(),
    }
}

/// Triangular filters with boundaries equally spaced in Hz.
pub fn linear_filterbank(spec: &FilterBankSpec) -> Result<FilterBankMatrix, FilterBankError> {
    spec.expect_family(FilterFamily::Linear)?;
    Ok(triangular(spec))
}

/// Triangular filters with boundaries equally spaced on the Mel scale.
pub fn mel_filterbank(spec: &FilterBankSpec) -> Result<FilterBankMatrix, FilterBankError> {
    spec.expect_family(FilterFamily::Mel)?;
    Ok(triangular(spec))
}

/// Gammatone magnitude responses, peak-normalized to 1. Row `g - 1` holds filter `g`.
pub fn gammatone_filterbank(spec: &FilterBankSpec) -> Result<FilterBankMatrix, FilterBankError> {
    spec.expect_family(FilterFamily::Gammatone)?;
    let order = spec.gammatone_order as i32;
    let numerator: f64 = (1..order).map(f64::from).product();
    let k_count = spec.fft_bins;
    let mut gains = Vec::with_capacity(spec.num_filters * k_count);
    for g in 1..=spec.num_filters {
        let fc = gammatone_center(spec, g);
        let bw = erb(fc);
        let row: Vec<f64> = (0..k_count)
            .map(|k| {
                let detune = 2.0 * std::f64::consts::PI * (spec.bin_to_hz(k as f64) - fc);
                // |(L-1)! / (ERB + j·detune)^L|
                numerator / (bw * bw + detune * detune).powf(order as f64 / 2.0)
            })
            .collect();
        let peak = row.iter().cloned().fold(0.0, f64::max);
        gains.extend(row.into_iter().map(|v| v / peak));
    }
    Ok(FilterBankMatrix {
        gains,
        spec: spec.clone(),
    })
}

/// Mirrors a bank: reverses filter order and each filter's frequency axis.
pub fn invert_filterbank(fb: &FilterBankMatrix) -> FilterBankMatrix {
    let m_count = fb.num_filters();
    let k_count = fb.num_bins();
    let mut gains = Vec::with_capacity(fb.gains.len());
    for m in 0..m_count {
        let src = fb.row(m_count - 1 - m);
        gains.extend(src.iter().rev());
    }
    let family = match fb.spec.family {
        FilterFamily::Mel => FilterFamily::InverseMel,
        FilterFamily::InverseMel => FilterFamily::Mel,
        FilterFamily::Gammatone => FilterFamily::InverseGammatone,
        FilterFamily::InverseGammatone => FilterFamily::Gammatone,
        FilterFamily::Linear => FilterFamily::Linear,
    };
    debug_assert_eq!(gains.len(), m_count * k_count);
    FilterBankMatrix {
        gains,
        spec: FilterBankSpec {
            family,
            ..fb.spec.clone()
        },
    }
}

/// 31 × 20 cepstral coefficients of one block.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    coeffs: Vec<f64>,
    rows: usize,
    cols: usize,
    pub kind: FeatureKind,
}

impl FeatureMatrix {
    pub fn new(coeffs: Vec<f64>, rows: usize, cols: usize, kind: FeatureKind) -> Result<Self, FilterBankError> {
        if coeffs.len() != rows * cols {
            return Err(FilterBankError::ShapeMismatch(format!(
                "{} values for shape ({rows}, {cols})",
                coeffs.len()
            )));
        }
        Ok(Self {
            coeffs,
            rows,
            cols,
            kind,
        })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn get(&self, frame: usize, coeff: usize) -> f64 {
        self.coeffs[frame * self.cols + coeff]
    }

    pub fn row(&self, frame: usize) -> &[f64] {
        &self.coeffs[frame * self.cols..(frame + 1) * self.cols]
    }

    /// Row-major flatten; 620 values for a block.
    pub fn supervector(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn into_supervector(self) -> Vec<f64> {
        self.coeffs
    }

    pub fn frobenius_distance(&self, other: &FeatureMatrix) -> f64 {
        self.coeffs
            .iter()
            .zip(&other.coeffs)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

fn feature_kind_of(family: FilterFamily) -> FeatureKind {
    match family {
        FilterFamily::Linear => FeatureKind::Lfcc,
        FilterFamily::Mel => FeatureKind::Mfcc,
        FilterFamily::InverseMel => FeatureKind::Imfcc,
        FilterFamily::Gammatone => FeatureKind::Gfcc,
        FilterFamily::InverseGammatone => FeatureKind::Igfcc,
    }
}

/// Log filter-bank energies followed by a DCT, one row per frame.
pub fn cepstra(
    power: &PowerSpectrumSet,
    fb: &FilterBankMatrix,
    num_ceps: usize,
) -> Result<FeatureMatrix, FilterBankError> {
    let dct = Dct2::new(fb.num_filters(), num_ceps)
        .map_err(|e| FilterBankError::ShapeMismatch(e.to_string()))?;
    cepstra_with(power, fb, &dct)
}

fn cepstra_with(
    power: &PowerSpectrumSet,
    fb: &FilterBankMatrix,
    dct: &Dct2,
) -> Result<FeatureMatrix, FilterBankError> {
    if fb.num_bins() != NUM_BINS {
        return Err(FilterBankError::ShapeMismatch(format!(
            "filter bank has {} bins, spectra have {NUM_BINS}",
            fb.num_bins()
        )));
    }
    if power.num_frames() != FRAMES_PER_BLOCK {
        return Err(FilterBankError::ShapeMismatch(format!(
            "expected {FRAMES_PER_BLOCK} frames, got {}",
            power.num_frames()
        )));
    }
    let mut coeffs = Vec::with_capacity(power.num_frames() * dct.num_coeffs());
    for p in power.frames() {
        let log_e: Vec<f64> = fb.energies(p).into_iter().map(|e| (e + LOG_FLOOR).ln()).collect();
        coeffs.extend(dct.apply(&log_e));
    }
    FeatureMatrix::new(
        coeffs,
        power.num_frames(),
        dct.num_coeffs(),
        feature_kind_of(fb.spec().family),
    )
}

/// Holds the filter bank, FFT plan and DCT basis for one feature kind.
#[derive(Clone)]
pub struct FeatureExtractor {
    kind: FeatureKind,
    bank: FilterBankMatrix,
    analyzer: PowerSpectrum,
    dct: Dct2,
}

impl FeatureExtractor {
    pub fn new(kind: FeatureKind) -> Self {
        Self {
            kind,
            bank: FilterBankMatrix::for_feature(kind),
            analyzer: PowerSpectrum::new(),
            dct: Dct2::new(NUM_FILTERS, NUM_CEPS).expect("20 of 20 coefficients"),
        }
    }

    pub fn kind(&self) -> FeatureKind {
        self.kind
    }

    pub fn bank(&self) -> &FilterBankMatrix {
        &self.bank
    }

    pub fn extract(&self, block: &Block) -> FeatureMatrix {
        let frames = dsp::frame_block(block);
        let power = PowerSpectrumSet::from_frames(&frames, &self.analyzer);
        cepstra_with(&power, &self.bank, &self.dct).expect("block geometry is fixed")
    }
}

/// Full pipeline for one block: framing, power spectrum, filter bank, log, DCT.
pub fn extract_features(block: &Block, kind: FeatureKind) -> FeatureMatrix {
    FeatureExtractor::new(kind).extract(block)
}
