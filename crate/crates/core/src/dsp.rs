//! Framing, Hamming windowing, power spectrum and orthonormal DCT-II.

use std::cell::RefCell;
use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use thiserror::Error;

use crate::audio_io::{Block, BLOCK_LEN};

/// 32 ms at 16 kHz.
pub const FRAME_LEN: usize = 512;
/// 16 ms at 16 kHz.
pub const FRAME_SHIFT: usize = 256;
/// One-sided spectrum size for a 512-point FFT.
pub const NUM_BINS: usize = FRAME_LEN / 2 + 1;
/// Frames per block.
pub const FRAMES_PER_BLOCK: usize = frame_count(BLOCK_LEN);

/// Window applied to each frame; reported in run metadata.
pub const WINDOW_NAME: &str = "hamming";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DspError {
    #[error("requested {requested} coefficients from {len} values")]
    BadCoeffCount { requested: usize, len: usize },
    #[error("frame must have {FRAME_LEN} samples, got {0}")]
    BadFrameLength(usize),
}

/// Number of full frames that fit in `len` samples.
pub const fn frame_count(len: usize) -> usize {
    if len < FRAME_LEN {
        0
    } else {
        (len - FRAME_LEN) / FRAME_SHIFT + 1
    }
}

/// Symmetric Hamming window `0.54 - 0.46 cos(2πn/(N-1))`.
pub fn hamming(len: usize) -> Vec<f64> {
    if len == 1 {
        return vec![1.0];
    }
    let denom = (len - 1) as f64;
    (0..len)
        .map(|n| 0.54 - 0.46 * (2.0 * PI * n as f64 / denom).cos())
        .collect()
}

/// Windowed frames of one block, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSet {
    data: Vec<f64>,
}

impl FrameSet {
    pub fn num_frames(&self) -> usize {
        self.data.len() / FRAME_LEN
    }

    pub fn frame(&self, i: usize) -> &[f64] {
        &self.data[i * FRAME_LEN..(i + 1) * FRAME_LEN]
    }

    pub fn frames(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(FRAME_LEN)
    }
}

/// Splits a block into 31 Hamming-windowed frames of 512 samples at a 256-sample shift.
pub fn frame_block(block: &Block) -> FrameSet {
    frame_samples(block.samples())
}

/// Frames an arbitrary sample slice; trailing samples beyond the last full frame are ignored.
pub fn frame_samples(samples: &[f64]) -> FrameSet {
    let window = hamming(FRAME_LEN);
    let n = frame_count(samples.len());
    let mut data = Vec::with_capacity(n * FRAME_LEN);
    for i in 0..n {
        let start = i * FRAME_SHIFT;
        data.extend(
            samples[start..start + FRAME_LEN]
                .iter()
                .zip(&window)
                .map(|(s, w)| s * w),
        );
    }
    FrameSet { data }
}

/// Reusable 512-point power spectrum estimator.
#[derive(Clone)]
pub struct PowerSpectrum {
    fft: Arc<dyn Fft<f64>>,
}

impl Default for PowerSpectrum {
    fn default() -> Self {
        Self::new()
    }
}

impl PowerSpectrum {
    pub fn new() -> Self {
        Self {
            fft: FftPlanner::new().plan_fft_forward(FRAME_LEN),
        }
    }

    /// `|DFT(frame)(k)|² / N` for `k = 0..=N/2`.
    pub fn compute(&self, frame: &[f64]) -> Result<Vec<f64>, DspError> {
        if frame.len() != FRAME_LEN {
            return Err(DspError::BadFrameLength(frame.len()));
        }
        let mut buf: Vec<Complex<f64>> = frame.iter().map(|&x| Complex::new(x, 0.0)).collect();
        self.fft.process(&mut buf);
        Ok(buf[..NUM_BINS]
            .iter()
            .map(|c| c.norm_sqr() / FRAME_LEN as f64)
            .collect())
    }

    /// Full complex spectrum, used for symmetry checks.
    pub fn complex_spectrum(&self, frame: &[f64]) -> Result<Vec<Complex<f64>>, DspError> {
        if frame.len() != FRAME_LEN {
            return Err(DspError::BadFrameLength(frame.len()));
        }
        let mut buf: Vec<Complex<f64>> = frame.iter().map(|&x| Complex::new(x, 0.0)).collect();
        self.fft.process(&mut buf);
        Ok(buf)
    }
}

thread_local! {
    static SPECTRUM: RefCell<Option<PowerSpectrum>> = const { RefCell::new(None) };
}

/// One-sided power spectrum of a 512-sample frame.
pub fn power_spectrum(frame: &[f64]) -> Result<Vec<f64>, DspError> {
    SPECTRUM.with(|cell| {
        cell.borrow_mut()
            .get_or_insert_with(PowerSpectrum::new)
            .compute(frame)
    })
}

/// Power spectra of every frame, `frames × 257` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PowerSpectrumSet {
    data: Vec<f64>,
}

impl PowerSpectrumSet {
    pub fn from_frames(frames: &FrameSet, analyzer: &PowerSpectrum) -> Self {
        let mut data = Vec::with_capacity(frames.num_frames() * NUM_BINS);
        for f in frames.frames() {
            data.extend(analyzer.compute(f).expect("frames are FRAME_LEN long"));
        }
        Self { data }
    }

    /// Builds a set from raw rows; each row must have 257 entries.
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self, DspError> {
        let mut data = Vec::with_capacity(rows.len() * NUM_BINS);
        for r in rows {
            if r.len() != NUM_BINS {
                return Err(DspError::BadFrameLength(r.len()));
            }
            data.extend(r);
        }
        Ok(Self { data })
    }

    pub fn num_frames(&self) -> usize {
        self.data.len() / NUM_BINS
    }

    pub fn frame(&self, i: usize) -> &[f64] {
        &self.data[i * NUM_BINS..(i + 1) * NUM_BINS]
    }

    pub fn frames(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(NUM_BINS)
    }

    pub fn scale(&mut self, factor: f64) {
        self.data.iter_mut().for_each(|p| *p *= factor);
    }
}

/// Precomputed orthonormal DCT-II basis for inputs of length `len`.
#[derive(Debug, Clone)]
pub struct Dct2 {
    len: usize,
    num_coeffs: usize,
    basis: Vec<f64>,
}

impl Dct2 {
    pub fn new(len: usize, num_coeffs: usize) -> Result<Self, DspError> {
        if num_coeffs == 0 || num_coeffs > len {
            return Err(DspError::BadCoeffCount {
                requested: num_coeffs,
                len,
            });
        }
        let m = len as f64;
        let mut basis = Vec::with_capacity(num_coeffs * len);
        for j in 0..num_coeffs {
            let s = if j == 0 { (1.0 / m).sqrt() } else { (2.0 / m).sqrt() };
            basis.extend((0..len).map(|i| s * (PI * j as f64 * (i as f64 + 0.5) / m).cos()));
        }
        Ok(Self {
            len,
            num_coeffs,
            basis,
        })
    }

    pub fn apply(&self, values: &[f64]) -> Vec<f64> {
        debug_assert_eq!(values.len(), self.len);
        self.basis
            .chunks_exact(self.len)
            .map(|row| row.iter().zip(values).map(|(b, x)| b * x).sum())
            .collect()
    }

    pub fn num_coeffs(&self) -> usize {
        self.num_coeffs
    }
}

/// Orthonormal DCT-II returning the first `num_coeffs` coefficients.
pub fn dct2(values: &[f64], num_coeffs: usize) -> Result<Vec<f64>, DspError> {
    Ok(Dct2::new(values.len(), num_coeffs)?.apply(values))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio_io::{Attack, Condition, Label, Part};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn block(samples: Vec<f64>) -> Block {
        Block::new(samples, Label::Benign, "t", 0, Condition::clean(Attack::White, Part::Full)).unwrap()
    }

    /// Direct O(N²) DFT.
    fn naive_dft(x: &[f64]) -> Vec<(f64, f64)> {
        let n = x.len();
        (0..n)
            .map(|k| {
                x.iter().enumerate().fold((0.0, 0.0), |(re, im), (t, &v)| {
                    let ang = -2.0 * PI * (k * t % n) as f64 / n as f64;
                    (re + v * ang.cos(), im + v * ang.sin())
                })
            })
            .collect()
    }

    /// Inverse of the orthonormal DCT-II (DCT-III with matching scale).
    fn naive_idct(c: &[f64]) -> Vec<f64> {
        let m = c.len() as f64;
        (0..c.len())
            .map(|i| {
                c.iter()
                    .enumerate()
                    .map(|(j, cj)| {
                        let s = if j == 0 { (1.0 / m).sqrt() } else { (2.0 / m).sqrt() };
                        s * cj * (PI * j as f64 * (i as f64 + 0.5) / m).cos()
                    })
                    .sum()
            })
            .collect()
    }

    #[test]
    fn thirty_one_frames_per_block() {
        assert_eq!(FRAMES_PER_BLOCK, 31);
        let fs = frame_block(&block(vec![0.0; BLOCK_LEN]));
        assert_eq!(fs.num_frames(), 31);
        assert!(fs.frames().all(|f| f.iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn ones_block_gives_window() {
        let fs = frame_block(&block(vec![1.0; BLOCK_LEN]));
        let w = hamming(FRAME_LEN);
        for f in fs.frames() {
            assert_eq!(f, &w[..]);
        }
        assert!((w[0] - 0.08).abs() < 1e-15);
        assert!((w[FRAME_LEN - 1] - 0.08).abs() < 1e-15);
    }

    #[test]
    fn frame_i_starts_at_shift() {
        let ramp: Vec<f64> = (0..BLOCK_LEN).map(|i| i as f64).collect();
        let fs = frame_block(&block(ramp));
        let w = hamming(FRAME_LEN);
        for i in 0..31 {
            let f = fs.frame(i);
            assert_eq!(f[100], (i * 256 + 100) as f64 * w[100]);
        }
    }

    #[test]
    fn zero_frame_zero_spectrum() {
        assert!(power_spectrum(&[0.0; FRAME_LEN]).unwrap().iter().all(|&p| p == 0.0));
        assert_eq!(power_spectrum(&[0.0; 10]), Err(DspError::BadFrameLength(10)));
    }

    #[test]
    fn bin_centred_cosine() {
        let frame: Vec<f64> = (0..FRAME_LEN)
            .map(|n| (2.0 * PI * 1000.0 * n as f64 / 16000.0).cos())
            .collect();
        let p = power_spectrum(&frame).unwrap();
        assert!((p[32] - 128.0).abs() < 1e-9);
        for (k, &v) in p.iter().enumerate() {
            if k != 32 {
                assert!(v < 1e-9, "bin {k}: {v}");
            }
        }
        let d = naive_dft(&frame);
        let p32 = (d[32].0 * d[32].0 + d[32].1 * d[32].1) / 512.0;
        assert!((p32 - 128.0).abs() < 1e-8);
    }

    #[test]
    fn parseval_and_symmetry() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ps = PowerSpectrum::new();
        for _ in 0..20 {
            let frame: Vec<f64> = (0..FRAME_LEN).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let spec = ps.complex_spectrum(&frame).unwrap();
            let two_sided: f64 = spec.iter().map(|c| c.norm_sqr()).sum::<f64>() / FRAME_LEN as f64;
            let energy: f64 = frame.iter().map(|x| x * x).sum();
            assert!((two_sided - energy).abs() <= 1e-9 * energy);
            for k in 1..FRAME_LEN {
                let a = spec[k];
                let b = spec[FRAME_LEN - k].conj();
                assert!((a - b).norm() < 1e-10);
            }
        }
    }

    #[test]
    fn dct_dc_case() {
        let c = dct2(&[1.0; 20], 20).unwrap();
        assert!((c[0] - 20f64.sqrt()).abs() < 1e-12);
        assert!(c[1..].iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn dct_single_basis_vector() {
        let x: Vec<f64> = (0..20).map(|m| (PI * (m as f64 + 0.5) / 20.0).cos()).collect();
        let c = dct2(&x, 20).unwrap();
        assert!((c[1] - 10f64.sqrt()).abs() < 1e-10);
        for (j, v) in c.iter().enumerate() {
            if j != 1 {
                assert!(v.abs() < 1e-10);
            }
        }
    }

    #[test]
    fn dct_inverse_recovers_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x: Vec<f64> = (0..20).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let back = naive_idct(&dct2(&x, 20).unwrap());
        for (a, b) in back.iter().zip(&x) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn dct_bad_counts() {
        assert!(matches!(dct2(&[1.0; 4], 0), Err(DspError::BadCoeffCount { .. })));
        assert!(matches!(dct2(&[1.0; 4], 5), Err(DspError::BadCoeffCount { .. })));
        assert_eq!(dct2(&[1.0; 4], 2).unwrap().len(), 2);
    }
}
