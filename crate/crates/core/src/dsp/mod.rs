//! FOA audio to `(7, T, bands)` feature maps.
//!
//! The pipeline is `stft` → (`banded_log_power` ‖ `intensity_vectors`) →
//! `assemble_features`. All stages are pure and generic over [`Scalar`].

mod filterbank;
mod stft;
mod wav;

pub use filterbank::{
    bark_to_hz, design_bank, design_bark_bank, design_gammatone_bank, design_mel_bank, erb,
    erb_rate, erb_rate_to_hz, hz_to_bark, hz_to_mel, mel_to_hz, FilterBank, FilterKind,
};
pub use stft::{hann_window, stft, ComplexSpectrogram, StftConfig, WindowKind};
pub use wav::{read_wav, read_wav_from, write_wav_f32};

use ndarray::{s, Array3, Axis};

use crate::error::{Result, SeldError};
use crate::scalar::Scalar;

/// Floor added inside the log and to the intensity normaliser.
pub const LOG_EPS: f64 = 1e-8;

pub const N_FOA_CHANNELS: usize = 4;
pub const N_FEATURE_CHANNELS: usize = 7;
pub const DEFAULT_SAMPLE_RATE: u32 = 24_000;
pub const DEFAULT_N_BANDS: usize = 128;
pub const DEFAULT_F_MIN: f64 = 50.0;
pub const DEFAULT_F_MAX: f64 = 12_000.0;

/// Four-channel first-order ambisonics waveform, channel order W, X, Y, Z.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip<T> {
    samples: Vec<Vec<T>>,
    sample_rate: u32,
}

impl<T: Scalar> AudioClip<T> {
    pub fn new(samples: Vec<Vec<T>>, sample_rate: u32) -> Result<Self> {
        if samples.len() != N_FOA_CHANNELS {
            return Err(SeldError::domain(format!(
                "FOA clip needs {N_FOA_CHANNELS} channels, got {}",
                samples.len()
            )));
        }
        let n = samples[0].len();
        if samples.iter().any(|c| c.len() != n) {
            return Err(SeldError::domain("FOA channels differ in length"));
        }
        if sample_rate == 0 {
            return Err(SeldError::domain("sample rate must be positive"));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn channels(&self) -> &[Vec<T>] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn duration_s(&self) -> f64 {
        self.len() as f64 / self.sample_rate as f64
    }

    /// Multiply every sample by `gain`.
    pub fn scaled(&self, gain: T) -> Self {
        Self {
            samples: self
                .samples
                .iter()
                .map(|c| c.iter().map(|&v| v * gain).collect())
                .collect(),
            sample_rate: self.sample_rate,
        }
    }
}

/// Network input: channels 0..4 are log band powers of W, X, Y, Z and
/// channels 4..7 the banded X, Y, Z intensity vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap<T> {
    pub data: Array3<T>,
}

impl<T: Scalar> FeatureMap<T> {
    pub fn new(data: Array3<T>) -> Result<Self> {
        if data.shape()[0] != N_FEATURE_CHANNELS {
            return Err(SeldError::Shape {
                expected: vec![N_FEATURE_CHANNELS, data.shape()[1], data.shape()[2]],
                got: data.shape().to_vec(),
            });
        }
        Ok(Self { data })
    }

    pub fn n_frames(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn n_bands(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn shape(&self) -> [usize; 3] {
        let s = self.data.shape();
        [s[0], s[1], s[2]]
    }

    /// Frames `[start, start + len)` as a new map.
    pub fn slice_frames(&self, start: usize, len: usize) -> Self {
        Self {
            data: self.data.slice(s![.., start..start + len, ..]).to_owned(),
        }
    }
}

fn check_bank<T: Scalar>(spec: &ComplexSpectrogram<T>, bank: &FilterBank<T>) -> Result<()> {
    if bank.n_bins() != spec.n_bins() {
        return Err(SeldError::Shape {
            expected: vec![bank.n_bands(), spec.n_bins()],
            got: vec![bank.n_bands(), bank.n_bins()],
        });
    }
    if spec.n_channels() != N_FOA_CHANNELS {
        return Err(SeldError::domain(format!(
            "spectrogram has {} channels, expected {N_FOA_CHANNELS}",
            spec.n_channels()
        )));
    }
    Ok(())
}

/// `out[c][t][b] = ln(Σ_k w[b][k]·|X_c(t,k)|² + ε)` for the four FOA channels.
pub fn banded_log_power<T: Scalar>(
    spec: &ComplexSpectrogram<T>,
    bank: &FilterBank<T>,
) -> Result<Array3<T>> {
    check_bank(spec, bank)?;
    let (n_t, n_b) = (spec.n_frames(), bank.n_bands());
    let eps = T::lit(LOG_EPS);
    let mut out = Array3::zeros((N_FOA_CHANNELS, n_t, n_b));
    let mut power = vec![T::zero(); spec.n_bins()];
    for c in 0..N_FOA_CHANNELS {
        for t in 0..n_t {
            for (p, z) in power.iter_mut().zip(spec.data.slice(s![c, t, ..])) {
                *p = z.norm_sqr();
            }
            for b in 0..n_b {
                let acc: T = bank
                    .row(b)
                    .iter()
                    .zip(&power)
                    .map(|(&w, &p)| w * p)
                    .sum();
                out[[c, t, b]] = (acc + eps).ln();
            }
        }
    }
    Ok(out)
}

/// Banded, energy-normalised active intensity for X, Y, Z.
///
/// Per bin, `I_d = Re{conj(W)·D}` divided by
/// `E = |W|² + (|X|²+|Y|²+|Z|²)/3 + ε`; bands are the weight-normalised
/// average of the bins. Bands with an all-zero weight row output 0.
pub fn intensity_vectors<T: Scalar>(
    spec: &ComplexSpectrogram<T>,
    bank: &FilterBank<T>,
) -> Result<Array3<T>> {
    check_bank(spec, bank)?;
    let (n_t, n_k, n_b) = (spec.n_frames(), spec.n_bins(), bank.n_bands());
    let eps = T::lit(LOG_EPS);
    let third = T::lit(1.0 / 3.0);
    let row_sums: Vec<T> = (0..n_b).map(|b| bank.row(b).iter().copied().sum()).collect();

    let mut out = Array3::zeros((3, n_t, n_b));
    let mut norm = vec![[T::zero(); 3]; n_k];
    for t in 0..n_t {
        for (k, iv) in norm.iter_mut().enumerate() {
            let w = spec.data[[0, t, k]];
            let x = spec.data[[1, t, k]];
            let y = spec.data[[2, t, k]];
            let z = spec.data[[3, t, k]];
            let energy =
                w.norm_sqr() + (x.norm_sqr() + y.norm_sqr() + z.norm_sqr()) * third + eps;
            let wc = w.conj();
            *iv = [
                (wc * x).re / energy,
                (wc * y).re / energy,
                (wc * z).re / energy,
            ];
        }
        for b in 0..n_b {
            if row_sums[b] <= T::zero() {
                continue;
            }
            let mut acc = [T::zero(); 3];
            for (&wgt, iv) in bank.row(b).iter().zip(&norm) {
                if wgt == T::zero() {
                    continue;
                }
                for d in 0..3 {
                    acc[d] += wgt * iv[d];
                }
            }
            for d in 0..3 {
                out[[d, t, b]] = acc[d] / row_sums[b];
            }
        }
    }
    Ok(out)
}

/// Full front end: STFT, then log band powers and intensity vectors
/// concatenated along the channel axis.
pub fn assemble_features<T: Scalar>(
    clip: &AudioClip<T>,
    cfg: &StftConfig,
    bank: &FilterBank<T>,
) -> Result<FeatureMap<T>> {
    let spec = stft(clip, cfg)?;
    let logpow = banded_log_power(&spec, bank)?;
    let iv = intensity_vectors(&spec, bank)?;
    let data = ndarray::concatenate(Axis(0), &[logpow.view(), iv.view()])
        .expect("both parts share frame and band extents");
    FeatureMap::new(data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_complex::Complex;

    fn spec_from(data: Array3<Complex<f64>>) -> ComplexSpectrogram<f64> {
        ComplexSpectrogram { data, frame_rate: 100.0 }
    }

    fn toy_bank(n_bins: usize) -> FilterBank<f64> {
        design_mel_bank(8, 50.0, 4000.0, (n_bins - 1) * 2, 8000).unwrap()
    }

    #[test]
    fn zero_spectrogram_gives_log_eps() {
        let spec = spec_from(Array3::zeros((4, 3, 33)));
        let out = banded_log_power(&spec, &toy_bank(33)).unwrap();
        for v in out.iter() {
            assert_eq!(*v, LOG_EPS.ln());
        }
        let iv = intensity_vectors(&spec, &toy_bank(33)).unwrap();
        assert!(iv.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn log_power_matches_direct_loop() {
        let mut data = Array3::zeros((4, 2, 33));
        for (i, v) in data.iter_mut().enumerate() {
            let a = (i as f64 * 0.37).sin();
            let b = (i as f64 * 1.13).cos();
            *v = Complex::new(a, b);
        }
        let spec = spec_from(data.clone());
        let bank = toy_bank(33);
        let out = banded_log_power(&spec, &bank).unwrap();
        for c in 0..4 {
            for t in 0..2 {
                for b in 0..8 {
                    let mut acc = 0.0;
                    for k in 0..33 {
                        let z = data[[c, t, k]];
                        acc += bank.weights[[b, k]] * (z.re * z.re + z.im * z.im);
                    }
                    let expect = (acc + 1e-8).ln();
                    assert!((out[[c, t, b]] - expect).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn in_phase_y_gives_three_quarters() {
        let mut data = Array3::zeros((4, 1, 33));
        for k in 0..33 {
            let w = Complex::new(1.0 + k as f64, -0.5);
            data[[0, 0, k]] = w;
            data[[2, 0, k]] = w;
        }
        let iv = intensity_vectors(&spec_from(data), &toy_bank(33)).unwrap();
        for b in 0..8 {
            assert!(iv[[0, 0, b]].abs() < 1e-12);
            assert!((iv[[1, 0, b]] - 0.75).abs() < 1e-8);
            assert!(iv[[2, 0, b]].abs() < 1e-12);
        }
    }

    #[test]
    fn bank_width_mismatch_is_shape_error() {
        let spec = spec_from(Array3::zeros((4, 1, 33)));
        let bank = design_mel_bank(8, 50.0, 4000.0, 128, 8000).unwrap();
        assert!(matches!(banded_log_power(&spec, &bank), Err(SeldError::Shape { .. })));
    }

    #[test]
    fn clip_validation() {
        assert!(AudioClip::<f32>::new(vec![vec![0.0; 4]; 3], 24000).is_err());
        assert!(AudioClip::<f32>::new(vec![vec![0.0; 4], vec![0.0; 4], vec![0.0; 4], vec![0.0; 3]], 24000).is_err());
        assert!(AudioClip::<f32>::new(vec![vec![0.0; 4]; 4], 0).is_err());
        assert!(AudioClip::<f32>::new(vec![vec![0.0; 4]; 4], 24000).is_ok());
    }
}
