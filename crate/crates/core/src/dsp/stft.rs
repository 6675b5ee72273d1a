use ndarray::Array3;
use num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use super::AudioClip;
use crate::error::{Result, SeldError};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WindowKind {
    Hann,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StftConfig {
    pub fft_size: usize,
    pub win_length: usize,
    pub hop_length: usize,
    pub window: WindowKind,
    pub centered: bool,
}

impl Default for StftConfig {
    /// 512-point FFT, 20 ms window, 10 ms hop at 24 kHz.
    fn default() -> Self {
        Self::for_sample_rate(super::DEFAULT_SAMPLE_RATE)
    }
}

impl StftConfig {
    /// 20 ms window and 10 ms hop at `sample_rate`, FFT of at least 512 points.
    pub fn for_sample_rate(sample_rate: u32) -> Self {
        let sr = sample_rate as f64;
        let win_length = ((0.020 * sr).round() as usize).max(1);
        let hop_length = ((0.010 * sr).round() as usize).max(1);
        Self {
            fft_size: win_length.next_power_of_two().max(512),
            win_length,
            hop_length,
            window: WindowKind::Hann,
            centered: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.fft_size == 0 || self.hop_length == 0 || self.win_length == 0 {
            return Err(SeldError::domain("STFT sizes must be positive"));
        }
        if self.win_length > self.fft_size {
            return Err(SeldError::domain(format!(
                "win_length {} exceeds fft_size {}",
                self.win_length, self.fft_size
            )));
        }
        if self.hop_length > self.win_length {
            return Err(SeldError::domain(format!(
                "hop_length {} exceeds win_length {}",
                self.hop_length, self.win_length
            )));
        }
        Ok(())
    }

    pub fn n_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    /// Frame count for a signal of `n` samples.
    pub fn n_frames(&self, n: usize) -> usize {
        if self.centered {
            n.div_ceil(self.hop_length)
        } else if n >= self.win_length {
            1 + (n - self.win_length) / self.hop_length
        } else {
            0
        }
    }
}

/// One-sided STFT, `[channel][frame][bin]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexSpectrogram<T> {
    pub data: Array3<Complex<T>>,
    /// Frames per second.
    pub frame_rate: f64,
}

impl<T: Scalar> ComplexSpectrogram<T> {
    pub fn n_channels(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn n_frames(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn n_bins(&self) -> usize {
        self.data.shape()[2]
    }
}

/// Periodic Hann window of length `n`.
pub fn hann_window<T: Scalar>(n: usize) -> Vec<T> {
    let two_pi = std::f64::consts::TAU;
    (0..n)
        .map(|i| T::lit(0.5 - 0.5 * (two_pi * i as f64 / n as f64).cos()))
        .collect()
}

/// Mirror an index into `[0, n)` without repeating the edge sample.
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m >= n as isize { (period - m) as usize } else { m as usize }
}

/// Centered framing places frame `t` around sample `t·hop`, reflecting the
/// signal at both ends, which yields `ceil(n / hop)` frames. The
/// `win_length` window sits in the middle of the `fft_size` buffer.
pub fn stft<T: Scalar>(clip: &AudioClip<T>, cfg: &StftConfig) -> Result<ComplexSpectrogram<T>> {
    cfg.validate()?;
    let n = clip.len();
    if n < cfg.hop_length {
        return Err(SeldError::domain(format!(
            "clip of {n} samples is shorter than one hop ({})",
            cfg.hop_length
        )));
    }
    let n_frames = cfg.n_frames(n);
    if n_frames == 0 {
        return Err(SeldError::domain(format!(
            "clip of {n} samples is shorter than one window ({})",
            cfg.win_length
        )));
    }
    let n_bins = cfg.n_bins();
    let window: Vec<T> = match cfg.window {
        WindowKind::Hann => hann_window(cfg.win_length),
    };
    let fft = FftPlanner::<T>::new().plan_fft_forward(cfg.fft_size);
    let offset = (cfg.fft_size - cfg.win_length) / 2;
    let half = (cfg.win_length / 2) as isize;

    let channels = clip.channels();
    let mut out = Array3::from_elem((channels.len(), n_frames, n_bins), Complex::new(T::zero(), T::zero()));
    let mut buf = vec![Complex::new(T::zero(), T::zero()); cfg.fft_size];
    let mut scratch = vec![Complex::new(T::zero(), T::zero()); fft.get_inplace_scratch_len()];
    for (c, x) in channels.iter().enumerate() {
        for t in 0..n_frames {
            buf.fill(Complex::new(T::zero(), T::zero()));
            let start = if cfg.centered {
                (t * cfg.hop_length) as isize - half
            } else {
                (t * cfg.hop_length) as isize
            };
            for (j, &w) in window.iter().enumerate() {
                let idx = reflect(start + j as isize, n);
                buf[offset + j] = Complex::new(x[idx] * w, T::zero());
            }
            fft.process_with_scratch(&mut buf, &mut scratch);
            for k in 0..n_bins {
                out[[c, t, k]] = buf[k];
            }
        }
    }
    Ok(ComplexSpectrogram {
        data: out,
        frame_rate: clip.sample_rate() as f64 / cfg.hop_length as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clip_of(ch: Vec<f64>, sr: u32) -> AudioClip<f64> {
        AudioClip::new(vec![ch.clone(), ch.clone(), ch.clone(), ch], sr).unwrap()
    }

    #[test]
    fn default_config_at_24k() {
        let cfg = StftConfig::default();
        assert_eq!((cfg.fft_size, cfg.win_length, cfg.hop_length), (512, 480, 240));
        assert!(cfg.centered);
    }

    #[test]
    fn one_second_gives_100_frames() {
        let spec = stft(&clip_of(vec![0.0; 24000], 24000), &StftConfig::default()).unwrap();
        assert_eq!(spec.data.dim(), (4, 100, 257));
        assert_eq!(spec.frame_rate, 100.0);
        assert!(spec.data.iter().all(|z| z.re == 0.0 && z.im == 0.0));
    }

    #[test]
    fn too_short_clip_rejected() {
        let r = stft(&clip_of(vec![0.0; 239], 24000), &StftConfig::default());
        assert!(matches!(r, Err(SeldError::Domain(_))));
        assert!(stft(&clip_of(vec![0.1; 240], 24000), &StftConfig::default()).is_ok());
    }

    #[test]
    fn invalid_config_rejected() {
        let mut cfg = StftConfig::default();
        cfg.win_length = 600;
        assert!(cfg.validate().is_err());
        let mut cfg = StftConfig::default();
        cfg.hop_length = 500;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn reflect_indexing() {
        let got: Vec<usize> = (-3..8).map(|i| reflect(i, 5)).collect();
        assert_eq!(got, vec![3, 2, 1, 0, 1, 2, 3, 4, 3, 2, 1]);
    }

    #[test]
    fn bin_centred_sinusoid_peaks_at_its_bin() {
        let cfg = StftConfig::default();
        let k = 37usize;
        let f = k as f64 * 24000.0 / cfg.fft_size as f64;
        let x: Vec<f64> = (0..24000)
            .map(|i| (std::f64::consts::TAU * f * i as f64 / 24000.0).sin())
            .collect();
        let spec = stft(&clip_of(x, 24000), &cfg).unwrap();
        for t in 2..spec.n_frames() - 2 {
            let argmax = (0..spec.n_bins())
                .max_by(|&a, &b| {
                    spec.data[[0, t, a]].norm().partial_cmp(&spec.data[[0, t, b]].norm()).unwrap()
                })
                .unwrap();
            assert_eq!(argmax, k, "frame {t}");
        }
    }
}
