use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SeldError};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FilterKind {
    Mel,
    Bark,
    Gammatone,
}

impl FilterKind {
    pub const ALL: [FilterKind; 3] = [FilterKind::Mel, FilterKind::Bark, FilterKind::Gammatone];

    pub fn name(self) -> &'static str {
        match self {
            FilterKind::Mel => "mel",
            FilterKind::Bark => "bark",
            FilterKind::Gammatone => "gammatone",
        }
    }
}

impl fmt::Display for FilterKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FilterKind {
    type Err = SeldError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mel" => Ok(FilterKind::Mel),
            "bark" => Ok(FilterKind::Bark),
            "gammatone" | "gamma" => Ok(FilterKind::Gammatone),
            other => Err(SeldError::domain(format!(
                "unknown filter '{other}', expected mel, bark or gammatone"
            ))),
        }
    }
}

/// A `[band][bin]` matrix of nonnegative weights over one-sided FFT bins.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterBank<T> {
    pub kind: FilterKind,
    pub weights: Array2<T>,
    pub center_freqs: Vec<T>,
    pub f_min: T,
    pub f_max: T,
}

impl<T: Scalar> FilterBank<T> {
    pub fn n_bands(&self) -> usize {
        self.weights.nrows()
    }

    pub fn n_bins(&self) -> usize {
        self.weights.ncols()
    }

    pub fn row(&self, band: usize) -> ArrayView1<'_, T> {
        self.weights.row(band)
    }
}

/// HTK mel scale.
pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Traunmüller's rational Bark approximation.
pub fn hz_to_bark(f: f64) -> f64 {
    26.81 * f / (1960.0 + f) - 0.53
}

/// Inverse of [`hz_to_bark`]; infinite at and beyond the 26.28 Bark asymptote.
pub fn bark_to_hz(z: f64) -> f64 {
    let u = z + 0.53;
    if u >= 26.81 {
        return f64::INFINITY;
    }
    1960.0 * u / (26.81 - u)
}

/// Glasberg and Moore equivalent rectangular bandwidth in Hz.
pub fn erb(f: f64) -> f64 {
    24.7 * (4.37 * f / 1000.0 + 1.0)
}

/// ERB-rate (number of ERBs below `f`).
pub fn erb_rate(f: f64) -> f64 {
    21.4 * (1.0 + 0.00437 * f).log10()
}

pub fn erb_rate_to_hz(e: f64) -> f64 {
    (10f64.powf(e / 21.4) - 1.0) / 0.00437
}

struct Grid {
    n_bins: usize,
    bin_hz: f64,
}

fn validate(
    n_bands: usize,
    f_min: f64,
    f_max: f64,
    fft_size: usize,
    sample_rate: u32,
) -> Result<Grid> {
    if n_bands < 2 {
        return Err(SeldError::domain(format!("n_bands must be >= 2, got {n_bands}")));
    }
    if fft_size < 2 {
        return Err(SeldError::domain("fft_size must be >= 2"));
    }
    let nyquist = sample_rate as f64 / 2.0;
    if !(f_min.is_finite() && f_max.is_finite()) || f_min < 0.0 || f_min >= f_max || f_max > nyquist
    {
        return Err(SeldError::domain(format!(
            "invalid frequency range [{f_min}, {f_max}] Hz for Nyquist {nyquist} Hz"
        )));
    }
    Ok(Grid {
        n_bins: fft_size / 2 + 1,
        bin_hz: sample_rate as f64 / fft_size as f64,
    })
}

/// `n` points equally spaced from `lo` to `hi` inclusive.
fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let step = (hi - lo) / (n - 1) as f64;
    (0..n).map(|i| lo + step * i as f64).collect()
}

fn triangle(f: f64, lo: f64, c: f64, hi: f64) -> f64 {
    if f < lo || f > hi {
        0.0
    } else if f <= c {
        if c > lo { (f - lo) / (c - lo) } else { 1.0 }
    } else if hi > c {
        (hi - f) / (hi - c)
    } else {
        1.0
    }
}

/// Triangles peaking (value 1) at `centers` on a perceptual scale. The first
/// and last centres sit on the scale images of `f_min`/`f_max`; skirts
/// reach the neighbouring centres, and the outer skirts extend one scale
/// step (at least to mirror the centre about the range edge) so that the
/// closed range `[f_min, f_max]` is covered. Every skirt is at least one
/// bin wide, so each band has a nonzero weight.
fn triangular_bank<T: Scalar>(
    kind: FilterKind,
    grid: &Grid,
    f_min: f64,
    f_max: f64,
    scale_lo: f64,
    scale_hi: f64,
    n_bands: usize,
    to_hz: impl Fn(f64) -> f64,
) -> Result<FilterBank<T>> {
    if scale_hi <= scale_lo {
        return Err(SeldError::domain(format!(
            "frequency range [{f_min}, {f_max}] Hz is empty on the {kind} scale"
        )));
    }
    let pts = linspace(scale_lo, scale_hi, n_bands);
    let step = pts[1] - pts[0];
    let centers: Vec<f64> = pts.iter().map(|&p| to_hz(p)).collect();
    let last = n_bands - 1;

    let mut lower_outer = to_hz(scale_lo - step).min(2.0 * f_min - centers[0]);
    if !lower_outer.is_finite() || lower_outer >= centers[0] {
        lower_outer = 2.0 * f_min - centers[0] - grid.bin_hz;
    }
    let mut upper_outer = to_hz(scale_hi + step);
    if !upper_outer.is_finite() || upper_outer <= centers[last] {
        upper_outer = 2.0 * centers[last] - centers[last - 1];
    }
    let upper_outer = upper_outer.max(2.0 * f_max - centers[last]);

    let mut weights = Array2::<T>::zeros((n_bands, grid.n_bins));
    for b in 0..n_bands {
        // Skirts span at least one bin so no band falls between bins.
        let lo = if b == 0 { lower_outer } else { centers[b - 1] }.min(centers[b] - grid.bin_hz);
        let hi = if b == last { upper_outer } else { centers[b + 1] }.max(centers[b] + grid.bin_hz);
        for k in 0..grid.n_bins {
            let f = k as f64 * grid.bin_hz;
            weights[[b, k]] = T::lit(triangle(f, lo, centers[b], hi));
        }
    }
    Ok(FilterBank {
        kind,
        weights,
        center_freqs: centers.into_iter().map(T::lit).collect(),
        f_min: T::lit(f_min),
        f_max: T::lit(f_max),
    })
}

pub fn design_mel_bank<T: Scalar>(
    n_bands: usize,
    f_min: f64,
    f_max: f64,
    fft_size: usize,
    sample_rate: u32,
) -> Result<FilterBank<T>> {
    let grid = validate(n_bands, f_min, f_max, fft_size, sample_rate)?;
    triangular_bank(
        FilterKind::Mel,
        &grid,
        f_min,
        f_max,
        hz_to_mel(f_min),
        hz_to_mel(f_max),
        n_bands,
        mel_to_hz,
    )
}

/// Negative Bark values below ~40 Hz are clamped to 0 for band placement.
pub fn design_bark_bank<T: Scalar>(
    n_bands: usize,
    f_min: f64,
    f_max: f64,
    fft_size: usize,
    sample_rate: u32,
) -> Result<FilterBank<T>> {
    let grid = validate(n_bands, f_min, f_max, fft_size, sample_rate)?;
    triangular_bank(
        FilterKind::Bark,
        &grid,
        f_min,
        f_max,
        hz_to_bark(f_min).max(0.0),
        hz_to_bark(f_max).max(0.0),
        n_bands,
        bark_to_hz,
    )
}

/// Frequency-domain magnitude response of a 4th-order gammatone filter,
/// `[1 + ((f - fc)/bw)²]^-2` with `bw = 1.019·ERB(fc)`, centres equally
/// spaced in ERB-rate. Each row is scaled so its largest bin weight is 1.
pub fn design_gammatone_bank<T: Scalar>(
    n_bands: usize,
    f_min: f64,
    f_max: f64,
    fft_size: usize,
    sample_rate: u32,
) -> Result<FilterBank<T>> {
    let grid = validate(n_bands, f_min, f_max, fft_size, sample_rate)?;
    let centers: Vec<f64> = linspace(erb_rate(f_min), erb_rate(f_max), n_bands)
        .into_iter()
        .map(erb_rate_to_hz)
        .collect();
    let mut weights = Array2::<T>::zeros((n_bands, grid.n_bins));
    let mut row = vec![0.0; grid.n_bins];
    for (b, &fc) in centers.iter().enumerate() {
        let bw = 1.019 * erb(fc);
        for (k, r) in row.iter_mut().enumerate() {
            *r = gammatone_magnitude(k as f64 * grid.bin_hz, fc, bw);
        }
        let peak = row.iter().cloned().fold(0.0, f64::max);
        for (k, &r) in row.iter().enumerate() {
            weights[[b, k]] = T::lit(r / peak);
        }
    }
    Ok(FilterBank {
        kind: FilterKind::Gammatone,
        weights,
        center_freqs: centers.into_iter().map(T::lit).collect(),
        f_min: T::lit(f_min),
        f_max: T::lit(f_max),
    })
}

pub(crate) fn gammatone_magnitude(f: f64, fc: f64, bw: f64) -> f64 {
    let u = (f - fc) / bw;
    (1.0 + u * u).powi(-2)
}

pub fn design_bank<T: Scalar>(
    kind: FilterKind,
    n_bands: usize,
    f_min: f64,
    f_max: f64,
    fft_size: usize,
    sample_rate: u32,
) -> Result<FilterBank<T>> {
    match kind {
        FilterKind::Mel => design_mel_bank(n_bands, f_min, f_max, fft_size, sample_rate),
        FilterKind::Bark => design_bark_bank(n_bands, f_min, f_max, fft_size, sample_rate),
        FilterKind::Gammatone => {
            design_gammatone_bank(n_bands, f_min, f_max, fft_size, sample_rate)
        }
    }
}
