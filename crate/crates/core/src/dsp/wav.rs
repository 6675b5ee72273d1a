use std::io::{Read, Seek};
use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use super::{AudioClip, N_FOA_CHANNELS};
use crate::error::{Result, SeldError};
use crate::scalar::Scalar;

/// Read a 4-channel FOA RIFF/WAVE file (16/24-bit PCM or 32-bit float).
///
/// No resampling is done: files whose rate differs from `expected_rate`
/// are rejected.
pub fn read_wav<T: Scalar>(path: impl AsRef<Path>, expected_rate: u32) -> Result<AudioClip<T>> {
    let reader = WavReader::open(path)?;
    decode(reader, expected_rate)
}

pub fn read_wav_from<T: Scalar, R: Read + Seek>(r: R, expected_rate: u32) -> Result<AudioClip<T>> {
    decode(WavReader::new(r)?, expected_rate)
}

fn decode<T: Scalar, R: Read>(reader: WavReader<R>, expected_rate: u32) -> Result<AudioClip<T>> {
    let spec = reader.spec();
    if spec.channels as usize != N_FOA_CHANNELS {
        return Err(SeldError::domain(format!(
            "expected a {N_FOA_CHANNELS}-channel FOA file, found {} channels",
            spec.channels
        )));
    }
    if spec.sample_rate != expected_rate {
        return Err(SeldError::domain(format!(
            "sample rate {} Hz is not supported (expected {expected_rate} Hz, resampling is not performed)",
            spec.sample_rate
        )));
    }
    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<std::result::Result<_, _>>()?,
        (SampleFormat::Int, bits @ (16 | 24)) => {
            let scale = 1.0 / (1i64 << (bits - 1)) as f64;
            reader
                .into_samples::<i32>()
                .map(|s| s.map(|v| v as f64 * scale))
                .collect::<std::result::Result<_, _>>()?
        }
        (fmt, bits) => {
            return Err(SeldError::domain(format!(
                "unsupported sample format {fmt:?} with {bits} bits"
            )))
        }
    };
    let n = interleaved.len() / N_FOA_CHANNELS;
    let mut channels: Vec<Vec<T>> = (0..N_FOA_CHANNELS).map(|_| Vec::with_capacity(n)).collect();
    for frame in interleaved.chunks_exact(N_FOA_CHANNELS) {
        for (c, &v) in frame.iter().enumerate() {
            channels[c].push(T::lit(v));
        }
    }
    AudioClip::new(channels, spec.sample_rate)
}

/// Write a clip as 32-bit float WAV.
pub fn write_wav_f32<T: Scalar>(path: impl AsRef<Path>, clip: &AudioClip<T>) -> Result<()> {
    let spec = WavSpec {
        channels: N_FOA_CHANNELS as u16,
        sample_rate: clip.sample_rate(),
        bits_per_sample: 32,
        sample_format: SampleFormat::Float,
    };
    let mut w = WavWriter::create(path, spec)?;
    for i in 0..clip.len() {
        for ch in clip.channels() {
            w.write_sample(ch[i].to_f32().unwrap_or(0.0))?;
        }
    }
    w.finalize()?;
    Ok(())
}
