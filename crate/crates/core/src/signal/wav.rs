//! 16-bit PCM mono WAV input and output.

use std::path::Path;

use crate::error::{Error, Result};

pub const SAMPLE_RATE: u32 = 16_000;

/// Reads a 16 kHz mono 16-bit PCM file as samples in `[-1, 1)`.
pub fn read_wav(path: &Path) -> Result<Vec<f64>> {
    let mut reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    if spec.channels != 1
        || spec.sample_rate != SAMPLE_RATE
        || spec.bits_per_sample != 16
        || spec.sample_format != hound::SampleFormat::Int
    {
        return Err(Error::AudioFormat(format!(
            "{}: need 16-bit PCM mono at {SAMPLE_RATE} Hz, got {} ch, {} Hz, {} bit {:?}",
            path.display(),
            spec.channels,
            spec.sample_rate,
            spec.bits_per_sample,
            spec.sample_format
        )));
    }
    reader
        .samples::<i16>()
        .map(|s| Ok(s? as f64 / 32768.0))
        .collect()
}

/// Writes samples clipped to `[-1, 1]` as 16-bit PCM mono.
pub fn write_wav(path: &Path, samples: &[f64]) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: SAMPLE_RATE,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec)?;
    for s in samples {
        w.write_sample((s.clamp(-1.0, 1.0) * 32767.0).round() as i16)?;
    }
    w.finalize()?;
    Ok(())
}
