use std::path::Path;

use crate::error::{Error, Result};

fn format_err(path: &Path, field: impl Into<String>) -> Error {
    Error::WavFormat {
        path: path.to_path_buf(),
        field: field.into(),
    }
}

/// Reads a mono 16-bit PCM RIFF/WAVE file; samples are scaled by 1/32768.
pub fn read_wav(path: impl AsRef<Path>) -> Result<(Vec<f32>, u32)> {
    let path = path.as_ref();
    let reader = hound::WavReader::open(path).map_err(|e| match e {
        // Once the file is open, short reads mean a truncated header.
        hound::Error::IoError(io) if path.is_file() => format_err(path, format!("header: {io}")),
        hound::Error::IoError(io) => Error::io(path, io),
        other => format_err(path, other.to_string()),
    })?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(format_err(path, format!("channels={}", spec.channels)));
    }
    if spec.sample_format != hound::SampleFormat::Int {
        return Err(format_err(path, "sample_format=float"));
    }
    if spec.bits_per_sample != 16 {
        return Err(format_err(
            path,
            format!("bits_per_sample={}", spec.bits_per_sample),
        ));
    }
    let expected = reader.len() as usize;
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f32 / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| format_err(path, format!("data: {e}")))?;
    if samples.len() != expected {
        return Err(format_err(
            path,
            format!("data: truncated, {} of {expected} samples", samples.len()),
        ));
    }
    Ok((samples, spec.sample_rate))
}

/// Writes mono 16-bit PCM. Values are scaled by 32768, rounded and clamped,
/// so anything produced by [`read_wav`] is written back exactly.
pub fn write_wav(path: impl AsRef<Path>, samples: &[f32], sample_rate: u32) -> Result<()> {
    let path = path.as_ref();
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let wrap = |e: hound::Error| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => format_err(path, other.to_string()),
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(wrap)?;
    for &s in samples {
        w.write_sample(quantize(s)).map_err(wrap)?;
    }
    w.finalize().map_err(wrap)
}

pub(crate) fn quantize(s: f32) -> i16 {
    (s as f64 * 32768.0).round().clamp(-32768.0, 32767.0) as i16
}
