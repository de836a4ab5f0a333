//! 16 kHz mono PCM16 WAV files.

use std::path::Path;

use crate::encoder::SAMPLE_RATE;
use crate::error::{Error, Result};

const SCALE: f32 = 32768.0;

/// Reads a PCM16 mono 16 kHz file into samples in `[-1, 1)`.
///
/// Other rates, channel counts or codecs are rejected rather than converted.
pub fn read_wav(path: &Path) -> Result<Vec<f32>> {
    let reader = hound::WavReader::open(path).map_err(|e| wav_err(path, e))?;
    let spec = reader.spec();
    let reject = |what: String| Error::Format {
        path: path.to_path_buf(),
        detail: what,
    };
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(reject(format!(
            "expected 16-bit integer PCM, found {}-bit {:?}",
            spec.bits_per_sample, spec.sample_format
        )));
    }
    if spec.channels != 1 {
        return Err(reject(format!("expected mono, found {} channels", spec.channels)));
    }
    if spec.sample_rate != SAMPLE_RATE {
        return Err(reject(format!(
            "expected {SAMPLE_RATE} Hz, found {} Hz (resample before ingesting)",
            spec.sample_rate
        )));
    }
    reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f32 / SCALE).map_err(|e| wav_err(path, e)))
        .collect()
}

/// Writes samples as PCM16 mono 16 kHz, rounding to the nearest code and
/// clamping to the int16 range.
pub fn write_wav(path: &Path, samples: &[f32]) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: SAMPLE_RATE,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(|e| wav_err(path, e))?;
    for &s in samples {
        w.write_sample(quantize(s)).map_err(|e| wav_err(path, e))?;
    }
    w.finalize().map_err(|e| wav_err(path, e))
}

pub fn quantize(s: f32) -> i16 {
    (s * SCALE).round().clamp(i16::MIN as f32, i16::MAX as f32) as i16
}

/// Value a sample takes after a write/read round trip.
pub fn dequantize(s: f32) -> f32 {
    quantize(s) as f32 / SCALE
}

fn wav_err(path: &Path, e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::Format {
            path: path.to_path_buf(),
            detail: other.to_string(),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zeros_and_scaling() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("z.wav");
        write_wav(&p, &vec![0.0; 16_000]).unwrap();
        assert_eq!(read_wav(&p).unwrap(), vec![0.0; 16_000]);
        write_wav(&p, &[32767.0 / 32768.0]).unwrap();
        assert_eq!(read_wav(&p).unwrap(), vec![32767.0 / 32768.0]);
    }

    #[test]
    fn wrong_rate_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.wav");
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 8000,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(&p, spec).unwrap();
        w.write_sample(0i16).unwrap();
        w.finalize().unwrap();
        let err = read_wav(&p).unwrap_err().to_string();
        assert!(err.contains("8000 Hz"), "{err}");
    }

    #[test]
    fn stereo_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.wav");
        let spec = hound::WavSpec {
            channels: 2,
            sample_rate: 16_000,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(&p, spec).unwrap();
        w.write_sample(0i16).unwrap();
        w.write_sample(0i16).unwrap();
        w.finalize().unwrap();
        assert!(read_wav(&p).unwrap_err().to_string().contains("mono"));
    }
}
