use std::path::Path;

use crate::error::{Error, Result};

/// Mono PCM audio scaled to `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct WaveBuffer {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl WaveBuffer {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::InvalidArgument("empty waveform".into()));
        }
        if let Some(bad) = samples.iter().find(|s| !s.is_finite() || s.abs() > 1.0) {
            return Err(Error::InvalidArgument(format!(
                "sample {bad} is not a finite value in [-1, 1]"
            )));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Reads a 16-bit PCM mono RIFF/WAVE file.
pub fn read_wav(path: &Path) -> Result<WaveBuffer> {
    let reader = hound::WavReader::open(path).map_err(|source| match source {
        hound::Error::IoError(e) => Error::io(path, e),
        source => Error::Wav {
            path: path.to_path_buf(),
            source,
        },
    })?;
    let spec = reader.spec();
    let unsupported = |reason: String| Error::UnsupportedAudio {
        path: path.to_path_buf(),
        reason,
    };
    if spec.channels != 1 {
        return Err(unsupported(format!(
            "{} channels; only mono input is accepted",
            spec.channels
        )));
    }
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(unsupported(format!(
            "{:?} {}-bit samples; only 16-bit PCM is accepted",
            spec.sample_format, spec.bits_per_sample
        )));
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f32 / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|source| Error::Wav {
            path: path.to_path_buf(),
            source,
        })?;
    if samples.is_empty() {
        return Err(unsupported("no samples".into()));
    }
    Ok(WaveBuffer {
        samples,
        sample_rate: spec.sample_rate,
    })
}

/// Writes 16-bit PCM mono; values are clipped to `[-1, 1]` and scaled by 32767.
pub fn write_wav(path: &Path, wave: &WaveBuffer) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: wave.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let wav_err = |source| Error::Wav {
        path: path.to_path_buf(),
        source,
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(wav_err)?;
    for &s in &wave.samples {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        w.write_sample(v).map_err(wav_err)?;
    }
    w.finalize().map_err(wav_err)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_raw(path: &Path, channels: u16, bits: u16, samples: &[i32]) {
        let spec = hound::WavSpec {
            channels,
            sample_rate: 8000,
            bits_per_sample: bits,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(path, spec).unwrap();
        for &s in samples {
            if bits == 16 {
                w.write_sample(s as i16).unwrap();
            } else {
                w.write_sample(s).unwrap();
            }
        }
        w.finalize().unwrap();
    }

    #[test]
    fn silence_reads_as_zeros() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.wav");
        write_raw(&p, 1, 16, &vec![0; 8000]);
        let w = read_wav(&p).unwrap();
        assert_eq!(w.samples.len(), 8000);
        assert_eq!(w.sample_rate, 8000);
        assert!(w.samples.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn full_scale_square_wave() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sq.wav");
        let sq: Vec<i32> = (0..80).map(|i| if (i / 10) % 2 == 0 { 32767 } else { -32768 }).collect();
        write_raw(&p, 1, 16, &sq);
        let w = read_wav(&p).unwrap();
        assert_eq!(w.samples[0], 32767.0 / 32768.0);
        assert_eq!(w.samples[10], -1.0);
    }

    #[test]
    fn stereo_and_wrong_depth_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("st.wav");
        write_raw(&p, 2, 16, &[0, 0, 0, 0]);
        let err = read_wav(&p).unwrap_err();
        assert!(matches!(err, Error::UnsupportedAudio { .. }), "{err}");
        assert!(err.to_string().contains("2 channels"));

        let p = dir.path().join("d.wav");
        write_raw(&p, 1, 24, &[0, 0]);
        assert!(matches!(read_wav(&p), Err(Error::UnsupportedAudio { .. })));

        assert!(matches!(read_wav(&dir.path().join("missing.wav")), Err(Error::Io { .. })));
    }

    #[test]
    fn write_then_read() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("rt.wav");
        let wave = WaveBuffer::new(vec![0.5, -0.25, 1.0, -1.0], 8000).unwrap();
        write_wav(&p, &wave).unwrap();
        let back = read_wav(&p).unwrap();
        for (a, b) in wave.samples.iter().zip(&back.samples) {
            assert!((a - b).abs() < 1.0 / 16384.0);
        }
    }
}
