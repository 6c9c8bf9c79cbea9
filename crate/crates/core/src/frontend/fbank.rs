//! Log mel filterbank features.
//!
//! Frames are taken without padding: `T = floor((N - win) / hop) + 1`, so a
//! frame never looks past its own window and features of a prefix equal the
//! leading columns of the full utterance's features.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::scalar::Scalar;

use super::WaveBuffer;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FbankConfig {
    pub n_filters: usize,
    pub win_ms: f64,
    pub hop_ms: f64,
    /// Floor applied before the logarithm.
    pub log_floor: f64,
    /// Per-filter mean/variance normalisation over time.
    pub normalize: bool,
}

impl Default for FbankConfig {
    fn default() -> Self {
        Self {
            n_filters: 80,
            win_ms: 25.0,
            hop_ms: 10.0,
            log_floor: 1e-10,
            normalize: false,
        }
    }
}

/// `C0 × T` filterbank output.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix<T> {
    pub values: Tensor<T>,
    pub frame_hop_ms: f64,
    pub frame_win_ms: f64,
}

impl<T: Scalar> FeatureMatrix<T> {
    pub fn n_filters(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn frames(&self) -> usize {
        self.values.shape()[1]
    }

    /// Columns `start..start + len`.
    pub fn crop(&self, start: usize, len: usize) -> Result<Self> {
        let (c, t) = self.values.dims2()?;
        if len == 0 || start + len > t {
            return Err(Error::InvalidArgument(format!(
                "crop {start}..{} outside {t} frames",
                start + len
            )));
        }
        let values = Tensor::from_fn2(c, len, |i, j| self.values.at(i, start + j));
        Ok(Self {
            values,
            frame_hop_ms: self.frame_hop_ms,
            frame_win_ms: self.frame_win_ms,
        })
    }

    pub fn cast<U: Scalar>(&self) -> FeatureMatrix<U> {
        FeatureMatrix {
            values: self.values.cast(),
            frame_hop_ms: self.frame_hop_ms,
            frame_win_ms: self.frame_win_ms,
        }
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Precomputed window, FFT plan and filter weights for one sample rate.
pub struct Fbank {
    cfg: FbankConfig,
    sample_rate: u32,
    win: usize,
    hop: usize,
    n_fft: usize,
    window: Vec<f64>,
    /// `n_filters × (n_fft/2 + 1)` triangular weights.
    filters: Vec<Vec<f64>>,
    fft: Arc<dyn Fft<f64>>,
}

impl Fbank {
    pub fn new(cfg: FbankConfig, sample_rate: u32) -> Result<Self> {
        if cfg.n_filters == 0 || cfg.win_ms <= 0.0 || cfg.hop_ms <= 0.0 || sample_rate == 0 {
            return Err(Error::Config(format!("invalid filterbank settings {cfg:?} at {sample_rate} Hz")));
        }
        let win = (sample_rate as f64 * cfg.win_ms / 1000.0).round() as usize;
        let hop = (sample_rate as f64 * cfg.hop_ms / 1000.0).round() as usize;
        if win == 0 || hop == 0 {
            return Err(Error::Config("window or hop rounds to zero samples".into()));
        }
        let n_fft = win.next_power_of_two();
        // periodic Hann
        let window = (0..win)
            .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / win as f64).cos())
            .collect();
        let n_bins = n_fft / 2 + 1;
        let nyquist = sample_rate as f64 / 2.0;
        let (lo, hi) = (hz_to_mel(0.0), hz_to_mel(nyquist));
        let edges: Vec<f64> = (0..cfg.n_filters + 2)
            .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.n_filters + 1) as f64))
            .collect();
        let filters = (0..cfg.n_filters)
            .map(|m| {
                let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
                (0..n_bins)
                    .map(|k| {
                        let f = k as f64 * sample_rate as f64 / n_fft as f64;
                        let up = (f - l) / (c - l);
                        let down = (r - f) / (r - c);
                        up.min(down).max(0.0)
                    })
                    .collect()
            })
            .collect();
        let fft = FftPlanner::new().plan_fft_forward(n_fft);
        Ok(Self {
            cfg,
            sample_rate,
            win,
            hop,
            n_fft,
            window,
            filters,
            fft,
        })
    }

    pub fn config(&self) -> &FbankConfig {
        &self.cfg
    }

    pub fn window_samples(&self) -> usize {
        self.win
    }

    pub fn hop_samples(&self) -> usize {
        self.hop
    }

    pub fn n_fft(&self) -> usize {
        self.n_fft
    }

    /// Number of frames for `n` samples, or `None` when shorter than one window.
    pub fn frame_count(&self, n: usize) -> Option<usize> {
        (n >= self.win).then(|| (n - self.win) / self.hop + 1)
    }

    pub fn compute<T: Scalar>(&self, w: &WaveBuffer) -> Result<FeatureMatrix<T>> {
        if w.sample_rate != self.sample_rate {
            return Err(Error::InvalidArgument(format!(
                "waveform is {} Hz but the filterbank expects {} Hz",
                w.sample_rate, self.sample_rate
            )));
        }
        let frames = self.frame_count(w.samples.len()).ok_or(Error::TooShort {
            samples: w.samples.len(),
            needed: self.win,
        })?;
        let n_filt = self.cfg.n_filters;
        let n_bins = self.n_fft / 2 + 1;
        let mut out = vec![0f64; n_filt * frames];
        let mut buf = vec![Complex::new(0.0, 0.0); self.n_fft];
        let mut scratch = vec![Complex::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];
        let mut mag = vec![0f64; n_bins];
        for t in 0..frames {
            let frame = &w.samples[t * self.hop..t * self.hop + self.win];
            for (i, slot) in buf.iter_mut().enumerate() {
                *slot = if i < self.win {
                    Complex::new(frame[i] as f64 * self.window[i], 0.0)
                } else {
                    Complex::new(0.0, 0.0)
                };
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            for (k, m) in mag.iter_mut().enumerate() {
                *m = buf[k].norm();
            }
            for (f, weights) in self.filters.iter().enumerate() {
                let e: f64 = weights.iter().zip(&mag).map(|(w, m)| w * m).sum();
                out[f * frames + t] = e.max(self.cfg.log_floor).ln();
            }
        }
        if self.cfg.normalize {
            for row in out.chunks_mut(frames) {
                let mean = row.iter().sum::<f64>() / frames as f64;
                let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / frames as f64;
                let inv = 1.0 / (var + 1e-10).sqrt();
                row.iter_mut().for_each(|v| *v = (*v - mean) * inv);
            }
        }
        Ok(FeatureMatrix {
            values: Tensor::new(&[n_filt, frames], out.into_iter().map(T::of).collect())?,
            frame_hop_ms: self.cfg.hop_ms,
            frame_win_ms: self.cfg.win_ms,
        })
    }
}

/// One-shot convenience over [`Fbank`].
pub fn log_mel_fbank<T: Scalar>(w: &WaveBuffer, cfg: &FbankConfig) -> Result<FeatureMatrix<T>> {
    Fbank::new(cfg.clone(), w.sample_rate)?.compute(w)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tone(freq: f64, secs: f64) -> WaveBuffer {
        let n = (8000.0 * secs) as usize;
        let s = (0..n)
            .map(|i| (0.5 * (2.0 * std::f64::consts::PI * freq * i as f64 / 8000.0).sin()) as f32)
            .collect();
        WaveBuffer::new(s, 8000).unwrap()
    }

    #[test]
    fn silence_hits_the_floor_exactly() {
        let w = WaveBuffer::new(vec![0.0; 4000], 8000).unwrap();
        let f = log_mel_fbank::<f64>(&w, &FbankConfig::default()).unwrap();
        let floor = 1e-10f64.ln();
        assert!(f.values.data().iter().all(|&v| v == floor));
    }

    #[test]
    fn frame_count_for_one_second() {
        let w = tone(440.0, 1.0);
        let f = log_mel_fbank::<f32>(&w, &FbankConfig::default()).unwrap();
        // floor((8000 - 200) / 80) + 1
        assert_eq!(f.frames(), 98);
        assert_eq!(f.n_filters(), 80);
    }

    #[test]
    fn too_short_is_an_error() {
        let w = WaveBuffer::new(vec![0.1; 199], 8000).unwrap();
        assert!(matches!(
            log_mel_fbank::<f32>(&w, &FbankConfig::default()),
            Err(Error::TooShort { samples: 199, needed: 200 })
        ));
    }

    #[test]
    fn tone_peaks_at_nearest_center() {
        let f = log_mel_fbank::<f64>(&tone(1000.0, 0.5), &FbankConfig::default()).unwrap();
        // centres recomputed directly: HTK mel, 82 equally spaced points over 0..4000 Hz
        let top = 2595.0 * (1.0f64 + 4000.0 / 700.0).log10();
        let nearest = (1..=80)
            .map(|i| {
                let mel = top * i as f64 / 81.0;
                (i - 1, (700.0 * (10f64.powf(mel / 2595.0) - 1.0) - 1000.0).abs())
            })
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .unwrap()
            .0;
        for t in 0..f.frames() {
            let argmax = (0..80)
                .max_by(|&a, &b| f.values.at(a, t).total_cmp(&f.values.at(b, t)))
                .unwrap();
            assert_eq!(argmax, nearest, "frame {t}");
        }
    }

    #[test]
    fn prefix_frames_match() {
        let long = tone(700.0, 1.0);
        let short = WaveBuffer::new(long.samples[..3000].to_vec(), 8000).unwrap();
        let cfg = FbankConfig::default();
        let a = log_mel_fbank::<f64>(&long, &cfg).unwrap();
        let b = log_mel_fbank::<f64>(&short, &cfg).unwrap();
        for t in 0..b.frames() {
            for c in 0..80 {
                assert_eq!(a.values.at(c, t), b.values.at(c, t));
            }
        }
    }

    #[test]
    fn rate_mismatch_rejected() {
        let w = WaveBuffer::new(vec![0.0; 1000], 16000).unwrap();
        let fb = Fbank::new(FbankConfig::default(), 8000).unwrap();
        assert!(fb.compute::<f32>(&w).is_err());
    }
}
