//! Synthetic multi-speaker corpus.
//!
//! A "speaker" is a harmonic source with its own fundamental, three
//! resonances, spectral tilt, pitch glide and syllable rate. Each utterance
//! jitters those values slightly and adds white noise.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frontend::{write_wav, WaveBuffer};
use crate::rng::rng_for;

use super::manifest::{write_manifest, ManifestEntry};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpeakerSpec {
    pub f0_hz: f64,
    pub formants_hz: [f64; 3],
    pub bandwidths_hz: [f64; 3],
    /// dB per octave above 100 Hz.
    pub tilt_db_per_octave: f64,
    /// Relative pitch change from the start to the end of an utterance.
    pub glide: f64,
    pub syllable_rate_hz: f64,
    pub noise_level: f64,
    /// Relative per-utterance jitter of `f0_hz`.
    pub f0_jitter: f64,
    /// Relative per-utterance jitter of each formant.
    pub formant_jitter: f64,
    pub seed: u64,
}

impl SyntheticSpeakerSpec {
    /// Draws speaker `index` of the corpus seeded by `seed`.
    pub fn sample(seed: u64, index: usize) -> Self {
        let mut rng = rng_for(seed, &format!("speaker/{index}"));
        let f1 = rng.gen_range(300.0..900.0);
        let f2 = rng.gen_range(950.0..2300.0);
        let f3 = rng.gen_range(2400.0..3500.0);
        Self {
            f0_hz: rng.gen_range(85.0..260.0),
            formants_hz: [f1, f2, f3],
            bandwidths_hz: [
                rng.gen_range(60.0..140.0),
                rng.gen_range(80.0..180.0),
                rng.gen_range(120.0..250.0),
            ],
            tilt_db_per_octave: rng.gen_range(-12.0..-3.0),
            glide: rng.gen_range(-0.35..0.35),
            syllable_rate_hz: rng.gen_range(2.0..6.0),
            noise_level: rng.gen_range(0.003..0.015),
            f0_jitter: 0.04,
            formant_jitter: 0.03,
            seed: rng.gen(),
        }
    }

    pub fn validate(&self, sample_rate: u32) -> Result<()> {
        let nyquist = sample_rate as f64 / 2.0;
        let freqs = std::iter::once(self.f0_hz * (1.0 + self.f0_jitter) * (1.0 + self.glide.abs()))
            .chain(self.formants_hz.iter().map(|f| f * (1.0 + self.formant_jitter)));
        for f in freqs {
            if !(f > 0.0 && f < nyquist) {
                return Err(Error::InvalidArgument(format!(
                    "frequency {f:.1} Hz is outside (0, {nyquist}) Hz"
                )));
            }
        }
        Ok(())
    }

    /// Renders utterance `utt` of this speaker.
    pub fn render(&self, utt: usize, duration_s: f64, sample_rate: u32) -> Result<WaveBuffer> {
        self.validate(sample_rate)?;
        let sr = sample_rate as f64;
        let n = (duration_s * sr).round() as usize;
        if n == 0 {
            return Err(Error::InvalidArgument(format!("duration {duration_s} s gives no samples")));
        }
        let mut rng = rng_for(self.seed, &format!("utt/{utt}"));
        let f0 = self.f0_hz * (1.0 + rng.gen_range(-self.f0_jitter..=self.f0_jitter));
        let formants: Vec<f64> = self
            .formants_hz
            .iter()
            .map(|f| f * (1.0 + rng.gen_range(-self.formant_jitter..=self.formant_jitter)))
            .collect();
        let vib_phase = rng.gen_range(0.0..2.0 * PI);
        let syl_phase = rng.gen_range(0.0..PI);
        let n_harm = ((0.95 * sr / 2.0) / (f0 * 0.6)).floor() as usize;
        let harm_phase: Vec<f64> = (0..n_harm).map(|_| rng.gen_range(0.0..2.0 * PI)).collect();
        let amp = |f: f64| {
            let tilt = 10f64.powf(self.tilt_db_per_octave * (f / 100.0).log2() / 20.0);
            let res: f64 = formants
                .iter()
                .zip(&self.bandwidths_hz)
                .map(|(c, b)| 1.0 / (1.0 + ((f - c) / b).powi(2)))
                .sum();
            tilt * (0.03 + res)
        };
        let mut phase = 0.0;
        let mut x = vec![0.0f64; n];
        for (i, out) in x.iter_mut().enumerate() {
            let t = i as f64 / sr;
            let pos = i as f64 / n as f64 - 0.5;
            let f_inst = f0 * (1.0 + self.glide * pos + 0.015 * (2.0 * PI * 4.5 * t + vib_phase).sin());
            phase += 2.0 * PI * f_inst / sr;
            let env = 0.55 + 0.45 * (PI * self.syllable_rate_hz * t + syl_phase).sin().powi(2);
            let mut s = 0.0;
            for (k, ph) in harm_phase.iter().enumerate() {
                let fk = (k + 1) as f64 * f_inst;
                if fk >= 0.95 * sr / 2.0 {
                    break;
                }
                s += amp(fk) * ((k + 1) as f64 * phase + ph).sin();
            }
            *out = env * s;
        }
        let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
        let samples = x
            .iter()
            .map(|v| {
                let noise: f64 = StandardNormal.sample(&mut rng);
                (0.5 * v / peak + self.noise_level * noise).clamp(-1.0, 1.0) as f32
            })
            .collect();
        WaveBuffer::new(samples, sample_rate)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub n_speakers: usize,
    pub utts_per_speaker: usize,
    pub duration_s: f64,
    pub sample_rate: u32,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            n_speakers: 12,
            utts_per_speaker: 20,
            duration_s: 2.0,
            sample_rate: 8000,
            seed: 0,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_speakers < 2 {
            return Err(Error::InvalidArgument(format!(
                "need at least 2 speakers, got {}",
                self.n_speakers
            )));
        }
        if self.utts_per_speaker == 0 {
            return Err(Error::InvalidArgument("utts_per_speaker must be positive".into()));
        }
        if !(self.duration_s > 0.0 && self.duration_s.is_finite()) || self.sample_rate == 0 {
            return Err(Error::InvalidArgument(format!(
                "invalid duration {} s or sample rate {}",
                self.duration_s, self.sample_rate
            )));
        }
        Ok(())
    }

    /// Held-out test speakers: a third of the corpus when that is at least two.
    pub fn n_test_speakers(&self) -> usize {
        let n = self.n_speakers / 3;
        if n >= 2 {
            n
        } else {
            0
        }
    }

    /// Utterances per training speaker set aside for the dev split.
    pub fn n_dev_utts(&self) -> usize {
        if self.utts_per_speaker >= 2 {
            (self.utts_per_speaker / 5).max(1)
        } else {
            0
        }
    }
}

/// Manifests of a generated corpus; paths are absolute.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub root: PathBuf,
    pub all: Vec<ManifestEntry>,
    pub train: Vec<ManifestEntry>,
    pub dev: Vec<ManifestEntry>,
    pub test: Vec<ManifestEntry>,
}

impl Corpus {
    pub fn manifest_path(&self, split: &str) -> PathBuf {
        self.root.join(format!("{split}.jsonl"))
    }
}

pub fn speaker_id(index: usize) -> String {
    format!("spk{index:03}")
}

/// Writes `wav/<speaker>/<utt>.wav` plus `manifest.jsonl`, `train.jsonl`,
/// `dev.jsonl` and `test.jsonl` under `out`.
///
/// Test speakers are the last [`CorpusSpec::n_test_speakers`]; the others
/// contribute their last [`CorpusSpec::n_dev_utts`] utterances to dev.
pub fn generate_corpus(spec: &CorpusSpec, out: &Path) -> Result<Corpus> {
    spec.validate()?;
    let speakers: Vec<SyntheticSpeakerSpec> = (0..spec.n_speakers)
        .map(|i| SyntheticSpeakerSpec::sample(spec.seed, i))
        .collect();
    for s in &speakers {
        s.validate(spec.sample_rate)?;
    }
    let jobs: Vec<(usize, usize)> = (0..spec.n_speakers)
        .flat_map(|s| (0..spec.utts_per_speaker).map(move |u| (s, u)))
        .collect();
    let root = if out.is_absolute() {
        out.to_path_buf()
    } else {
        std::env::current_dir().map_err(|e| Error::io(out, e))?.join(out)
    };
    let all = jobs
        .par_iter()
        .map(|&(s, u)| {
            let spk = speaker_id(s);
            let utt_id = format!("{spk}-{u:03}");
            let dir = root.join("wav").join(&spk);
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            let path = dir.join(format!("{utt_id}.wav"));
            let wave = speakers[s].render(u, spec.duration_s, spec.sample_rate)?;
            write_wav(&path, &wave)?;
            Ok(ManifestEntry {
                utt_id,
                speaker_id: spk,
                path,
                duration_s: wave.duration_s(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let first_test = spec.n_speakers - spec.n_test_speakers();
    let dev_from = spec.utts_per_speaker - spec.n_dev_utts();
    let (mut train, mut dev, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for (e, &(s, u)) in all.iter().zip(&jobs) {
        if s >= first_test {
            test.push(e.clone());
        } else if u >= dev_from {
            dev.push(e.clone());
        } else {
            train.push(e.clone());
        }
    }
    let corpus = Corpus {
        root,
        all,
        train,
        dev,
        test,
    };
    for (split, entries) in [
        ("manifest", &corpus.all),
        ("train", &corpus.train),
        ("dev", &corpus.dev),
        ("test", &corpus.test),
    ] {
        write_manifest(&corpus.manifest_path(split), entries)?;
    }
    Ok(corpus)
}
