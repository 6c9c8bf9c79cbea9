//! The training loop.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{all_pairs, build_trials, ManifestEntry};
use crate::error::{Error, Result};
use crate::eval::{evaluate_with, DcfParams, ZeroNormPolicy};
use crate::frontend::{read_wav, Fbank, FbankConfig};
use crate::model::{save_checkpoint, AcaNet, ModelConfig};
use crate::numerics::{Graph, Mode, Tensor};
use crate::rng::{rng_for, sub_seed};
use crate::scalar::Scalar;

use super::batch::pad_tensors;
use super::head::{aam_loss, AamHead};
use super::optim::{adam_step, AdamConfig, AdamState, CyclicalLrSchedule};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    /// Random crop length in seconds; 0 trains on full utterances.
    pub crop_s: f64,
    pub base_lr: f64,
    pub max_lr: f64,
    /// Steps per half-cycle; 0 fits one full cycle into the run, so training
    /// ends back at `base_lr`.
    pub step_size: u64,
    pub margin: f64,
    pub scale: f64,
    pub adam: AdamConfig,
    /// Dev trial pairs drawn per evaluation; 0 scores every pair.
    pub dev_trials: usize,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 32,
            crop_s: 2.0,
            base_lr: CyclicalLrSchedule::DEFAULT_BASE,
            max_lr: CyclicalLrSchedule::DEFAULT_MAX,
            step_size: 0,
            margin: AamHead::<f64>::DEFAULT_MARGIN,
            scale: AamHead::<f64>::DEFAULT_SCALE,
            adam: AdamConfig::default(),
            dev_trials: 0,
            seed: 0,
        }
    }
}

impl TrainOptions {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.crop_s >= 0.0 && self.crop_s.is_finite()) {
            return Err(Error::Config(format!("invalid crop length {}", self.crop_s)));
        }
        if !(self.margin >= 0.0 && self.scale > 0.0) {
            return Err(Error::Config("AAM margin must be >= 0 and scale > 0".into()));
        }
        Ok(())
    }

    pub fn schedule(&self, steps_per_epoch: usize) -> Result<CyclicalLrSchedule> {
        let step_size = if self.step_size == 0 {
            ((self.epochs * steps_per_epoch) as u64 / 2).max(1)
        } else {
            self.step_size
        };
        CyclicalLrSchedule::new(self.base_lr, self.max_lr, step_size)
    }
}

/// Where `fit` writes its artefacts.
#[derive(Clone, Debug, PartialEq)]
pub struct FitPaths {
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
}

impl FitPaths {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            checkpoint: dir.join("checkpoint.acat"),
            metrics: dir.join("metrics.jsonl"),
        }
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Clone, Debug)]
pub struct FitResult<T> {
    /// The checkpointed model (best dev EER, or the last epoch without dev data).
    pub best: AcaNet<T>,
    pub last: AcaNet<T>,
    pub head: AamHead<T>,
    pub losses: Vec<f64>,
    pub dev_eer: Vec<Option<f64>>,
    pub best_epoch: usize,
    pub speakers: Vec<String>,
}

/// Reads and featurises every entry in parallel.
pub fn extract_features<T: Scalar>(
    entries: &[ManifestEntry],
    fbank: &FbankConfig,
) -> Result<Vec<Tensor<T>>> {
    entries
        .par_iter()
        .map(|e| {
            let w = read_wav(&e.path)?;
            Ok(Fbank::new(fbank.clone(), w.sample_rate)?.compute::<T>(&w)?.values)
        })
        .collect()
}

/// Eval-mode embeddings keyed by utterance id.
pub fn embed_all<T: Scalar>(
    net: &AcaNet<T>,
    entries: &[ManifestEntry],
    feats: &[Tensor<T>],
) -> Result<HashMap<String, Vec<T>>> {
    entries
        .par_iter()
        .zip(feats)
        .map(|(e, f)| Ok((e.utt_id.clone(), net.embed_tensor(f)?)))
        .collect()
}

struct Corpus<T> {
    feats: Vec<Tensor<T>>,
    labels: Vec<usize>,
}

/// Trains a fresh model on `train`, selecting the checkpoint by EER on `dev`.
pub fn fit<T: Scalar>(
    train: &[ManifestEntry],
    dev: Option<&[ManifestEntry]>,
    cfg: &ModelConfig,
    fbank: &FbankConfig,
    opts: &TrainOptions,
    paths: &FitPaths,
) -> Result<FitResult<T>> {
    let net = AcaNet::<T>::new(cfg.clone(), sub_seed(opts.seed, "model"))?;
    fit_from(net, train, dev, fbank, opts, paths)
}

/// [`fit`] starting from an existing model.
pub fn fit_from<T: Scalar>(
    mut net: AcaNet<T>,
    train: &[ManifestEntry],
    dev: Option<&[ManifestEntry]>,
    fbank: &FbankConfig,
    opts: &TrainOptions,
    paths: &FitPaths,
) -> Result<FitResult<T>> {
    opts.validate()?;
    if fbank.n_filters != net.config().n_filters {
        return Err(Error::Config(format!(
            "filterbank has {} filters but the model expects {}",
            fbank.n_filters,
            net.config().n_filters
        )));
    }
    let speaker_index: BTreeMap<String, usize> = {
        let mut s: Vec<&str> = train.iter().map(|e| e.speaker_id.as_str()).collect();
        s.sort_unstable();
        s.dedup();
        s.into_iter().enumerate().map(|(i, s)| (s.to_string(), i)).collect()
    };
    if speaker_index.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "training needs at least 2 speakers, the manifest has {}",
            speaker_index.len()
        )));
    }
    let corpus = Corpus {
        feats: extract_features::<T>(train, fbank)?,
        labels: train.iter().map(|e| speaker_index[&e.speaker_id]).collect(),
    };
    let dev_data = match dev {
        Some(d) if !d.is_empty() => {
            let trials = if opts.dev_trials == 0 {
                all_pairs(d)
            } else {
                build_trials(d, opts.dev_trials, 0.5, sub_seed(opts.seed, "dev_trials"))?
            };
            if trials.n_target() == 0 || trials.n_target() == trials.len() {
                return Err(Error::InvalidArgument(format!(
                    "dev set gives {} trials with {} targets; model selection needs both kinds",
                    trials.len(),
                    trials.n_target()
                )));
            }
            Some((d, extract_features::<T>(d, fbank)?, trials))
        }
        _ => None,
    };

    let crop_frames = if opts.crop_s > 0.0 {
        let sr = read_wav(&train[0].path)?.sample_rate;
        let fb = Fbank::new(fbank.clone(), sr)?;
        // a crop shorter than one window still keeps a single frame
        Some(fb.frame_count((opts.crop_s * sr as f64).round() as usize).unwrap_or(1))
    } else {
        None
    };

    let n = corpus.feats.len();
    let steps_per_epoch = n.div_ceil(opts.batch_size);
    let schedule = opts.schedule(steps_per_epoch)?;
    let mut head = AamHead::<T>::new(
        speaker_index.len(),
        net.config().embedding_size,
        opts.margin,
        opts.scale,
        sub_seed(opts.seed, "head"),
    )?;
    let mut adam = AdamState::new(net.params().slots());
    let mut head_adam = AdamState::new(std::slice::from_ref(&head.weights));
    let mut order_rng = rng_for(opts.seed, "shuffle");
    let mut crop_rng = rng_for(opts.seed, "crop");
    let mut drop_rng = rng_for(opts.seed, "dropout");

    if let Some(dir) = paths.metrics.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = std::fs::File::create(&paths.metrics).map_err(|e| Error::io(&paths.metrics, e))?;
    let mut log = std::io::BufWriter::new(file);

    let mut losses = Vec::with_capacity(opts.epochs * steps_per_epoch);
    let mut dev_eer = Vec::with_capacity(opts.epochs);
    let mut best: Option<(f64, usize, AcaNet<T>)> = None;
    let mut step: u64 = 0;
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..opts.epochs {
        order.shuffle(&mut order_rng);
        for chunk in order.chunks(opts.batch_size) {
            let crops: Vec<Tensor<T>> = chunk
                .iter()
                .map(|&i| random_crop(&corpus.feats[i], crop_frames, &mut crop_rng))
                .collect::<Result<_>>()?;
            let refs: Vec<&Tensor<T>> = crops.iter().collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| corpus.labels[i]).collect();
            let batch = pad_tensors(&refs, &labels)?;

            let mut g = Graph::new();
            let vars = net.bind(&mut g, true);
            let w = g.param(head.weights.clone());
            let emb = net.forward(&mut g, &vars, &batch.padded, Mode::Train, Some(&mut drop_rng))?;
            let loss = aam_loss(&mut g, emb, &batch.labels, &head, w)?;
            let loss_value = g.value(loss).data()[0].f64();
            let mut grads = g.backward(loss)?;
            let slot_grads: Vec<Tensor<T>> = vars
                .slots
                .iter()
                .zip(net.params().slots())
                .map(|(v, p)| grads.take(*v).unwrap_or_else(|| Tensor::zeros(p.shape())))
                .collect();
            let head_grad = grads.take(w).expect("head is on the loss path");
            let lr = schedule.lr_at(step);
            adam_step(net.params_mut().slots_mut(), &slot_grads, &mut adam, lr, &opts.adam)?;
            adam_step(
                std::slice::from_mut(&mut head.weights),
                &[head_grad],
                &mut head_adam,
                lr,
                &opts.adam,
            )?;
            let rec = StepRecord {
                step,
                lr,
                loss: loss_value,
            };
            writeln!(log, "{}", serde_json::to_string(&rec).expect("plain record"))
                .map_err(|e| Error::io(&paths.metrics, e))?;
            losses.push(loss_value);
            step += 1;
        }
        log.flush().map_err(|e| Error::io(&paths.metrics, e))?;

        let eer = match &dev_data {
            Some((entries, feats, trials)) => {
                let emb = embed_all(&net, entries, feats)?;
                Some(evaluate_with(trials, &emb, &DcfParams::default(), ZeroNormPolicy::ScoreZero)?.eer)
            }
            None => None,
        };
        dev_eer.push(eer);
        let improved = match (&best, eer, &dev_data) {
            (_, _, None) => true,
            (None, Some(_), _) => true,
            (Some((b, _, _)), Some(e), _) => e < *b,
            (_, None, Some(_)) => false,
        };
        if improved {
            save_checkpoint(&net, &paths.checkpoint)?;
            best = Some((eer.unwrap_or(f64::NAN), epoch, net.clone()));
        }
    }
    let (best_epoch, best_net) = match best {
        Some((_, e, b)) => (e, b),
        None => {
            // no epoch produced a usable dev score; keep the final weights
            save_checkpoint(&net, &paths.checkpoint)?;
            (opts.epochs - 1, net.clone())
        }
    };
    Ok(FitResult {
        best: best_net,
        last: net,
        head,
        losses,
        dev_eer,
        best_epoch,
        speakers: speaker_index.into_keys().collect(),
    })
}

fn random_crop<T: Scalar, R: Rng>(feats: &Tensor<T>, frames: Option<usize>, rng: &mut R) -> Result<Tensor<T>> {
    let (c, t) = feats.dims2()?;
    match frames {
        Some(len) if len < t => {
            let start = rng.gen_range(0..=t - len);
            Ok(Tensor::from_fn2(c, len, |r, j| feats.at(r, start + j)))
        }
        _ => Ok(feats.clone()),
    }
}
