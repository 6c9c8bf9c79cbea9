//! Verification scoring: cosine back-end, EER, minDCF, trial lists.

mod metrics;
mod trials;

use std::collections::{BTreeSet, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub use metrics::{
    compute_eer, compute_min_dcf, cosine_score, det_points, eer_from_points, min_dcf_from_points, DcfParams,
    DetPoint, ScoreSet,
};
pub use trials::{Trial, TrialList};

/// What to do with a trial whose embedding has zero norm.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZeroNormPolicy {
    #[default]
    Error,
    /// Score the trial 0 and count it in the report.
    ScoreZero,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub eer: f64,
    pub eer_threshold: f64,
    pub min_dcf: f64,
    pub min_dcf_threshold: f64,
    pub dcf: DcfParams,
    pub n_trials: usize,
    pub n_target: usize,
    /// Trials scored 0 because an embedding was all zeros.
    pub n_zero_norm: usize,
    pub det_points: Vec<DetPoint>,
}

/// Scores every trial by cosine similarity; lists every unresolved id on failure.
pub fn score_trials<T: Scalar>(trials: &TrialList, embeddings: &HashMap<String, Vec<T>>) -> Result<ScoreSet> {
    score_trials_with(trials, embeddings, ZeroNormPolicy::Error).map(|(s, _)| s)
}

/// [`score_trials`] with an explicit zero-norm policy; also returns the
/// number of trials that hit it.
pub fn score_trials_with<T: Scalar>(
    trials: &TrialList,
    embeddings: &HashMap<String, Vec<T>>,
    policy: ZeroNormPolicy,
) -> Result<(ScoreSet, usize)> {
    let missing: BTreeSet<&str> = trials
        .trials
        .iter()
        .flat_map(|t| [t.enrol.as_str(), t.test.as_str()])
        .filter(|id| !embeddings.contains_key(*id))
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingIds(missing.into_iter().map(String::from).collect()));
    }
    let scores = trials
        .trials
        .par_iter()
        .map(|t| match cosine_score(&embeddings[&t.enrol], &embeddings[&t.test]) {
            Err(Error::ZeroNorm) if policy == ZeroNormPolicy::ScoreZero => Ok((0.0, true)),
            other => other.map(|s| (s, false)),
        })
        .collect::<Result<Vec<(f64, bool)>>>()?;
    let n_zero = scores.iter().filter(|s| s.1).count();
    let set = ScoreSet::new(
        scores.into_iter().map(|s| s.0).collect(),
        trials.trials.iter().map(|t| t.target).collect(),
    )?;
    Ok((set, n_zero))
}

pub fn evaluate<T: Scalar>(
    trials: &TrialList,
    embeddings: &HashMap<String, Vec<T>>,
    dcf: &DcfParams,
) -> Result<EvalReport> {
    evaluate_with(trials, embeddings, dcf, ZeroNormPolicy::Error)
}

pub fn evaluate_with<T: Scalar>(
    trials: &TrialList,
    embeddings: &HashMap<String, Vec<T>>,
    dcf: &DcfParams,
    policy: ZeroNormPolicy,
) -> Result<EvalReport> {
    let (scores, n_zero) = score_trials_with(trials, embeddings, policy)?;
    let mut r = report(&scores, dcf)?;
    r.n_zero_norm = n_zero;
    Ok(r)
}

pub fn report(scores: &ScoreSet, dcf: &DcfParams) -> Result<EvalReport> {
    let (eer, eer_threshold) = compute_eer(scores)?;
    let (min_dcf, min_dcf_threshold) = compute_min_dcf(scores, dcf)?;
    Ok(EvalReport {
        eer,
        eer_threshold,
        min_dcf,
        min_dcf_threshold,
        dcf: *dcf,
        n_trials: scores.len(),
        n_target: scores.n_target(),
        n_zero_norm: 0,
        det_points: det_points(scores)?,
    })
}
