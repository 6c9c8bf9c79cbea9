//! Random verification trial lists over a manifest.

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::eval::{Trial, TrialList};
use crate::rng::rng_for;

use super::manifest::ManifestEntry;

/// Samples `n_pairs` distinct unordered pairs, `round(n_pairs · target_fraction)`
/// of them same-speaker. No utterance is paired with itself.
pub fn build_trials(
    entries: &[ManifestEntry],
    n_pairs: usize,
    target_fraction: f64,
    seed: u64,
) -> Result<TrialList> {
    if !(0.0..=1.0).contains(&target_fraction) {
        return Err(Error::InvalidArgument(format!(
            "target fraction {target_fraction} is outside [0, 1]"
        )));
    }
    let n_target = (n_pairs as f64 * target_fraction).round() as usize;
    let n_non = n_pairs - n_target;
    let mut targets = Vec::new();
    let mut non = Vec::new();
    for i in 0..entries.len() {
        for j in i + 1..entries.len() {
            if entries[i].utt_id == entries[j].utt_id {
                continue;
            }
            if entries[i].speaker_id == entries[j].speaker_id {
                targets.push((i, j));
            } else {
                non.push((i, j));
            }
        }
    }
    if targets.len() < n_target || non.len() < n_non {
        return Err(Error::InvalidArgument(format!(
            "cannot draw {n_target} target and {n_non} non-target pairs: only {} and {} exist",
            targets.len(),
            non.len()
        )));
    }
    let mut rng = rng_for(seed, "trials");
    let mut picked: Vec<((usize, usize), bool)> = targets
        .choose_multiple(&mut rng, n_target)
        .map(|&p| (p, true))
        .chain(non.choose_multiple(&mut rng, n_non).map(|&p| (p, false)))
        .collect();
    picked.shuffle(&mut rng);
    Ok(TrialList::new(
        picked
            .into_iter()
            .map(|((i, j), target)| Trial {
                enrol: entries[i].utt_id.clone(),
                test: entries[j].utt_id.clone(),
                target,
            })
            .collect(),
    ))
}

/// Every unordered pair of distinct utterances.
pub fn all_pairs(entries: &[ManifestEntry]) -> TrialList {
    let mut trials = Vec::new();
    for (i, a) in entries.iter().enumerate() {
        for b in &entries[i + 1..] {
            trials.push(Trial {
                enrol: a.utt_id.clone(),
                test: b.utt_id.clone(),
                target: a.speaker_id == b.speaker_id,
            });
        }
    }
    TrialList::new(trials)
}
