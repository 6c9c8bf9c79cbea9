//! Threshold-sweep verification metrics.
//!
//! Thresholds are `-inf`, the midpoints between adjacent distinct scores, and
//! `+inf`. A trial is accepted when its score exceeds the threshold.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Parallel scores and target labels.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreSet {
    scores: Vec<f64>,
    targets: Vec<bool>,
}

impl ScoreSet {
    pub fn new(scores: Vec<f64>, targets: Vec<bool>) -> Result<Self> {
        if scores.len() != targets.len() {
            return Err(Error::InvalidArgument(format!(
                "{} scores but {} labels",
                scores.len(),
                targets.len()
            )));
        }
        if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
            return Err(Error::InvalidArgument(format!("score {i} is not finite")));
        }
        Ok(Self { scores, targets })
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn targets(&self) -> &[bool] {
        &self.targets
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn n_target(&self) -> usize {
        self.targets.iter().filter(|t| **t).count()
    }

    fn check_labels(&self) -> Result<(usize, usize)> {
        let nt = self.n_target();
        let nn = self.len() - nt;
        if nt == 0 || nn == 0 {
            return Err(Error::DegenerateLabels);
        }
        Ok((nt, nn))
    }
}

/// One operating point of the sweep.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetPoint {
    pub threshold: f64,
    pub p_miss: f64,
    pub p_fa: f64,
}

/// Operating points in increasing threshold order (`p_miss` rises, `p_fa` falls).
pub fn det_points(s: &ScoreSet) -> Result<Vec<DetPoint>> {
    let (nt, nn) = s.check_labels()?;
    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&a, &b| s.scores[a].total_cmp(&s.scores[b]));
    let mut out = Vec::with_capacity(s.len() + 1);
    let (mut miss, mut fa) = (0usize, nn);
    out.push(DetPoint {
        threshold: f64::NEG_INFINITY,
        p_miss: 0.0,
        p_fa: 1.0,
    });
    let mut i = 0;
    while i < order.len() {
        let v = s.scores[order[i]];
        // everything scoring v falls below the next threshold
        while i < order.len() && s.scores[order[i]] == v {
            if s.targets[order[i]] {
                miss += 1;
            } else {
                fa -= 1;
            }
            i += 1;
        }
        let threshold = if i < order.len() {
            midpoint(v, s.scores[order[i]])
        } else {
            f64::INFINITY
        };
        out.push(DetPoint {
            threshold,
            p_miss: miss as f64 / nt as f64,
            p_fa: fa as f64 / nn as f64,
        });
    }
    Ok(out)
}

pub(crate) fn midpoint(a: f64, b: f64) -> f64 {
    a + (b - a) / 2.0
}

/// Interpolated crossing of a DET curve given in increasing threshold order.
///
/// Infinite endpoint thresholds are replaced by the nearest finite score so
/// the returned threshold is always finite.
pub fn eer_from_points(points: &[DetPoint], lo: f64, hi: f64) -> (f64, f64) {
    let finite = |t: f64| {
        if t == f64::NEG_INFINITY {
            lo
        } else if t == f64::INFINITY {
            hi
        } else {
            t
        }
    };
    let k = points
        .iter()
        .position(|p| p.p_miss >= p.p_fa)
        .expect("the +inf point has p_miss 1 and p_fa 0");
    let b = points[k];
    let db = b.p_miss - b.p_fa;
    if k == 0 || db == 0.0 {
        return (b.p_miss, finite(b.threshold));
    }
    let a = points[k - 1];
    let da = a.p_miss - a.p_fa;
    let alpha = -da / (db - da);
    let eer = a.p_miss + alpha * (b.p_miss - a.p_miss);
    let (ta, tb) = (finite(a.threshold), finite(b.threshold));
    (eer, ta + alpha * (tb - ta))
}

fn score_range(s: &ScoreSet) -> (f64, f64) {
    s.scores
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)))
}

/// Equal error rate and the threshold at which it occurs.
pub fn compute_eer(s: &ScoreSet) -> Result<(f64, f64)> {
    let points = det_points(s)?;
    let (lo, hi) = score_range(s);
    Ok(eer_from_points(&points, lo, hi))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DcfParams {
    pub p_target: f64,
    pub c_miss: f64,
    pub c_fa: f64,
    /// Divide by `min(c_miss·p_target, c_fa·(1 − p_target))`.
    pub normalize: bool,
}

impl Default for DcfParams {
    fn default() -> Self {
        Self {
            p_target: 0.01,
            c_miss: 1.0,
            c_fa: 1.0,
            normalize: true,
        }
    }
}

impl DcfParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.p_target > 0.0 && self.p_target < 1.0) || self.c_miss <= 0.0 || self.c_fa <= 0.0 {
            return Err(Error::Config(format!("invalid detection cost parameters {self:?}")));
        }
        Ok(())
    }

    pub fn cost(&self, p: &DetPoint) -> f64 {
        let raw = self.c_miss * self.p_target * p.p_miss + self.c_fa * (1.0 - self.p_target) * p.p_fa;
        if self.normalize {
            raw / self.norm()
        } else {
            raw
        }
    }

    fn norm(&self) -> f64 {
        (self.c_miss * self.p_target).min(self.c_fa * (1.0 - self.p_target))
    }
}

/// Minimum detection cost over all thresholds, and its threshold.
pub fn compute_min_dcf(s: &ScoreSet, params: &DcfParams) -> Result<(f64, f64)> {
    params.validate()?;
    let points = det_points(s)?;
    Ok(min_dcf_from_points(&points, params))
}

pub fn min_dcf_from_points(points: &[DetPoint], params: &DcfParams) -> (f64, f64) {
    let mut best = (f64::INFINITY, f64::NAN);
    for p in points {
        let c = params.cost(p);
        if c < best.0 {
            best = (c, p.threshold);
        }
    }
    best
}

/// `a·b / (‖a‖ ‖b‖)`, accumulated in double precision.
pub fn cosine_score<T: Scalar>(a: &[T], b: &[T]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("cosine_score", &[a.len()], &[b.len()]));
    }
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (x, y) = (x.f64(), y.f64());
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa == 0.0 || bb == 0.0 {
        return Err(Error::ZeroNorm);
    }
    Ok((ab / (aa.sqrt() * bb.sqrt())).clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(s: &[f64], t: &[bool]) -> ScoreSet {
        ScoreSet::new(s.to_vec(), t.to_vec()).unwrap()
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_score(&[0.3f64, -2.0], &[0.3, -2.0]).unwrap(), 1.0);
        assert_eq!(cosine_score(&[1.0f64, 0.0], &[0.0, 5.0]).unwrap(), 0.0);
        let v = cosine_score(&[1.0f64, 0.0], &[1.0, 1.0]).unwrap();
        assert!((v - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
        assert!(matches!(cosine_score(&[0.0f32, 0.0], &[1.0, 1.0]), Err(Error::ZeroNorm)));
    }

    #[test]
    fn perfect_and_chance() {
        let s = set(&[1.0, 1.0, 0.0, 0.0], &[true, true, false, false]);
        assert_eq!(compute_eer(&s).unwrap().0, 0.0);
        assert_eq!(compute_min_dcf(&s, &DcfParams::default()).unwrap().0, 0.0);
        let s = set(&[0.5; 6], &[true, false, true, false, true, false]);
        let (eer, thr) = compute_eer(&s).unwrap();
        assert_eq!(eer, 0.5);
        assert_eq!(thr, 0.5);
        assert_eq!(compute_min_dcf(&s, &DcfParams::default()).unwrap().0, 1.0);
    }

    #[test]
    fn four_trial_hand_case() {
        // thresholds: -inf, .65, .75, .85, +inf
        // p_miss:      0,    0,  .5,  .5,  1
        // p_fa:        1,   .5,  .5,   0,  0
        let s = set(&[0.9, 0.8, 0.7, 0.6], &[true, false, true, false]);
        let (eer, thr) = compute_eer(&s).unwrap();
        assert_eq!(eer, 0.5);
        assert_eq!(thr, 0.75);
    }

    #[test]
    fn interpolates_between_straddling_points() {
        // (p_miss, p_fa) at -inf, .5, +inf: (0, 1), (.5, 1), (1, 0)
        // the last segment crosses at alpha = 1/3, i.e. 2/3
        let s = set(&[0.0, 1.0, 1.0], &[true, true, false]);
        let (eer, thr) = compute_eer(&s).unwrap();
        assert!((eer - 2.0 / 3.0).abs() < 1e-15);
        assert!((thr - (0.5 + 0.5 / 3.0)).abs() < 1e-15);
    }

    #[test]
    fn six_trial_dcf() {
        let s = set(
            &[0.95, 0.9, 0.7, 0.6, 0.4, 0.1],
            &[true, false, true, true, false, false],
        );
        // reject everything: p_miss 1 -> 0.01 / 0.01 = 1
        // threshold 0.925: p_miss 2/3, p_fa 0 -> 0.6667
        let (dcf, thr) = compute_min_dcf(&s, &DcfParams::default()).unwrap();
        assert!((dcf - 2.0 / 3.0).abs() < 1e-12);
        assert!((thr - 0.925).abs() < 1e-12);
        let raw = DcfParams {
            normalize: false,
            ..DcfParams::default()
        };
        assert!((compute_min_dcf(&s, &raw).unwrap().0 - 0.01 * 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn degenerate_labels() {
        assert!(matches!(compute_eer(&set(&[1.0, 2.0], &[true, true])), Err(Error::DegenerateLabels)));
        assert!(ScoreSet::new(vec![f64::NAN], vec![true]).is_err());
        assert!(ScoreSet::new(vec![1.0], vec![]).is_err());
    }
}
