#![allow(dead_code)]

// Independent O(n^2) threshold sweep used as an oracle for the metrics.

pub struct Sweep {
    pub thresholds: Vec<f64>,
    pub p_miss: Vec<f64>,
    pub p_fa: Vec<f64>,
}

pub fn brute_sweep(scores: &[f64], targets: &[bool]) -> Sweep {
    let mut distinct: Vec<f64> = scores.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    let mut thresholds = vec![f64::NEG_INFINITY];
    for w in distinct.windows(2) {
        thresholds.push(w[0] + (w[1] - w[0]) / 2.0);
    }
    thresholds.push(f64::INFINITY);
    let nt = targets.iter().filter(|t| **t).count() as f64;
    let nn = targets.len() as f64 - nt;
    let mut p_miss = Vec::new();
    let mut p_fa = Vec::new();
    for &t in &thresholds {
        let mut miss = 0usize;
        let mut fa = 0usize;
        for (s, &is_t) in scores.iter().zip(targets) {
            if is_t && *s < t {
                miss += 1;
            }
            if !is_t && *s > t {
                fa += 1;
            }
        }
        p_miss.push(miss as f64 / nt);
        p_fa.push(fa as f64 / nn);
    }
    Sweep {
        thresholds,
        p_miss,
        p_fa,
    }
}

pub fn brute_eer(scores: &[f64], targets: &[bool]) -> (f64, f64) {
    let sw = brute_sweep(scores, targets);
    let lo = scores.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let fin = |t: f64| t.clamp(lo, hi);
    for k in 0..sw.thresholds.len() {
        let db = sw.p_miss[k] - sw.p_fa[k];
        if db < 0.0 {
            continue;
        }
        if k == 0 || db == 0.0 {
            return (sw.p_miss[k], fin(sw.thresholds[k]));
        }
        let da = sw.p_miss[k - 1] - sw.p_fa[k - 1];
        let alpha = -da / (db - da);
        let eer = sw.p_miss[k - 1] + alpha * (sw.p_miss[k] - sw.p_miss[k - 1]);
        let (ta, tb) = (fin(sw.thresholds[k - 1]), fin(sw.thresholds[k]));
        return (eer, ta + alpha * (tb - ta));
    }
    unreachable!("p_miss reaches 1 at +inf")
}

pub fn brute_min_dcf(scores: &[f64], targets: &[bool], p_target: f64) -> f64 {
    let sw = brute_sweep(scores, targets);
    let norm = p_target.min(1.0 - p_target);
    (0..sw.thresholds.len())
        .map(|k| (p_target * sw.p_miss[k] + (1.0 - p_target) * sw.p_fa[k]) / norm)
        .fold(f64::INFINITY, f64::min)
}

/// Score sets with quantised scores so ties are common.
pub fn random_score_set(rng: &mut impl rand::Rng, max_len: usize) -> (Vec<f64>, Vec<bool>) {
    let n = rng.gen_range(2..=max_len);
    let levels = rng.gen_range(2..=n.max(2) * 2);
    let shift: f64 = rng.gen_range(0.0..1.0);
    let mut targets: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.4)).collect();
    targets[0] = true;
    targets[1] = false;
    let scores = targets
        .iter()
        .map(|&t| {
            let q = rng.gen_range(0..levels) as f64 / levels as f64;
            if t {
                q + shift
            } else {
                q
            }
        })
        .collect();
    (scores, targets)
}
