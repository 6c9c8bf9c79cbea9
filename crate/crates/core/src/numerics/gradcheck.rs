//! Central finite-difference check of graph gradients.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::graph::{Graph, Var};
use super::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub eps: f64,
    /// Denominator floor for the relative error, so coordinates whose true
    /// gradient is zero are judged on absolute error.
    pub floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { eps: 1e-5, floor: 1e-5 }
    }
}

#[derive(Clone, Debug)]
pub struct InputReport {
    pub input: usize,
    pub max_rel_error: f64,
    /// Flat index of the worst coordinate.
    pub worst_coord: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub inputs: Vec<InputReport>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.inputs.iter().map(|r| r.max_rel_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&InputReport> {
        self.inputs
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

fn evaluate<T, F>(f: &F, inputs: &[Tensor<T>]) -> Result<f64>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    if g.value(out).len() != 1 {
        return Err(Error::NonScalarLoss(g.shape(out).to_vec()));
    }
    Ok(g.value(out).data()[0].f64())
}

/// Compares reverse-mode gradients of the scalar produced by `f` against
/// central differences, coordinate by coordinate, for every input.
pub fn grad_check<T, F>(f: F, inputs: &[Tensor<T>], opts: GradCheckOptions) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    let first = evaluate(&f, inputs)?;
    let second = evaluate(&f, inputs)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic { first, second });
    }

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;

    let mut reports = Vec::with_capacity(inputs.len());
    let mut probe = inputs.to_vec();
    for (idx, var) in vars.iter().enumerate() {
        let analytic = grads
            .get(*var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[idx].shape()));
        let mut report = InputReport {
            input: idx,
            max_rel_error: 0.0,
            worst_coord: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for coord in 0..inputs[idx].len() {
            let base = inputs[idx].data()[coord];
            probe[idx].data_mut()[coord] = base + T::of(opts.eps);
            let plus = evaluate(&f, &probe)?;
            probe[idx].data_mut()[coord] = base - T::of(opts.eps);
            let minus = evaluate(&f, &probe)?;
            probe[idx].data_mut()[coord] = base;
            let numeric = (plus - minus) / (2.0 * opts.eps);
            let a = analytic.data()[coord].f64();
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor);
            if rel > report.max_rel_error || coord == 0 {
                report.max_rel_error = report.max_rel_error.max(rel);
                if rel >= report.max_rel_error {
                    report.worst_coord = coord;
                    report.analytic = a;
                    report.numeric = numeric;
                }
            }
        }
        reports.push(report);
    }
    Ok(GradCheckReport { inputs: reports })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{BatchNormState, BiasAxis, Mode};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    fn check<F>(f: F, inputs: &[Tensor<f64>]) -> f64
    where
        F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
    {
        grad_check(f, inputs, GradCheckOptions::default()).unwrap().max_rel_error()
    }

    /// Weighted sum so that every output coordinate carries a distinct adjoint.
    fn probe_loss(g: &mut Graph<f64>, y: Var) -> Result<Var> {
        let shape = g.shape(y).to_vec();
        let w = Tensor::from_fn(&shape, |i| ((i * 7 % 11) as f64 - 4.0) / 3.0);
        let p = g.mul_const(y, w)?;
        Ok(g.sum(p))
    }

    #[test]
    fn sum_and_square_gradients() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::new(&[2, 3], vec![1.0; 6]).unwrap());
        let l = g.sum(x);
        let grads = g.backward(l).unwrap();
        assert!(grads.get(x).unwrap().data().iter().all(|&v| v == 1.0));

        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::new(&[2], vec![1.0, 2.0]).unwrap());
        let sq = g.mul(x, x).unwrap();
        let l = g.sum(sq);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::zeros(&[2, 2]));
        assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn linear_map_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let a = random(&[3, 4], &mut rng);
        let w = random(&[4, 2], &mut rng);
        let err = check(
            |g, v| {
                let y = g.matmul(v[0], v[1])?;
                probe_loss(g, y)
            },
            &[a, w],
        );
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn softmax_row() {
        let x = Tensor::new(&[1, 3], vec![0.1, 0.2, 0.3]).unwrap();
        let err = check(
            |g, v| {
                let y = g.softmax_rows(v[0])?;
                probe_loss(g, y)
            },
            &[x],
        );
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn elementwise_and_structural_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let a = random(&[3, 4], &mut rng);
        let b = random(&[3, 4], &mut rng);
        let bias_c = random(&[4], &mut rng);
        let bias_r = random(&[3], &mut rng);
        let err = check(
            |g, v| {
                let s = g.add(v[0], v[1])?;
                let m = g.mul(s, v[0])?;
                let t = g.transpose(m)?;
                let t = g.transpose(t)?;
                let bc = g.add_bias(t, v[2], BiasAxis::PerColumn)?;
                let br = g.add_bias(bc, v[3], BiasAxis::PerRow)?;
                let r = g.relu(br);
                let top = g.slice_rows(r, 0, 2)?;
                let left = g.slice_cols(br, 1, 2)?;
                let cat_r = g.concat_rows(&[top, r])?;
                let cat_c = g.concat_cols(&[left, br])?;
                let perm = g.permute_rows(cat_r, &[4, 0, 3, 1, 2])?;
                let nt = g.matmul_nt(perm, br)?;
                let sc = g.scale(nt, 0.5);
                let masked = g.mask_cols(sc, &[false, true, false])?;
                let sm = g.softmax_rows(masked)?;
                let l1 = probe_loss(g, sm)?;
                let l2 = g.mean(cat_c);
                g.add(l1, l2)
            },
            &[a, b, bias_c, bias_r],
        );
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn layer_norm_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let x = random(&[4, 6], &mut rng);
        let gamma = random(&[6], &mut rng);
        let beta = random(&[6], &mut rng);
        let err = check(
            |g, v| {
                let y = g.layer_norm(v[0], v[1], v[2])?;
                probe_loss(g, y)
            },
            &[x, gamma, beta],
        );
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn batch_norm_grad_train_masked_and_eval() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let x = random(&[3, 8], &mut rng);
        let gamma = random(&[3], &mut rng);
        let beta = random(&[3], &mut rng);
        let valid = [true, true, true, false, true, true, false, true];
        for (mode, mask) in [
            (Mode::Train, None),
            (Mode::Train, Some(&valid[..])),
            (Mode::Eval, None),
        ] {
            let err = check(
                |g, v| {
                    let mut st = BatchNormState::standard(3);
                    let y = g.batch_norm(v[0], v[1], v[2], &mut st, mode, mask)?;
                    probe_loss(g, y)
                },
                &[x.clone(), gamma.clone(), beta.clone()],
            );
            assert!(err < 1e-5, "{mode:?} {mask:?}: {err}");
        }
    }

    #[test]
    fn grouped_conv_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let x = random(&[6, 5], &mut rng);
        let w = random(&[4, 3], &mut rng);
        let b = random(&[4], &mut rng);
        let err = check(
            |g, v| {
                let y = g.conv1d(v[0], v[1], Some(v[2]), 2)?;
                probe_loss(g, y)
            },
            &[x, w, b],
        );
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn nondeterministic_closure_detected() {
        use std::cell::Cell;
        let calls = Cell::new(0.0);
        let x = Tensor::<f64>::scalar(1.0);
        let res = grad_check(
            |g, v| {
                calls.set(calls.get() + 1.0);
                let y = g.scale(v[0], calls.get());
                Ok(g.sum(y))
            },
            &[x],
            GradCheckOptions::default(),
        );
        assert!(matches!(res, Err(Error::NonDeterministic { .. })));
    }

    #[test]
    fn report_names_worst_coordinate() {
        let x = Tensor::<f64>::new(&[3], vec![0.5, -0.2, 0.9]).unwrap();
        let rep = grad_check(
            |g, v| {
                let y = g.mul(v[0], v[0])?;
                Ok(g.sum(y))
            },
            &[x],
            GradCheckOptions::default(),
        )
        .unwrap();
        let worst = rep.worst().unwrap();
        assert_eq!(worst.input, 0);
        assert!(worst.worst_coord < 3);
        assert!(rep.max_rel_error() < 1e-8);
    }
}
