//! Central finite-difference oracle for tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

pub const DEFAULT_FD_STEP: f64 = 1e-5;
pub const GRAD_CHECK_TOL: f64 = 1e-4;

const REL_FLOOR: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradReport {
    pub max_rel_err: f64,
    pub pass: bool,
}

impl GradReport {
    fn merge(self, other: GradReport) -> GradReport {
        let max_rel_err = self.max_rel_err.max(other.max_rel_err);
        GradReport {
            max_rel_err,
            pass: max_rel_err < GRAD_CHECK_TOL,
        }
    }
}

/// Elementwise `|ad - fd| / max(|ad|, |fd|, 1e-8)`, maximised.
pub fn compare_gradients(ad: &[f64], fd: &[f64]) -> GradReport {
    assert_eq!(ad.len(), fd.len());
    let max_rel_err = ad
        .iter()
        .zip(fd)
        .map(|(a, f)| (a - f).abs() / a.abs().max(f.abs()).max(REL_FLOOR))
        .fold(0.0, f64::max);
    GradReport {
        max_rel_err,
        pass: max_rel_err < GRAD_CHECK_TOL,
    }
}

/// Central differences of a scalar function of one tensor.
pub fn finite_difference_grad(
    f: impl Fn(&Tensor) -> Result<f64>,
    x: &Tensor,
    h: f64,
) -> Result<Tensor> {
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!("step must be positive, got {h}")));
    }
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        grad.data[i] = central(&mut probe, i, h, &f)?;
    }
    Ok(grad)
}

fn central(
    probe: &mut Tensor,
    i: usize,
    h: f64,
    f: &impl Fn(&Tensor) -> Result<f64>,
) -> Result<f64> {
    let orig = probe.data[i];
    probe.data[i] = orig + h;
    let plus = f(probe)?;
    probe.data[i] = orig - h;
    let minus = f(probe)?;
    probe.data[i] = orig;
    Ok((plus - minus) / (2.0 * h))
}

fn eval_many<F>(f: &F, xs: &[Tensor]) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = xs.iter().map(|x| tape.constant(x.clone())).collect();
    let out = f(&tape, &vars)?;
    if out.shape().iter().product::<usize>() != 1 {
        return Err(Error::NotScalar(out.shape()));
    }
    Ok(out.item())
}

fn analytic_many<F>(f: &F, xs: &[Tensor]) -> Result<Vec<Tensor>>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = xs.iter().map(|x| tape.param(x.clone())).collect();
    let out = f(&tape, &vars)?;
    let grads = tape.backward(out)?;
    Ok(vars.iter().map(|&v| grads.wrt(v)).collect())
}

/// Compares tape gradients of `f` at `x` with central differences.
pub fn grad_check<F>(f: F, x: &Tensor) -> Result<GradReport>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    grad_check_many(|t, v| f(t, v[0]), std::slice::from_ref(x))
}

/// [`grad_check`] over several inputs at once.
pub fn grad_check_many<F>(f: F, xs: &[Tensor]) -> Result<GradReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    grad_check_many_sampled(f, xs, usize::MAX, 0)
}

/// Like [`grad_check_many`], but probes at most `per_input` randomly chosen
/// coordinates of each input (all of them when the input is smaller).
pub fn grad_check_many_sampled<F>(
    f: F,
    xs: &[Tensor],
    per_input: usize,
    seed: u64,
) -> Result<GradReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let ad = analytic_many(&f, xs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probes = xs.to_vec();
    let mut report = GradReport {
        max_rel_err: 0.0,
        pass: true,
    };
    for k in 0..xs.len() {
        let n = xs[k].len();
        let idx: Vec<usize> = if per_input >= n {
            (0..n).collect()
        } else {
            sample(&mut rng, n, per_input).into_vec()
        };
        let mut a = Vec::with_capacity(idx.len());
        let mut fd = Vec::with_capacity(idx.len());
        for i in idx {
            let orig = probes[k].data[i];
            probes[k].data[i] = orig + DEFAULT_FD_STEP;
            let plus = eval_many(&f, &probes)?;
            probes[k].data[i] = orig - DEFAULT_FD_STEP;
            let minus = eval_many(&f, &probes)?;
            probes[k].data[i] = orig;
            fd.push((plus - minus) / (2.0 * DEFAULT_FD_STEP));
            a.push(ad[k].data[i]);
        }
        report = report.merge(compare_gradients(&a, &fd));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Padding;

    #[test]
    fn finite_difference_of_cubic() {
        let x = Tensor::from_slice(&[0.5, -1.5]);
        let g = finite_difference_grad(|t| Ok(t.data().iter().map(|v| v * v * v).sum()), &x, 1e-5)
            .unwrap();
        assert!((g.data()[0] - 0.75).abs() < 1e-8);
        assert!((g.data()[1] - 6.75).abs() < 1e-8);
        assert!(finite_difference_grad(|_| Ok(0.0), &x, 0.0).is_err());
    }

    #[test]
    fn conv_relu_mean_composite_passes() {
        let x = Tensor::new(
            vec![1, 5, 5, 2],
            (0..50).map(|i| ((i as f64) * 0.731).sin() + 0.013).collect(),
        )
        .unwrap();
        let w = Tensor::new(
            vec![3, 3, 2, 2],
            (0..36).map(|i| ((i as f64) * 1.37).cos() * 0.5).collect(),
        )
        .unwrap();
        let report = grad_check_many(
            |_, v| {
                v[0].conv2d(v[1], 1, Padding::Same)?
                    .add_scalar(0.05)?
                    .relu()?
                    .mean()
            },
            &[x, w],
        )
        .unwrap();
        assert!(report.pass, "{report:?}");
    }

    #[test]
    fn compare_uses_relative_floor() {
        assert!(compare_gradients(&[0.0], &[1e-13]).pass);
        assert!(!compare_gradients(&[1.0], &[1.001]).pass);
        assert!(compare_gradients(&[1e3], &[1e3 + 1e-3]).pass);
    }

    #[test]
    fn sampled_probes_a_subset() {
        let x = Tensor::new(vec![100], (0..100).map(|i| i as f64 * 0.01).collect()).unwrap();
        let r = grad_check_many_sampled(|_, v| v[0].exp()?.sum(), &[x], 7, 1).unwrap();
        assert!(r.pass);
    }
}
