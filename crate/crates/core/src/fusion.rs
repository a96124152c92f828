//! Adaptive weighted fusion of two activation maps: per-channel weighting,
//! channel concatenation and a 1x1 convolution followed by ReLU.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{concat_channels, Padding, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct AdaptiveFusionParams {
    /// `[C_a]`
    pub w_a: Tensor,
    /// `[C_b]`
    pub w_b: Tensor,
    /// `[1, 1, C_a + C_b, C_out]`
    pub kernel: Tensor,
    /// `[C_out]`
    pub bias: Tensor,
}

/// Fusion parameters recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct FusionVars<'t> {
    pub w_a: Var<'t>,
    pub w_b: Var<'t>,
    pub kernel: Var<'t>,
    pub bias: Var<'t>,
}

impl AdaptiveFusionParams {
    pub fn c_a(&self) -> usize {
        self.w_a.len()
    }

    pub fn c_b(&self) -> usize {
        self.w_b.len()
    }

    pub fn c_out(&self) -> usize {
        self.bias.len()
    }

    /// Records the parameters on `tape` as tracked leaves.
    pub fn bind<'t>(&self, tape: &'t Tape) -> FusionVars<'t> {
        FusionVars {
            w_a: tape.param(self.w_a.clone()),
            w_b: tape.param(self.w_b.clone()),
            kernel: tape.param(self.kernel.clone()),
            bias: tape.param(self.bias.clone()),
        }
    }

    /// Weights that pass `z_a` straight through (`C_out = C_a`) and ignore
    /// `z_b`.
    pub fn passthrough(c_a: usize, c_b: usize) -> AdaptiveFusionParams {
        let mut kernel = Tensor::zeros(&[1, 1, c_a + c_b, c_a]);
        for k in 0..c_a {
            kernel.data_mut()[k * c_a + k] = 1.0;
        }
        AdaptiveFusionParams {
            w_a: Tensor::ones(&[c_a]),
            w_b: Tensor::zeros(&[c_b]),
            kernel,
            bias: Tensor::zeros(&[c_a]),
        }
    }
}

/// Uniform Xavier bound for the 1x1 pooling kernel.
pub fn xavier_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Channel weights start at one, the kernel is Xavier-uniform and the bias
/// zero.
pub fn init_fusion_params(c_a: usize, c_b: usize, c_out: usize, seed: u64) -> Result<AdaptiveFusionParams> {
    if c_a == 0 || c_b == 0 || c_out == 0 {
        return Err(Error::InvalidArgument(format!(
            "fusion channel counts must be positive, got ({c_a}, {c_b}, {c_out})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bound = xavier_bound(c_a + c_b, c_out);
    let n = (c_a + c_b) * c_out;
    let weights = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
    Ok(AdaptiveFusionParams {
        w_a: Tensor::ones(&[c_a]),
        w_b: Tensor::ones(&[c_b]),
        kernel: Tensor::new(vec![1, 1, c_a + c_b, c_out], weights)?,
        bias: Tensor::zeros(&[c_out]),
    })
}

/// `max(W * ((w_a . z_a) ++ (w_b . z_b)) + b, 0)` over NHWC maps.
pub fn adaptive_fuse<'t>(z_a: Var<'t>, z_b: Var<'t>, p: &FusionVars<'t>) -> Result<Var<'t>> {
    let (sa, sb) = (z_a.shape(), z_b.shape());
    if sa.len() != 4 || sb.len() != 4 || sa[..3] != sb[..3] {
        return Err(Error::ShapeMismatch {
            op: "adaptive_fuse",
            lhs: sa,
            rhs: sb,
        });
    }
    let a = z_a.scale_channels(p.w_a)?;
    let b = z_b.scale_channels(p.w_b)?;
    concat_channels(&[a, b])?
        .conv2d(p.kernel, 1, Padding::Valid)?
        .add_bias(p.bias)?
        .relu()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check_many;
    use proptest::prelude::*;

    fn map(c: usize, vals: &[f64]) -> Tensor {
        Tensor::new(vec![1, 1, vals.len() / c, c], vals.to_vec()).unwrap()
    }

    #[test]
    fn passthrough_is_relu_of_first_input() {
        let tape = Tape::new();
        let p = AdaptiveFusionParams::passthrough(2, 3).bind(&tape);
        let za = tape.constant(map(2, &[-1.0, 2.0]));
        let zb = tape.constant(map(3, &[4.0, -5.0, 6.0]));
        assert_eq!(adaptive_fuse(za, zb, &p).unwrap().value().data(), &[0.0, 2.0]);
    }

    #[test]
    fn hand_evaluated_example() {
        let tape = Tape::new();
        let params = AdaptiveFusionParams {
            w_a: Tensor::from_slice(&[0.5]),
            w_b: Tensor::from_slice(&[2.0]),
            kernel: Tensor::new(vec![1, 1, 2, 1], vec![1.0, 1.0]).unwrap(),
            bias: Tensor::from_slice(&[-1.0]),
        };
        let p = params.bind(&tape);
        let out = adaptive_fuse(tape.constant(map(1, &[3.0])), tape.constant(map(1, &[5.0])), &p).unwrap();
        assert_eq!(out.item(), 10.5);
    }

    #[test]
    fn spatial_mismatch_is_an_error() {
        let tape = Tape::new();
        let p = AdaptiveFusionParams::passthrough(1, 1).bind(&tape);
        let za = tape.constant(Tensor::zeros(&[1, 2, 2, 1]));
        let zb = tape.constant(Tensor::zeros(&[1, 2, 3, 1]));
        assert!(matches!(adaptive_fuse(za, zb, &p), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let a = init_fusion_params(8, 8, 8, 5).unwrap();
        let b = init_fusion_params(8, 8, 8, 5).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.kernel, init_fusion_params(8, 8, 8, 6).unwrap().kernel);
        assert!(a.w_a.data().iter().chain(b.w_b.data()).all(|&w| w == 1.0));
        assert!(a.bias.data().iter().all(|&b| b == 0.0));
        let bound = xavier_bound(16, 8);
        assert!((bound - 0.5).abs() < 1e-15);
        assert!(a.kernel.data().iter().all(|w| w.abs() <= bound));
        assert!(init_fusion_params(0, 1, 1, 0).is_err());
    }

    #[test]
    fn gradients_wrt_every_argument() {
        let p = init_fusion_params(3, 2, 4, 1).unwrap();
        let za = Tensor::new(vec![1, 3, 3, 3], (0..27).map(|i| (i as f64 * 0.7).sin()).collect()).unwrap();
        let zb = Tensor::new(vec![1, 3, 3, 2], (0..18).map(|i| (i as f64 * 1.1).cos()).collect()).unwrap();
        // A bias offset keeps pre-activations away from the ReLU kink.
        let inputs = [za, zb, p.w_a.clone(), p.w_b.clone(), p.kernel.clone(), Tensor::from_slice(&[0.013, -0.021, 0.034, 0.007])];
        let r = grad_check_many(
            |_, v| {
                let fv = FusionVars { w_a: v[2], w_b: v[3], kernel: v[4], bias: v[5] };
                adaptive_fuse(v[0], v[1], &fv)?.sum()
            },
            &inputs,
        )
        .unwrap();
        assert!(r.pass, "{r:?}");
    }

    proptest! {
        #[test]
        fn channel_scaling_law(k in 0usize..3, za in prop::collection::vec(-2.0..2.0f64, 12), seed in 0u64..100) {
            let p = init_fusion_params(3, 1, 2, seed).unwrap();
            let zb = Tensor::new(vec![1, 2, 2, 1], vec![0.3, -0.1, 0.8, 0.5]).unwrap();
            let za = Tensor::new(vec![1, 2, 2, 3], za).unwrap();
            let run = |p: &AdaptiveFusionParams, za: &Tensor| {
                let tape = Tape::new();
                let fv = p.bind(&tape);
                adaptive_fuse(tape.constant(za.clone()), tape.constant(zb.clone()), &fv).unwrap().value()
            };
            let base = run(&p, &za);
            let mut p2 = p.clone();
            p2.w_a.data_mut()[k] *= 2.0;
            let mut za2 = za.clone();
            for px in 0..4 {
                za2.data_mut()[px * 3 + k] *= 0.5;
            }
            prop_assert!(base.max_abs_diff(&run(&p2, &za2)) < 1e-12);
        }

        #[test]
        fn passthrough_ignores_second_input(zb in prop::collection::vec(-5.0..5.0f64, 4)) {
            let tape = Tape::new();
            let p = AdaptiveFusionParams::passthrough(2, 1).bind(&tape);
            let za = tape.constant(map(2, &[0.5, -0.5, 1.5, 2.5, -1.0, 0.0, 3.0, 1.0]));
            let out = adaptive_fuse(za, tape.constant(map(1, &zb)), &p).unwrap();
            let v = out.value();
            prop_assert_eq!(v.data(), &[0.5, 0.0, 1.5, 2.5, 0.0, 0.0, 3.0, 1.0][..]);
        }
    }
}
