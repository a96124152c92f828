use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::params::{param_rng, xavier_uniform, Binder, ParamId, ParamStore};
use crate::autodiff::{Padding, Tensor, Var};
use crate::error::Result;
use crate::fusion::{adaptive_fuse, init_fusion_params, FusionVars};

#[derive(Clone, Copy, Debug)]
pub struct Conv {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub stride: usize,
}

impl Conv {
    pub fn new(store: &mut ParamStore, seed: u64, name: &str, k: usize, cin: usize, cout: usize, stride: usize) -> Conv {
        let wname = format!("{name}.w");
        let mut rng = param_rng(seed, &wname);
        let w = xavier_uniform(&[k, k, cin, cout], k * k * cin, k * k * cout, &mut rng);
        Conv {
            kernel: store.add(wname, w),
            bias: store.add(format!("{name}.b"), Tensor::zeros(&[cout])),
            stride,
        }
    }

    pub fn forward<'t>(&self, b: &Binder<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        x.conv2d(b.var(self.kernel), self.stride, Padding::Same)?
            .add_bias(b.var(self.bias))
    }
}

/// Two 3x3 convolutions with a 1x1 projection skip; ELU after the first
/// convolution and after the sum.
#[derive(Clone, Copy, Debug)]
pub struct ResidualStage {
    pub conv1: Conv,
    pub conv2: Conv,
    pub proj: Conv,
}

impl ResidualStage {
    pub fn new(store: &mut ParamStore, seed: u64, name: &str, cin: usize, cout: usize, stride: usize) -> Self {
        ResidualStage {
            conv1: Conv::new(store, seed, &format!("{name}.conv1"), 3, cin, cout, stride),
            conv2: Conv::new(store, seed, &format!("{name}.conv2"), 3, cout, cout, 1),
            proj: Conv::new(store, seed, &format!("{name}.proj"), 1, cin, cout, stride),
        }
    }

    pub fn forward<'t>(&self, b: &Binder<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        let h = self.conv1.forward(b, x)?.elu()?;
        let h = self.conv2.forward(b, h)?;
        h.add(self.proj.forward(b, x)?)?.elu()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Dense {
    pub fn new(store: &mut ParamStore, seed: u64, name: &str, din: usize, dout: usize) -> Dense {
        let wname = format!("{name}.w");
        let mut rng = param_rng(seed, &wname);
        let w = xavier_uniform(&[din, dout], din, dout, &mut rng);
        Dense {
            weight: store.add(wname, w),
            bias: store.add(format!("{name}.b"), Tensor::zeros(&[dout])),
        }
    }

    /// `[n, din] -> [n, dout]`
    pub fn forward<'t>(&self, b: &Binder<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        x.matmul(b.var(self.weight))?.add_bias(b.var(self.bias))
    }
}

/// Transposed convolution with an `[k, k, cout, cin]` kernel.
#[derive(Clone, Copy, Debug)]
pub struct ConvTranspose {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl ConvTranspose {
    /// Upsamples by `factor` with kernel `2 * factor` and padding `factor / 2`.
    pub fn upsample(store: &mut ParamStore, seed: u64, name: &str, cin: usize, cout: usize, factor: usize) -> Self {
        let k = 2 * factor;
        let wname = format!("{name}.w");
        let mut rng = param_rng(seed, &wname);
        // Each output pixel sees about (k / stride)^2 = 4 taps per input channel.
        let w = xavier_uniform(&[k, k, cout, cin], 4 * cin, 4 * cout, &mut rng);
        ConvTranspose {
            kernel: store.add(wname, w),
            bias: store.add(format!("{name}.b"), Tensor::zeros(&[cout])),
            stride: factor,
            pad: factor / 2,
        }
    }

    pub fn forward<'t>(&self, b: &Binder<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        x.conv_transpose2d(b.var(self.kernel), self.stride, self.pad)?
            .add_bias(b.var(self.bias))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct FusionLayer {
    pub w_a: ParamId,
    pub w_b: ParamId,
    pub kernel: ParamId,
    pub bias: ParamId,
}

impl FusionLayer {
    pub fn new(store: &mut ParamStore, seed: u64, name: &str, c_a: usize, c_b: usize, c_out: usize) -> Self {
        let mut rng = param_rng(seed, name);
        let p = init_fusion_params(c_a, c_b, c_out, rng.gen()).expect("positive channel counts");
        FusionLayer {
            w_a: store.add(format!("{name}.w_a"), p.w_a),
            w_b: store.add(format!("{name}.w_b"), p.w_b),
            kernel: store.add(format!("{name}.w"), p.kernel),
            bias: store.add(format!("{name}.b"), p.bias),
        }
    }

    pub fn forward<'t>(&self, b: &Binder<'t, '_>, z_a: Var<'t>, z_b: Var<'t>) -> Result<Var<'t>> {
        let vars = FusionVars {
            w_a: b.var(self.w_a),
            w_b: b.var(self.w_b),
            kernel: b.var(self.kernel),
            bias: b.var(self.bias),
        };
        adaptive_fuse(z_a, z_b, &vars)
    }
}

/// Inverted dropout: zeroes each element with probability `p` and scales
/// the survivors by `1 / (1 - p)`.
pub fn dropout<'t>(x: Var<'t>, p: f64, rng: &mut ChaCha8Rng) -> Result<Var<'t>> {
    if p <= 0.0 {
        return Ok(x);
    }
    let keep = 1.0 / (1.0 - p);
    let shape = x.shape();
    let n = shape.iter().product();
    let mask = (0..n)
        .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
        .collect();
    x.mul(x.tape().constant(Tensor::new(shape, mask)?))
}
