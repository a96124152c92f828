use std::rc::Rc;

use super::kernels::{col2im, gemm, im2col, ConvGeom};
use super::{Node, Tensor, Var};
use crate::error::{Error, Result};

const ELU_ALPHA: f64 = 1.0;

/// Zero padding mode of [`Var::conv2d`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// `(k - 1) / 2` zeros on each side (odd kernels only).
    Same,
    Valid,
}

/// Precomputed sparse resampling: every output pixel is a weighted sum of at
/// most four source pixels, applied identically to every channel. Pixels with
/// no taps produce zeros.
#[derive(Clone, Debug, PartialEq)]
pub struct ResampleTaps {
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    /// Per output pixel (row-major): `(source pixel index, weight)` pairs.
    pub taps: Vec<Vec<(usize, f64)>>,
}

pub(crate) enum Op {
    Leaf,
    Constant,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Reshape(usize),
    MatMul {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Conv2d {
        input: usize,
        kernel: usize,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    ConvTranspose2d {
        input: usize,
        kernel: usize,
        geom: ConvGeom,
    },
    AvgPool2d {
        input: usize,
        kh: usize,
        kw: usize,
    },
    Relu(usize),
    Elu(usize),
    Exp(usize),
    Log(usize),
    Recip(usize),
    Softmax(usize),
    CrossEntropy {
        scores: usize,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    L2Norm(usize),
    Concat(Vec<(usize, usize)>),
    Slice {
        input: usize,
        start: usize,
        len: usize,
    },
    Sum(usize),
    Mean(usize),
    AddBias {
        input: usize,
        bias: usize,
    },
    ScaleChannels {
        input: usize,
        weights: usize,
    },
    ScaleBy {
        input: usize,
        scalar: usize,
    },
    Resample {
        input: usize,
        taps: Rc<ResampleTaps>,
    },
    QuatMul(usize, usize),
    MapCustom {
        input: usize,
        deriv: fn(f64) -> f64,
    },
}

impl Op {
    pub(crate) fn parents(&self) -> Vec<usize> {
        use Op::*;
        match self {
            Leaf | Constant => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | QuatMul(a, b) => vec![*a, *b],
            MatMul { a, b, .. } => vec![*a, *b],
            Conv2d { input, kernel, .. } | ConvTranspose2d { input, kernel, .. } => {
                vec![*input, *kernel]
            }
            AddBias { input, bias } => vec![*input, *bias],
            ScaleChannels { input, weights } => vec![*input, *weights],
            ScaleBy { input, scalar } => vec![*input, *scalar],
            Concat(parts) => parts.iter().map(|p| p.0).collect(),
            Scale(a, _) | AddScalar(a) | Reshape(a) | Relu(a) | Elu(a) | Exp(a) | Log(a)
            | Recip(a) | Softmax(a) | L2Norm(a) | Sum(a) | Mean(a) => vec![*a],
            AvgPool2d { input, .. }
            | CrossEntropy { scores: input, .. }
            | Slice { input, .. }
            | Resample { input, .. }
            | MapCustom { input, .. } => vec![*input],
        }
    }
}

/// Lazily allocated gradient accumulators, one per node.
pub(crate) struct GradBuf {
    slots: Vec<Option<Vec<f64>>>,
    lens: Vec<usize>,
    tracked: Vec<bool>,
}

impl GradBuf {
    pub(crate) fn new(nodes: &[Node]) -> Self {
        GradBuf {
            slots: vec![None; nodes.len()],
            lens: nodes.iter().map(|n| n.value.len()).collect(),
            tracked: nodes.iter().map(|n| n.requires_grad).collect(),
        }
    }

    pub(crate) fn seed(&mut self, id: usize) {
        self.slots[id] = Some(vec![1.0]);
    }

    pub(crate) fn take(&mut self, id: usize) -> Option<Vec<f64>> {
        self.slots[id].take()
    }

    /// Accumulator for node `id`, or `None` if it is untracked.
    fn slot(&mut self, id: usize) -> Option<&mut [f64]> {
        if !self.tracked[id] {
            return None;
        }
        let len = self.lens[id];
        Some(self.slots[id].get_or_insert_with(|| vec![0.0; len]))
    }

    fn add(&mut self, id: usize, g: &[f64]) {
        if let Some(s) = self.slot(id) {
            s.iter_mut().zip(g).for_each(|(a, b)| *a += b);
        }
    }

    fn add_map(&mut self, id: usize, g: &[f64], f: impl Fn(usize, f64) -> f64) {
        if let Some(s) = self.slot(id) {
            for (i, (a, &gi)) in s.iter_mut().zip(g).enumerate() {
                *a += f(i, gi);
            }
        }
    }
}

fn val(nodes: &[Node], id: usize) -> &[f64] {
    &nodes[id].value.data
}

pub(crate) fn backward_node(op: &Op, out: &Tensor, g: &[f64], nodes: &[Node], buf: &mut GradBuf) {
    use Op::*;
    match op {
        Leaf | Constant => {}
        Add(a, b) => {
            buf.add(*a, g);
            buf.add(*b, g);
        }
        Sub(a, b) => {
            buf.add(*a, g);
            buf.add_map(*b, g, |_, gi| -gi);
        }
        Mul(a, b) => {
            let (va, vb) = (val(nodes, *a), val(nodes, *b));
            buf.add_map(*a, g, |i, gi| gi * vb[i]);
            buf.add_map(*b, g, |i, gi| gi * va[i]);
        }
        Scale(a, s) => buf.add_map(*a, g, |_, gi| gi * s),
        AddScalar(a) | Reshape(a) => buf.add(*a, g),
        MatMul { a, b, m, k, n } => {
            let (va, vb) = (val(nodes, *a), val(nodes, *b));
            if let Some(da) = buf.slot(*a) {
                gemm(*m, *n, *k, g, false, vb, true, da, 1.0);
            }
            if let Some(db) = buf.slot(*b) {
                gemm(*k, *m, *n, va, true, g, false, db, 1.0);
            }
        }
        Conv2d {
            input,
            kernel,
            geom,
            cols,
        } => {
            let cout = out.shape[3];
            let (rows, patch) = (geom.rows(), geom.patch());
            if let Some(dk) = buf.slot(*kernel) {
                gemm(patch, rows, cout, cols, true, g, false, dk, 1.0);
            }
            if buf.tracked[*input] {
                let mut dcols = vec![0.0; rows * patch];
                gemm(rows, cout, patch, g, false, val(nodes, *kernel), true, &mut dcols, 0.0);
                let dx = buf.slot(*input).expect("tracked input");
                col2im(&dcols, geom, dx);
            }
        }
        ConvTranspose2d {
            input,
            kernel,
            geom,
        } => {
            let cin = nodes[*input].value.shape[3];
            let (rows, patch) = (geom.rows(), geom.patch());
            let dcols = im2col(g, geom);
            if let Some(dx) = buf.slot(*input) {
                gemm(rows, patch, cin, &dcols, false, val(nodes, *kernel), false, dx, 1.0);
            }
            if let Some(dk) = buf.slot(*kernel) {
                gemm(patch, rows, cin, &dcols, true, val(nodes, *input), false, dk, 1.0);
            }
        }
        AvgPool2d { input, kh, kw } => {
            let s = &nodes[*input].value.shape;
            let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
            let (ho, wo) = (h / kh, w / kw);
            let inv = 1.0 / (kh * kw) as f64;
            if let Some(dx) = buf.slot(*input) {
                for b in 0..n {
                    for y in 0..h {
                        for x in 0..w {
                            let o = ((b * ho + y / kh) * wo + x / kw) * c;
                            let i = ((b * h + y) * w + x) * c;
                            for ch in 0..c {
                                dx[i + ch] += g[o + ch] * inv;
                            }
                        }
                    }
                }
            }
        }
        Relu(a) => {
            let va = val(nodes, *a);
            buf.add_map(*a, g, |i, gi| if va[i] > 0.0 { gi } else { 0.0 });
        }
        Elu(a) => {
            let va = val(nodes, *a);
            let vo = &out.data;
            buf.add_map(*a, g, |i, gi| {
                if va[i] > 0.0 {
                    gi
                } else {
                    gi * (vo[i] + ELU_ALPHA)
                }
            });
        }
        Exp(a) => {
            let vo = &out.data;
            buf.add_map(*a, g, |i, gi| gi * vo[i]);
        }
        Log(a) => {
            let va = val(nodes, *a);
            buf.add_map(*a, g, |i, gi| gi / va[i]);
        }
        Recip(a) => {
            let vo = &out.data;
            buf.add_map(*a, g, |i, gi| -gi * vo[i] * vo[i]);
        }
        Softmax(a) => {
            let c = *out.shape.last().unwrap();
            let p = &out.data;
            if let Some(dx) = buf.slot(*a) {
                for ((dx, p), g) in dx.chunks_mut(c).zip(p.chunks(c)).zip(g.chunks(c)) {
                    let dot: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        dx[j] += p[j] * (g[j] - dot);
                    }
                }
            }
        }
        CrossEntropy {
            scores,
            labels,
            probs,
        } => {
            let c = *nodes[*scores].value.shape.last().unwrap();
            let g0 = g[0];
            if let Some(dx) = buf.slot(*scores) {
                for (px, &label) in labels.iter().enumerate() {
                    let row = px * c;
                    for j in 0..c {
                        let onehot = if j == label { 1.0 } else { 0.0 };
                        dx[row + j] += g0 * (probs[row + j] - onehot);
                    }
                }
            }
        }
        L2Norm(a) => {
            let va = val(nodes, *a);
            let norm = out.data[0];
            let g0 = g[0];
            // Zero subgradient at the origin.
            if norm > 0.0 {
                if let Some(dx) = buf.slot(*a) {
                    for (d, x) in dx.iter_mut().zip(va) {
                        *d += g0 * x / norm;
                    }
                }
            }
        }
        Concat(parts) => {
            let total: usize = parts.iter().map(|p| p.1).sum();
            let mut offset = 0;
            for &(id, ch) in parts {
                if let Some(dx) = buf.slot(id) {
                    for (row, grow) in dx.chunks_mut(ch).zip(g.chunks(total)) {
                        for (d, gv) in row.iter_mut().zip(&grow[offset..offset + ch]) {
                            *d += gv;
                        }
                    }
                }
                offset += ch;
            }
        }
        Slice { input, start, len } => {
            let c = *nodes[*input].value.shape.last().unwrap();
            if let Some(dx) = buf.slot(*input) {
                for (row, grow) in dx.chunks_mut(c).zip(g.chunks(*len)) {
                    for (d, gv) in row[*start..start + len].iter_mut().zip(grow) {
                        *d += gv;
                    }
                }
            }
        }
        Sum(a) => {
            let g0 = g[0];
            if let Some(dx) = buf.slot(*a) {
                dx.iter_mut().for_each(|d| *d += g0);
            }
        }
        Mean(a) => {
            let n = buf.lens[*a];
            let g0 = g[0] / n as f64;
            if let Some(dx) = buf.slot(*a) {
                dx.iter_mut().for_each(|d| *d += g0);
            }
        }
        AddBias { input, bias } => {
            buf.add(*input, g);
            if let Some(db) = buf.slot(*bias) {
                let c = db.len();
                for row in g.chunks(c) {
                    for (d, gv) in db.iter_mut().zip(row) {
                        *d += gv;
                    }
                }
            }
        }
        ScaleChannels { input, weights } => {
            let (vx, vw) = (val(nodes, *input), val(nodes, *weights));
            let c = vw.len();
            buf.add_map(*input, g, |i, gi| gi * vw[i % c]);
            if let Some(dw) = buf.slot(*weights) {
                for (i, (gi, xi)) in g.iter().zip(vx).enumerate() {
                    dw[i % c] += gi * xi;
                }
            }
        }
        ScaleBy { input, scalar } => {
            let (vx, s) = (val(nodes, *input), val(nodes, *scalar)[0]);
            buf.add_map(*input, g, |_, gi| gi * s);
            if let Some(ds) = buf.slot(*scalar) {
                ds[0] += g.iter().zip(vx).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        Resample { input, taps } => {
            let c = *out.shape.last().unwrap();
            let n = out.shape[0];
            let in_px = taps.in_h * taps.in_w;
            let out_px = taps.out_h * taps.out_w;
            if let Some(dx) = buf.slot(*input) {
                for b in 0..n {
                    for (p, list) in taps.taps.iter().enumerate() {
                        let o = (b * out_px + p) * c;
                        for &(q, w) in list {
                            let i = (b * in_px + q) * c;
                            for ch in 0..c {
                                dx[i + ch] += w * g[o + ch];
                            }
                        }
                    }
                }
            }
        }
        QuatMul(a, b) => {
            let (qa, qb) = (val(nodes, *a), val(nodes, *b));
            // out = L(a) b = R(b) a, so grad_a = R(b)^T g and grad_b = L(a)^T g.
            let r = right_matrix(qb);
            let l = left_matrix(qa);
            buf.add_map(*a, &[0.0; 4], |i, _| (0..4).map(|j| r[j][i] * g[j]).sum());
            buf.add_map(*b, &[0.0; 4], |i, _| (0..4).map(|j| l[j][i] * g[j]).sum());
        }
        MapCustom { input, deriv } => {
            let va = val(nodes, *input);
            buf.add_map(*input, g, |i, gi| gi * deriv(va[i]));
        }
    }
}

/// Matrix of `q ⊗ ·` acting on a `(w, x, y, z)` column.
fn left_matrix(q: &[f64]) -> [[f64; 4]; 4] {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    [
        [w, -x, -y, -z],
        [x, w, -z, y],
        [y, z, w, -x],
        [z, -y, x, w],
    ]
}

/// Matrix of `· ⊗ q`.
fn right_matrix(q: &[f64]) -> [[f64; 4]; 4] {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    [
        [w, -x, -y, -z],
        [x, w, z, -y],
        [y, -z, w, x],
        [z, y, -x, w],
    ]
}

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn dims4(op: &'static str, s: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match s {
        &[n, h, w, c] => Ok((n, h, w, c)),
        _ => Err(Error::InvalidArgument(format!(
            "{op} expects an NHWC tensor, got shape {s:?}"
        ))),
    }
}

impl<'t> Var<'t> {
    fn nodes(&self) -> std::cell::Ref<'t, Vec<Node>> {
        self.tape.nodes.borrow()
    }

    fn same_tape(&self, other: &Var<'t>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "vars belong to different tapes"
        );
    }

    fn unary(
        self,
        name: &'static str,
        f: impl Fn(f64) -> f64,
        op: impl FnOnce(usize) -> Op,
    ) -> Result<Var<'t>> {
        let value = {
            let nodes = self.nodes();
            let x = &nodes[self.id].value;
            Tensor {
                shape: x.shape.clone(),
                data: x.data.iter().map(|&v| f(v)).collect(),
            }
        };
        self.tape.push(name, value, op(self.id))
    }

    fn binary(
        self,
        other: Var<'t>,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: impl FnOnce(usize, usize) -> Op,
    ) -> Result<Var<'t>> {
        self.same_tape(&other);
        let value = {
            let nodes = self.nodes();
            let (a, b) = (&nodes[self.id].value, &nodes[other.id].value);
            if a.shape != b.shape {
                return Err(mismatch(name, &a.shape, &b.shape));
            }
            Tensor {
                shape: a.shape.clone(),
                data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
            }
        };
        self.tape.push(name, value, op(self.id, other.id))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", |a, b| a + b, Op::Add)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", |a, b| a - b, Op::Sub)
    }

    /// Elementwise product.
    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "mul", |a, b| a * b, Op::Mul)
    }

    pub fn scale(self, s: f64) -> Result<Var<'t>> {
        self.unary("scale", |v| v * s, |a| Op::Scale(a, s))
    }

    pub fn neg(self) -> Result<Var<'t>> {
        self.scale(-1.0)
    }

    pub fn add_scalar(self, s: f64) -> Result<Var<'t>> {
        self.unary("add_scalar", |v| v + s, Op::AddScalar)
    }

    pub fn relu(self) -> Result<Var<'t>> {
        self.unary("relu", |v| v.max(0.0), Op::Relu)
    }

    /// Exponential linear unit with `alpha = 1`.
    pub fn elu(self) -> Result<Var<'t>> {
        self.unary(
            "elu",
            |v| if v > 0.0 { v } else { ELU_ALPHA * v.exp_m1() },
            Op::Elu,
        )
    }

    pub fn exp(self) -> Result<Var<'t>> {
        self.unary("exp", f64::exp, Op::Exp)
    }

    pub fn log(self) -> Result<Var<'t>> {
        self.unary("log", f64::ln, Op::Log)
    }

    pub fn recip(self) -> Result<Var<'t>> {
        self.unary("recip", |v| 1.0 / v, Op::Recip)
    }

    /// Elementwise `f` with a caller-supplied derivative `df`.
    pub fn map_custom(self, f: fn(f64) -> f64, df: fn(f64) -> f64) -> Result<Var<'t>> {
        self.unary("map_custom", f, |input| Op::MapCustom { input, deriv: df })
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let value = self.value().reshape(shape)?;
        self.tape.push("reshape", value, Op::Reshape(self.id))
    }

    pub fn sum(self) -> Result<Var<'t>> {
        let s: f64 = self.nodes()[self.id].value.data.iter().sum();
        self.tape.push("sum", Tensor::scalar(s), Op::Sum(self.id))
    }

    pub fn mean(self) -> Result<Var<'t>> {
        let s = {
            let nodes = self.nodes();
            let d = &nodes[self.id].value.data;
            d.iter().sum::<f64>() / d.len() as f64
        };
        self.tape.push("mean", Tensor::scalar(s), Op::Mean(self.id))
    }

    /// Euclidean norm of all elements.
    pub fn l2_norm(self) -> Result<Var<'t>> {
        self.l2_norm_eps(0.0)
    }

    /// `sqrt(sum(x^2) + eps)`, smoothing the kink at the origin.
    pub fn l2_norm_eps(self, eps: f64) -> Result<Var<'t>> {
        let n = {
            let nodes = self.nodes();
            (nodes[self.id].value.data.iter().map(|v| v * v).sum::<f64>() + eps).sqrt()
        };
        self.tape.push("l2_norm", Tensor::scalar(n), Op::L2Norm(self.id))
    }

    /// `(m, k) x (k, n)` matrix product.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other);
        let (value, m, k, n) = {
            let nodes = self.nodes();
            let (a, b) = (&nodes[self.id].value, &nodes[other.id].value);
            let (m, k, k2, n) = match (a.shape.as_slice(), b.shape.as_slice()) {
                (&[m, k], &[k2, n]) => (m, k, k2, n),
                _ => return Err(mismatch("matmul", &a.shape, &b.shape)),
            };
            if k != k2 {
                return Err(mismatch("matmul", &a.shape, &b.shape));
            }
            let mut c = vec![0.0; m * n];
            gemm(m, k, n, &a.data, false, &b.data, false, &mut c, 0.0);
            (Tensor { shape: vec![m, n], data: c }, m, k, n)
        };
        self.tape.push(
            "matmul",
            value,
            Op::MatMul {
                a: self.id,
                b: other.id,
                m,
                k,
                n,
            },
        )
    }

    /// 2-D convolution of an NHWC input with a `[kh, kw, c_in, c_out]`
    /// kernel. Stride must be 1 or 2.
    pub fn conv2d(self, kernel: Var<'t>, stride: usize, padding: Padding) -> Result<Var<'t>> {
        self.same_tape(&kernel);
        if stride != 1 && stride != 2 {
            return Err(Error::InvalidArgument(format!(
                "conv2d stride must be 1 or 2, got {stride}"
            )));
        }
        let (value, geom, cols) = {
            let nodes = self.nodes();
            let (x, w) = (&nodes[self.id].value, &nodes[kernel.id].value);
            let (n, h, wd, c) = dims4("conv2d", &x.shape)?;
            let (kh, kw, kc, cout) = dims4("conv2d kernel", &w.shape)?;
            if kc != c {
                return Err(mismatch("conv2d", &x.shape, &w.shape));
            }
            let pad = match padding {
                Padding::Valid => 0,
                Padding::Same => {
                    if kh % 2 == 0 || kw % 2 == 0 || kh != kw {
                        return Err(Error::InvalidArgument(
                            "same padding needs a square odd kernel".into(),
                        ));
                    }
                    (kh - 1) / 2
                }
            };
            if h + 2 * pad < kh || wd + 2 * pad < kw {
                return Err(mismatch("conv2d", &x.shape, &w.shape));
            }
            let ho = (h + 2 * pad - kh) / stride + 1;
            let wo = (wd + 2 * pad - kw) / stride + 1;
            let geom = ConvGeom {
                n,
                h,
                w: wd,
                c,
                kh,
                kw,
                stride,
                pad,
                ho,
                wo,
            };
            let cols = im2col(&x.data, &geom);
            let mut out = vec![0.0; geom.rows() * cout];
            gemm(geom.rows(), geom.patch(), cout, &cols, false, &w.data, false, &mut out, 0.0);
            (
                Tensor {
                    shape: vec![n, ho, wo, cout],
                    data: out,
                },
                geom,
                cols,
            )
        };
        self.tape.push(
            "conv2d",
            value,
            Op::Conv2d {
                input: self.id,
                kernel: kernel.id,
                geom,
                cols,
            },
        )
    }

    /// Transposed convolution (the adjoint of a strided convolution) of an
    /// NHWC input with a `[kh, kw, c_out, c_in]` kernel. The output has
    /// spatial size `(h - 1) * stride - 2 * pad + k`.
    pub fn conv_transpose2d(self, kernel: Var<'t>, stride: usize, pad: usize) -> Result<Var<'t>> {
        self.same_tape(&kernel);
        if stride == 0 {
            return Err(Error::InvalidArgument("stride must be positive".into()));
        }
        let (value, geom) = {
            let nodes = self.nodes();
            let (x, w) = (&nodes[self.id].value, &nodes[kernel.id].value);
            let (n, h, wd, cin) = dims4("conv_transpose2d", &x.shape)?;
            let (kh, kw, cout, kc) = dims4("conv_transpose2d kernel", &w.shape)?;
            if kc != cin || (h - 1) * stride + kh < 2 * pad + 1 {
                return Err(mismatch("conv_transpose2d", &x.shape, &w.shape));
            }
            let ho = (h - 1) * stride + kh - 2 * pad;
            let wo = (wd - 1) * stride + kw - 2 * pad;
            let geom = ConvGeom {
                n,
                h: ho,
                w: wo,
                c: cout,
                kh,
                kw,
                stride,
                pad,
                ho: h,
                wo: wd,
            };
            let mut cols = vec![0.0; geom.rows() * geom.patch()];
            gemm(geom.rows(), cin, geom.patch(), &x.data, false, &w.data, true, &mut cols, 0.0);
            let mut out = vec![0.0; n * ho * wo * cout];
            col2im(&cols, &geom, &mut out);
            (
                Tensor {
                    shape: vec![n, ho, wo, cout],
                    data: out,
                },
                geom,
            )
        };
        self.tape.push(
            "conv_transpose2d",
            value,
            Op::ConvTranspose2d {
                input: self.id,
                kernel: kernel.id,
                geom,
            },
        )
    }

    /// Non-overlapping `k x k` average pooling of an NHWC tensor.
    pub fn avg_pool2d(self, k: usize) -> Result<Var<'t>> {
        self.avg_pool(k, k)
    }

    /// Spatial mean per channel: `[n, h, w, c] -> [n, c]`.
    pub fn global_avg_pool(self) -> Result<Var<'t>> {
        let (n, h, w, c) = dims4("global_avg_pool", &self.shape())?;
        self.avg_pool(h, w)?.reshape(&[n, c])
    }

    fn avg_pool(self, kh: usize, kw: usize) -> Result<Var<'t>> {
        let value = {
            let nodes = self.nodes();
            let x = &nodes[self.id].value;
            let (n, h, w, c) = dims4("avg_pool2d", &x.shape)?;
            if kh == 0 || kw == 0 || h % kh != 0 || w % kw != 0 {
                return Err(Error::InvalidArgument(format!(
                    "pooling window {kh}x{kw} does not tile {h}x{w}"
                )));
            }
            let (ho, wo) = (h / kh, w / kw);
            let mut out = vec![0.0; n * ho * wo * c];
            let inv = 1.0 / (kh * kw) as f64;
            for b in 0..n {
                for y in 0..h {
                    for xx in 0..w {
                        let o = ((b * ho + y / kh) * wo + xx / kw) * c;
                        let i = ((b * h + y) * w + xx) * c;
                        for ch in 0..c {
                            out[o + ch] += x.data[i + ch] * inv;
                        }
                    }
                }
            }
            Tensor {
                shape: vec![n, ho, wo, c],
                data: out,
            }
        };
        self.tape.push(
            "avg_pool2d",
            value,
            Op::AvgPool2d {
                input: self.id,
                kh,
                kw,
            },
        )
    }

    /// Softmax over the last (channel) axis.
    pub fn softmax_channels(self) -> Result<Var<'t>> {
        let value = {
            let nodes = self.nodes();
            let x = &nodes[self.id].value;
            let c = *x.shape.last().unwrap();
            let mut out = x.data.clone();
            for row in out.chunks_mut(c) {
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - m).exp();
                    s += *v;
                }
                row.iter_mut().for_each(|v| *v /= s);
            }
            Tensor {
                shape: x.shape.clone(),
                data: out,
            }
        };
        self.tape.push("softmax_channels", value, Op::Softmax(self.id))
    }

    /// Summed negative log-softmax probability of `labels` (one label per
    /// channel row). Numerically stable fusion of softmax, log and pick.
    pub fn cross_entropy_sum(self, labels: &[usize]) -> Result<Var<'t>> {
        let (loss, probs) = {
            let nodes = self.nodes();
            let x = &nodes[self.id].value;
            let c = *x.shape.last().unwrap();
            if x.data.len() / c != labels.len() {
                return Err(mismatch("cross_entropy_sum", &x.shape, &[labels.len()]));
            }
            let mut probs = vec![0.0; x.data.len()];
            let mut loss = 0.0;
            for ((row, prow), &label) in x.data.chunks(c).zip(probs.chunks_mut(c)).zip(labels) {
                if label >= c {
                    return Err(Error::LabelOutOfRange { label, classes: c });
                }
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let s: f64 = row.iter().map(|v| (v - m).exp()).sum();
                let lse = m + s.ln();
                for (p, v) in prow.iter_mut().zip(row) {
                    *p = (v - lse).exp();
                }
                loss += lse - row[label];
            }
            (loss, probs)
        };
        self.tape.push(
            "cross_entropy_sum",
            Tensor::scalar(loss),
            Op::CrossEntropy {
                scores: self.id,
                labels: labels.to_vec(),
                probs,
            },
        )
    }

    /// Channels `start..start + len` of the last axis.
    pub fn slice_channels(self, start: usize, len: usize) -> Result<Var<'t>> {
        let value = {
            let nodes = self.nodes();
            let x = &nodes[self.id].value;
            let c = *x.shape.last().unwrap();
            if len == 0 || start + len > c {
                return Err(Error::InvalidArgument(format!(
                    "channel slice {start}..{} out of range for {c} channels",
                    start + len
                )));
            }
            let data: Vec<f64> = x
                .data
                .chunks(c)
                .flat_map(|row| row[start..start + len].iter().copied())
                .collect();
            let mut shape = x.shape.clone();
            *shape.last_mut().unwrap() = len;
            Tensor { shape, data }
        };
        self.tape.push(
            "slice_channels",
            value,
            Op::Slice {
                input: self.id,
                start,
                len,
            },
        )
    }

    /// Adds a `[c]` bias along the last axis.
    pub fn add_bias(self, bias: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&bias);
        let value = {
            let nodes = self.nodes();
            let (x, b) = (&nodes[self.id].value, &nodes[bias.id].value);
            let c = *x.shape.last().unwrap();
            if b.shape != [c] {
                return Err(mismatch("add_bias", &x.shape, &b.shape));
            }
            Tensor {
                shape: x.shape.clone(),
                data: x.data.iter().enumerate().map(|(i, v)| v + b.data[i % c]).collect(),
            }
        };
        self.tape.push(
            "add_bias",
            value,
            Op::AddBias {
                input: self.id,
                bias: bias.id,
            },
        )
    }

    /// Multiplies channel `k` of the last axis by `weights[k]`.
    pub fn scale_channels(self, weights: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&weights);
        let value = {
            let nodes = self.nodes();
            let (x, w) = (&nodes[self.id].value, &nodes[weights.id].value);
            let c = *x.shape.last().unwrap();
            if w.shape != [c] {
                return Err(mismatch("scale_channels", &x.shape, &w.shape));
            }
            Tensor {
                shape: x.shape.clone(),
                data: x.data.iter().enumerate().map(|(i, v)| v * w.data[i % c]).collect(),
            }
        };
        self.tape.push(
            "scale_channels",
            value,
            Op::ScaleChannels {
                input: self.id,
                weights: weights.id,
            },
        )
    }

    /// Multiplies every element by a one-element var.
    pub fn scale_by(self, scalar: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&scalar);
        let value = {
            let nodes = self.nodes();
            let (x, s) = (&nodes[self.id].value, &nodes[scalar.id].value);
            if s.data.len() != 1 {
                return Err(mismatch("scale_by", &x.shape, &s.shape));
            }
            let s = s.data[0];
            Tensor {
                shape: x.shape.clone(),
                data: x.data.iter().map(|v| v * s).collect(),
            }
        };
        self.tape.push(
            "scale_by",
            value,
            Op::ScaleBy {
                input: self.id,
                scalar: scalar.id,
            },
        )
    }

    /// Applies sparse resampling taps to every image and channel of an NHWC
    /// tensor.
    pub fn resample(self, taps: Rc<ResampleTaps>) -> Result<Var<'t>> {
        let value = {
            let nodes = self.nodes();
            let x = &nodes[self.id].value;
            let (n, h, w, c) = dims4("resample", &x.shape)?;
            if h != taps.in_h || w != taps.in_w || taps.taps.len() != taps.out_h * taps.out_w {
                return Err(mismatch(
                    "resample",
                    &x.shape,
                    &[taps.in_h, taps.in_w, taps.out_h, taps.out_w],
                ));
            }
            let in_px = h * w;
            let out_px = taps.out_h * taps.out_w;
            let mut out = vec![0.0; n * out_px * c];
            for b in 0..n {
                for (p, list) in taps.taps.iter().enumerate() {
                    let o = (b * out_px + p) * c;
                    for &(q, wgt) in list {
                        if q >= in_px {
                            return Err(Error::InvalidArgument(format!(
                                "resample tap {q} outside {in_px} source pixels"
                            )));
                        }
                        let i = (b * in_px + q) * c;
                        for ch in 0..c {
                            out[o + ch] += wgt * x.data[i + ch];
                        }
                    }
                }
            }
            Tensor {
                shape: vec![n, taps.out_h, taps.out_w, c],
                data: out,
            }
        };
        self.tape.push(
            "resample",
            value,
            Op::Resample {
                input: self.id,
                taps,
            },
        )
    }

    /// Hamilton product of two 4-element `(w, x, y, z)` vars.
    pub fn quat_mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other);
        let value = {
            let nodes = self.nodes();
            let (a, b) = (&nodes[self.id].value, &nodes[other.id].value);
            if a.data.len() != 4 || b.data.len() != 4 {
                return Err(mismatch("quat_mul", &a.shape, &b.shape));
            }
            let l = left_matrix(&a.data);
            let data = (0..4)
                .map(|i| (0..4).map(|j| l[i][j] * b.data[j]).sum())
                .collect();
            Tensor {
                shape: a.shape.clone(),
                data,
            }
        };
        self.tape.push("quat_mul", value, Op::QuatMul(self.id, other.id))
    }
}

/// Concatenates vars along the last (channel) axis. All other dimensions
/// must match.
pub fn concat_channels<'t>(parts: &[Var<'t>]) -> Result<Var<'t>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
    let tape = first.tape;
    let (value, meta) = {
        let nodes = tape.nodes.borrow();
        let base = &nodes[first.id].value.shape;
        let lead = &base[..base.len() - 1];
        let mut meta = Vec::with_capacity(parts.len());
        for p in parts {
            first.same_tape(p);
            let s = &nodes[p.id].value.shape;
            if s.len() != base.len() || &s[..s.len() - 1] != lead {
                return Err(mismatch("concat_channels", base, s));
            }
            meta.push((p.id, *s.last().unwrap()));
        }
        let total: usize = meta.iter().map(|m| m.1).sum();
        let rows: usize = lead.iter().product();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &(id, c) in &meta {
                data.extend_from_slice(&nodes[id].value.data[r * c..(r + 1) * c]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        (Tensor { shape, data }, meta)
    };
    tape.push("concat_channels", value, Op::Concat(meta))
}

#[cfg(test)]
mod tests {
    use super::super::{grad_check, grad_check_many, Tape, Tensor};
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Uniform samples with magnitude at least `gap`, away from kinks at 0.
    fn rand_off_zero(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Tensor {
        let mut t = rand_tensor(rng, shape);
        for v in t.data_mut() {
            *v = v.signum() * (v.abs() + gap);
        }
        t
    }

    #[test]
    fn relu_forward() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::from_slice(&[-1.0, 2.0]));
        assert_eq!(x.relu().unwrap().value().data(), &[0.0, 2.0]);
    }

    #[test]
    fn softmax_uniform() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::full(&[1, 2, 2, 4], 0.3));
        let p = x.softmax_channels().unwrap().value();
        assert!(p.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn conv2d_ones_counts_neighbours() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::ones(&[1, 4, 4, 1]));
        let k = tape.constant(Tensor::ones(&[3, 3, 1, 1]));
        let y = x.conv2d(k, 1, Padding::Same).unwrap().value();
        assert_eq!(y.shape(), &[1, 4, 4, 1]);
        let d = y.data();
        assert_eq!(d[0], 4.0);
        assert_eq!(d[3], 4.0);
        assert_eq!(d[12], 4.0);
        assert_eq!(d[15], 4.0);
        assert_eq!(d[5], 9.0);
        assert_eq!(d[10], 9.0);
        assert_eq!(d[1], 6.0);
    }

    #[test]
    fn conv2d_geometry_and_errors() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::ones(&[2, 8, 8, 3]));
        let k = tape.constant(Tensor::ones(&[3, 3, 3, 5]));
        assert_eq!(x.conv2d(k, 2, Padding::Same).unwrap().shape(), vec![2, 4, 4, 5]);
        assert_eq!(x.conv2d(k, 1, Padding::Valid).unwrap().shape(), vec![2, 6, 6, 5]);
        assert!(x.conv2d(k, 3, Padding::Same).is_err());
        let bad = tape.constant(Tensor::ones(&[3, 3, 4, 5]));
        assert!(matches!(
            x.conv2d(bad, 1, Padding::Same),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn conv2d_is_linear_in_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let tape = Tape::new();
        let x = rand_tensor(&mut rng, &[1, 6, 6, 2]);
        let k = tape.constant(rand_tensor(&mut rng, &[3, 3, 2, 3]));
        let a = 2.75;
        let y1 = tape.constant(x.clone()).scale(a).unwrap().conv2d(k, 1, Padding::Same).unwrap();
        let y2 = tape.constant(x).conv2d(k, 1, Padding::Same).unwrap().scale(a).unwrap();
        assert!(y1.value().max_abs_diff(&y2.value()) < 1e-12);
    }

    #[test]
    fn conv_transpose_shape() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::ones(&[1, 4, 4, 3]));
        let k = tape.constant(Tensor::ones(&[8, 8, 2, 3]));
        assert_eq!(x.conv_transpose2d(k, 4, 2).unwrap().shape(), vec![1, 16, 16, 2]);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::ones(&[2, 3]));
        let b = tape.constant(Tensor::ones(&[3, 2]));
        let e = a.add(b).unwrap_err();
        let msg = e.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[3, 2]"), "{msg}");
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::from_slice(&[0.0]));
        assert!(matches!(x.log(), Err(Error::NonFinite { op: "log" })));
        let big = tape.constant(Tensor::from_slice(&[1000.0]));
        assert!(matches!(big.exp(), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn cross_entropy_rejects_bad_labels() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 1, 1, 4]));
        assert!(matches!(
            x.cross_entropy_sum(&[4]),
            Err(Error::LabelOutOfRange { label: 4, classes: 4 })
        ));
        let l = x.cross_entropy_sum(&[2]).unwrap().item();
        assert!((l - 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn concat_and_slice_round_trip() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::new(vec![1, 2, 1, 2], vec![1., 2., 3., 4.]).unwrap());
        let b = tape.constant(Tensor::new(vec![1, 2, 1, 1], vec![9., 8.]).unwrap());
        let c = concat_channels(&[a, b]).unwrap();
        assert_eq!(c.value().data(), &[1., 2., 9., 3., 4., 8.]);
        assert_eq!(c.slice_channels(2, 1).unwrap().value().data(), &[9., 8.]);
        assert_eq!(c.slice_channels(0, 2).unwrap().value(), a.value());
    }

    #[test]
    fn quat_mul_matches_geometry() {
        use crate::geometry::{quat_multiply, Quaternion};
        let a = Quaternion::new(0.1, -0.5, 0.3, 0.8);
        let b = Quaternion::new(-0.7, 0.2, 0.4, -0.1);
        let tape = Tape::new();
        let va = tape.constant(Tensor::from_slice(&a.to_array()));
        let vb = tape.constant(Tensor::from_slice(&b.to_array()));
        let got = va.quat_mul(vb).unwrap().value();
        let want = quat_multiply(a, b).to_array();
        for (g, w) in got.data().iter().zip(want) {
            assert!((g - w).abs() < 1e-15);
        }
    }

    // Finite-difference checks of every primitive over ten seeds, inputs
    // kept away from non-differentiable points.
    #[test]
    fn primitive_gradients_match_finite_differences() {
        for seed in 0..10u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = rand_off_zero(&mut rng, &[1, 4, 4, 2], 1e-3);
            let y = rand_tensor(&mut rng, &[1, 4, 4, 2]);
            let w = rand_tensor(&mut rng, &[3, 3, 2, 3]);
            let r = || rand_tensor(&mut ChaCha8Rng::seed_from_u64(seed + 100), &[1, 4, 4, 2]);
            let checks: Vec<(&str, f64)> = vec![
                ("add", grad_check_many(|_, v| v[0].add(v[1])?.mul(v[1])?.sum(), &[x.clone(), y.clone()]).unwrap().max_rel_err),
                ("sub", grad_check_many(|_, v| v[0].sub(v[1])?.mul(v[0])?.sum(), &[x.clone(), y.clone()]).unwrap().max_rel_err),
                ("mul", grad_check_many(|_, v| v[0].mul(v[1])?.sum(), &[x.clone(), y.clone()]).unwrap().max_rel_err),
                ("scale", grad_check(|_, v| v.scale(-1.7)?.mul(v)?.sum(), &x).unwrap().max_rel_err),
                ("relu", grad_check(|t, v| v.relu()?.mul(t.constant(r()))?.sum(), &x).unwrap().max_rel_err),
                ("elu", grad_check(|t, v| v.elu()?.mul(t.constant(r()))?.sum(), &x).unwrap().max_rel_err),
                ("exp", grad_check(|_, v| v.exp()?.sum(), &x).unwrap().max_rel_err),
                ("log", grad_check(|_, v| v.mul(v)?.add_scalar(0.5)?.log()?.sum(), &x).unwrap().max_rel_err),
                ("recip", grad_check(|_, v| v.mul(v)?.add_scalar(0.5)?.recip()?.sum(), &x).unwrap().max_rel_err),
                ("mean", grad_check(|_, v| v.mul(v)?.mean(), &x).unwrap().max_rel_err),
                ("l2_norm", grad_check(|_, v| v.l2_norm(), &x).unwrap().max_rel_err),
                ("softmax", grad_check(|t, v| v.softmax_channels()?.mul(t.constant(r()))?.sum(), &x).unwrap().max_rel_err),
                ("cross_entropy", grad_check(|_, v| v.cross_entropy_sum(&[0, 1, 1, 0, 1, 0, 0, 1, 1, 1, 0, 0, 1, 0, 1, 0]), &x).unwrap().max_rel_err),
                ("conv2d", grad_check_many(|t, v| v[0].conv2d(v[1], 1, Padding::Same)?.mul(t.constant(rand_tensor(&mut ChaCha8Rng::seed_from_u64(seed), &[1, 4, 4, 3])))?.sum(), &[x.clone(), w.clone()]).unwrap().max_rel_err),
                ("conv2d_s2", grad_check_many(|_, v| v[0].conv2d(v[1], 2, Padding::Same)?.elu()?.sum(), &[x.clone(), w.clone()]).unwrap().max_rel_err),
                ("conv2d_valid", grad_check_many(|_, v| v[0].conv2d(v[1], 1, Padding::Valid)?.elu()?.sum(), &[x.clone(), w.clone()]).unwrap().max_rel_err),
                ("conv_transpose2d", grad_check_many(|_, v| v[0].conv_transpose2d(v[1], 2, 1)?.elu()?.sum(), &[x.clone(), rand_tensor(&mut rng, &[4, 4, 3, 2])]).unwrap().max_rel_err),
                ("avg_pool2d", grad_check(|_, v| v.avg_pool2d(2)?.elu()?.sum(), &x).unwrap().max_rel_err),
                ("global_avg_pool", grad_check(|_, v| v.global_avg_pool()?.exp()?.sum(), &x).unwrap().max_rel_err),
                ("matmul", grad_check_many(|_, v| v[0].matmul(v[1])?.elu()?.sum(), &[rand_tensor(&mut rng, &[3, 4]), rand_tensor(&mut rng, &[4, 2])]).unwrap().max_rel_err),
                ("concat", grad_check_many(|_, v| concat_channels(&[v[0], v[1]])?.elu()?.sum(), &[x.clone(), y.clone()]).unwrap().max_rel_err),
                ("slice", grad_check(|_, v| v.slice_channels(1, 1)?.exp()?.sum(), &x).unwrap().max_rel_err),
                ("add_bias", grad_check_many(|_, v| v[0].add_bias(v[1])?.elu()?.sum(), &[x.clone(), rand_tensor(&mut rng, &[2])]).unwrap().max_rel_err),
                ("scale_channels", grad_check_many(|_, v| v[0].scale_channels(v[1])?.elu()?.sum(), &[x.clone(), rand_tensor(&mut rng, &[2])]).unwrap().max_rel_err),
                ("scale_by", grad_check_many(|_, v| v[0].scale_by(v[1])?.elu()?.sum(), &[x.clone(), rand_tensor(&mut rng, &[1])]).unwrap().max_rel_err),
                ("reshape", grad_check(|_, v| v.reshape(&[8, 4])?.exp()?.sum(), &x).unwrap().max_rel_err),
                ("quat_mul", grad_check_many(|t, v| v[0].quat_mul(v[1])?.mul(t.constant(Tensor::from_slice(&[0.3, -1.0, 0.5, 2.0])))?.sum(), &[rand_tensor(&mut rng, &[4]), rand_tensor(&mut rng, &[4])]).unwrap().max_rel_err),
            ];
            for (name, err) in checks {
                assert!(err < 1e-4, "seed {seed}: {name} max rel err {err:.3e}");
            }
        }
    }

    #[test]
    fn wrong_backward_rule_is_caught() {
        let x = Tensor::from_slice(&[0.3, -0.8, 1.2]);
        // True derivative of x^3 is 3x^2; the double claims 2x^2.
        let report = grad_check(|_, v| v.map_custom(|a| a * a * a, |a| 2.0 * a * a)?.sum(), &x).unwrap();
        assert!(!report.pass);
        let good = grad_check(|_, v| v.map_custom(|a| a * a * a, |a| 3.0 * a * a)?.sum(), &x).unwrap();
        assert!(good.pass);
    }

    #[test]
    fn forward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = rand_tensor(&mut rng, &[1, 8, 8, 3]);
        let w = rand_tensor(&mut rng, &[3, 3, 3, 4]);
        let run = || {
            let tape = Tape::new();
            let y = tape
                .constant(x.clone())
                .conv2d(tape.constant(w.clone()), 2, Padding::Same)
                .unwrap()
                .elu()
                .unwrap();
            y.value()
        };
        assert_eq!(run().data(), run().data());
    }
}
