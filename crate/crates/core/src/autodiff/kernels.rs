//! Dense kernels behind the tape primitives: GEMM and NHWC im2col.

/// Row-major `C = op(A) · op(B) + beta · C` for `op(A)` of size `m × k` and
/// `op(B)` of size `k × n`. With `trans_a`, `a` holds the `k × m` matrix;
/// with `trans_b`, `b` holds the `n × k` matrix.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the length assertions above bound every index the strided
    // access pattern can reach.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a 2-D convolution over an NHWC tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn rows(&self) -> usize {
        self.n * self.ho * self.wo
    }

    pub fn patch(&self) -> usize {
        self.kh * self.kw * self.c
    }
}

pub(crate) fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let patch = g.patch();
    let mut cols = vec![0.0; g.rows() * patch];
    for n in 0..g.n {
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let row = ((n * g.ho + oy) * g.wo + ox) * patch;
                for ky in 0..g.kh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kx in 0..g.kw {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let src = ((n * g.h + iy as usize) * g.w + ix as usize) * g.c;
                        let dst = row + (ky * g.kw + kx) * g.c;
                        cols[dst..dst + g.c].copy_from_slice(&x[src..src + g.c]);
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters patch rows back, accumulating into `out`.
pub(crate) fn col2im(cols: &[f64], g: &ConvGeom, out: &mut [f64]) {
    let patch = g.patch();
    for n in 0..g.n {
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let row = ((n * g.ho + oy) * g.wo + ox) * patch;
                for ky in 0..g.kh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kx in 0..g.kw {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let dst = ((n * g.h + iy as usize) * g.w + ix as usize) * g.c;
                        let src = row + (ky * g.kw + kx) * g.c;
                        for (o, v) in out[dst..dst + g.c].iter_mut().zip(&cols[src..src + g.c]) {
                            *o += v;
                        }
                    }
                }
            }
        }
    }
}
