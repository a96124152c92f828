//! Depth-based inverse warping of previous-frame feature maps into the
//! current view.
//!
//! For every current pixel the grid stores the sub-pixel location of the same
//! surface point in the previous frame. Pixel `(x, y)` denotes the centre of
//! column `x`, row `y`, so a grid is in bounds on `[0, W-1] x [0, H-1]`.

use std::rc::Rc;

use crate::autodiff::{ResampleTaps, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::{project, unproject, CameraIntrinsics, RelativePose};

#[derive(Clone, Debug, PartialEq)]
pub struct WarpGrid {
    pub width: usize,
    pub height: usize,
    /// Source `(x, y)` per output pixel, row-major. Meaningful only where
    /// `valid` is set.
    pub coords: Vec<[f64; 2]>,
    pub valid: Vec<bool>,
}

impl WarpGrid {
    /// The grid that samples every pixel from itself.
    pub fn identity(width: usize, height: usize) -> WarpGrid {
        let coords = (0..height)
            .flat_map(|y| (0..width).map(move |x| [x as f64, y as f64]))
            .collect();
        WarpGrid {
            width,
            height,
            coords,
            valid: vec![true; width * height],
        }
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    fn in_bounds(&self, c: [f64; 2]) -> bool {
        c[0] >= 0.0
            && c[1] >= 0.0
            && c[0] <= (self.width - 1) as f64
            && c[1] <= (self.height - 1) as f64
    }
}

/// Coordinates this close to a pixel centre are snapped onto it, so
/// round-off in the back-projection never blends neighbours.
const SNAP_EPS: f64 = 1e-9;

fn snap(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() <= SNAP_EPS {
        r
    } else {
        v
    }
}

fn depth_is_valid(d: f64) -> bool {
    d.is_finite() && d > 0.0
}

/// Source coordinates in the previous frame for every pixel of the current
/// frame.
///
/// `rel` maps current-camera points into the previous camera (see
/// [`RelativePose::in_previous_camera`]). `depth` is the current frame's
/// `[H, W]` z-depth in metres; zero or non-finite entries are invalid.
pub fn compute_warp_grid(
    rel: &RelativePose,
    depth: &Tensor,
    k: &CameraIntrinsics,
) -> Result<WarpGrid> {
    let (h, w) = match depth.shape() {
        &[h, w] => (h, w),
        s => {
            return Err(Error::InvalidArgument(format!(
                "depth map must be [H, W], got {s:?}"
            )))
        }
    };
    if (h, w) != (k.height, k.width) {
        return Err(Error::ShapeMismatch {
            op: "compute_warp_grid",
            lhs: vec![h, w],
            rhs: vec![k.height, k.width],
        });
    }
    if !depth.data().iter().any(|&d| depth_is_valid(d)) {
        return Err(Error::NoValidDepth);
    }
    let t = rel.to_transform();
    let mut grid = WarpGrid {
        width: w,
        height: h,
        coords: vec![[0.0; 2]; w * h],
        valid: vec![false; w * h],
    };
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let d = depth.data()[i];
            if !depth_is_valid(d) {
                continue;
            }
            let p = t.transform_point(unproject([x as f64, y as f64], d, k)?);
            let Ok(c) = project(p, k) else { continue };
            let c = [snap(c[0]), snap(c[1])];
            if grid.in_bounds(c) {
                grid.coords[i] = c;
                grid.valid[i] = true;
            }
        }
    }
    Ok(grid)
}

/// Grid for feature maps `factor` times smaller than the input.
///
/// Coordinates are block averages mapped to the coarse pixel grid with
/// half-pixel-centre alignment, `(c + 0.5) / factor - 0.5`. A coarse pixel is
/// valid only if its whole block is valid and its coordinate stays in bounds.
pub fn downscale_grid(grid: &WarpGrid, factor: usize) -> Result<WarpGrid> {
    if factor == 0 || !factor.is_power_of_two() {
        return Err(Error::InvalidArgument(format!(
            "downscale factor must be a power of two, got {factor}"
        )));
    }
    if !grid.width.is_multiple_of(factor) || !grid.height.is_multiple_of(factor) {
        return Err(Error::InvalidArgument(format!(
            "{}x{} grid is not divisible by {factor}",
            grid.width, grid.height
        )));
    }
    if factor == 1 {
        return Ok(grid.clone());
    }
    let (w, h) = (grid.width / factor, grid.height / factor);
    let mut out = WarpGrid {
        width: w,
        height: h,
        coords: vec![[0.0; 2]; w * h],
        valid: vec![false; w * h],
    };
    let f = factor as f64;
    for y in 0..h {
        for x in 0..w {
            let mut sum = [0.0; 2];
            let mut all_valid = true;
            for by in 0..factor {
                for bx in 0..factor {
                    let i = (y * factor + by) * grid.width + x * factor + bx;
                    all_valid &= grid.valid[i];
                    sum[0] += grid.coords[i][0];
                    sum[1] += grid.coords[i][1];
                }
            }
            if !all_valid {
                continue;
            }
            let n = f * f;
            let c = [(sum[0] / n + 0.5) / f - 0.5, (sum[1] / n + 0.5) / f - 0.5];
            let o = y * w + x;
            if out.in_bounds(c) {
                out.coords[o] = c;
                out.valid[o] = true;
            }
        }
    }
    Ok(out)
}

/// Bilinear interpolation taps of `grid` into an `in_h x in_w` source.
pub fn bilinear_taps(grid: &WarpGrid, in_h: usize, in_w: usize) -> ResampleTaps {
    let taps = grid
        .coords
        .iter()
        .zip(&grid.valid)
        .map(|(&[x, y], &valid)| {
            if !valid {
                return Vec::new();
            }
            // The last row/column pairs with its left/upper neighbour so
            // every tap index stays inside the source.
            let x0 = (x.floor() as usize).min(in_w.saturating_sub(2));
            let y0 = (y.floor() as usize).min(in_h.saturating_sub(2));
            let (fx, fy) = (x - x0 as f64, y - y0 as f64);
            let x1 = (x0 + 1).min(in_w - 1);
            let y1 = (y0 + 1).min(in_h - 1);
            let mut t = Vec::with_capacity(4);
            for (xi, yi, wgt) in [
                (x0, y0, (1.0 - fx) * (1.0 - fy)),
                (x1, y0, fx * (1.0 - fy)),
                (x0, y1, (1.0 - fx) * fy),
                (x1, y1, fx * fy),
            ] {
                if wgt != 0.0 {
                    t.push((yi * in_w + xi, wgt));
                }
            }
            t
        })
        .collect();
    ResampleTaps {
        in_h,
        in_w,
        out_h: grid.height,
        out_w: grid.width,
        taps,
    }
}

/// Samples an NHWC source at the grid coordinates. Invalid pixels are zero
/// in every channel.
pub fn bilinear_sample<'t>(src: Var<'t>, grid: &WarpGrid) -> Result<Var<'t>> {
    let s = src.shape();
    if s.len() != 4 {
        return Err(Error::InvalidArgument(format!(
            "bilinear_sample expects NHWC input, got {s:?}"
        )));
    }
    src.resample(Rc::new(bilinear_taps(grid, s[1], s[2])))
}

/// Warps previous-frame features (`scale` times smaller than the depth map)
/// into the current view.
pub fn warp_features<'t>(
    prev_feats: Var<'t>,
    rel: &RelativePose,
    depth: &Tensor,
    k: &CameraIntrinsics,
    scale: usize,
) -> Result<Var<'t>> {
    let grid = compute_warp_grid(rel, depth, k)?;
    let s = prev_feats.shape();
    if s.len() != 4 || s[1] * scale != grid.height || s[2] * scale != grid.width {
        return Err(Error::ShapeMismatch {
            op: "warp_features",
            lhs: s,
            rhs: vec![grid.height / scale.max(1), grid.width / scale.max(1)],
        });
    }
    bilinear_sample(prev_feats, &downscale_grid(&grid, scale)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check, Tape};
    use crate::geometry::Quaternion;
    use proptest::prelude::*;

    fn k64() -> CameraIntrinsics {
        CameraIntrinsics::square(64)
    }

    fn flat_depth(d: f64) -> Tensor {
        Tensor::full(&[64, 64], d)
    }

    #[test]
    fn identity_rel_gives_identity_grid() {
        let g = compute_warp_grid(&RelativePose::IDENTITY, &flat_depth(2.0), &k64()).unwrap();
        assert_eq!(g, WarpGrid::identity(64, 64));
    }

    #[test]
    fn x_translation_shifts_by_focal_over_depth() {
        let rel = RelativePose::new([0.1, 0.0, 0.0], Quaternion::IDENTITY);
        let k = k64();
        let g = compute_warp_grid(&rel, &flat_depth(1.0), &k).unwrap();
        // Oracle: forward pinhole projection of the back-projected point.
        for y in 0..64 {
            for x in 0..64 {
                let i = y * 64 + x;
                let px = x as f64 + 6.4;
                if px <= 63.0 {
                    assert!(g.valid[i]);
                    let want = project([(x as f64 - 32.0) / 64.0 + 0.1, (y as f64 - 32.0) / 64.0, 1.0], &k).unwrap();
                    assert!((g.coords[i][0] - want[0]).abs() < 1e-12);
                    assert!((g.coords[i][0] - px).abs() < 1e-12);
                    assert!((g.coords[i][1] - y as f64).abs() < 1e-12);
                } else {
                    assert!(!g.valid[i]);
                }
            }
        }
    }

    #[test]
    fn out_of_bounds_sample_is_invalid() {
        // Shift left by exactly half a pixel: column 0 lands at x = -0.5.
        let rel = RelativePose::new([-0.5 / 64.0, 0.0, 0.0], Quaternion::IDENTITY);
        let g = compute_warp_grid(&rel, &flat_depth(1.0), &k64()).unwrap();
        assert!(!g.valid[0]);
        assert!((g.coords[1][0] - 0.5).abs() < 1e-12 && g.valid[1]);
    }

    #[test]
    fn all_invalid_depth_is_an_error() {
        let e = compute_warp_grid(&RelativePose::IDENTITY, &flat_depth(0.0), &k64());
        assert!(matches!(e, Err(Error::NoValidDepth)));
        let mut d = flat_depth(0.0);
        d.data_mut()[5] = 1.0;
        let g = compute_warp_grid(&RelativePose::IDENTITY, &d, &k64()).unwrap();
        assert_eq!(g.valid_count(), 1);
    }

    #[test]
    fn invalid_depth_pixels_are_masked() {
        let mut d = flat_depth(1.0);
        d.data_mut()[7] = f64::NAN;
        d.data_mut()[8] = -1.0;
        let g = compute_warp_grid(&RelativePose::IDENTITY, &d, &k64()).unwrap();
        assert!(!g.valid[7] && !g.valid[8] && g.valid[9]);
    }

    #[test]
    fn downscale_identity_by_two() {
        // By-hand pooling of the 4x4 identity: block (0,0) averages to
        // (0.5, 0.5), which maps to coarse pixel (0, 0).
        let g = downscale_grid(&WarpGrid::identity(4, 4), 2).unwrap();
        assert_eq!(g, WarpGrid::identity(2, 2));
        assert_eq!(downscale_grid(&WarpGrid::identity(64, 64), 8).unwrap(), WarpGrid::identity(8, 8));
    }

    #[test]
    fn downscale_factor_one_and_errors() {
        let g = WarpGrid::identity(6, 4);
        assert_eq!(downscale_grid(&g, 1).unwrap(), g);
        assert!(downscale_grid(&g, 4).is_err());
        assert!(downscale_grid(&g, 3).is_err());
    }

    #[test]
    fn downscale_ands_validity() {
        let mut g = WarpGrid::identity(4, 4);
        g.valid[5] = false;
        let d = downscale_grid(&g, 2).unwrap();
        assert_eq!(d.valid, vec![false, true, true, true]);
    }

    fn sample_2x2(x: f64, y: f64) -> f64 {
        let tape = Tape::new();
        let src = tape.constant(Tensor::new(vec![1, 2, 2, 1], vec![0.0, 1.0, 2.0, 3.0]).unwrap());
        let grid = WarpGrid {
            width: 1,
            height: 1,
            coords: vec![[x, y]],
            valid: vec![true],
        };
        bilinear_sample(src, &grid).unwrap().item()
    }

    #[test]
    fn bilinear_examples() {
        assert_eq!(sample_2x2(0.5, 0.5), 1.5);
        assert_eq!(sample_2x2(0.25, 0.0), 0.25);
        assert_eq!(sample_2x2(1.0, 1.0), 3.0);
        assert_eq!(sample_2x2(0.0, 1.0), 2.0);
    }

    #[test]
    fn invalid_pixels_sample_zero() {
        let tape = Tape::new();
        let src = tape.constant(Tensor::full(&[1, 4, 4, 3], 7.0));
        let mut g = WarpGrid::identity(4, 4);
        g.valid[2] = false;
        let out = bilinear_sample(src, &g).unwrap().value();
        assert_eq!(&out.data()[6..9], &[0.0; 3]);
        assert_eq!(&out.data()[9..12], &[7.0; 3]);
    }

    #[test]
    fn identity_grid_is_exact_on_uneven_depth() {
        let mut depth = flat_depth(1.0);
        for (i, d) in depth.data_mut().iter_mut().enumerate() {
            *d = 0.37 + (i as f64 * 0.913).sin().abs() * 11.0;
        }
        let g = compute_warp_grid(&RelativePose::IDENTITY, &depth, &k64()).unwrap();
        assert_eq!(g, WarpGrid::identity(64, 64));
    }

    #[test]
    fn identity_warp_features_is_exact() {
        let depth = flat_depth(1.5);
        let k = k64();
        let tape = Tape::new();
        let data: Vec<f64> = (0..16 * 16 * 3).map(|i| (i as f64 * 0.37).sin()).collect();
        let prev = tape.constant(Tensor::new(vec![1, 16, 16, 3], data.clone()).unwrap());
        let out = warp_features(prev, &RelativePose::IDENTITY, &depth, &k, 4).unwrap();
        let diff = out.value().data().iter().zip(&data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff <= 1e-12);
    }

    #[test]
    fn warp_features_gradient() {
        let rel = RelativePose::new([0.013, -0.008, 0.02], Quaternion::from_axis_angle([0.0, 1.0, 0.0], 0.03));
        let mut depth = flat_depth(2.0);
        for (i, d) in depth.data_mut().iter_mut().enumerate() {
            *d += 0.3 * ((i % 64) as f64 * 0.1).sin();
        }
        let k = k64();
        let grid = downscale_grid(&compute_warp_grid(&rel, &depth, &k).unwrap(), 4).unwrap();
        assert!(grid.valid_count() > 100);
        assert!(grid
            .coords
            .iter()
            .zip(&grid.valid)
            .filter(|(_, &v)| v)
            .all(|(c, _)| c[0].fract() != 0.0 && c[1].fract() != 0.0));
        let x = Tensor::new(vec![1, 16, 16, 2], (0..512).map(|i| (i as f64 * 0.91).cos()).collect()).unwrap();
        let r = grad_check(
            |t, v| {
                let w = warp_features(v, &rel, &depth, &k, 4)?;
                w.mul(t.constant(Tensor::new(vec![1, 16, 16, 2], (0..512).map(|i| (i as f64 * 0.3).sin()).collect())?))?.sum()
            },
            &x,
        )
        .unwrap();
        assert!(r.pass, "{r:?}");
    }

    proptest! {
        #[test]
        fn valid_coords_are_in_bounds(tx in -0.3..0.3f64, ty in -0.3..0.3f64, tz in -0.3..0.3f64, ang in -0.2..0.2f64, d in 0.5..5.0f64) {
            let rel = RelativePose::new([tx, ty, tz], Quaternion::from_axis_angle([0.2, 1.0, -0.1], ang));
            let g = compute_warp_grid(&rel, &flat_depth(d), &k64()).unwrap();
            for (c, &v) in g.coords.iter().zip(&g.valid) {
                if v {
                    prop_assert!(c[0] >= 0.0 && c[0] <= 63.0 && c[1] >= 0.0 && c[1] <= 63.0);
                }
            }
            let coarse = downscale_grid(&g, 4).unwrap();
            for (c, &v) in coarse.coords.iter().zip(&coarse.valid) {
                if v {
                    prop_assert!(c[0] >= 0.0 && c[0] <= 15.0 && c[1] >= 0.0 && c[1] <= 15.0);
                }
            }
        }

        #[test]
        fn bilinear_weights_sum_to_one(x in 0.0..15.0f64, y in 0.0..15.0f64) {
            let g = WarpGrid { width: 1, height: 1, coords: vec![[x, y]], valid: vec![true] };
            let taps = bilinear_taps(&g, 16, 16);
            let s: f64 = taps.taps[0].iter().map(|t| t.1).sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
            prop_assert!(taps.taps[0].iter().all(|t| t.0 < 256));
        }
    }
}
