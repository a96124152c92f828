//! The full gradient self-check: every differentiable op, the warp sampler,
//! fusion, every loss and a downsized joint model against central
//! differences.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{
    concat_channels, grad_check_many, grad_check_many_sampled, GradReport, Padding, Tape, Tensor, Var,
    GRAD_CHECK_TOL,
};
use crate::error::Result;
use crate::fusion::{adaptive_fuse, FusionVars};
use crate::geometry::{relative_pose_target, CameraIntrinsics, Pose, Quaternion};
use crate::losses::{
    euclidean_pose_loss, localization_loss, multitask_loss, normalize_quaternion, odometry_loss,
    pixel_class_probability, relative_motion_loss, segmentation_loss, PoseVars, UncertaintyVars,
};
use crate::networks::{Binder, FrameInput, JointModel, ModelConfig, Task, TemporalFeatureCache};
use crate::warp::{bilinear_sample, compute_warp_grid, warp_features, WarpGrid};

#[derive(Clone, Debug, PartialEq)]
pub struct CaseResult {
    pub name: String,
    pub report: GradReport,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupResult {
    pub group: &'static str,
    pub cases: Vec<CaseResult>,
}

impl GroupResult {
    pub fn max_rel_err(&self) -> f64 {
        self.cases.iter().map(|c| c.report.max_rel_err).fold(0.0, f64::max)
    }

    pub fn pass(&self) -> bool {
        self.cases.iter().all(|c| c.report.pass)
    }

    pub fn failures(&self) -> Vec<&str> {
        self.cases.iter().filter(|c| !c.report.pass).map(|c| c.name.as_str()).collect()
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct SuiteOptions {
    /// Adds an op whose backward pass is deliberately wrong.
    pub inject_wrong_backward: bool,
}

type Case = (String, Result<GradReport>);

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("shape matches")
}

/// Values in `[0.2, 1]` with random signs, away from kinks at 0.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let mut t = rand_tensor(rng, shape, 0.2, 1.0);
    for v in t.data_mut() {
        if rng.gen::<bool>() {
            *v = -*v;
        }
    }
    t
}

/// Reduces any var to a scalar through fixed random weights.
fn probe<'t>(v: Var<'t>, seed: u64) -> Result<Var<'t>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = rand_tensor(&mut rng, &v.shape(), -1.0, 1.0);
    v.mul(v.tape().constant(w))?.sum()
}

fn case<F>(name: &str, f: F, xs: Vec<Tensor>) -> Case
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    (name.to_string(), grad_check_many(f, &xs))
}

fn primitive_cases(rng: &mut ChaCha8Rng) -> Vec<Case> {
    let s = [2, 3];
    let a = away_from_zero(rng, &s);
    let b = away_from_zero(rng, &s);
    let pos = rand_tensor(rng, &s, 0.5, 2.0);
    let img = away_from_zero(rng, &[1, 6, 6, 2]);
    let img4 = away_from_zero(rng, &[1, 4, 4, 3]);
    let k3 = rand_tensor(rng, &[3, 3, 2, 3], -1.0, 1.0);
    let kt = rand_tensor(rng, &[4, 4, 2, 3], -1.0, 1.0);
    let labels: Vec<usize> = (0..16).map(|_| rng.gen_range(0..3)).collect();
    let quat = || away_from_zero(&mut ChaCha8Rng::seed_from_u64(3), &[4]);
    let chans = rand_tensor(rng, &[3], 0.5, 1.5);
    vec![
        case("add", |_, v| probe(v[0].add(v[1])?, 1), vec![a.clone(), b.clone()]),
        case("sub", |_, v| probe(v[0].sub(v[1])?, 1), vec![a.clone(), b.clone()]),
        case("mul", |_, v| probe(v[0].mul(v[1])?, 1), vec![a.clone(), b.clone()]),
        case("scale", |_, v| probe(v[0].scale(-1.7)?, 1), vec![a.clone()]),
        case("neg", |_, v| probe(v[0].neg()?, 1), vec![a.clone()]),
        case("add_scalar", |_, v| probe(v[0].add_scalar(0.3)?, 1), vec![a.clone()]),
        case("relu", |_, v| probe(v[0].relu()?, 1), vec![a.clone()]),
        case("elu", |_, v| probe(v[0].elu()?, 1), vec![a.clone()]),
        case("exp", |_, v| probe(v[0].exp()?, 1), vec![a.clone()]),
        case("log", |_, v| probe(v[0].log()?, 1), vec![pos.clone()]),
        case("recip", |_, v| probe(v[0].recip()?, 1), vec![pos.clone()]),
        case("map_custom", |_, v| probe(v[0].map_custom(f64::sin, f64::cos)?, 1), vec![a.clone()]),
        case("reshape", |_, v| probe(v[0].reshape(&[3, 2])?, 1), vec![a.clone()]),
        case("sum", |_, v| v[0].sum()?.scale(1.3), vec![a.clone()]),
        case("mean", |_, v| v[0].mean()?.scale(1.3), vec![a.clone()]),
        case("l2_norm", |_, v| v[0].l2_norm(), vec![a.clone()]),
        case("l2_norm_eps", |_, v| v[0].l2_norm_eps(1e-12), vec![a.clone()]),
        case(
            "matmul",
            |_, v| probe(v[0].matmul(v[1])?, 1),
            vec![a.clone(), away_from_zero(rng, &[3, 4])],
        ),
        case("conv2d_same", |_, v| probe(v[0].conv2d(v[1], 1, Padding::Same)?, 2), vec![img.clone(), k3.clone()]),
        case("conv2d_stride2", |_, v| probe(v[0].conv2d(v[1], 2, Padding::Same)?, 2), vec![img.clone(), k3.clone()]),
        case("conv2d_valid", |_, v| probe(v[0].conv2d(v[1], 1, Padding::Valid)?, 2), vec![img.clone(), k3.clone()]),
        case(
            "conv_transpose2d",
            |_, v| probe(v[0].conv_transpose2d(v[1], 2, 1)?, 2),
            vec![img4.clone(), kt.clone()],
        ),
        case("avg_pool2d", |_, v| probe(v[0].avg_pool2d(2)?, 3), vec![img.clone()]),
        case("global_avg_pool", |_, v| probe(v[0].global_avg_pool()?, 3), vec![img.clone()]),
        case("softmax_channels", |_, v| probe(v[0].softmax_channels()?, 3), vec![img4.clone()]),
        case("cross_entropy_sum", move |_, v| v[0].cross_entropy_sum(&labels), vec![img4.clone()]),
        case("slice_channels", |_, v| probe(v[0].slice_channels(1, 2)?, 3), vec![img4.clone()]),
        case("add_bias", |_, v| probe(v[0].add_bias(v[1])?, 3), vec![img4.clone(), chans.clone()]),
        case("scale_channels", |_, v| probe(v[0].scale_channels(v[1])?, 3), vec![img4.clone(), chans.clone()]),
        case(
            "scale_by",
            |_, v| probe(v[0].scale_by(v[1])?, 3),
            vec![img4.clone(), Tensor::from_slice(&[0.7])],
        ),
        case("quat_mul", |_, v| probe(v[0].quat_mul(v[1])?, 4), vec![quat(), away_from_zero(rng, &[4])]),
        case(
            "concat_channels",
            |_, v| probe(concat_channels(&[v[0], v[1]])?, 5),
            vec![img4.clone(), away_from_zero(rng, &[1, 4, 4, 2])],
        ),
    ]
}

fn textured_depth(rng: &mut ChaCha8Rng, size: usize) -> Tensor {
    rand_tensor(rng, &[size, size], 1.5, 3.0)
}

fn warp_cases(rng: &mut ChaCha8Rng) -> Vec<Case> {
    let k = CameraIntrinsics::square(8);
    let depth = textured_depth(rng, 8);
    let a = Pose::new([0.0, 0.0, 0.0], Quaternion::IDENTITY);
    let b = Pose::new([0.07, -0.03, 0.05], Quaternion::from_axis_angle([0.2, 1.0, 0.1], 0.06));
    let rel = relative_pose_target(&a, &b).in_previous_camera(a.rotation);
    let grid: Rc<WarpGrid> = Rc::new(compute_warp_grid(&rel, &depth, &k).expect("valid warp"));
    let src = rand_tensor(rng, &[1, 8, 8, 3], 0.0, 1.0);
    let small = rand_tensor(rng, &[1, 4, 4, 2], 0.0, 1.0);
    let g = grid.clone();
    vec![
        case("bilinear_sample", move |_, v| probe(bilinear_sample(v[0], &g)?, 6), vec![src]),
        case(
            "warp_features_half_res",
            move |_, v| probe(warp_features(v[0], &rel, &depth, &k, 2)?, 6),
            vec![small],
        ),
    ]
}

fn fusion_cases(rng: &mut ChaCha8Rng) -> Vec<Case> {
    let za = away_from_zero(rng, &[1, 3, 3, 2]);
    let zb = away_from_zero(rng, &[1, 3, 3, 3]);
    let params = vec![
        za,
        zb,
        rand_tensor(rng, &[2], 0.5, 1.5),
        rand_tensor(rng, &[3], 0.5, 1.5),
        rand_tensor(rng, &[1, 1, 5, 4], -1.0, 1.0),
        rand_tensor(rng, &[4], 0.1, 0.3),
    ];
    vec![case(
        "adaptive_fuse",
        |_, v| {
            let p = FusionVars {
                w_a: v[2],
                w_b: v[3],
                kernel: v[4],
                bias: v[5],
            };
            probe(adaptive_fuse(v[0], v[1], &p)?, 7)
        },
        params,
    )]
}

fn uvars<'t>(v: &[Var<'t>]) -> UncertaintyVars<'t> {
    UncertaintyVars::from_array(std::array::from_fn(|i| v[i]))
}

fn raw_pose<'t>(t: Var<'t>, q: Var<'t>) -> Result<PoseVars<'t>> {
    Ok(PoseVars {
        translation: t,
        rotation: normalize_quaternion(q)?,
    })
}

fn loss_cases(rng: &mut ChaCha8Rng) -> Vec<Case> {
    let gt_prev = Pose::new([0.3, -0.2, 1.5], Quaternion::from_axis_angle([0.0, 0.0, 1.0], 0.4));
    let gt = Pose::new([0.5, -0.1, 1.5], Quaternion::from_axis_angle([0.1, 0.0, 1.0], 0.5));
    let gt_rel = relative_pose_target(&gt_prev, &gt);
    let s: Vec<Tensor> = (0..9).map(|_| Tensor::scalar(rng.gen_range(-0.5..0.5))).collect();
    // Predictions nudged away from the targets to avoid the norm kink.
    let pred = |p: &Pose, rng: &mut ChaCha8Rng| {
        let t = p.translation.map(|v| v + rng.gen_range(0.05..0.2));
        let q = p.rotation.to_array().map(|v| v + rng.gen_range(0.05..0.15));
        (Tensor::from_slice(&t), Tensor::from_slice(&q))
    };
    let (tp, qp) = pred(&gt_prev, rng);
    let (tc, qc) = pred(&gt, rng);
    let with_s = |mut xs: Vec<Tensor>| {
        xs.extend(s.iter().cloned());
        xs
    };
    let scores = away_from_zero(rng, &[1, 3, 3, 4]);
    let labels: Vec<usize> = (0..9).map(|_| rng.gen_range(0..4)).collect();
    let comps: Vec<Tensor> = (0..3).map(|_| Tensor::scalar(rng.gen_range(0.5..3.0))).collect();
    vec![
        case(
            "euclidean_pose_loss",
            move |_, v| euclidean_pose_loss(&raw_pose(v[0], v[1])?, &gt, &uvars(&v[2..])),
            with_s(vec![tc.clone(), qc.clone()]),
        ),
        case(
            "relative_motion_loss",
            move |_, v| relative_motion_loss(&raw_pose(v[0], v[1])?, &raw_pose(v[2], v[3])?, &gt_rel, &uvars(&v[4..])),
            with_s(vec![tp.clone(), qp.clone(), tc.clone(), qc.clone()]),
        ),
        case(
            "localization_loss",
            move |_, v| {
                localization_loss(&raw_pose(v[0], v[1])?, &raw_pose(v[2], v[3])?, &gt, &gt_rel, &uvars(&v[4..]))
            },
            with_s(vec![tp, qp, tc.clone(), qc.clone()]),
        ),
        case(
            "odometry_loss",
            move |_, v| odometry_loss(&raw_pose(v[0], v[1])?, &gt_rel, &uvars(&v[2..])),
            with_s(vec![tc, qc]),
        ),
        case(
            "pixel_class_probability",
            |_, v| probe(pixel_class_probability(v[0])?, 8),
            vec![scores.clone()],
        ),
        case("segmentation_loss", move |_, v| segmentation_loss(v[0], &labels), vec![scores]),
        case(
            "multitask_loss",
            |_, v| multitask_loss(v[0], v[1], v[2], &uvars(&v[3..])),
            with_s(comps),
        ),
    ]
}

fn joint_frame(size: usize, seed: u64) -> FrameInput {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rgb = rand_tensor(&mut rng, &[size, size, 3], 0.0, 1.0);
    let depth = rand_tensor(&mut rng, &[size, size], 0.5, 2.0);
    FrameInput::from_rgb(&rgb, depth).expect("valid frame")
}

/// Two-frame multitask loss of the downsized model over every parameter.
/// The temporal cache and warp grid are held fixed, since neither is
/// differentiated.
fn joint_case() -> Case {
    let name = "downsized_joint_model".to_string();
    let run = || -> Result<GradReport> {
        let m = JointModel::new(ModelConfig::downsized())?;
        let size = m.config().input_size;
        let k = CameraIntrinsics::square(size);
        let frames = [joint_frame(size, 11), joint_frame(size, 12)];
        let gt = [
            Pose::IDENTITY,
            Pose::new([0.05, 0.0, 0.02], Quaternion::from_axis_angle([0.0, 1.0, 0.0], 0.1)),
        ];
        let rel = relative_pose_target(&gt[0], &gt[1]);
        let warp = rel.in_previous_camera(gt[0].rotation);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let labels: Vec<usize> = (0..size * size).map(|_| rng.gen_range(0..m.config().num_classes)).collect();
        let cache = {
            let tape = Tape::new();
            let b = Binder::frozen(&tape, m.params());
            m.forward_task(Task::Joint, &b, &frames[0], &k, &TemporalFeatureCache::default(), None, None)?
                .cache
        };
        let xs: Vec<Tensor> = m.params().iter().map(|(_, t)| t.clone()).collect();
        grad_check_many_sampled(
            |tape, vars| {
                let b = Binder::with_vars(tape, m.params(), vars)?;
                let u = m.bind_uncertainty(&b);
                let empty = TemporalFeatureCache::default();
                let o1 = m.forward_task(Task::Joint, &b, &frames[0], &k, &empty, None, None)?;
                let o2 = m.forward_task(Task::Joint, &b, &frames[1], &k, &cache, Some(&warp), None)?;
                let l_loc = localization_loss(o1.pose.as_ref().unwrap(), o2.pose.as_ref().unwrap(), &gt[1], &rel, &u)?;
                let l_vo = odometry_loss(o2.rel.as_ref().unwrap(), &rel, &u)?;
                let l_seg = segmentation_loss(o2.logits.unwrap(), &labels)?;
                multitask_loss(l_loc, l_vo, l_seg, &u)
            },
            &xs,
            2,
            7,
        )
    };
    (name, run())
}

/// `sum(x * detach(x))`: the tape sees half of the true gradient.
fn wrong_backward_case(rng: &mut ChaCha8Rng) -> Case {
    case("wrong_backward_double", |_, v| v[0].mul(v[0].detach())?.sum(), vec![away_from_zero(rng, &[5])])
}

fn collect(group: &'static str, cases: Vec<Case>) -> Result<GroupResult> {
    let cases = cases
        .into_iter()
        .map(|(name, r)| r.map(|report| CaseResult { name, report }))
        .collect::<Result<Vec<_>>>()?;
    Ok(GroupResult { group, cases })
}

/// Runs every group. Each case passes when its maximum relative error is
/// below the suite tolerance.
pub fn run_suite(opts: SuiteOptions) -> Result<Vec<GroupResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut groups = vec![
        collect("primitives", primitive_cases(&mut rng))?,
        collect("warp", warp_cases(&mut rng))?,
        collect("fusion", fusion_cases(&mut rng))?,
        collect("losses", loss_cases(&mut rng))?,
        collect("joint", vec![joint_case()])?,
    ];
    if opts.inject_wrong_backward {
        groups.push(collect("injected", vec![wrong_backward_case(&mut rng)])?);
    }
    Ok(groups)
}

pub fn suite_tolerance() -> f64 {
    GRAD_CHECK_TOL
}
