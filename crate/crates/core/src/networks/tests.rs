use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::{grad_check_many_sampled, Tape};
use crate::geometry::Quaternion;
use crate::losses::{localization_loss, multitask_loss, odometry_loss, segmentation_loss};

fn frame(size: usize, seed: u64) -> FrameInput {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rgb = Tensor::new(vec![size, size, 3], (0..size * size * 3).map(|_| rng.gen()).collect()).unwrap();
    let depth = Tensor::new(vec![size, size], (0..size * size).map(|_| rng.gen_range(0.5..2.0)).collect()).unwrap();
    FrameInput::from_rgb(&rgb, depth).unwrap()
}

fn labels(size: usize, classes: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..size * size).map(|_| rng.gen_range(0..classes)).collect()
}

#[test]
fn joint_forward_shapes() {
    let m = JointModel::new(ModelConfig::default()).unwrap();
    let k = CameraIntrinsics::square(64);
    let tape = Tape::new();
    let b = Binder::frozen(&tape, m.params());
    let f = frame(64, 1);
    let out = m
        .forward_task(Task::Joint, &b, &f, &k, &TemporalFeatureCache::default(), None, None)
        .unwrap();
    assert!(out.rel.is_none());
    assert_eq!(out.logits.unwrap().shape(), vec![1, 64, 64, 4]);
    let pose = out.pose.unwrap();
    assert_eq!(pose.translation.shape(), vec![3]);
    let q = pose.rotation.value();
    let n: f64 = q.data().iter().map(|v| v * v).sum();
    assert!((n - 1.0).abs() < 1e-12 && q.data()[0] >= 0.0);
    let cache = out.cache;
    assert_eq!(cache.pose_s5.as_ref().unwrap().shape(), &[1, 2, 2, 48]);
    assert_eq!(cache.seg_a.as_ref().unwrap().shape(), &[1, 8, 8, 24]);
    assert_eq!(cache.seg_b.as_ref().unwrap().shape(), &[1, 4, 4, 32]);

    let out2 = m
        .forward_task(Task::Joint, &b, &frame(64, 2), &k, &cache, None, None)
        .unwrap();
    assert!(out2.rel.is_some());
}

#[test]
fn alternative_warp_placement_runs() {
    let cfg = ModelConfig {
        warp_fusion_stages: WarpFusionStages::Four5,
        share_seg_encoder: false,
        ..ModelConfig::downsized()
    };
    let m = JointModel::new(cfg).unwrap();
    assert!(m.params().id("seg.s1.conv1.w").is_some());
    assert!(m.params().id("seg.s5.conv1.w").is_some());
    let k = CameraIntrinsics::square(16);
    let tape = Tape::new();
    let b = Binder::frozen(&tape, m.params());
    let o1 = m
        .forward_task(Task::Seg, &b, &frame(16, 1), &k, &TemporalFeatureCache::default(), None, None)
        .unwrap();
    assert_eq!(o1.cache.seg_a.as_ref().unwrap().shape(), &[1, 1, 1, 4]);
    let o2 = m
        .forward_task(Task::Seg, &b, &frame(16, 2), &k, &o1.cache, Some(&RelativePose::IDENTITY), None)
        .unwrap();
    assert_eq!(o2.logits.unwrap().shape(), vec![1, 16, 16, 4]);
}

#[test]
fn initialization_is_deterministic() {
    let a = JointModel::new(ModelConfig::default()).unwrap();
    let b = JointModel::new(ModelConfig::default()).unwrap();
    assert_eq!(a.params(), b.params());
    let c = JointModel::new(ModelConfig {
        seed: 1,
        ..ModelConfig::default()
    })
    .unwrap();
    assert_ne!(a.params(), c.params());
}

#[test]
fn no_fusion_layers_without_adaptive_fusion() {
    let cfg = ModelConfig {
        adaptive_fusion: false,
        ..ModelConfig::downsized()
    };
    let m = JointModel::new(cfg).unwrap();
    assert!(m.params().iter().all(|(n, _)| !n.starts_with("fuse.")));

    // The global pose no longer depends on the temporal cache.
    let k = CameraIntrinsics::square(16);
    let tape = Tape::new();
    let b = Binder::frozen(&tape, m.params());
    let f = frame(16, 3);
    let first = m
        .forward_task(Task::Joint, &b, &frame(16, 4), &k, &TemporalFeatureCache::default(), None, None)
        .unwrap();
    let with = m.forward_task(Task::Joint, &b, &f, &k, &first.cache, None, None).unwrap();
    let without = m
        .forward_task(Task::Joint, &b, &f, &k, &TemporalFeatureCache::default(), None, None)
        .unwrap();
    assert_eq!(
        with.pose.unwrap().translation.value(),
        without.pose.unwrap().translation.value()
    );
    assert_eq!(with.logits.unwrap().value(), without.logits.unwrap().value());
}

#[test]
fn temporal_cache_changes_pose_with_fusion() {
    let m = JointModel::new(ModelConfig::downsized()).unwrap();
    let k = CameraIntrinsics::square(16);
    let tape = Tape::new();
    let b = Binder::frozen(&tape, m.params());
    let f = frame(16, 3);
    let first = m
        .forward_task(Task::Loc, &b, &frame(16, 4), &k, &TemporalFeatureCache::default(), None, None)
        .unwrap();
    let with = m.forward_task(Task::Loc, &b, &f, &k, &first.cache, None, None).unwrap();
    let without = m
        .forward_task(Task::Loc, &b, &f, &k, &TemporalFeatureCache::default(), None, None)
        .unwrap();
    assert_ne!(
        with.pose.unwrap().translation.value(),
        without.pose.unwrap().translation.value()
    );
}

#[test]
fn mismatched_cache_is_an_error() {
    let m = JointModel::new(ModelConfig::downsized()).unwrap();
    let k = CameraIntrinsics::square(16);
    let tape = Tape::new();
    let b = Binder::frozen(&tape, m.params());
    let cache = TemporalFeatureCache {
        pose_s5: Some(Tensor::zeros(&[1, 2, 2, 4])),
        ..TemporalFeatureCache::default()
    };
    let e = m.forward_task(Task::Loc, &b, &frame(16, 1), &k, &cache, None, None);
    assert!(matches!(e, Err(Error::ShapeMismatch { .. })));
    let wrong = frame(32, 1);
    let e = m.forward_task(Task::Loc, &b, &wrong, &k, &TemporalFeatureCache::default(), None, None);
    assert!(matches!(e, Err(Error::ShapeMismatch { .. })));
}

#[test]
fn trunk_is_shared_between_streams() {
    let m = JointModel::new(ModelConfig::downsized()).unwrap();
    let k = CameraIntrinsics::square(16);
    let trunk = m.trunk_kernel();
    let u = UncertaintyWeights::zeros();
    for task in [Task::Loc, Task::Vo, Task::Seg] {
        let prev = TemporalFeatureCache {
            prev_image: Some(frame(16, 9).image),
            ..TemporalFeatureCache::default()
        };
        let tape = Tape::new();
        let b = Binder::new(&tape, m.params());
        let out = m.forward_task(task, &b, &frame(16, 1), &k, &prev, None, None).unwrap();
        let uv = u.bind(&tape);
        let loss = match task {
            Task::Loc => out.pose.unwrap().translation.sum().unwrap(),
            Task::Vo => odometry_loss(&out.rel.unwrap(), &RelativePose::new([0.1, 0.0, 0.0], Quaternion::IDENTITY), &uv).unwrap(),
            _ => segmentation_loss(out.logits.unwrap(), &labels(16, 4, 1)).unwrap(),
        };
        let grads = tape.backward(loss).unwrap();
        let g = grads.wrt(b.var(trunk));
        assert!(g.data().iter().any(|v| *v != 0.0), "{task}: no gradient reached the trunk");
    }
}

fn first_cache(m: &JointModel, f: &FrameInput) -> TemporalFeatureCache {
    let tape = Tape::new();
    let b = Binder::frozen(&tape, m.params());
    let k = CameraIntrinsics::square(16);
    m.forward_task(Task::Joint, &b, f, &k, &TemporalFeatureCache::default(), None, None)
        .unwrap()
        .cache
}

/// Two-frame joint loss of the downsized model as a function of every
/// parameter.
fn joint_objective<'t>(
    m: &JointModel,
    tape: &'t Tape,
    vars: &[Var<'t>],
    frames: &[FrameInput],
    cache: &TemporalFeatureCache,
) -> Result<Var<'t>> {
    let k = CameraIntrinsics::square(16);
    let b = Binder::with_vars(tape, m.params(), vars)?;
    let u = m.bind_uncertainty(&b);
    let gt = [
        Pose::new([0.0, 0.0, 0.0], Quaternion::IDENTITY),
        Pose::new([0.05, 0.0, 0.02], Quaternion::from_axis_angle([0.0, 1.0, 0.0], 0.1)),
    ];
    let rel = crate::geometry::relative_pose_target(&gt[0], &gt[1]);
    // The cache and warp grid are detached, so both are held fixed here.
    let o1 = m.forward_task(Task::Joint, &b, &frames[0], &k, &TemporalFeatureCache::default(), None, None)?;
    let o2 = m.forward_task(Task::Joint, &b, &frames[1], &k, cache, Some(&rel.in_previous_camera(gt[0].rotation)), None)?;
    let l_loc = localization_loss(o1.pose.as_ref().unwrap(), o2.pose.as_ref().unwrap(), &gt[1], &rel, &u)?;
    let l_vo = odometry_loss(o2.rel.as_ref().unwrap(), &rel, &u)?;
    let l_seg = segmentation_loss(o2.logits.unwrap(), &labels(16, 4, 5))?;
    multitask_loss(l_loc, l_vo, l_seg, &u)
}

#[test]
fn downsized_joint_gradients_match_finite_differences() {
    let m = JointModel::new(ModelConfig::downsized()).unwrap();
    let frames = [frame(16, 11), frame(16, 12)];
    let cache = first_cache(&m, &frames[0]);
    let xs: Vec<Tensor> = m.params().iter().map(|(_, t)| t.clone()).collect();
    let report = grad_check_many_sampled(|tape, vars| joint_objective(&m, tape, vars, &frames, &cache), &xs, 2, 7).unwrap();
    assert!(report.pass, "max relative error {}", report.max_rel_err);
}

#[test]
fn one_descent_step_reduces_joint_loss() {
    let mut m = JointModel::new(ModelConfig::downsized()).unwrap();
    let frames = [frame(16, 11), frame(16, 12)];
    let cache = first_cache(&m, &frames[0]);
    let eval = |m: &JointModel| -> (f64, Vec<Tensor>) {
        let tape = Tape::new();
        let xs: Vec<Var> = m.params().iter().map(|(_, t)| tape.param(t.clone())).collect();
        let loss = joint_objective(m, &tape, &xs, &frames, &cache).unwrap();
        let v = loss.item();
        let g = tape.backward(loss).unwrap();
        (v, xs.iter().map(|x| g.wrt(*x)).collect())
    };
    let (before, grads) = eval(&m);
    let ids: Vec<ParamId> = m.params().ids().collect();
    for (id, g) in ids.into_iter().zip(grads) {
        let p = m.params_mut().get_mut(id);
        for (v, d) in p.data_mut().iter_mut().zip(g.data()) {
            *v -= 1e-4 * d;
        }
    }
    let (after, _) = eval(&m);
    assert!(after < before, "{after} >= {before}");
}

#[test]
fn checkpoint_round_trip_and_merge() {
    let dir = tempfile::tempdir().unwrap();
    let m = JointModel::new(ModelConfig::downsized()).unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&path, &Checkpoint::from_model(Task::Seg, &m)).unwrap();
    let c = load_checkpoint(&path).unwrap();
    assert_eq!(c.task().unwrap(), Task::Seg);
    assert_eq!(c.to_model().unwrap().params(), m.params());

    let mut bytes = std::fs::read(&path).unwrap();
    bytes.truncate(bytes.len() - 3);
    assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Checkpoint(_))));
    assert!(matches!(Checkpoint::from_bytes(b"NOTACKPT"), Err(Error::Checkpoint(_))));

    let mk = |task, v: f64| {
        let mut m = JointModel::new(ModelConfig::downsized()).unwrap();
        let ids: Vec<ParamId> = m.params().ids().collect();
        for id in ids {
            m.params_mut().get_mut(id).data_mut().fill(v);
        }
        Checkpoint::from_model(task, &m)
    };
    let (loc, vo, seg) = (mk(Task::Loc, 1.0), mk(Task::Vo, 2.0), mk(Task::Seg, 3.0));
    let joint = merge_for_joint(&loc, &vo, &seg).unwrap();
    let p = joint.params();
    assert_eq!(p.by_name("trunk.s1.conv1.w").unwrap().data()[0], 1.0);
    assert_eq!(p.by_name("pose.s4.conv1.w").unwrap().data()[0], 1.0);
    assert_eq!(p.by_name("u.s_x_rel").unwrap().item(), 1.0);
    assert_eq!(p.by_name("odo.prev.s1.conv1.w").unwrap().data()[0], 2.0);
    assert_eq!(p.by_name("u.s_q_vo").unwrap().item(), 2.0);
    assert_eq!(p.by_name("dec.up2.w").unwrap().data()[0], 3.0);
    assert_eq!(p.by_name("fuse.warp_a.w_a").unwrap().data()[0], 3.0);
    assert_eq!(p.by_name("u.s_seg").unwrap().item(), 0.0);
    let fresh = JointModel::new(ModelConfig::downsized()).unwrap();
    let (sem, fresh_sem) = (p.by_name("fuse.sem.w").unwrap(), fresh.params().by_name("fuse.sem.w").unwrap());
    let c = sem.shape()[3];
    assert_eq!(sem.data()[0], 1.0);
    assert_eq!(sem.data()[1], 0.0);
    let k = c * c;
    assert_eq!(sem.data()[k], 0.1 * fresh_sem.data()[k]);

    assert!(merge_for_joint(&vo, &loc, &seg).is_err());
}

#[test]
fn config_pairs_round_trip() {
    let cfg = ModelConfig {
        warp_fusion_stages: WarpFusionStages::Four5,
        adaptive_fusion: false,
        dropout: 0.1,
        seed: 42,
        ..ModelConfig::default()
    };
    let pairs = cfg.to_pairs();
    let back = ModelConfig::from_pairs(pairs.iter().map(|(k, v)| (k.as_str(), v.as_str()))).unwrap();
    assert_eq!(back, cfg);
    assert!(ModelConfig::from_pairs([("input_size", "60")]).is_err());
    assert!(ModelConfig::from_pairs([("bogus", "1")]).is_err());
}
