use mtloc::autodiff::Tensor;
use mtloc::dataio::{RunConfig, SplitData};
use mtloc::geometry::{CameraIntrinsics, Pose, Quaternion};
use mtloc::networks::{Binder, Checkpoint, JointModel, ModelConfig, Task};
use mtloc::synthworld::{generate_scene, generate_trajectory, render_frame, CLASS_NAMES};
use mtloc::trainer::*;

fn small_config() -> RunConfig {
    RunConfig {
        model: ModelConfig::downsized(),
        ..RunConfig::default()
    }
}

fn synthetic(loops: usize, per_loop: usize, seed: u64) -> SplitData {
    let k = CameraIntrinsics::square(16);
    let scene = generate_scene(seed);
    let traj = generate_trajectory(&scene, loops, per_loop, seed).unwrap();
    let seqs = (0..loops)
        .map(|l| {
            let frames = traj.loop_poses(l).iter().map(|p| render_frame(&scene, p, &k)).collect();
            (format!("seq-{l:02}"), frames)
        })
        .collect();
    SplitData::from_frames(k, CLASS_NAMES.map(String::from).to_vec(), seqs).unwrap()
}

#[test]
fn segments_cover_every_pair_once() {
    let data = synthetic(2, 10, 1);
    let segs = segments(&data, 4);
    let mut pairs = 0;
    for s in &segs {
        assert!(s.len >= 2 && s.len <= 5);
        pairs += s.len - 1;
    }
    assert_eq!(pairs, 2 * 9);
    assert_eq!(segs[0], Segment { sequence: 0, start: 0, len: 5 });
    assert!(segs.iter().all(|s| s.start + s.len <= 10));
}

#[test]
fn seg_training_reduces_loss() {
    let data = synthetic(1, 20, 3);
    let cfg = small_config();
    let init = JointModel::new(cfg.model.clone()).unwrap();
    let (before, _) = evaluate_objective(&init, Task::Seg, &data, cfg.batch, None).unwrap();
    let out = train_single_task(Task::Seg, &data, &cfg, 50, None).unwrap();
    assert_eq!(out.trace.rows.len(), 50);
    let (after, _) = evaluate_objective(&out.model, Task::Seg, &data, cfg.batch, None).unwrap();
    assert!(after < before, "{after} >= {before}");
}

#[test]
fn zero_steps_returns_the_initialization() {
    let data = synthetic(1, 6, 2);
    let cfg = small_config();
    let out = train_single_task(Task::Loc, &data, &cfg, 0, None).unwrap();
    assert!(out.trace.rows.is_empty());
    let fresh = Checkpoint::from_model(Task::Loc, &JointModel::new(cfg.model.clone()).unwrap());
    assert_eq!(out.checkpoint().to_bytes(), fresh.to_bytes());

    let seg = train_single_task(Task::Seg, &data, &cfg, 3, None).unwrap().checkpoint();
    let vo = train_single_task(Task::Vo, &data, &cfg, 0, Some(&seg)).unwrap();
    for (name, t) in vo.model.params().iter() {
        assert_eq!(Some(t), seg.tensor(name), "{name}");
    }
}

#[test]
fn continued_single_task_training_touches_only_owned_parameters() {
    let data = synthetic(1, 10, 4);
    let cfg = small_config();
    let seg = train_single_task(Task::Seg, &data, &cfg, 3, None).unwrap().checkpoint();
    let vo = train_single_task(Task::Vo, &data, &cfg, 5, Some(&seg)).unwrap();
    let mut changed = 0;
    for (name, t) in vo.model.params().iter() {
        let before = seg.tensor(name).unwrap();
        if mtloc::networks::joint_owner(name) == Some(Task::Vo) {
            changed += usize::from(t != before);
        } else {
            assert_eq!(t, before, "{name} changed");
        }
    }
    assert!(changed > 0);
}

#[test]
fn loc_loss_at_ground_truth_head_is_the_floor() {
    // Both frames share one pose, so the head can output it exactly.
    let gt = Pose::new([1.0, -2.0, 1.5], Quaternion::from_axis_angle([0.0, 0.0, 1.0], 0.3));
    let k = CameraIntrinsics::square(16);
    let scene = generate_scene(0);
    let f = render_frame(&scene, &gt, &k);
    let data = SplitData::from_frames(
        k,
        CLASS_NAMES.map(String::from).to_vec(),
        vec![("seq".into(), vec![f.clone(), f])],
    )
    .unwrap();
    let mut m = JointModel::new(ModelConfig::downsized()).unwrap();
    let fc = m.config().fc_dim;
    let p = m.params_mut();
    p.set("pose.trans.w", Tensor::zeros(&[fc, 3])).unwrap();
    p.set("pose.trans.b", Tensor::from_slice(&gt.translation)).unwrap();
    p.set("pose.rot.w", Tensor::zeros(&[fc, 4])).unwrap();
    p.set("pose.rot.b", Tensor::from_slice(&gt.rotation.to_array())).unwrap();
    let tape = mtloc::autodiff::Tape::new();
    let b = Binder::frozen(&tape, m.params());
    let obj = segment_objective(&m, Task::Loc, &b, &data.sequences[0].frames, &k, None, false).unwrap();
    let u = m.uncertainty_values();
    let floor = u.s_x + u.s_q + u.s_x_rel + u.s_q_rel;
    assert!((obj.total.item() - floor).abs() < 1e-12, "{} vs {floor}", obj.total.item());
}

#[test]
fn training_is_deterministic() {
    let data = synthetic(1, 12, 5);
    let cfg = small_config();
    let a = train_single_task(Task::Loc, &data, &cfg, 6, None).unwrap();
    let b = train_single_task(Task::Loc, &data, &cfg, 6, None).unwrap();
    assert_eq!(a.trace, b.trace);
    assert_eq!(a.checkpoint().to_bytes(), b.checkpoint().to_bytes());
    let other = RunConfig { seed: 1, ..cfg };
    let c = train_single_task(Task::Loc, &data, &other, 6, None).unwrap();
    assert_ne!(a.trace, c.trace);
}

#[test]
fn joint_training_from_pretrained_stages() {
    let data = synthetic(3, 100, 7);
    let cfg = small_config();
    let seg = train_single_task(Task::Seg, &data, &cfg, 20, None).unwrap().checkpoint();
    let vo = train_single_task(Task::Vo, &data, &cfg, 20, Some(&seg)).unwrap().checkpoint();
    let loc = train_single_task(Task::Loc, &data, &cfg, 20, Some(&seg)).unwrap().checkpoint();
    let init = mtloc::networks::merge_for_joint(&loc, &vo, &seg).unwrap();
    let (_, before) = evaluate_objective(&init, Task::Joint, &data, cfg.batch, None).unwrap();
    let joint_cfg = RunConfig { lr_joint: 1e-3, ..cfg };
    let out = train_joint(&data, JointInit::Pretrained { loc: &loc, vo: &vo, seg: &seg }, &joint_cfg, 200).unwrap();
    let (_, after) = evaluate_objective(&out.model, Task::Joint, &data, cfg.batch, None).unwrap();
    for (name, b, a) in [("loc", before.loc, after.loc), ("vo", before.vo, after.vo), ("seg", before.seg, after.seg)] {
        let (b, a) = (b.unwrap(), a.unwrap());
        assert!(a < b, "{name}: {a} >= {b}");
    }
    let csv = out.trace.to_csv();
    assert_eq!(csv.lines().count(), 201);
}

#[test]
fn task_weight_moves_to_log_of_its_loss() {
    let data = synthetic(1, 20, 6);
    let cfg = RunConfig {
        warm_start_task_weights: false,
        ..small_config()
    };
    let model = JointModel::new(cfg.model.clone()).unwrap();
    let (_, l) = evaluate_objective(&model, Task::Joint, &data, cfg.batch, None).unwrap();
    let target = l.seg.unwrap().ln();
    let only_s_seg = |n: &str| n == "u.s_seg";
    let out = train_stage(Task::Joint, model, &data, &cfg, 300, 0.05, Some(&only_s_seg)).unwrap();
    let s: Vec<f64> = out.trace.rows.iter().map(|r| r.uncertainty[8]).collect();
    let start = (s[0] - target).abs();
    let end = (out.model.uncertainty_values().s_seg - target).abs();
    assert!(end < 0.1 * start, "{start} -> {end} (target {target})");
    // Movement is monotone towards the optimum while far from it.
    assert!(s.windows(2).take(50).all(|w| w[1] > w[0]));
}

#[test]
fn written_outputs_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = synthetic(1, 6, 8);
    let out = train_single_task(Task::Seg, &data, &small_config(), 2, None).unwrap();
    let (ckpt, trace) = out.write(dir.path()).unwrap();
    let back = mtloc::networks::load_checkpoint(&ckpt).unwrap();
    assert_eq!(back.to_bytes(), out.checkpoint().to_bytes());
    let text = std::fs::read_to_string(&trace).unwrap();
    assert_eq!(LossTrace::parse_csv(&text, &trace).unwrap(), out.trace);
}
