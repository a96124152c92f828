//! Multi-stage optimization: single-task pretraining, then joint fine-tuning.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Tensor, Var};
use crate::dataio::{LoadedFrame, RunConfig, SplitData};
use crate::error::{Error, Result};
use crate::fsutil;
use crate::geometry::{relative_pose_target, CameraIntrinsics};
use crate::losses::{
    localization_loss, multitask_loss, odometry_loss, segmentation_loss, PoseVars, UNCERTAINTY_NAMES,
};
use crate::networks::{
    joint_owner, merge_for_joint, Binder, Checkpoint, FrameInput, JointModel, ParamId, ParamStore, Task,
    TemporalFeatureCache,
};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const TRACE_FILE: &str = "loss_trace.csv";

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(store: &ParamStore, lr: f64, beta1: f64, beta2: f64, eps: f64) -> AdamState {
        let zeros: Vec<Tensor> = store.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        AdamState {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn from_config(store: &ParamStore, config: &RunConfig, lr: f64) -> AdamState {
        AdamState::new(store, lr, config.adam_beta1, config.adam_beta2, config.adam_eps)
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// First and second moments of one parameter.
    pub fn moments(&self, id: ParamId) -> (&Tensor, &Tensor) {
        (&self.m[id.index()], &self.v[id.index()])
    }

    /// Updates every parameter that has a gradient. Nothing changes if any
    /// gradient is non-finite.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor)]) -> Result<()> {
        check_finite(store, grads)?;
        for (id, g) in grads {
            if g.shape() != self.m[id.index()].shape() {
                return Err(Error::ShapeMismatch {
                    op: "adam step",
                    lhs: g.shape().to_vec(),
                    rhs: self.m[id.index()].shape().to_vec(),
                });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (id, g) in grads {
            let i = id.index();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let p = store.get_mut(*id).data_mut();
            for (j, &gj) in g.data().iter().enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                p[j] -= self.lr * (m[j] / bc1) / ((v[j] / bc2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

fn check_finite(store: &ParamStore, grads: &[(ParamId, Tensor)]) -> Result<()> {
    match grads.iter().find(|(_, g)| !g.is_finite()) {
        Some((id, _)) => Err(Error::NonFiniteGradient(store.name(*id).to_string())),
        None => Ok(()),
    }
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [(ParamId, Tensor)], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|(_, g)| g.data().iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for (_, g) in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

/// A run of consecutive frames of one sequence. The temporal cache starts
/// empty at `start`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub sequence: usize,
    pub start: usize,
    /// Frames, at least 2.
    pub len: usize,
}

/// Splits every sequence into segments of `batch` consecutive frame pairs.
/// Neighbouring segments share one frame so every pair is covered once.
pub fn segments(data: &SplitData, batch: usize) -> Vec<Segment> {
    let batch = batch.max(1);
    let mut out = Vec::new();
    for (si, seq) in data.sequences.iter().enumerate() {
        let n = seq.frames.len();
        let mut start = 0;
        while start + 1 < n {
            out.push(Segment {
                sequence: si,
                start,
                len: (batch + 1).min(n - start),
            });
            start += batch;
        }
    }
    out
}

/// Mean per-pair task losses of one step. Absent terms were not computed.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct TaskLosses {
    pub loc: Option<f64>,
    pub vo: Option<f64>,
    pub seg: Option<f64>,
}

pub struct Objective<'t> {
    pub total: Var<'t>,
    pub loc: Option<Var<'t>>,
    pub vo: Option<Var<'t>>,
    pub seg: Option<Var<'t>>,
}

impl Objective<'_> {
    pub fn losses(&self) -> TaskLosses {
        TaskLosses {
            loc: self.loc.map(|v| v.item()),
            vo: self.vo.map(|v| v.item()),
            seg: self.seg.map(|v| v.item()),
        }
    }
}

fn mean<'t>(terms: Vec<Var<'t>>) -> Result<Option<Var<'t>>> {
    let n = terms.len();
    let mut it = terms.into_iter();
    let Some(first) = it.next() else { return Ok(None) };
    let sum = it.try_fold(first, |acc, v| acc.add(v))?;
    Ok(Some(sum.scale(1.0 / n as f64)?))
}

/// Cropped and rescaled copy of a frame for segmentation augmentation.
/// Labels use nearest-neighbour lookup, colour is bilinear.
fn random_crop(f: &LoadedFrame, rng: &mut ChaCha8Rng) -> Result<LoadedFrame> {
    let (h, w) = (f.input.depth.shape()[0], f.input.depth.shape()[1]);
    let side = rng.gen_range((3 * h.min(w) / 4).max(1)..=h.min(w));
    let x0 = rng.gen_range(0..=w - side) as f64;
    let y0 = rng.gen_range(0..=h - side) as f64;
    let (sx, sy) = (side as f64 / w as f64, side as f64 / h as f64);
    let img = f.input.image.data();
    let mut rgb = vec![0.0; h * w * 3];
    let mut depth = vec![0.0; h * w];
    let mut labels = vec![0; h * w];
    for v in 0..h {
        for u in 0..w {
            let x = (x0 + (u as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let y = (y0 + (v as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
            let (xi, yi) = (x.floor() as usize, y.floor() as usize);
            let (x1, y1) = ((xi + 1).min(w - 1), (yi + 1).min(h - 1));
            let (ax, ay) = (x - xi as f64, y - yi as f64);
            let o = (v * w + u) * 3;
            for c in 0..3 {
                let at = |yy: usize, xx: usize| img[(yy * w + xx) * 3 + c];
                rgb[o + c] = (1.0 - ay) * ((1.0 - ax) * at(yi, xi) + ax * at(yi, x1))
                    + ay * ((1.0 - ax) * at(y1, xi) + ax * at(y1, x1))
                    + 0.5;
            }
            let near = y.round() as usize * w + x.round() as usize;
            depth[v * w + u] = f.input.depth.data()[near];
            labels[v * w + u] = f.labels[near];
        }
    }
    Ok(LoadedFrame {
        input: FrameInput::from_rgb(&Tensor::new(vec![h, w, 3], rgb)?, Tensor::new(vec![h, w], depth)?)?,
        labels,
        pose: f.pose,
    })
}

/// Loss of `task` over consecutive `frames`, averaged over frame pairs.
///
/// The cache starts empty at the first frame. Segmentation pretraining warps
/// with the ground-truth motion; the joint task warps with its own odometry.
/// Dropout and crop augmentation are active only when `rng` is given.
pub fn segment_objective<'t>(
    model: &JointModel,
    task: Task,
    b: &Binder<'t, '_>,
    frames: &[LoadedFrame],
    k: &CameraIntrinsics,
    mut rng: Option<&mut ChaCha8Rng>,
    crop: bool,
) -> Result<Objective<'t>> {
    if frames.len() < 2 {
        return Err(Error::InvalidArgument(format!("a segment needs 2 frames, got {}", frames.len())));
    }
    let u = model.bind_uncertainty(b);
    let (mut loc, mut vo, mut seg) = (Vec::new(), Vec::new(), Vec::new());
    match (task, rng.as_deref_mut()) {
        (Task::Seg, Some(rng)) if crop => {
            for f in &frames[1..] {
                let f = random_crop(f, rng)?;
                let out = model.forward_task(task, b, &f.input, k, &TemporalFeatureCache::default(), None, None)?;
                seg.push(segmentation_loss(out.logits.expect("seg output"), &f.labels)?);
            }
        }
        _ => {
            let mut cache = TemporalFeatureCache::default();
            let mut prev_pose: Option<PoseVars<'t>> = None;
            for (i, f) in frames.iter().enumerate() {
                let gt_rel = (i > 0).then(|| relative_pose_target(&frames[i - 1].pose, &f.pose));
                let warp = match (task, gt_rel) {
                    (Task::Seg, Some(r)) => Some(r.in_previous_camera(frames[i - 1].pose.rotation)),
                    _ => None,
                };
                let out = model.forward_task(task, b, &f.input, k, &cache, warp.as_ref(), rng.as_deref_mut())?;
                if let Some(gt_rel) = gt_rel {
                    if let (Some(prev), Some(curr)) = (&prev_pose, &out.pose) {
                        loc.push(localization_loss(prev, curr, &f.pose, &gt_rel, &u)?);
                    }
                    if let Some(rel) = &out.rel {
                        vo.push(odometry_loss(rel, &gt_rel, &u)?);
                    }
                    if let Some(logits) = out.logits {
                        seg.push(segmentation_loss(logits, &f.labels)?);
                    }
                }
                prev_pose = out.pose;
                cache = out.cache;
            }
        }
    }
    let (loc, vo, seg) = (mean(loc)?, mean(vo)?, mean(seg)?);
    let missing = || Error::InvalidArgument(format!("{task} forward produced no loss terms"));
    let total = match task {
        Task::Loc => loc.ok_or_else(missing)?,
        Task::Vo => vo.ok_or_else(missing)?,
        Task::Seg => seg.ok_or_else(missing)?,
        Task::Joint => multitask_loss(
            loc.ok_or_else(missing)?,
            vo.ok_or_else(missing)?,
            seg.ok_or_else(missing)?,
            &u,
        )?,
    };
    Ok(Objective { total, loc, vo, seg })
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub total: f64,
    pub losses: TaskLosses,
    /// Uncertainty weights used for this step, in storage order.
    pub uncertainty: [f64; 9],
}

/// One row per completed step.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossTrace {
    pub rows: Vec<TraceRow>,
}

impl LossTrace {
    pub fn header() -> String {
        let mut h = String::from("step,total,loc,vo,seg");
        for n in UNCERTAINTY_NAMES {
            h.push(',');
            h.push_str(n);
        }
        h
    }

    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|v| format!("{v:?}")).unwrap_or_default();
        let mut s = LossTrace::header();
        s.push('\n');
        for r in &self.rows {
            write!(s, "{},{:?},{},{},{}", r.step, r.total, opt(r.losses.loc), opt(r.losses.vo), opt(r.losses.seg)).unwrap();
            for v in r.uncertainty {
                write!(s, ",{v:?}").unwrap();
            }
            s.push('\n');
        }
        s
    }

    pub fn parse_csv(text: &str, path: &Path) -> Result<LossTrace> {
        let mut lines = text.lines();
        if lines.next() != Some(LossTrace::header().as_str()) {
            return Err(Error::parse(path, "missing loss-trace header"));
        }
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate() {
            let f: Vec<&str> = line.split(',').collect();
            let bad = || Error::parse(path, format!("row {}: malformed", i + 1));
            if f.len() != 14 {
                return Err(bad());
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
            let opt = |s: &str| if s.is_empty() { Ok(None) } else { num(s).map(Some) };
            let mut uncertainty = [0.0; 9];
            for (j, u) in uncertainty.iter_mut().enumerate() {
                *u = num(f[5 + j])?;
            }
            rows.push(TraceRow {
                step: f[0].parse().map_err(|_| bad())?,
                total: num(f[1])?,
                losses: TaskLosses {
                    loc: opt(f[2])?,
                    vo: opt(f[3])?,
                    seg: opt(f[4])?,
                },
                uncertainty,
            });
        }
        Ok(LossTrace { rows })
    }
}

pub struct TrainOutput {
    pub task: Task,
    pub model: JointModel,
    pub trace: LossTrace,
}

impl TrainOutput {
    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_model(self.task, &self.model)
    }

    /// Writes `model.ckpt` and `loss_trace.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<(PathBuf, PathBuf)> {
        let ckpt = dir.join(CHECKPOINT_FILE);
        let trace = dir.join(TRACE_FILE);
        fsutil::write_atomic(&ckpt, &self.checkpoint().to_bytes())?;
        fsutil::write_atomic(&trace, self.trace.to_csv().as_bytes())?;
        Ok((ckpt, trace))
    }
}

/// One optimization step on `frames`. Returns the loss values and the
/// clipped gradients; parameters are not touched.
fn step_gradients(
    model: &JointModel,
    task: Task,
    frames: &[LoadedFrame],
    k: &CameraIntrinsics,
    rng: &mut ChaCha8Rng,
    config: &RunConfig,
    trainable: Option<&[bool]>,
) -> Result<(f64, TaskLosses, Vec<(ParamId, Tensor)>)> {
    let tape = Tape::new();
    let b = Binder::new(&tape, model.params());
    let crop = task == Task::Seg && config.seg_crop_augment;
    let obj = segment_objective(model, task, &b, frames, k, Some(rng), crop)?;
    let (total, losses) = (obj.total.item(), obj.losses());
    let grads = tape.backward(obj.total)?;
    let mut grads = b.gradients(&grads);
    if let Some(mask) = trainable {
        grads.retain(|(id, _)| mask[id.index()]);
    }
    check_finite(model.params(), &grads)?;
    clip_global_norm(&mut grads, config.grad_clip);
    Ok((total, losses, grads))
}

/// Optimizes `task`'s objective for `steps` steps. With `trainable`, only
/// parameters whose names it accepts are updated.
pub fn train_stage(
    task: Task,
    mut model: JointModel,
    data: &SplitData,
    config: &RunConfig,
    steps: usize,
    lr: f64,
    trainable: Option<&dyn Fn(&str) -> bool>,
) -> Result<TrainOutput> {
    data.check_compatible(model.config())?;
    let trainable: Option<Vec<bool>> = trainable.map(|f| model.params().iter().map(|(n, _)| f(n)).collect());
    let segs = segments(data, config.batch);
    if segs.is_empty() && steps > 0 {
        return Err(Error::Dataset("no sequence has two or more frames to train on".into()));
    }
    let k = data.intrinsics;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = AdamState::from_config(model.params(), config, lr);
    let mut order: Vec<Segment> = Vec::new();
    let mut trace = LossTrace::default();
    for step in 0..steps {
        if order.is_empty() {
            order = segs.clone();
            order.shuffle(&mut rng);
            order.reverse();
        }
        let seg = order.pop().expect("segments refilled");
        let frames = &data.sequences[seg.sequence].frames[seg.start..seg.start + seg.len];
        let uncertainty = model.uncertainty_values().to_array();
        let (total, losses, grads) = step_gradients(&model, task, frames, &k, &mut rng, config, trainable.as_deref())?;
        adam.step(model.params_mut(), &grads)?;
        if step % 100 == 0 || step + 1 == steps {
            log::info!("{task} step {step}: loss {total:.5} {losses:?}");
        }
        trace.rows.push(TraceRow {
            step,
            total,
            losses,
            uncertainty,
        });
    }
    Ok(TrainOutput { task, model, trace })
}

/// Trains one of the single-task networks. From a fresh initialization every
/// parameter the loss reaches is optimized. Starting from `init`, typically
/// the segmentation checkpoint that owns the shared trunk, only the
/// parameters `task` owns are optimized and the architecture comes from
/// `init`.
pub fn train_single_task(
    task: Task,
    data: &SplitData,
    config: &RunConfig,
    steps: usize,
    init: Option<&Checkpoint>,
) -> Result<TrainOutput> {
    if task == Task::Joint {
        return Err(Error::InvalidArgument("use train_joint for the joint task".into()));
    }
    match init {
        None => train_stage(task, JointModel::new(config.model.clone())?, data, config, steps, config.lr_single, None),
        Some(c) => {
            let owned = |n: &str| joint_owner(n) == Some(task);
            train_stage(task, c.to_model()?, data, config, steps, config.lr_single, Some(&owned))
        }
    }
}

pub enum JointInit<'a> {
    FromScratch,
    Pretrained {
        loc: &'a Checkpoint,
        vo: &'a Checkpoint,
        seg: &'a Checkpoint,
    },
}

/// Fine-tunes the joint model. With pretrained checkpoints the model config
/// comes from them, not from `config.model`.
pub fn train_joint(data: &SplitData, init: JointInit<'_>, config: &RunConfig, steps: usize) -> Result<TrainOutput> {
    let mut model = match init {
        JointInit::FromScratch => JointModel::new(config.model.clone())?,
        JointInit::Pretrained { loc, vo, seg } => merge_for_joint(loc, vo, seg)?,
    };
    if config.warm_start_task_weights && steps > 0 {
        warm_start_task_weights(&mut model, data, config)?;
    }
    train_stage(Task::Joint, model, data, config, steps, config.lr_joint, None)
}

const WARM_START_SEGMENTS: usize = 4;

/// Mean task losses over the segments of `data`, without dropout or
/// augmentation. `limit` caps the number of segments.
pub fn evaluate_objective(
    model: &JointModel,
    task: Task,
    data: &SplitData,
    batch: usize,
    limit: Option<usize>,
) -> Result<(f64, TaskLosses)> {
    data.check_compatible(model.config())?;
    let segs = segments(data, batch);
    let n = limit.map_or(segs.len(), |l| l.min(segs.len()));
    if n == 0 {
        return Err(Error::Dataset("no sequence has two or more frames".into()));
    }
    let mut total = 0.0;
    let mut sums = [0.0; 3];
    for seg in &segs[..n] {
        let frames = &data.sequences[seg.sequence].frames[seg.start..seg.start + seg.len];
        let tape = Tape::new();
        let b = Binder::frozen(&tape, model.params());
        let obj = segment_objective(model, task, &b, frames, &data.intrinsics, None, false)?;
        total += obj.total.item();
        let l = obj.losses();
        for (s, v) in sums.iter_mut().zip([l.loc, l.vo, l.seg]) {
            *s += v.unwrap_or(0.0);
        }
    }
    let n = n as f64;
    let l = TaskLosses {
        loc: matches!(task, Task::Loc | Task::Joint).then(|| sums[0] / n),
        vo: matches!(task, Task::Vo | Task::Joint).then(|| sums[1] / n),
        seg: matches!(task, Task::Seg | Task::Joint).then(|| sums[2] / n),
    };
    Ok((total / n, l))
}

/// Sets each task weight to ln of that task's mean initial loss, its
/// stationary value. Non-positive losses leave the weight unchanged.
pub fn warm_start_task_weights(model: &mut JointModel, data: &SplitData, config: &RunConfig) -> Result<()> {
    let (_, l) = evaluate_objective(model, Task::Joint, data, config.batch, Some(WARM_START_SEGMENTS))?;
    let ids = model.uncertainty_ids();
    for (slot, mean) in [6, 7, 8].into_iter().zip([l.loc, l.vo, l.seg]) {
        match mean {
            Some(m) if m > 0.0 => model.params_mut().get_mut(ids[slot]).data_mut()[0] = m.ln(),
            _ => {}
        }
    }
    log::info!("joint task weights start at {:?}", &model.uncertainty_values().to_array()[6..]);
    Ok(())
}
