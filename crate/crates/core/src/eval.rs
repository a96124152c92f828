//! Evaluation metrics and report files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::autodiff::{Tape, Tensor};
use crate::dataio::SplitData;
use crate::error::{Error, Result};
use crate::fsutil;
use crate::geometry::{angular_error_deg, norm3, relative_pose_target, sub3, Pose, RelativePose};
use crate::networks::{Binder, JointModel, Task, TemporalFeatureCache};

/// Median with the mean of the middle two for even counts.
pub fn median(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Empty("median"));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Ok(if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 })
}

pub fn translation_error(a: &Pose, b: &Pose) -> f64 {
    dist(a.translation, b.translation)
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    norm3(sub3(a, b))
}

fn check_lengths(what: &'static str, left: usize, right: usize) -> Result<()> {
    if left != right {
        return Err(Error::LengthMismatch { what, left, right });
    }
    if left == 0 {
        return Err(Error::Empty(what));
    }
    Ok(())
}

/// Per-frame translation (m) and rotation (deg) errors.
pub fn pose_errors(preds: &[Pose], gts: &[Pose]) -> Result<(Vec<f64>, Vec<f64>)> {
    check_lengths("pose errors", preds.len(), gts.len())?;
    Ok(preds
        .iter()
        .zip(gts)
        .map(|(p, g)| (translation_error(p, g), angular_error_deg(p.rotation, g.rotation)))
        .unzip())
}

pub fn median_pose_error(preds: &[Pose], gts: &[Pose]) -> Result<(f64, f64)> {
    let (t, r) = pose_errors(preds, gts)?;
    Ok((median(&t)?, median(&r)?))
}

/// Fraction of frames with both errors strictly below the thresholds.
pub fn pose_accuracy(preds: &[Pose], gts: &[Pose], t_thresh: f64, r_thresh_deg: f64) -> Result<f64> {
    let (t, r) = pose_errors(preds, gts)?;
    Ok(accuracy_from_errors(&t, &r, t_thresh, r_thresh_deg))
}

fn accuracy_from_errors(t: &[f64], r: &[f64], t_thresh: f64, r_thresh: f64) -> f64 {
    let hits = t.iter().zip(r).filter(|(t, r)| **t < t_thresh && **r < r_thresh).count();
    hits as f64 / t.len() as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct LocalizationReport {
    pub median_translation: f64,
    pub median_rotation: f64,
    pub accuracy_5cm5deg: f64,
    pub translation_errors: Vec<f64>,
    pub rotation_errors: Vec<f64>,
}

pub fn localization_report(preds: &[Pose], gts: &[Pose]) -> Result<LocalizationReport> {
    let (t, r) = pose_errors(preds, gts)?;
    Ok(LocalizationReport {
        median_translation: median(&t)?,
        median_rotation: median(&r)?,
        accuracy_5cm5deg: accuracy_from_errors(&t, &r, 0.05, 5.0),
        translation_errors: t,
        rotation_errors: r,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OdometryReport {
    /// Percent of path length.
    pub translational_drift: f64,
    /// Degrees per metre.
    pub rotational_drift: f64,
}

/// Summed per-pair translation and rotation errors over the ground-truth
/// path length.
pub fn vo_drift(pred_rels: &[RelativePose], gt_rels: &[RelativePose], gt_path_length: f64) -> Result<OdometryReport> {
    if pred_rels.len() != gt_rels.len() {
        return Err(Error::LengthMismatch {
            what: "vo drift",
            left: pred_rels.len(),
            right: gt_rels.len(),
        });
    }
    if !(gt_path_length > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "path length must be positive, got {gt_path_length}"
        )));
    }
    let (mut t, mut r) = (0.0, 0.0);
    for (p, g) in pred_rels.iter().zip(gt_rels) {
        t += dist(p.translation, g.translation);
        r += angular_error_deg(p.rotation, g.rotation);
    }
    Ok(OdometryReport {
        translational_drift: 100.0 * t / gt_path_length,
        rotational_drift: r / gt_path_length,
    })
}

pub fn path_length(poses: &[Pose]) -> f64 {
    poses.windows(2).map(|w| translation_error(&w[0], &w[1])).sum()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegmentationReport {
    /// `None` for classes absent from both prediction and ground truth.
    pub per_class: Vec<Option<f64>>,
    pub mean_iou: f64,
}

/// Accumulates intersections and unions over many label maps.
#[derive(Clone, Debug, PartialEq)]
pub struct IouAccumulator {
    inter: Vec<u64>,
    union: Vec<u64>,
}

impl IouAccumulator {
    pub fn new(classes: usize) -> Self {
        IouAccumulator {
            inter: vec![0; classes],
            union: vec![0; classes],
        }
    }

    pub fn add(&mut self, pred: &[u8], gt: &[u8]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::ShapeMismatch {
                op: "iou",
                lhs: vec![pred.len()],
                rhs: vec![gt.len()],
            });
        }
        let c = self.inter.len();
        for (&p, &g) in pred.iter().zip(gt) {
            for l in [p, g] {
                if l as usize >= c {
                    return Err(Error::LabelOutOfRange {
                        label: l as usize,
                        classes: c,
                    });
                }
            }
            if p == g {
                self.inter[p as usize] += 1;
                self.union[p as usize] += 1;
            } else {
                self.union[p as usize] += 1;
                self.union[g as usize] += 1;
            }
        }
        Ok(())
    }

    pub fn report(&self) -> SegmentationReport {
        let per_class: Vec<Option<f64>> = self
            .inter
            .iter()
            .zip(&self.union)
            .map(|(&i, &u)| (u > 0).then(|| i as f64 / u as f64))
            .collect();
        let present: Vec<f64> = per_class.iter().flatten().copied().collect();
        let mean_iou = if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        };
        SegmentationReport { per_class, mean_iou }
    }
}

pub fn iou(pred: &[u8], gt: &[u8], classes: usize) -> Result<SegmentationReport> {
    let mut acc = IouAccumulator::new(classes);
    acc.add(pred, gt)?;
    Ok(acc.report())
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryRow {
    pub frame: usize,
    pub gt: [f64; 3],
    pub pred: [f64; 3],
    pub trans_err: f64,
    pub rot_err: f64,
}

pub const TRAJECTORY_HEADER: &str = "frame,gt_x,gt_y,gt_z,pred_x,pred_y,pred_z,trans_err,rot_err";

pub fn trajectory_rows(preds: &[Pose], gts: &[Pose]) -> Result<Vec<TrajectoryRow>> {
    let (t, r) = pose_errors(preds, gts)?;
    Ok((0..preds.len())
        .map(|i| TrajectoryRow {
            frame: i,
            gt: gts[i].translation,
            pred: preds[i].translation,
            trans_err: t[i],
            rot_err: r[i],
        })
        .collect())
}

pub fn trajectory_csv(rows: &[TrajectoryRow]) -> String {
    let mut s = String::from(TRAJECTORY_HEADER);
    s.push('\n');
    for r in rows {
        let vals: Vec<String> = r.gt.iter().chain(&r.pred).chain([&r.trans_err, &r.rot_err]).map(|v| format!("{v:?}")).collect();
        writeln!(s, "{},{}", r.frame, vals.join(",")).unwrap();
    }
    s
}

pub fn parse_trajectory_csv(text: &str, path: &Path) -> Result<Vec<TrajectoryRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(TRAJECTORY_HEADER) {
        return Err(Error::parse(path, "missing trajectory header"));
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 9 {
                return Err(Error::parse(path, format!("row {}: expected 9 fields, found {}", i + 1, f.len())));
            }
            let num = |j: usize| -> Result<f64> {
                f[j].parse()
                    .map_err(|_| Error::parse(path, format!("row {}: bad number `{}`", i + 1, f[j])))
            };
            Ok(TrajectoryRow {
                frame: f[0]
                    .parse()
                    .map_err(|_| Error::parse(path, format!("row {}: bad frame index", i + 1)))?,
                gt: [num(1)?, num(2)?, num(3)?],
                pred: [num(4)?, num(5)?, num(6)?],
                trans_err: num(7)?,
                rot_err: num(8)?,
            })
        })
        .collect()
}

/// Top-down (x, y) plot: ground truth in red, prediction in orange.
pub fn trajectory_svg(rows: &[TrajectoryRow]) -> String {
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for r in rows {
        for p in [r.gt, r.pred] {
            for a in 0..2 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
    }
    if rows.is_empty() {
        lo = [0.0; 2];
        hi = [1.0; 2];
    }
    let size = 400.0;
    let margin = 20.0;
    let span = (hi[0] - lo[0]).max(hi[1] - lo[1]).max(1e-6);
    let scale = (size - 2.0 * margin) / span;
    let map = |p: [f64; 3]| (margin + (p[0] - lo[0]) * scale, size - margin - (p[1] - lo[1]) * scale);
    let poly = |sel: &dyn Fn(&TrajectoryRow) -> [f64; 3]| {
        rows.iter()
            .map(|r| {
                let (x, y) = map(sel(r));
                format!("{x:.2},{y:.2}")
            })
            .collect::<Vec<_>>()
            .join(" ")
    };
    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">"#
    )
    .unwrap();
    writeln!(s, r#"  <rect width="{size}" height="{size}" fill="white"/>"#).unwrap();
    writeln!(s, r#"  <polyline fill="none" stroke="red" stroke-width="2" points="{}"/>"#, poly(&|r| r.gt)).unwrap();
    writeln!(s, r#"  <polyline fill="none" stroke="orange" stroke-width="1.5" points="{}"/>"#, poly(&|r| r.pred)).unwrap();
    writeln!(s, r#"  <text x="{margin}" y="14" font-size="12">ground truth (red), prediction (orange)</text>"#).unwrap();
    s.push_str("</svg>\n");
    s
}

/// Writes the CSV and, if `svg` is given, the plot.
pub fn export_trajectory(preds: &[Pose], gts: &[Pose], csv: &Path, svg: Option<&Path>) -> Result<()> {
    let rows = trajectory_rows(preds, gts)?;
    fsutil::write_atomic(csv, trajectory_csv(&rows).as_bytes())?;
    if let Some(svg) = svg {
        fsutil::write_atomic(svg, trajectory_svg(&rows).as_bytes())?;
    }
    Ok(())
}

/// Flat `key = value` report.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Report {
    entries: Vec<(String, String)>,
}

impl Report {
    pub fn new() -> Self {
        Report::default()
    }

    pub fn push(&mut self, key: impl Into<String>, value: impl ToString) {
        self.entries.push((key.into(), value.to_string()));
    }

    pub fn push_f64(&mut self, key: impl Into<String>, value: f64) {
        self.push(key, format!("{value:?}"));
    }

    pub fn add_localization(&mut self, r: &LocalizationReport) {
        self.push_f64("median_translation", r.median_translation);
        self.push_f64("median_rotation", r.median_rotation);
        self.push_f64("accuracy_5cm5deg", r.accuracy_5cm5deg);
    }

    pub fn add_odometry(&mut self, r: &OdometryReport) {
        self.push_f64("vo_translational_drift", r.translational_drift);
        self.push_f64("vo_rotational_drift", r.rotational_drift);
    }

    /// Classes absent from both maps are reported as `absent`.
    pub fn add_segmentation(&mut self, r: &SegmentationReport, class_names: &[String]) {
        for (name, v) in class_names.iter().zip(&r.per_class) {
            match v {
                Some(v) => self.push_f64(format!("iou_{name}"), *v),
                None => self.push(format!("iou_{name}"), "absent"),
            }
        }
        self.push_f64("miou", r.mean_iou);
    }

    pub fn entries(&self) -> &[(String, String)] {
        &self.entries
    }

    pub fn to_text(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fsutil::write_atomic(path, self.to_text().as_bytes())
    }
}

pub fn parse_report(text: &str) -> BTreeMap<String, String> {
    text.lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .collect()
}

/// Model outputs for one sequence next to its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct SequencePredictions {
    pub name: String,
    pub gt_poses: Vec<Pose>,
    pub gt_labels: Vec<Vec<u8>>,
    pub poses: Option<Vec<Pose>>,
    /// One per consecutive frame pair.
    pub rels: Option<Vec<RelativePose>>,
    pub labels: Option<Vec<Vec<u8>>>,
}

impl SequencePredictions {
    pub fn gt_rels(&self) -> Vec<RelativePose> {
        self.gt_poses.windows(2).map(|w| relative_pose_target(&w[0], &w[1])).collect()
    }
}

/// Per-pixel class with the highest score of `[1, H, W, C]` logits.
pub fn argmax_labels(logits: &Tensor) -> Vec<u8> {
    let c = *logits.shape().last().expect("logits have a channel axis");
    logits
        .data()
        .chunks(c)
        .map(|px| {
            let mut best = 0;
            for (i, v) in px.iter().enumerate() {
                if *v > px[best] {
                    best = i;
                }
            }
            best as u8
        })
        .collect()
}

/// Runs `task` over every sequence in order, threading the temporal cache
/// from the first frame. A segmentation-only model warps with the
/// ground-truth motion; the joint model uses its own odometry.
pub fn predict(model: &JointModel, task: Task, data: &SplitData) -> Result<Vec<SequencePredictions>> {
    data.check_compatible(model.config())?;
    let k = data.intrinsics;
    let mut out = Vec::with_capacity(data.sequences.len());
    for seq in &data.sequences {
        let mut p = ground_truth_only(seq.name.clone(), seq.frames.iter().map(|f| (f.pose, &f.labels)));
        let (mut poses, mut rels, mut labels) = (Vec::new(), Vec::new(), Vec::new());
        let mut cache = TemporalFeatureCache::default();
        for (i, f) in seq.frames.iter().enumerate() {
            let warp = match (task, i) {
                (Task::Seg, i) if i > 0 => {
                    let prev = &seq.frames[i - 1].pose;
                    Some(relative_pose_target(prev, &f.pose).in_previous_camera(prev.rotation))
                }
                _ => None,
            };
            let tape = Tape::new();
            let b = Binder::frozen(&tape, model.params());
            let o = model.forward_task(task, &b, &f.input, &k, &cache, warp.as_ref(), None)?;
            if let Some(pose) = &o.pose {
                poses.push(pose.to_pose());
            }
            if let Some(rel) = &o.rel {
                rels.push(rel.to_relative());
            }
            if let Some(l) = &o.logits {
                labels.push(argmax_labels(&l.value()));
            }
            cache = o.cache;
        }
        if matches!(task, Task::Loc | Task::Joint) {
            p.poses = Some(poses);
        }
        if matches!(task, Task::Vo | Task::Joint) {
            p.rels = Some(rels);
        }
        if matches!(task, Task::Seg | Task::Joint) {
            p.labels = Some(labels);
        }
        out.push(p);
    }
    Ok(out)
}

fn ground_truth_only<'a>(name: String, frames: impl Iterator<Item = (Pose, &'a Vec<usize>)>) -> SequencePredictions {
    let (gt_poses, gt_labels) = frames.map(|(p, l)| (p, l.iter().map(|&c| c as u8).collect())).unzip();
    SequencePredictions {
        name,
        gt_poses,
        gt_labels,
        poses: None,
        rels: None,
        labels: None,
    }
}

/// Ground truth standing in for every prediction.
pub fn ground_truth_predictions(data: &SplitData) -> Vec<SequencePredictions> {
    data.sequences
        .iter()
        .map(|seq| {
            let mut p = ground_truth_only(seq.name.clone(), seq.frames.iter().map(|f| (f.pose, &f.labels)));
            p.poses = Some(p.gt_poses.clone());
            p.rels = Some(p.gt_rels());
            p.labels = Some(p.gt_labels.clone());
            p
        })
        .collect()
}

/// Chains relative motions from `start`.
pub fn integrate_odometry(start: Pose, rels: &[RelativePose]) -> Vec<Pose> {
    let mut poses = vec![start];
    for r in rels {
        let next = r.apply_to(poses.last().expect("non-empty"));
        poses.push(next);
    }
    poses
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSummary {
    pub localization: Option<LocalizationReport>,
    pub odometry: Option<OdometryReport>,
    pub segmentation: Option<SegmentationReport>,
}

impl EvalSummary {
    pub fn report(&self, class_names: &[String], frames: usize) -> Report {
        let mut r = Report::new();
        r.push("frames", frames);
        if let Some(l) = &self.localization {
            r.add_localization(l);
        }
        if let Some(o) = &self.odometry {
            r.add_odometry(o);
        }
        if let Some(s) = &self.segmentation {
            r.add_segmentation(s, class_names);
        }
        r
    }
}

/// Pools every sequence into one set of metrics per task present.
pub fn summarize(preds: &[SequencePredictions], num_classes: usize) -> Result<EvalSummary> {
    let all = |f: &dyn Fn(&SequencePredictions) -> bool| !preds.is_empty() && preds.iter().all(f);
    let localization = if all(&|p| p.poses.is_some()) {
        let (pp, gg): (Vec<Pose>, Vec<Pose>) = preds
            .iter()
            .flat_map(|p| p.poses.as_ref().unwrap().iter().copied().zip(p.gt_poses.iter().copied()))
            .unzip();
        Some(localization_report(&pp, &gg)?)
    } else {
        None
    };
    let odometry = if all(&|p| p.rels.is_some()) {
        let mut pr = Vec::new();
        let mut gr = Vec::new();
        let mut length = 0.0;
        for p in preds {
            pr.extend_from_slice(p.rels.as_ref().unwrap());
            gr.extend(p.gt_rels());
            length += path_length(&p.gt_poses);
        }
        Some(vo_drift(&pr, &gr, length)?)
    } else {
        None
    };
    let segmentation = if all(&|p| p.labels.is_some()) {
        let mut acc = IouAccumulator::new(num_classes);
        for p in preds {
            let labels = p.labels.as_ref().unwrap();
            check_lengths("segmentation", labels.len(), p.gt_labels.len())?;
            for (a, b) in labels.iter().zip(&p.gt_labels) {
                acc.add(a, b)?;
            }
        }
        Some(acc.report())
    } else {
        None
    };
    Ok(EvalSummary {
        localization,
        odometry,
        segmentation,
    })
}
