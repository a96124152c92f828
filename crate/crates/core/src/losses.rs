//! Training objectives with learnable homoscedastic uncertainty weights.
//!
//! Every residual is a plain (unsquared) Euclidean norm. Each weighted term
//! has the form `L * exp(-s) + s`.

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::{Pose, Quaternion, RelativePose};

/// Uncertainty weight values.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UncertaintyWeights {
    pub s_x: f64,
    pub s_q: f64,
    pub s_x_rel: f64,
    pub s_q_rel: f64,
    pub s_x_vo: f64,
    pub s_q_vo: f64,
    pub s_loc: f64,
    pub s_vo: f64,
    pub s_seg: f64,
}

impl Default for UncertaintyWeights {
    /// Rotation terms start at -3 to balance their smaller residuals.
    fn default() -> Self {
        UncertaintyWeights {
            s_x: 0.0,
            s_q: -3.0,
            s_x_rel: 0.0,
            s_q_rel: -3.0,
            s_x_vo: 0.0,
            s_q_vo: -3.0,
            s_loc: 0.0,
            s_vo: 0.0,
            s_seg: 0.0,
        }
    }
}

/// Names in storage order.
pub const UNCERTAINTY_NAMES: [&str; 9] = [
    "s_x", "s_q", "s_x_rel", "s_q_rel", "s_x_vo", "s_q_vo", "s_loc", "s_vo", "s_seg",
];

impl UncertaintyWeights {
    pub fn zeros() -> Self {
        UncertaintyWeights::from_array([0.0; 9])
    }

    pub fn to_array(&self) -> [f64; 9] {
        [
            self.s_x, self.s_q, self.s_x_rel, self.s_q_rel, self.s_x_vo, self.s_q_vo, self.s_loc,
            self.s_vo, self.s_seg,
        ]
    }

    pub fn from_array(a: [f64; 9]) -> Self {
        UncertaintyWeights {
            s_x: a[0],
            s_q: a[1],
            s_x_rel: a[2],
            s_q_rel: a[3],
            s_x_vo: a[4],
            s_q_vo: a[5],
            s_loc: a[6],
            s_vo: a[7],
            s_seg: a[8],
        }
    }

    /// Records every weight on `tape` as a tracked scalar.
    pub fn bind<'t>(&self, tape: &'t Tape) -> UncertaintyVars<'t> {
        let v = self.to_array().map(|s| tape.param(Tensor::scalar(s)));
        UncertaintyVars::from_array(v)
    }
}

/// Uncertainty weights recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct UncertaintyVars<'t> {
    pub s_x: Var<'t>,
    pub s_q: Var<'t>,
    pub s_x_rel: Var<'t>,
    pub s_q_rel: Var<'t>,
    pub s_x_vo: Var<'t>,
    pub s_q_vo: Var<'t>,
    pub s_loc: Var<'t>,
    pub s_vo: Var<'t>,
    pub s_seg: Var<'t>,
}

impl<'t> UncertaintyVars<'t> {
    pub fn from_array(v: [Var<'t>; 9]) -> Self {
        UncertaintyVars {
            s_x: v[0],
            s_q: v[1],
            s_x_rel: v[2],
            s_q_rel: v[3],
            s_x_vo: v[4],
            s_q_vo: v[5],
            s_loc: v[6],
            s_vo: v[7],
            s_seg: v[8],
        }
    }

    pub fn to_array(&self) -> [Var<'t>; 9] {
        [
            self.s_x, self.s_q, self.s_x_rel, self.s_q_rel, self.s_x_vo, self.s_q_vo, self.s_loc,
            self.s_vo, self.s_seg,
        ]
    }
}

/// Raw network pose output.
#[derive(Clone, Copy, Debug)]
pub struct PosePrediction<'t> {
    /// `[3]` metres.
    pub translation: Var<'t>,
    /// `[4]` unnormalized `(w, x, y, z)`.
    pub rotation_raw: Var<'t>,
}

/// Pose on a tape with a unit, `w >= 0` rotation.
#[derive(Clone, Copy, Debug)]
pub struct PoseVars<'t> {
    pub translation: Var<'t>,
    pub rotation: Var<'t>,
}

/// Divides by the norm and flips the sign so that `w >= 0`.
pub fn normalize_quaternion(raw: Var<'_>) -> Result<Var<'_>> {
    let norm = raw.l2_norm()?;
    if norm.item() == 0.0 {
        return Err(Error::DegenerateRotation);
    }
    let unit = raw.scale_by(norm.recip()?)?;
    canonicalize_var(unit)
}

fn canonicalize_var(q: Var<'_>) -> Result<Var<'_>> {
    if q.value().data()[0] < 0.0 {
        q.neg()
    } else {
        Ok(q)
    }
}

impl<'t> PosePrediction<'t> {
    pub fn normalized(&self) -> Result<PoseVars<'t>> {
        Ok(PoseVars {
            translation: self.translation,
            rotation: normalize_quaternion(self.rotation_raw)?,
        })
    }
}

impl<'t> PoseVars<'t> {
    /// Untracked vars holding `pose`.
    pub fn constant(tape: &'t Tape, translation: [f64; 3], rotation: Quaternion) -> Self {
        PoseVars {
            translation: tape.constant(Tensor::from_slice(&translation)),
            rotation: tape.constant(Tensor::from_slice(&rotation.to_array())),
        }
    }

    pub fn to_pose(&self) -> Pose {
        let t = self.translation.value();
        let q = self.rotation.value();
        let (t, q) = (t.data(), q.data());
        Pose::new([t[0], t[1], t[2]], Quaternion::new(q[0], q[1], q[2], q[3]))
    }

    pub fn to_relative(&self) -> RelativePose {
        let p = self.to_pose();
        RelativePose::new(p.translation, p.rotation)
    }

    pub fn detach(&self) -> PoseVars<'t> {
        PoseVars {
            translation: self.translation.detach(),
            rotation: self.rotation.detach(),
        }
    }
}

/// `l * exp(-s) + s`.
pub fn weighted_term<'t>(l: Var<'t>, s: Var<'t>) -> Result<Var<'t>> {
    l.scale_by(s.neg()?.exp()?)?.add(s)
}

fn residual_norm<'t>(pred: Var<'t>, target: &[f64]) -> Result<Var<'t>> {
    let t = pred.tape().constant(Tensor::from_slice(target));
    pred.sub(t)?.l2_norm()
}

/// Translation and rotation residual norms of `pred` against a target.
fn pose_residuals<'t>(pred: &PoseVars<'t>, t: [f64; 3], q: Quaternion) -> Result<(Var<'t>, Var<'t>)> {
    Ok((
        residual_norm(pred.translation, &t)?,
        residual_norm(pred.rotation, &q.to_array())?,
    ))
}

/// Geometric consistency between two consecutive global predictions and the
/// ground-truth relative motion.
pub fn relative_motion_loss<'t>(
    pred_prev: &PoseVars<'t>,
    pred_curr: &PoseVars<'t>,
    gt_rel: &RelativePose,
    u: &UncertaintyVars<'t>,
) -> Result<Var<'t>> {
    let tape = pred_curr.translation.tape();
    let dx = pred_curr.translation.sub(pred_prev.translation)?;
    let l_x = residual_norm(dx, &gt_rel.translation)?;
    let conj = tape.constant(Tensor::from_slice(&[1.0, -1.0, -1.0, -1.0]));
    let dq = canonicalize_var(pred_prev.rotation.scale_channels(conj)?.quat_mul(pred_curr.rotation)?)?;
    let l_q = residual_norm(dq, &gt_rel.rotation.to_array())?;
    weighted_term(l_x, u.s_x_rel)?.add(weighted_term(l_q, u.s_q_rel)?)
}

pub fn euclidean_pose_loss<'t>(pred: &PoseVars<'t>, gt: &Pose, u: &UncertaintyVars<'t>) -> Result<Var<'t>> {
    let (l_x, l_q) = pose_residuals(pred, gt.translation, gt.rotation)?;
    weighted_term(l_x, u.s_x)?.add(weighted_term(l_q, u.s_q)?)
}

pub fn localization_loss<'t>(
    pred_prev: &PoseVars<'t>,
    pred_curr: &PoseVars<'t>,
    gt_curr: &Pose,
    gt_rel: &RelativePose,
    u: &UncertaintyVars<'t>,
) -> Result<Var<'t>> {
    euclidean_pose_loss(pred_curr, gt_curr, u)?.add(relative_motion_loss(pred_prev, pred_curr, gt_rel, u)?)
}

pub fn odometry_loss<'t>(pred_rel: &PoseVars<'t>, gt_rel: &RelativePose, u: &UncertaintyVars<'t>) -> Result<Var<'t>> {
    let (l_x, l_q) = pose_residuals(pred_rel, gt_rel.translation, gt_rel.rotation)?;
    weighted_term(l_x, u.s_x_vo)?.add(weighted_term(l_q, u.s_q_vo)?)
}

/// Per-pixel softmax over classes.
pub fn pixel_class_probability(scores: Var<'_>) -> Result<Var<'_>> {
    scores.softmax_channels()
}

/// Negative log-probability of the true class, summed over all pixels.
pub fn segmentation_loss<'t>(scores: Var<'t>, labels: &[usize]) -> Result<Var<'t>> {
    scores.cross_entropy_sum(labels)
}

pub fn multitask_loss<'t>(
    l_loc: Var<'t>,
    l_vo: Var<'t>,
    l_seg: Var<'t>,
    u: &UncertaintyVars<'t>,
) -> Result<Var<'t>> {
    weighted_term(l_loc, u.s_loc)?
        .add(weighted_term(l_vo, u.s_vo)?)?
        .add(weighted_term(l_seg, u.s_seg)?)
}
