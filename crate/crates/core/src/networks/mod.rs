//! Toy-scale task streams sharing one parameter store.
//!
//! Images are NHWC with `n = 1`. Every encoder stage halves resolution:
//!
//! ```text
//! trunk s1-s3 ──┬─ pose s4 ─(semantic fusion)─ pose s5 ─(temporal fusion)─ head ─ pose
//!               ├─ odo curr s4 ─┐
//! prev image ─ odo prev s1-s4 ──┴─ concat ─ odo s5 ─ head ─ relative pose
//!               └─ seg (warp fusion) s4 (warp fusion) ─ decoder ─ logits
//! ```

mod checkpoint;
mod layers;
mod params;

use std::fmt;
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;

pub use checkpoint::{joint_owner, load_checkpoint, merge_for_joint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use layers::{dropout, Conv, ConvTranspose, Dense, FusionLayer, ResidualStage};
pub use params::{Binder, ParamId, ParamStore};

use crate::autodiff::{concat_channels, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, Pose, RelativePose};
use crate::losses::{PosePrediction, PoseVars, UncertaintyVars, UncertaintyWeights, UNCERTAINTY_NAMES};
use crate::warp::{bilinear_sample, compute_warp_grid, downscale_grid, WarpGrid};

/// Training stage / checkpoint owner.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Task {
    Loc,
    Vo,
    Seg,
    Joint,
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Loc => "loc",
            Task::Vo => "vo",
            Task::Seg => "seg",
            Task::Joint => "joint",
        })
    }
}

impl FromStr for Task {
    type Err = Error;
    fn from_str(s: &str) -> Result<Task> {
        match s {
            "loc" => Ok(Task::Loc),
            "vo" => Ok(Task::Vo),
            "seg" => Ok(Task::Seg),
            "joint" => Ok(Task::Joint),
            _ => Err(Error::InvalidArgument(format!("unknown task `{s}`"))),
        }
    }
}

/// Where the two segmentation warp fusions sit.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WarpFusionStages {
    /// After encoder stages 3 and 4.
    Three4,
    /// After stages 4 and 5; stage 5 of the segmentation stream then keeps
    /// stage-4 resolution.
    Four5,
}

impl fmt::Display for WarpFusionStages {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            WarpFusionStages::Three4 => "3,4",
            WarpFusionStages::Four5 => "4,5",
        })
    }
}

impl FromStr for WarpFusionStages {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.replace(' ', "").as_str() {
            "3,4" => Ok(WarpFusionStages::Three4),
            "4,5" => Ok(WarpFusionStages::Four5),
            _ => Err(Error::InvalidArgument(format!(
                "warp fusion stages must be `3,4` or `4,5`, got `{s}`"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub input_size: usize,
    pub stage_channels: [usize; 5],
    pub fc_dim: usize,
    pub decoder_channels: usize,
    pub num_classes: usize,
    pub dropout: f64,
    pub adaptive_fusion: bool,
    pub warp_fusion_stages: WarpFusionStages,
    pub share_seg_encoder: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_size: 64,
            stage_channels: [8, 16, 24, 32, 48],
            fc_dim: 64,
            decoder_channels: 16,
            num_classes: 4,
            dropout: 0.2,
            adaptive_fusion: true,
            warp_fusion_stages: WarpFusionStages::Three4,
            share_seg_encoder: true,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// 16x16 input with 2-4 channels per stage, for gradient checks.
    pub fn downsized() -> Self {
        ModelConfig {
            input_size: 16,
            stage_channels: [2, 3, 3, 4, 4],
            fc_dim: 4,
            decoder_channels: 3,
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.input_size == 0 || !self.input_size.is_multiple_of(16) {
            return bad(format!("input size {} is not a multiple of 16", self.input_size));
        }
        if self.stage_channels.contains(&0) || self.fc_dim == 0 || self.decoder_channels == 0 {
            return bad("channel counts must be positive".into());
        }
        if self.num_classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.num_classes));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    /// Flat `key = value` pairs, as stored in checkpoints.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let c = self.stage_channels.map(|c| c.to_string()).join(",");
        vec![
            ("input_size".into(), self.input_size.to_string()),
            ("stage_channels".into(), c),
            ("fc_dim".into(), self.fc_dim.to_string()),
            ("decoder_channels".into(), self.decoder_channels.to_string()),
            ("num_classes".into(), self.num_classes.to_string()),
            ("dropout".into(), format!("{:?}", self.dropout)),
            ("adaptive_fusion".into(), self.adaptive_fusion.to_string()),
            ("warp_fusion_stages".into(), self.warp_fusion_stages.to_string()),
            ("share_seg_encoder".into(), self.share_seg_encoder.to_string()),
            ("model_seed".into(), self.seed.to_string()),
        ]
    }

    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let mut c = ModelConfig::default();
        for (k, v) in pairs {
            let err = |msg: &str| Error::Config {
                key: k.to_string(),
                msg: format!("{msg}, got `{v}`"),
            };
            let int = || v.parse::<usize>().map_err(|_| err("expected a non-negative integer"));
            let boolean = || v.parse::<bool>().map_err(|_| err("expected true or false"));
            match k {
                "input_size" => c.input_size = int()?,
                "stage_channels" => {
                    let parts: Vec<usize> = v
                        .split(',')
                        .map(|s| s.trim().parse::<usize>())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|_| err("expected five comma-separated integers"))?;
                    c.stage_channels = parts
                        .try_into()
                        .map_err(|_| err("expected five comma-separated integers"))?;
                }
                "fc_dim" => c.fc_dim = int()?,
                "decoder_channels" => c.decoder_channels = int()?,
                "num_classes" => c.num_classes = int()?,
                "dropout" => c.dropout = v.parse().map_err(|_| err("expected a real number"))?,
                "adaptive_fusion" => c.adaptive_fusion = boolean()?,
                "warp_fusion_stages" => c.warp_fusion_stages = v.parse().map_err(|_| err("expected `3,4` or `4,5`"))?,
                "share_seg_encoder" => c.share_seg_encoder = boolean()?,
                "model_seed" => c.seed = v.parse().map_err(|_| err("expected a non-negative integer"))?,
                _ => {
                    return Err(Error::Config {
                        key: k.to_string(),
                        msg: "unknown model key".into(),
                    })
                }
            }
        }
        c.validate()?;
        Ok(c)
    }
}

/// Previous-timestep state threaded through a sequence. All tensors are
/// detached values.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TemporalFeatureCache {
    /// Pose-stream stage-5 features before temporal fusion.
    pub pose_s5: Option<Tensor>,
    /// Segmentation features at the two warp-fusion points, before fusion.
    pub seg_a: Option<Tensor>,
    pub seg_b: Option<Tensor>,
    /// Normalized, canonical previous pose prediction.
    pub prev_pose: Option<Pose>,
    /// Previous network input image.
    pub prev_image: Option<Tensor>,
}

impl TemporalFeatureCache {
    pub fn is_empty(&self) -> bool {
        *self == TemporalFeatureCache::default()
    }
}

/// One network input frame.
#[derive(Clone, Debug)]
pub struct FrameInput {
    /// `[1, H, W, 3]`, centred to `rgb - 0.5`.
    pub image: Tensor,
    /// `[H, W]` metres, 0 where invalid.
    pub depth: Tensor,
}

impl FrameInput {
    /// From `[H, W, 3]` RGB values in `[0, 1]`.
    pub fn from_rgb(rgb: &Tensor, depth: Tensor) -> Result<FrameInput> {
        let (h, w) = match rgb.shape() {
            &[h, w, 3] => (h, w),
            s => return Err(Error::InvalidArgument(format!("expected [H, W, 3] rgb, got {s:?}"))),
        };
        if depth.shape() != [h, w] {
            return Err(Error::ShapeMismatch {
                op: "frame input",
                lhs: rgb.shape().to_vec(),
                rhs: depth.shape().to_vec(),
            });
        }
        let image = Tensor::new(vec![1, h, w, 3], rgb.data().iter().map(|v| v - 0.5).collect())?;
        Ok(FrameInput { image, depth })
    }
}

pub struct TrunkFeatures<'t> {
    pub s2: Var<'t>,
    pub s3: Var<'t>,
}

pub struct SegOutput<'t> {
    /// `[1, H, W, classes]`
    pub logits: Var<'t>,
    /// Features for semantic fusion into the pose stream (stage-4 shape).
    pub semantic: Var<'t>,
    pub cache_a: Tensor,
    pub cache_b: Tensor,
}

/// Outputs of one forward pass for some task. Absent outputs were not
/// computed.
pub struct TaskOutput<'t> {
    pub pose: Option<PoseVars<'t>>,
    pub rel: Option<PoseVars<'t>>,
    pub logits: Option<Var<'t>>,
    pub cache: TemporalFeatureCache,
}

#[derive(Clone, Debug)]
struct PoseHead {
    fc: Dense,
    trans: Dense,
    rot: Dense,
}

impl PoseHead {
    fn new(store: &mut ParamStore, seed: u64, name: &str, cin: usize, fc: usize) -> Self {
        let head = PoseHead {
            fc: Dense::new(store, seed, &format!("{name}.fc"), cin, fc),
            trans: Dense::new(store, seed, &format!("{name}.trans"), fc, 3),
            rot: Dense::new(store, seed, &format!("{name}.rot"), fc, 4),
        };
        // Start near the identity rotation so normalization is well defined.
        store.get_mut(head.rot.bias).data_mut()[0] = 1.0;
        head
    }

    fn forward<'t>(
        &self,
        b: &Binder<'t, '_>,
        feats: Var<'t>,
        drop: Option<(f64, &mut ChaCha8Rng)>,
    ) -> Result<PosePrediction<'t>> {
        let mut h = self.fc.forward(b, feats.global_avg_pool()?)?.elu()?;
        if let Some((p, rng)) = drop {
            h = dropout(h, p, rng)?;
        }
        Ok(PosePrediction {
            translation: self.trans.forward(b, h)?.reshape(&[3])?,
            rotation_raw: self.rot.forward(b, h)?.reshape(&[4])?,
        })
    }
}

#[derive(Clone, Debug)]
pub struct JointModel {
    config: ModelConfig,
    store: ParamStore,
    trunk: [ResidualStage; 3],
    seg_encoder: Option<[ResidualStage; 3]>,
    pose_s4: ResidualStage,
    pose_s5: ResidualStage,
    pose_head: PoseHead,
    odo_prev: [ResidualStage; 4],
    odo_curr_s4: ResidualStage,
    odo_s5: ResidualStage,
    odo_head: PoseHead,
    seg_s4: ResidualStage,
    seg_s5: Option<ResidualStage>,
    dec_up1: ConvTranspose,
    dec_skip: Conv,
    dec_up2: ConvTranspose,
    fuse_temporal: Option<FusionLayer>,
    fuse_sem: Option<FusionLayer>,
    fuse_warp: Option<[FusionLayer; 2]>,
    uncertainty: [ParamId; 9],
}

fn encoder(store: &mut ParamStore, seed: u64, prefix: &str, ch: &[usize]) -> Vec<ResidualStage> {
    let mut cin = 3;
    ch.iter()
        .enumerate()
        .map(|(i, &c)| {
            let s = ResidualStage::new(store, seed, &format!("{prefix}.s{}", i + 1), cin, c, 2);
            cin = c;
            s
        })
        .collect()
}

impl JointModel {
    pub fn new(config: ModelConfig) -> Result<JointModel> {
        config.validate()?;
        let seed = config.seed;
        let c = config.stage_channels;
        let mut st = ParamStore::new();
        let trunk: [ResidualStage; 3] = encoder(&mut st, seed, "trunk", &c[..3]).try_into().unwrap();
        let seg_encoder = (!config.share_seg_encoder)
            .then(|| encoder(&mut st, seed, "seg", &c[..3]).try_into().unwrap());
        let pose_s4 = ResidualStage::new(&mut st, seed, "pose.s4", c[2], c[3], 2);
        let pose_s5 = ResidualStage::new(&mut st, seed, "pose.s5", c[3], c[4], 2);
        let pose_head = PoseHead::new(&mut st, seed, "pose", c[4], config.fc_dim);
        let odo_prev: [ResidualStage; 4] = encoder(&mut st, seed, "odo.prev", &c[..4]).try_into().unwrap();
        let odo_curr_s4 = ResidualStage::new(&mut st, seed, "odo.curr.s4", c[2], c[3], 2);
        let odo_s5 = ResidualStage::new(&mut st, seed, "odo.s5", 2 * c[3], c[4], 2);
        let odo_head = PoseHead::new(&mut st, seed, "odo", c[4], config.fc_dim);
        let seg_s4 = ResidualStage::new(&mut st, seed, "seg.s4", c[2], c[3], 2);
        let (seg_s5, dec_in, warp_ch) = match config.warp_fusion_stages {
            WarpFusionStages::Three4 => (None, c[3], [c[2], c[3]]),
            WarpFusionStages::Four5 => (
                Some(ResidualStage::new(&mut st, seed, "seg.s5", c[3], c[4], 1)),
                c[4],
                [c[3], c[4]],
            ),
        };
        let cd = config.decoder_channels;
        let dec_up1 = ConvTranspose::upsample(&mut st, seed, "dec.up1", dec_in, cd, 4);
        let dec_skip = Conv::new(&mut st, seed, "dec.skip", 1, c[1], cd, 1);
        let dec_up2 = ConvTranspose::upsample(&mut st, seed, "dec.up2", cd, config.num_classes, 4);
        let (fuse_temporal, fuse_sem, fuse_warp) = if config.adaptive_fusion {
            (
                Some(FusionLayer::new(&mut st, seed, "fuse.temporal", c[4], c[4], c[4])),
                Some(FusionLayer::new(&mut st, seed, "fuse.sem", c[3], c[3], c[3])),
                Some([
                    FusionLayer::new(&mut st, seed, "fuse.warp_a", warp_ch[0], warp_ch[0], warp_ch[0]),
                    FusionLayer::new(&mut st, seed, "fuse.warp_b", warp_ch[1], warp_ch[1], warp_ch[1]),
                ]),
            )
        } else {
            (None, None, None)
        };
        let init = UncertaintyWeights::default().to_array();
        let uncertainty = std::array::from_fn(|i| st.add(format!("u.{}", UNCERTAINTY_NAMES[i]), Tensor::scalar(init[i])));
        Ok(JointModel {
            config,
            store: st,
            trunk,
            seg_encoder,
            pose_s4,
            pose_s5,
            pose_head,
            odo_prev,
            odo_curr_s4,
            odo_s5,
            odo_head,
            seg_s4,
            seg_s5,
            dec_up1,
            dec_skip,
            dec_up2,
            fuse_temporal,
            fuse_sem,
            fuse_warp,
            uncertainty,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// First convolution kernel of the shared trunk.
    pub fn trunk_kernel(&self) -> ParamId {
        self.trunk[0].conv1.kernel
    }

    pub fn uncertainty_ids(&self) -> [ParamId; 9] {
        self.uncertainty
    }

    pub fn uncertainty_values(&self) -> UncertaintyWeights {
        UncertaintyWeights::from_array(self.uncertainty.map(|id| self.store.get(id).item()))
    }

    pub fn bind_uncertainty<'t>(&self, b: &Binder<'t, '_>) -> UncertaintyVars<'t> {
        UncertaintyVars::from_array(self.uncertainty.map(|id| b.var(id)))
    }

    fn check_image(&self, image: &Tensor) -> Result<()> {
        let s = self.config.input_size;
        if image.shape() != [1, s, s, 3] {
            return Err(Error::ShapeMismatch {
                op: "network input",
                lhs: image.shape().to_vec(),
                rhs: vec![1, s, s, 3],
            });
        }
        Ok(())
    }

    /// Shared stages 1-3 on the current image.
    pub fn trunk<'t>(&self, b: &Binder<'t, '_>, image: &Tensor) -> Result<TrunkFeatures<'t>> {
        self.check_image(image)?;
        run_trunk(&self.trunk, b, b.tape().constant(image.clone()))
    }

    /// Global pose from trunk features, optionally fusing segmentation
    /// features at stage 4 and cached stage-5 features at stage 5. Returns
    /// the prediction and the pre-fusion stage-5 features.
    pub fn forward_global_pose<'t>(
        &self,
        b: &Binder<'t, '_>,
        trunk: &TrunkFeatures<'t>,
        cache: &TemporalFeatureCache,
        semantic: Option<Var<'t>>,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(PosePrediction<'t>, Tensor)> {
        let mut h4 = self.pose_s4.forward(b, trunk.s3)?;
        if let (Some(f), Some(sem)) = (&self.fuse_sem, semantic) {
            h4 = f.forward(b, h4, sem)?;
        }
        let mut h5 = self.pose_s5.forward(b, h4)?;
        let s5 = h5.value();
        if let (Some(f), Some(prev)) = (&self.fuse_temporal, &cache.pose_s5) {
            check_cached("pose stage-5 cache", prev, &s5)?;
            h5 = f.forward(b, h5, b.tape().constant(prev.clone()))?;
        }
        let drop = rng.map(|r| (self.config.dropout, r));
        Ok((self.pose_head.forward(b, h5, drop)?, s5))
    }

    /// Relative pose between `prev_image` and the current frame.
    pub fn forward_odometry<'t>(
        &self,
        b: &Binder<'t, '_>,
        prev_image: &Tensor,
        trunk: &TrunkFeatures<'t>,
    ) -> Result<PosePrediction<'t>> {
        self.check_image(prev_image)?;
        let mut p = b.tape().constant(prev_image.clone());
        for s in &self.odo_prev {
            p = s.forward(b, p)?;
        }
        let c = self.odo_curr_s4.forward(b, trunk.s3)?;
        let h = self.odo_s5.forward(b, concat_channels(&[p, c])?)?;
        self.odo_head.forward(b, h, None)
    }

    /// Segmentation logits. `warp` carries the relative pose (previous-camera
    /// frame) used to warp the cached features; warping is skipped when it
    /// is absent or the cache holds no features.
    pub fn forward_segmentation<'t>(
        &self,
        b: &Binder<'t, '_>,
        trunk: &TrunkFeatures<'t>,
        frame: &FrameInput,
        cache: &TemporalFeatureCache,
        warp: Option<(&RelativePose, &CameraIntrinsics)>,
    ) -> Result<SegOutput<'t>> {
        let own;
        let enc = match &self.seg_encoder {
            Some(stages) => {
                own = run_trunk(stages, b, b.tape().constant(frame.image.clone()))?;
                &own
            }
            None => trunk,
        };
        let grid = match (&self.fuse_warp, warp, &cache.seg_a) {
            (Some(_), Some((rel, k)), Some(_)) => match compute_warp_grid(rel, &frame.depth, k) {
                Ok(g) => Some(g),
                Err(Error::NoValidDepth) => None,
                Err(e) => return Err(e),
            },
            _ => None,
        };
        let fuse = |i: usize, cur: Var<'t>, cached: &Option<Tensor>| -> Result<Var<'t>> {
            match (&self.fuse_warp, &grid, cached) {
                (Some(layers), Some(g), Some(prev)) => {
                    check_cached("segmentation cache", prev, &cur.value())?;
                    let warped = warp_cached(b, prev, g, self.config.input_size)?;
                    layers[i].forward(b, cur, warped)
                }
                _ => Ok(cur),
            }
        };
        let (semantic, dec_in, cache_a, cache_b) = match self.config.warp_fusion_stages {
            WarpFusionStages::Three4 => {
                let f3 = enc.s3;
                let a = f3.value();
                let f3 = fuse(0, f3, &cache.seg_a)?;
                let f4 = self.seg_s4.forward(b, f3)?;
                let bb = f4.value();
                let f4 = fuse(1, f4, &cache.seg_b)?;
                (f4, f4, a, bb)
            }
            WarpFusionStages::Four5 => {
                let f4 = self.seg_s4.forward(b, enc.s3)?;
                let a = f4.value();
                let f4 = fuse(0, f4, &cache.seg_a)?;
                let f5 = self.seg_s5.as_ref().expect("stage 5 exists").forward(b, f4)?;
                let bb = f5.value();
                let f5 = fuse(1, f5, &cache.seg_b)?;
                (f4, f5, a, bb)
            }
        };
        let up = self.dec_up1.forward(b, dec_in)?;
        let skip = self.dec_skip.forward(b, enc.s2)?;
        let logits = self.dec_up2.forward(b, up.add(skip)?.elu()?)?;
        Ok(SegOutput {
            logits,
            semantic,
            cache_a,
            cache_b,
        })
    }

    /// Runs the streams `task` needs. The segmentation warp uses `seg_warp`
    /// when given (typically ground truth). Otherwise joint inference uses
    /// the odometry prediction expressed in the cached previous pose's
    /// frame. The warp grid is never differentiated.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_task<'t>(
        &self,
        task: Task,
        b: &Binder<'t, '_>,
        frame: &FrameInput,
        k: &CameraIntrinsics,
        cache: &TemporalFeatureCache,
        seg_warp: Option<&RelativePose>,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<TaskOutput<'t>> {
        let trunk = self.trunk(b, &frame.image)?;
        let mut next = TemporalFeatureCache {
            prev_image: Some(frame.image.clone()),
            ..TemporalFeatureCache::default()
        };
        let mut out = TaskOutput {
            pose: None,
            rel: None,
            logits: None,
            cache: TemporalFeatureCache::default(),
        };
        if matches!(task, Task::Vo | Task::Joint) {
            if let Some(prev) = &cache.prev_image {
                out.rel = Some(self.forward_odometry(b, prev, &trunk)?.normalized()?);
            }
        }
        let mut semantic = None;
        if matches!(task, Task::Seg | Task::Joint) {
            let warp_rel = match (task, seg_warp) {
                (_, Some(w)) => Some(*w),
                (Task::Joint, None) => match (&out.rel, &cache.prev_pose) {
                    (Some(rel), Some(prev)) => Some(rel.to_relative().in_previous_camera(prev.rotation)),
                    _ => None,
                },
                _ => None,
            };
            let seg = self.forward_segmentation(b, &trunk, frame, cache, warp_rel.as_ref().map(|r| (r, k)))?;
            semantic = Some(seg.semantic);
            out.logits = Some(seg.logits);
            next.seg_a = Some(seg.cache_a);
            next.seg_b = Some(seg.cache_b);
        }
        if matches!(task, Task::Loc | Task::Joint) {
            let (pred, s5) = self.forward_global_pose(b, &trunk, cache, semantic, rng)?;
            let pose = pred.normalized()?;
            next.prev_pose = Some(pose.to_pose());
            next.pose_s5 = Some(s5);
            out.pose = Some(pose);
        }
        out.cache = next;
        Ok(out)
    }
}

fn run_trunk<'t>(stages: &[ResidualStage], b: &Binder<'t, '_>, x: Var<'t>) -> Result<TrunkFeatures<'t>> {
    let s1 = stages[0].forward(b, x)?;
    let s2 = stages[1].forward(b, s1)?;
    let s3 = stages[2].forward(b, s2)?;
    Ok(TrunkFeatures { s2, s3 })
}

fn check_cached(what: &'static str, cached: &Tensor, current: &Tensor) -> Result<()> {
    if cached.shape() != current.shape() {
        return Err(Error::ShapeMismatch {
            op: what,
            lhs: cached.shape().to_vec(),
            rhs: current.shape().to_vec(),
        });
    }
    Ok(())
}

fn warp_cached<'t>(b: &Binder<'t, '_>, prev: &Tensor, grid: &WarpGrid, input_size: usize) -> Result<Var<'t>> {
    let factor = input_size / prev.shape()[1];
    bilinear_sample(b.tape().constant(prev.clone()), &downscale_grid(grid, factor)?)
}

#[cfg(test)]
mod tests;
