//! Procedural indoor world: a square walled floor with box pillars, rendered
//! by per-pixel ray casting.
//!
//! World frame is `z` up with the floor at `z = 0` and walls at
//! `|x| = extent / 2`, `|y| = extent / 2`.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tensor;
use crate::dataio::{parse_pose_file, write_frame, write_pose_file, DatasetIndex, FrameRecord, SequenceRecord, Split};
use crate::error::{Error, Result};
use crate::geometry::{angular_error_deg, CameraIntrinsics, Pose, Quaternion, Vec3};

pub const CLASS_FLOOR: u8 = 0;
pub const CLASS_WALL: u8 = 1;
pub const CLASS_PILLAR: u8 = 2;
pub const CLASS_SKY: u8 = 3;
pub const NUM_CLASSES: usize = 4;
pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["floor", "wall", "pillar", "sky"];
/// Label display colours.
pub const PALETTE: [[u8; 3]; NUM_CLASSES] = [[128, 64, 128], [70, 70, 70], [220, 220, 0], [70, 130, 180]];

pub const MAX_STEP_TRANSLATION: f64 = 0.3;
pub const MAX_STEP_ROTATION_DEG: f64 = 10.0;

/// Minimum distance between the camera and any obstacle or wall.
const CLEARANCE: f64 = 0.5;
const HIT_EPS: f64 = 1e-9;

pub type Rgb = [f64; 3];

#[derive(Clone, Debug, PartialEq)]
pub struct BoxObstacle {
    pub min: Vec3,
    pub max: Vec3,
    pub class: u8,
    pub color: Rgb,
    pub texture_seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub seed: u64,
    /// Side of the square floor, metres.
    pub extent: f64,
    pub wall_height: f64,
    pub floor_color: Rgb,
    pub floor_texture_seed: u64,
    /// Walls at `+x`, `-x`, `+y`, `-y`.
    pub wall_colors: [Rgb; 4],
    pub wall_texture_seeds: [u64; 4],
    pub obstacles: Vec<BoxObstacle>,
}

impl SceneSpec {
    pub fn half_extent(&self) -> f64 {
        self.extent / 2.0
    }

    /// Distance from `p` to the nearest surface of the scene; 0 on a
    /// surface.
    pub fn surface_distance(&self, p: Vec3) -> f64 {
        let h = self.half_extent();
        let room = p[2].min(h - p[0].abs()).min(h - p[1].abs()).abs();
        self.obstacles
            .iter()
            .map(|b| box_sdf(b, p).abs())
            .fold(room, f64::min)
    }

    /// Horizontal clearance of `(x, y)` from walls and obstacles.
    pub fn clearance(&self, x: f64, y: f64) -> f64 {
        let h = self.half_extent();
        let walls = (h - x.abs()).min(h - y.abs());
        self.obstacles
            .iter()
            .map(|b| {
                let dx = (b.min[0] - x).max(x - b.max[0]).max(0.0);
                let dy = (b.min[1] - y).max(y - b.max[1]).max(0.0);
                (dx * dx + dy * dy).sqrt()
            })
            .fold(walls, f64::min)
    }
}

fn box_sdf(b: &BoxObstacle, p: Vec3) -> f64 {
    let mut outside = 0.0;
    let mut inside = f64::NEG_INFINITY;
    for a in 0..3 {
        let c = (b.min[a] + b.max[a]) / 2.0;
        let half = (b.max[a] - b.min[a]) / 2.0;
        let d = (p[a] - c).abs() - half;
        outside += d.max(0.0).powi(2);
        inside = inside.max(d);
    }
    if outside > 0.0 {
        outside.sqrt()
    } else {
        inside
    }
}

fn hsv(h: f64, s: f64, v: f64) -> Rgb {
    let h = h.rem_euclid(1.0) * 6.0;
    let k = |n: f64| {
        let k = (n + h) % 6.0;
        v - v * s * k.min(4.0 - k).clamp(0.0, 1.0)
    };
    [k(5.0), k(3.0), k(1.0)]
}

pub fn generate_scene(seed: u64) -> SceneSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let extent = 20.0;
    let hue0: f64 = rng.gen();
    let wall_colors = std::array::from_fn(|i| hsv(hue0 + i as f64 / 4.0, 0.45, 0.85));
    let wall_texture_seeds = std::array::from_fn(|_| rng.gen());
    let floor_color = hsv(rng.gen(), 0.15, 0.6);
    let floor_texture_seed = rng.gen();
    let target = rng.gen_range(4..=7);
    let mut obstacles: Vec<BoxObstacle> = Vec::new();
    let mut attempts = 0;
    while obstacles.len() < target && attempts < 1000 {
        attempts += 1;
        let angle = rng.gen_range(0.0..2.0 * PI);
        let radius = rng.gen_range(6.5..8.5);
        let half = rng.gen_range(0.3..0.7);
        let height = rng.gen_range(1.8..3.0);
        let (cx, cy) = (radius * angle.cos(), radius * angle.sin());
        let clash = obstacles.iter().any(|o| {
            let ox = (o.min[0] + o.max[0]) / 2.0;
            let oy = (o.min[1] + o.max[1]) / 2.0;
            let oh = (o.max[0] - o.min[0]) / 2.0;
            (ox - cx).hypot(oy - cy) < (oh + half) * std::f64::consts::SQRT_2 + 1.0
        });
        if clash {
            continue;
        }
        obstacles.push(BoxObstacle {
            min: [cx - half, cy - half, 0.0],
            max: [cx + half, cy + half, height],
            class: CLASS_PILLAR,
            color: hsv(rng.gen(), 0.75, 0.9),
            texture_seed: rng.gen(),
        });
    }
    SceneSpec {
        seed,
        extent,
        wall_height: 3.0,
        floor_color,
        floor_texture_seed,
        wall_colors,
        wall_texture_seeds,
        obstacles,
    }
}

/// Camera at `position` looking along heading `yaw` (radians from `+x`
/// towards `+y`), tilted up by `pitch`, with no roll.
pub fn camera_pose(position: Vec3, yaw: f64, pitch: f64) -> Pose {
    let (sy, cy) = yaw.sin_cos();
    let (sp, cp) = pitch.sin_cos();
    let f = [cp * cy, cp * sy, sp];
    let r = [sy, -cy, 0.0];
    let d = [
        f[1] * r[2] - f[2] * r[1],
        f[2] * r[0] - f[0] * r[2],
        f[0] * r[1] - f[1] * r[0],
    ];
    let m = [[r[0], d[0], f[0]], [r[1], d[1], f[1]], [r[2], d[2], f[2]]];
    Pose::new(position, Quaternion::from_rotation_matrix(&m))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrajectorySpec {
    pub loops: usize,
    pub frames_per_loop: usize,
    pub camera_height: f64,
    /// `loops * frames_per_loop` poses, loop by loop.
    pub poses: Vec<Pose>,
}

impl TrajectorySpec {
    pub fn loop_poses(&self, l: usize) -> &[Pose] {
        &self.poses[l * self.frames_per_loop..(l + 1) * self.frames_per_loop]
    }
}

/// Largest translation and rotation between consecutive poses.
pub fn max_step(poses: &[Pose]) -> (f64, f64) {
    poses.windows(2).fold((0.0, 0.0), |(t, r), w| {
        let d = (0..3).map(|i| (w[1].translation[i] - w[0].translation[i]).powi(2)).sum::<f64>().sqrt();
        (t.max(d), r.max(angular_error_deg(w[0].rotation, w[1].rotation)))
    })
}

/// Counter-clockwise elliptical loops around the scene centre. Radius,
/// centre, height and heading wobble drift slowly over the whole
/// trajectory, so each loop follows a slightly different path while
/// consecutive poses stay within the motion bounds, including across loop
/// boundaries. With too few frames per loop to turn with the path, the
/// camera keeps a near-constant heading instead.
pub fn generate_trajectory(scene: &SceneSpec, loops: usize, frames_per_loop: usize, seed: u64) -> Result<TrajectorySpec> {
    if loops == 0 || frames_per_loop < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 1 loop of 2 frames, got {loops} x {frames_per_loop}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7a1e_c70f);
    let n = frames_per_loop as f64;
    let total = (loops * frames_per_loop) as f64;
    let camera_height = 1.5;
    let turn_deg = 360.0 / n;
    let follow_path = turn_deg <= 0.7 * MAX_STEP_ROTATION_DEG;
    let mut base = 4.0f64.min(0.85 * MAX_STEP_TRANSLATION * n / (2.0 * PI) / 1.15);
    for _ in 0..40 {
        let phases: [f64; 6] = std::array::from_fn(|_| rng.gen_range(0.0..2.0 * PI));
        let wobble = if follow_path {
            rng.gen_range(1.0f64..3.0).to_radians()
        } else {
            (0.25 * MAX_STEP_ROTATION_DEG / 3.0).to_radians()
        };
        let yaw0 = rng.gen_range(0.0..2.0 * PI);
        let drift = 0.12 * base;
        let poses: Vec<Pose> = (0..loops * frames_per_loop)
            .map(|g| {
                let g = g as f64;
                let theta = 2.0 * PI * g / n;
                let slow = 2.0 * PI * g / total;
                let a = base + drift * (slow + phases[0]).sin();
                let b = 0.85 * (base + drift * (slow + phases[1]).cos());
                let cx = 0.3 * (slow + phases[2]).sin() * (base / 4.0);
                let cy = 0.3 * (slow + phases[3]).cos() * (base / 4.0);
                let x = cx + a * theta.cos();
                let y = cy + b * theta.sin();
                let z = camera_height + 0.05 * (slow + phases[4]).sin();
                let heading = if follow_path {
                    // Tangent of the ellipse at theta.
                    (b * theta.cos()).atan2(-a * theta.sin())
                } else {
                    yaw0
                };
                let yaw = heading + wobble * (3.0 * theta + phases[5]).sin();
                let pitch = (-4.0f64).to_radians() + 0.02 * (slow + phases[4]).cos();
                camera_pose([x, y, z], yaw, pitch)
            })
            .collect();
        let (dt, dr) = max_step(&poses);
        let free = poses.iter().all(|p| scene.clearance(p.translation[0], p.translation[1]) >= CLEARANCE);
        if dt <= MAX_STEP_TRANSLATION && dr <= MAX_STEP_ROTATION_DEG && free {
            return Ok(TrajectorySpec {
                loops,
                frames_per_loop,
                camera_height,
                poses,
            });
        }
        if dt > MAX_STEP_TRANSLATION {
            base *= 0.9;
        }
    }
    Err(Error::NoFreePath(format!(
        "{loops} loops of {frames_per_loop} frames within {MAX_STEP_TRANSLATION} m / {MAX_STEP_ROTATION_DEG} deg steps"
    )))
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderedFrame {
    pub width: usize,
    pub height: usize,
    /// `[H, W, 3]` in `[0, 1]`.
    pub rgb: Tensor,
    /// `[H, W]` metres along the optical axis; 0 for sky (no hit).
    pub depth: Tensor,
    /// `H * W` class ids, row-major.
    pub labels: Vec<u8>,
    pub pose: Pose,
}

#[derive(Clone, Copy, Debug)]
struct Hit {
    s: f64,
    class: u8,
    color: Rgb,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn lattice(seed: u64, i: i64, j: i64) -> f64 {
    let h = splitmix(seed ^ splitmix((i as u64).wrapping_mul(0x1656_67b1_9e37_79f9) ^ (j as u64)));
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Smooth value noise in `[0, 1]`.
fn value_noise(seed: u64, u: f64, v: f64) -> f64 {
    let (fu, fv) = (u.floor(), v.floor());
    let (i, j) = (fu as i64, fv as i64);
    let s = |t: f64| t * t * (3.0 - 2.0 * t);
    let (tu, tv) = (s(u - fu), s(v - fv));
    let a = lattice(seed, i, j) * (1.0 - tu) + lattice(seed, i + 1, j) * tu;
    let b = lattice(seed, i, j + 1) * (1.0 - tu) + lattice(seed, i + 1, j + 1) * tu;
    a * (1.0 - tv) + b * tv
}

/// Checkerboard modulated by two octaves of colour noise.
fn texture(base: Rgb, seed: u64, cell: f64, u: f64, v: f64, shade: f64) -> Rgb {
    let checker = ((u / cell).floor() + (v / cell).floor()).rem_euclid(2.0);
    let mut out = [0.0; 3];
    for (c, o) in out.iter_mut().enumerate() {
        let cs = seed.wrapping_add(c as u64 * 0x51_7cc1_b727_220a);
        let lo = value_noise(cs, u / 2.5, v / 2.5);
        let hi = value_noise(cs ^ 0xabcd, u / 0.3, v / 0.3);
        let val = base[c] * (0.7 + 0.3 * checker) * (0.75 + 0.5 * lo) + 0.12 * (hi - 0.5);
        *o = (val * shade).clamp(0.0, 1.0);
    }
    out
}

/// Nearest front-facing surface along `o + s d` for `s > 0`.
fn cast(scene: &SceneSpec, o: Vec3, d: Vec3) -> Option<Hit> {
    let h = scene.half_extent();
    let mut best: Option<Hit> = None;
    let mut consider = |s: f64, class: u8, color: &dyn Fn(Vec3) -> Rgb| {
        if s > HIT_EPS && best.is_none_or(|b| s < b.s) {
            let p = [o[0] + s * d[0], o[1] + s * d[1], o[2] + s * d[2]];
            best = Some(Hit { s, class, color: color(p) });
        }
    };
    if d[2] < 0.0 {
        let s = -o[2] / d[2];
        let (x, y) = (o[0] + s * d[0], o[1] + s * d[1]);
        if x.abs() <= h && y.abs() <= h {
            consider(s, CLASS_FLOOR, &|p| texture(scene.floor_color, scene.floor_texture_seed, 1.0, p[0], p[1], 1.0));
        }
    }
    // Walls at +x, -x, +y, -y, seen from inside.
    for (w, (axis, sign)) in [(0usize, 1.0f64), (0, -1.0), (1, 1.0), (1, -1.0)].into_iter().enumerate() {
        if d[axis] * sign <= 0.0 {
            continue;
        }
        let s = (sign * h - o[axis]) / d[axis];
        let other = 1 - axis;
        let (q, z) = (o[other] + s * d[other], o[2] + s * d[2]);
        if q.abs() <= h && (0.0..=scene.wall_height).contains(&z) {
            let shade = if axis == 0 { 0.9 } else { 1.0 };
            consider(s, CLASS_WALL, &|p| {
                texture(scene.wall_colors[w], scene.wall_texture_seeds[w], 0.5, p[other], p[2], shade)
            });
        }
    }
    for b in &scene.obstacles {
        if let Some((s, axis)) = ray_box(o, d, b) {
            let shade = [0.85, 0.95, 1.0][axis];
            let (ua, va) = match axis {
                0 => (1, 2),
                1 => (0, 2),
                _ => (0, 1),
            };
            consider(s, b.class, &|p| texture(b.color, b.texture_seed, 0.4, p[ua], p[va], shade));
        }
    }
    best
}

/// Slab test; returns the entry distance and the axis of the entry face.
fn ray_box(o: Vec3, d: Vec3, b: &BoxObstacle) -> Option<(f64, usize)> {
    let mut t_near = f64::NEG_INFINITY;
    let mut t_far = f64::INFINITY;
    let mut axis = 0;
    for a in 0..3 {
        if d[a].abs() < 1e-15 {
            if o[a] < b.min[a] || o[a] > b.max[a] {
                return None;
            }
            continue;
        }
        let t1 = (b.min[a] - o[a]) / d[a];
        let t2 = (b.max[a] - o[a]) / d[a];
        let (lo, hi) = if t1 < t2 { (t1, t2) } else { (t2, t1) };
        if lo > t_near {
            t_near = lo;
            axis = a;
        }
        t_far = t_far.min(hi);
    }
    (t_near <= t_far && t_near > HIT_EPS).then_some((t_near, axis))
}

fn sky_color(d: Vec3) -> Rgb {
    let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
    let e = (d[2] / n).clamp(0.0, 1.0);
    [0.55 - 0.3 * e, 0.7 - 0.25 * e, 0.95 - 0.1 * e]
}

/// World-frame ray through image point `(u, v)`, scaled so that its
/// camera-frame `z` component is 1.
fn pixel_ray(pose: &Pose, k: &CameraIntrinsics, u: f64, v: f64) -> Vec3 {
    pose.rotation.rotate([(u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0])
}

/// Ray-casts one frame. Depth and label come from the ray through each
/// pixel centre; colour averages a 2x2 grid of sub-pixel rays.
pub fn render_frame(scene: &SceneSpec, pose: &Pose, k: &CameraIntrinsics) -> RenderedFrame {
    let (w, h) = (k.width, k.height);
    let o = pose.translation;
    let mut rgb = Vec::with_capacity(w * h * 3);
    let mut depth = Vec::with_capacity(w * h);
    let mut labels = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let center = cast(scene, o, pixel_ray(pose, k, x as f64, y as f64));
            match center {
                Some(hit) => {
                    depth.push(hit.s);
                    labels.push(hit.class);
                }
                None => {
                    depth.push(0.0);
                    labels.push(CLASS_SKY);
                }
            }
            let mut acc = [0.0; 3];
            for (dx, dy) in [(-0.25, -0.25), (0.25, -0.25), (-0.25, 0.25), (0.25, 0.25)] {
                let d = pixel_ray(pose, k, x as f64 + dx, y as f64 + dy);
                let c = cast(scene, o, d).map_or_else(|| sky_color(d), |hit| hit.color);
                for i in 0..3 {
                    acc[i] += c[i] / 4.0;
                }
            }
            rgb.extend_from_slice(&acc);
        }
    }
    RenderedFrame {
        width: w,
        height: h,
        rgb: Tensor::new(vec![h, w, 3], rgb).expect("sized buffer"),
        depth: Tensor::new(vec![h, w], depth).expect("sized buffer"),
        labels,
        pose: *pose,
    }
}

/// Number of held-out loops: about 30%, at least one when there are two or
/// more loops.
pub fn test_loop_count(loops: usize) -> usize {
    if loops < 2 {
        0
    } else {
        ((loops as f64 * 0.3).round() as usize).clamp(1, loops - 1)
    }
}

/// Renders and writes every frame. Each pose is written first and the
/// frame is rendered from the pose read back, so the dataset's poses and
/// pixels agree bit for bit. The last loops form the test split.
pub fn export_dataset(scene: &SceneSpec, traj: &TrajectorySpec, k: &CameraIntrinsics, out_dir: &Path) -> Result<DatasetIndex> {
    let first_test = traj.loops - test_loop_count(traj.loops);
    let mut sequences = Vec::with_capacity(traj.loops);
    for l in 0..traj.loops {
        let name = format!("seq-{l:02}");
        let dir = out_dir.join(&name);
        let mut frames = Vec::with_capacity(traj.frames_per_loop);
        for (i, pose) in traj.loop_poses(l).iter().enumerate() {
            let mut rec = FrameRecord::at(&dir, i, *pose);
            write_pose_file(&rec.pose_path(), pose)?;
            rec.pose = parse_pose_file(&rec.pose_path())?;
            write_frame(&rec, &render_frame(scene, &rec.pose, k))?;
            frames.push(rec);
        }
        log::debug!("wrote {} frames to {}", frames.len(), dir.display());
        sequences.push(SequenceRecord {
            name,
            split: if l >= first_test { Split::Test } else { Split::Train },
            frames,
        });
    }
    let index = DatasetIndex {
        root: out_dir.to_path_buf(),
        intrinsics: *k,
        classes: CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
        palette: PALETTE.to_vec(),
        extent: scene.extent,
        seed: scene.seed,
        sequences,
    };
    index.write_manifest()?;
    Ok(index)
}
