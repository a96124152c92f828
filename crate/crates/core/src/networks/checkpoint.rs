//! Binary checkpoints:
//!
//! ```text
//! "MTLCKPT1" u32 version
//! u32 n_meta   { u32 len, key bytes, u32 len, value bytes }*
//! u32 n_tensor { u32 len, name bytes, u32 ndim, u64 dims*, f64 data* }*
//! ```
//!
//! All integers and floats are little-endian.

use std::collections::BTreeMap;
use std::path::Path;

use super::{JointModel, ModelConfig, Task};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::fsutil;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MTLCKPT1";
pub const CHECKPOINT_VERSION: u32 = 1;

const MODEL_PREFIX: &str = "model.";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub metadata: BTreeMap<String, String>,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    /// Snapshot of every parameter of `model`, tagged with `task`.
    pub fn from_model(task: Task, model: &JointModel) -> Checkpoint {
        let mut metadata = BTreeMap::new();
        metadata.insert("task".to_string(), task.to_string());
        for (k, v) in model.config().to_pairs() {
            metadata.insert(format!("{MODEL_PREFIX}{k}"), v);
        }
        Checkpoint {
            metadata,
            tensors: model.params().iter().map(|(n, t)| (n.to_string(), t.clone())).collect(),
        }
    }

    pub fn task(&self) -> Result<Task> {
        self.metadata
            .get("task")
            .ok_or_else(|| Error::Checkpoint("missing `task` metadata".into()))?
            .parse()
            .map_err(|e: Error| Error::Checkpoint(e.to_string()))
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        ModelConfig::from_pairs(
            self.metadata
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(MODEL_PREFIX).map(|k| (k, v.as_str()))),
        )
        .map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Rebuilds the model; every parameter must be present with a matching
    /// shape and no extra tensors are allowed.
    pub fn to_model(&self) -> Result<JointModel> {
        let mut model = JointModel::new(self.model_config()?)?;
        if self.tensors.len() != model.params().len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} tensors, model has {} parameters",
                self.tensors.len(),
                model.params().len()
            )));
        }
        for (name, t) in &self.tensors {
            model.params_mut().set(name, t.clone())?;
        }
        Ok(model)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.metadata.len() as u32).to_le_bytes());
        for (k, v) in &self.metadata {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            put_str(&mut out, name);
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {version}, expected {CHECKPOINT_VERSION}"
            )));
        }
        let mut metadata = BTreeMap::new();
        for _ in 0..r.u32()? {
            let k = r.string()?;
            let v = r.string()?;
            metadata.insert(k, v);
        }
        let n = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(n.min(4096));
        for _ in 0..n {
            let name = r.string()?;
            let ndim = r.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim.min(8));
            for _ in 0..ndim {
                shape.push(usize::try_from(r.u64()?).map_err(|_| Error::Checkpoint("dimension overflow".into()))?);
            }
            let len = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|&l| l <= (bytes.len() - r.pos) / 8)
                .ok_or_else(|| Error::Checkpoint(format!("tensor `{name}` is truncated")))?;
            let data = (0..len).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            tensors.push((name, Tensor::new(shape, data)?));
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint { metadata, tensors })
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint("unexpected end of file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("invalid utf-8 string".into()))
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    fsutil::write_atomic(path, &ckpt.to_bytes())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&fsutil::read(path)?).map_err(|e| match e {
        Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
        e => e,
    })
}

/// Which single-task checkpoint supplies a parameter when initializing joint
/// training. `None` means the parameter only exists in joint training and
/// keeps its fresh initialization.
pub fn joint_owner(name: &str) -> Option<Task> {
    const LOC: [&str; 4] = ["u.s_x", "u.s_q", "u.s_x_rel", "u.s_q_rel"];
    const VO: [&str; 2] = ["u.s_x_vo", "u.s_q_vo"];
    if LOC.contains(&name) || ["trunk.", "pose.", "fuse.temporal."].iter().any(|p| name.starts_with(p)) {
        Some(Task::Loc)
    } else if VO.contains(&name) || name.starts_with("odo.") {
        Some(Task::Vo)
    } else if ["seg.", "dec.", "fuse.warp_"].iter().any(|p| name.starts_with(p)) {
        Some(Task::Seg)
    } else {
        None
    }
}

/// Fresh joint model with each stream copied from the checkpoint of the
/// task that owns it. The three checkpoints must share one architecture.
pub fn merge_for_joint(loc: &Checkpoint, vo: &Checkpoint, seg: &Checkpoint) -> Result<JointModel> {
    for (want, c) in [(Task::Loc, loc), (Task::Vo, vo), (Task::Seg, seg)] {
        let got = c.task()?;
        if got != want {
            return Err(Error::Checkpoint(format!("expected a `{want}` checkpoint, got `{got}`")));
        }
    }
    let config = loc.model_config()?;
    for (t, c) in [(Task::Vo, vo), (Task::Seg, seg)] {
        if c.model_config()? != config {
            return Err(Error::Checkpoint(format!("`{t}` checkpoint architecture differs from `loc`")));
        }
    }
    let mut model = JointModel::new(config)?;
    let names: Vec<String> = model.params().iter().map(|(n, _)| n.to_string()).collect();
    for name in names {
        let src = match joint_owner(&name) {
            Some(Task::Loc) => loc,
            Some(Task::Vo) => vo,
            Some(Task::Seg) => seg,
            _ => continue,
        };
        let t = src
            .tensor(&name)
            .ok_or_else(|| Error::Checkpoint(format!("parameter `{name}` missing from its checkpoint")))?;
        model.params_mut().set(&name, t.clone())?;
    }
    if model.config().adaptive_fusion {
        near_passthrough(&mut model, "fuse.sem")?;
    }
    Ok(model)
}

/// Turns a fresh fusion layer into one that passes its first input through,
/// so joint training starts from the pretrained pose stream. The second
/// input keeps a tenth of its random weights, which keeps its gradient
/// nonzero.
fn near_passthrough(model: &mut JointModel, layer: &str) -> Result<()> {
    let name = format!("{layer}.w");
    let mut w = model
        .params()
        .by_name(&name)
        .ok_or_else(|| Error::Checkpoint(format!("missing `{name}`")))?
        .clone();
    let (c_in, c_out) = (w.shape()[2], w.shape()[3]);
    let c_a = c_out;
    for k in 0..c_in {
        for o in 0..c_out {
            let v = &mut w.data_mut()[k * c_out + o];
            *v = if k < c_a {
                if k == o { 1.0 } else { 0.0 }
            } else {
                0.1 * *v
            };
        }
    }
    model.params_mut().set(&name, w)?;
    model.params_mut().set(&format!("{layer}.b"), Tensor::zeros(&[c_out]))?;
    model.params_mut().set(&format!("{layer}.w_a"), Tensor::ones(&[c_a]))?;
    Ok(())
}
