use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, Pose};
use crate::networks::{FrameInput, ModelConfig};
use crate::synthworld::RenderedFrame;

use super::{read_frame, DatasetIndex, Split};

/// One frame decoded into network inputs and targets.
#[derive(Clone, Debug)]
pub struct LoadedFrame {
    pub input: FrameInput,
    pub labels: Vec<usize>,
    pub pose: Pose,
}

#[derive(Clone, Debug)]
pub struct LoadedSequence {
    pub name: String,
    pub frames: Vec<LoadedFrame>,
}

/// All frames of one split, in memory.
#[derive(Clone, Debug)]
pub struct SplitData {
    pub intrinsics: CameraIntrinsics,
    pub classes: Vec<String>,
    pub sequences: Vec<LoadedSequence>,
}

impl SplitData {
    pub fn load(index: &DatasetIndex, split: Split) -> Result<SplitData> {
        let k = index.intrinsics;
        let seqs = index
            .split(split)
            .map(|s| {
                let frames = s
                    .frames
                    .iter()
                    .map(|r| read_frame(r, k.width, k.height))
                    .collect::<Result<Vec<_>>>()?;
                Ok((s.name.clone(), frames))
            })
            .collect::<Result<Vec<_>>>()?;
        SplitData::from_frames(k, index.classes.clone(), seqs)
    }

    pub fn from_frames(
        intrinsics: CameraIntrinsics,
        classes: Vec<String>,
        sequences: Vec<(String, Vec<RenderedFrame>)>,
    ) -> Result<SplitData> {
        let n_classes = classes.len();
        let mut out = Vec::with_capacity(sequences.len());
        for (name, frames) in sequences {
            let mut loaded = Vec::with_capacity(frames.len());
            for (i, f) in frames.into_iter().enumerate() {
                if (f.width, f.height) != (intrinsics.width, intrinsics.height) {
                    return Err(Error::Dataset(format!(
                        "{name} frame {i}: {}x{} image, intrinsics are {}x{}",
                        f.width, f.height, intrinsics.width, intrinsics.height
                    )));
                }
                if let Some(&l) = f.labels.iter().find(|&&l| l as usize >= n_classes) {
                    return Err(Error::Dataset(format!(
                        "{name} frame {i}: label {l} but only {n_classes} classes are declared"
                    )));
                }
                loaded.push(LoadedFrame {
                    input: FrameInput::from_rgb(&f.rgb, f.depth)?,
                    labels: f.labels.iter().map(|&l| l as usize).collect(),
                    pose: f.pose,
                });
            }
            out.push(LoadedSequence { name, frames: loaded });
        }
        Ok(SplitData {
            intrinsics,
            classes,
            sequences: out,
        })
    }

    pub fn num_frames(&self) -> usize {
        self.sequences.iter().map(|s| s.frames.len()).sum()
    }

    /// Checks that a model with `config` can consume these frames.
    pub fn check_compatible(&self, config: &ModelConfig) -> Result<()> {
        let k = &self.intrinsics;
        if k.width != config.input_size || k.height != config.input_size {
            return Err(Error::Dataset(format!(
                "frames are {}x{} but the model expects {s}x{s}",
                k.width,
                k.height,
                s = config.input_size
            )));
        }
        if self.classes.len() != config.num_classes {
            return Err(Error::Dataset(format!(
                "dataset declares {} classes but the model predicts {}",
                self.classes.len(),
                config.num_classes
            )));
        }
        Ok(())
    }
}
