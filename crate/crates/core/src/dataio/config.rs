use std::path::Path;

use crate::error::{Error, Result};
use crate::fsutil;
use crate::networks::ModelConfig;

/// Training run configuration. Text form is one `key = value` per line;
/// `#` starts a comment.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub lr_single: f64,
    pub lr_joint: f64,
    /// Frames per training segment; each segment is processed in temporal
    /// order with the feature cache threaded through it.
    pub batch: usize,
    /// Seed for segment shuffling and dropout.
    pub seed: u64,
    /// Global gradient-norm clip.
    pub grad_clip: f64,
    /// Random crops for segmentation pretraining.
    pub seg_crop_augment: bool,
    /// Start each task weight of the joint stage at the log of that task's
    /// initial loss.
    pub warm_start_task_weights: bool,
    pub model: ModelConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-10,
            lr_single: 1e-3,
            lr_joint: 1e-4,
            batch: 8,
            seed: 0,
            grad_clip: 10.0,
            seg_crop_augment: false,
            warm_start_task_weights: true,
            model: ModelConfig::default(),
        }
    }
}

const MODEL_KEYS: [&str; 10] = [
    "input_size",
    "stage_channels",
    "fc_dim",
    "decoder_channels",
    "num_classes",
    "dropout",
    "adaptive_fusion",
    "warp_fusion_stages",
    "share_seg_encoder",
    "model_seed",
];

impl RunConfig {
    /// Applies one setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let err = |ty: &str| Error::Config {
            key: key.to_string(),
            msg: format!("expected {ty}, got `{value}`"),
        };
        let real = || -> Result<f64> {
            value
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| err("a real number"))
        };
        let positive = || -> Result<f64> {
            let v = real()?;
            if v > 0.0 {
                Ok(v)
            } else {
                Err(Error::Config {
                    key: key.to_string(),
                    msg: format!("must be positive, got {v}"),
                })
            }
        };
        let unit = || -> Result<f64> {
            let v = real()?;
            if (0.0..1.0).contains(&v) {
                Ok(v)
            } else {
                Err(Error::Config {
                    key: key.to_string(),
                    msg: format!("must be in [0, 1), got {v}"),
                })
            }
        };
        match key {
            "adam_beta1" => self.adam_beta1 = unit()?,
            "adam_beta2" => self.adam_beta2 = unit()?,
            "adam_eps" => self.adam_eps = positive()?,
            "lr_single" => self.lr_single = positive()?,
            "lr_joint" => self.lr_joint = positive()?,
            "grad_clip" => self.grad_clip = positive()?,
            "batch" => {
                self.batch = value
                    .parse::<usize>()
                    .ok()
                    .filter(|&b| b >= 1)
                    .ok_or_else(|| err("a positive integer"))?
            }
            "seed" => self.seed = value.parse().map_err(|_| err("a non-negative integer"))?,
            "seg_crop_augment" => self.seg_crop_augment = value.parse().map_err(|_| err("true or false"))?,
            "warm_start_task_weights" => {
                self.warm_start_task_weights = value.parse().map_err(|_| err("true or false"))?
            }
            k if MODEL_KEYS.contains(&k) => {
                let mut pairs = self.model.to_pairs();
                for p in pairs.iter_mut().filter(|p| p.0 == k) {
                    p.1 = value.to_string();
                }
                self.model = ModelConfig::from_pairs(pairs.iter().map(|(k, v)| (k.as_str(), v.as_str())))?;
            }
            _ => {
                return Err(Error::Config {
                    key: key.to_string(),
                    msg: "unknown key".into(),
                })
            }
        }
        Ok(())
    }
}

pub fn parse_config(text: &str) -> Result<RunConfig> {
    let mut c = RunConfig::default();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Config {
            key: line.to_string(),
            msg: format!("line {}: expected `key = value`", i + 1),
        })?;
        let v = v.trim();
        let v = v.strip_prefix('"').and_then(|s| s.strip_suffix('"')).unwrap_or(v);
        c.set(k.trim(), v)?;
    }
    Ok(c)
}

pub fn read_config(path: &Path) -> Result<RunConfig> {
    parse_config(&fsutil::read_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c = parse_config("").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!((c.adam_beta1, c.adam_beta2, c.adam_eps), (0.9, 0.999, 1e-10));
        assert_eq!((c.lr_single, c.lr_joint, c.batch), (1e-3, 1e-4, 8));
        assert_eq!(c.model.dropout, 0.2);
    }

    #[test]
    fn values_are_typed() {
        let c = parse_config("# comment\nlr_joint = 1e-4\nbatch=4\nadaptive_fusion = false\nwarp_fusion_stages = \"4,5\"\n").unwrap();
        assert_eq!(c.lr_joint, 1e-4);
        assert_eq!(c.batch, 4);
        assert!(!c.model.adaptive_fusion);
        assert_eq!(c.model.warp_fusion_stages, crate::networks::WarpFusionStages::Four5);
    }

    #[test]
    fn errors_name_the_key() {
        for (text, key) in [
            ("bogus = 1", "bogus"),
            ("batch = 2.5", "batch"),
            ("lr_single = fast", "lr_single"),
            ("adaptive_fusion = maybe", "adaptive_fusion"),
        ] {
            let e = parse_config(text).unwrap_err();
            assert!(matches!(&e, Error::Config { key: k, .. } if k == key), "{text}: {e}");
            assert!(e.to_string().contains(key));
        }
    }
}
