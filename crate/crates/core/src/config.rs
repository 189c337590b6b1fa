//! Run configuration. Parsed from JSON with a fixed schema version; unknown
//! keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::masking::MaskStrategy;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub patch_size: usize,
    pub stage_dims: Vec<usize>,
    pub stage_depths: Vec<usize>,
    pub stage_heads: Vec<usize>,
    pub fpn_dim: usize,
    pub mlp_ratio: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderConfig {
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub image_size: usize,
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub max_instances: usize,
    pub d_min: f64,
    pub d_max: f64,
    /// Size of the fine-tuning scene pool before `data_frac` capping.
    pub pool_size: usize,
    pub pool_seed: u64,
    pub eval_scenes: usize,
    pub eval_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub optim: OptimConfig,
    pub seed: u64,
    pub mask_strategy: MaskStrategy,
    pub mask_ratio: f64,
    pub log_every: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueryCounts {
    pub detect: usize,
    pub semseg: usize,
    pub instseg: usize,
    pub panoptic: usize,
    pub depth: usize,
    pub pose: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneConfig {
    pub optim: OptimConfig,
    pub seed: u64,
    pub eval_every: usize,
    pub data_frac: f64,
    pub queries: QueryCounts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub schema_version: u32,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            schema_version: SCHEMA_VERSION,
            model: ModelConfig {
                image_size: 64,
                encoder: EncoderConfig {
                    patch_size: 4,
                    stage_dims: vec![32, 48, 64],
                    stage_depths: vec![1, 1, 1],
                    stage_heads: vec![2, 2, 2],
                    fpn_dim: 32,
                    mlp_ratio: 2,
                },
                decoder: DecoderConfig {
                    layers: 6,
                    dim: 32,
                    heads: 2,
                    mlp_ratio: 2,
                },
            },
            data: DataConfig {
                max_instances: 4,
                d_min: 1.0,
                d_max: 10.0,
                pool_size: 2048,
                pool_seed: 17,
                eval_scenes: 64,
                eval_seed: 9001,
            },
            pretrain: PretrainConfig {
                optim: OptimConfig {
                    steps: 300,
                    batch_size: 32,
                    lr: 1.5e-3,
                    weight_decay: 0.05,
                    warmup_steps: 30,
                },
                seed: 0,
                mask_strategy: MaskStrategy::Random,
                mask_ratio: 0.75,
                log_every: 10,
            },
            finetune: FinetuneConfig {
                optim: OptimConfig {
                    steps: 400,
                    batch_size: 8,
                    lr: 1e-3,
                    weight_decay: 0.05,
                    warmup_steps: 20,
                },
                seed: 0,
                eval_every: 50,
                data_frac: 1.0,
                queries: QueryCounts {
                    detect: 16,
                    semseg: 16,
                    instseg: 16,
                    panoptic: 16,
                    depth: 64,
                    pose: 4,
                },
            },
        }
    }
}

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::Config(msg()))
    }
}

impl EncoderConfig {
    pub fn stages(&self) -> usize {
        self.stage_dims.len()
    }

    /// Side of the stage-1 token grid.
    pub fn grid(&self, image_size: usize) -> usize {
        image_size / self.patch_size
    }

    pub fn validate(&self, image_size: usize) -> Result<()> {
        let n = self.stage_dims.len();
        check(n >= 2, || "encoder needs at least two stages".into())?;
        check(n == 3, || "the pyramid fuser expects exactly three stages".into())?;
        check(self.stage_depths.len() == n && self.stage_heads.len() == n, || {
            "stage_dims, stage_depths and stage_heads must have equal length".into()
        })?;
        check(self.stage_dims.windows(2).all(|w| w[0] <= w[1]), || {
            "stage dims must be non-decreasing".into()
        })?;
        for (d, h) in self.stage_dims.iter().zip(&self.stage_heads) {
            check(*h > 0 && d % h == 0, || format!("stage dim {d} not divisible by {h} heads"))?;
        }
        check(self.patch_size > 0, || "patch_size must be positive".into())?;
        let unit = self.patch_size << (n - 1);
        check(image_size.is_multiple_of(unit), || {
            format!("image size {image_size} not divisible by {unit}")
        })?;
        check(self.fpn_dim > 0 && self.fpn_dim.is_multiple_of(2), || "fpn_dim must be even and positive".into())?;
        check(self.mlp_ratio > 0, || "mlp_ratio must be positive".into())
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        check(self.layers >= 1, || "decoder needs at least one layer".into())?;
        check(self.heads > 0 && self.dim.is_multiple_of(self.heads), || {
            format!("decoder dim {} not divisible by {} heads", self.dim, self.heads)
        })?;
        check(self.dim.is_multiple_of(4), || "decoder dim must be a multiple of 4".into())?;
        check(self.mlp_ratio > 0, || "mlp_ratio must be positive".into())
    }
}

impl OptimConfig {
    pub fn validate(&self, what: &str) -> Result<()> {
        check(self.batch_size > 0, || format!("{what}: batch_size must be positive"))?;
        check(self.lr > 0.0 && self.lr.is_finite(), || format!("{what}: lr must be positive"))?;
        check(self.weight_decay >= 0.0, || format!("{what}: weight_decay must be nonnegative"))
    }
}

impl Config {
    pub fn validate(&self) -> Result<()> {
        check(self.schema_version == SCHEMA_VERSION, || {
            format!(
                "schema_version {} unsupported (expected {SCHEMA_VERSION})",
                self.schema_version
            )
        })?;
        let s = self.model.image_size;
        check(s.is_multiple_of(16) && s > 0, || format!("image size {s} not divisible by 16"))?;
        self.model.encoder.validate(s)?;
        self.model.decoder.validate()?;
        check(self.model.encoder.stage_dims[0].is_multiple_of(4), || {
            "first stage dim must be a multiple of 4".into()
        })?;
        let d = &self.data;
        check(d.max_instances >= 1, || "max_instances must be at least 1".into())?;
        check(d.d_min > 0.0 && d.d_min < d.d_max, || "need 0 < d_min < d_max".into())?;
        check(d.pool_size > 0 && d.eval_scenes > 0, || "pool and eval sizes must be positive".into())?;
        self.pretrain.optim.validate("pretrain")?;
        check(self.pretrain.mask_ratio > 0.0 && self.pretrain.mask_ratio < 1.0, || {
            "mask_ratio must lie in (0, 1)".into()
        })?;
        check(self.pretrain.log_every > 0, || "log_every must be positive".into())?;
        self.finetune.optim.validate("finetune")?;
        check(self.finetune.eval_every > 0, || "eval_every must be positive".into())?;
        check(self.finetune.data_frac > 0.0 && self.finetune.data_frac <= 1.0, || {
            "data_frac must lie in (0, 1]".into()
        })?;
        let q = &self.finetune.queries;
        for (name, m) in [
            ("detect", q.detect),
            ("semseg", q.semseg),
            ("instseg", q.instseg),
            ("panoptic", q.panoptic),
            ("depth", q.depth),
            ("pose", q.pose),
        ] {
            check(m >= 1, || format!("query count for {name} must be at least 1"))?;
        }
        check(q.pose == crate::data::KEYPOINTS, || {
            format!("pose needs one query per keypoint ({})", crate::data::KEYPOINTS)
        })?;
        for (name, m) in [("detect", q.detect), ("instseg", q.instseg), ("panoptic", q.panoptic)] {
            check(m > d.max_instances, || {
                format!("{name} needs more queries than max_instances + 1")
            })?;
        }
        check(q.semseg >= crate::data::SEM_CLASSES, || {
            "semseg needs at least one query per class".into()
        })
    }

    pub fn from_json(text: &str) -> Result<Config> {
        let cfg: Config = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Config> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Hex SHA-256 of the compact JSON encoding.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex(&Sha256::digest(&bytes))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid_and_round_trips() {
        let cfg = Config::default();
        cfg.validate().unwrap();
        let back = Config::from_json(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut v: serde_json::Value = serde_json::from_str(&Config::default().to_json()).unwrap();
        v["pretrain"]["mask_ration"] = serde_json::json!(0.5);
        let err = Config::from_json(&v.to_string()).unwrap_err();
        assert!(err.to_string().contains("mask_ration"), "{err}");
    }

    #[test]
    fn wrong_schema_version_is_rejected() {
        let mut cfg = Config::default();
        cfg.schema_version = 99;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn indivisible_image_is_rejected() {
        let mut cfg = Config::default();
        cfg.model.image_size = 72;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn hash_changes_with_content() {
        let a = Config::default();
        let mut b = a.clone();
        b.finetune.seed = 1;
        assert_ne!(a.hash(), b.hash());
    }
}
