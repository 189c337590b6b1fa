//! Ablation grids: each arm pre-trains (where the arm changes pre-training)
//! and fine-tunes semantic segmentation, and one summary row is reported
//! per arm.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::checkpoint::{write_atomic, Checkpoint};
use crate::config::Config;
use crate::error::{Error, Result};
use crate::heads::TaskId;
use crate::masking::MaskStrategy;
use crate::params::LoadPolicy;
use crate::train::{finetune, pretrain, MetricsLog};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ablation {
    MaskStrategy,
    MaskRatio,
    LoadPolicy,
    DecoderDepth,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [
        Ablation::MaskStrategy,
        Ablation::MaskRatio,
        Ablation::LoadPolicy,
        Ablation::DecoderDepth,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::MaskStrategy => "mask-strategy",
            Ablation::MaskRatio => "mask-ratio",
            Ablation::LoadPolicy => "load-policy",
            Ablation::DecoderDepth => "decoder-depth",
        }
    }

    /// Arm labels in table order.
    pub fn arms(self) -> Vec<String> {
        match self {
            Ablation::MaskStrategy => MaskStrategy::ALL.iter().map(|s| s.name().to_string()).collect(),
            Ablation::MaskRatio => MASK_RATIOS.iter().map(|r| r.to_string()).collect(),
            Ablation::LoadPolicy => LoadPolicy::ALL.iter().map(|p| p.name().to_string()).collect(),
            Ablation::DecoderDepth => DECODER_DEPTHS.iter().map(|d| d.to_string()).collect(),
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation `{s}`")))
    }
}

pub const MASK_RATIOS: [f64; 3] = [0.5, 0.6, 0.75];
pub const DECODER_DEPTHS: [usize; 3] = [3, 6, 9];

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub arm: String,
    /// Mean reconstruction loss over the last logging window; `None` when
    /// the arm does not pre-train.
    pub pretrain_loss: Option<f64>,
    pub miou: f64,
}

pub const SUMMARY_HEADER: &str = "ablation,arm,pretrain_recon_mse,semseg_mIoU";

pub fn summary_csv(what: Ablation, rows: &[AblationRow]) -> String {
    let mut out = format!("{SUMMARY_HEADER}\n");
    for r in rows {
        let pre = r.pretrain_loss.map(|v| v.to_string()).unwrap_or_default();
        out.push_str(&format!("{},{},{},{}\n", what.name(), r.arm, pre, r.miou));
    }
    out
}

fn semseg_miou(cfg: &Config, init: Option<&Checkpoint>, policy: LoadPolicy, log: &mut MetricsLog) -> Result<f64> {
    let res = finetune(cfg, &[TaskId::Semseg], init, policy, log)?;
    Ok(res.final_metrics.first().map_or(0.0, |r| r.value))
}

/// Runs every arm of `what` in order, writing per-arm metric CSVs and
/// `summary.csv` into `out`.
pub fn run_ablation(cfg: &Config, what: Ablation, out: &Path) -> Result<Vec<AblationRow>> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let log_for = |arm: &str, phase: &str| MetricsLog::to_file(out.join(format!("{arm}_{phase}.csv")));
    let mut rows = Vec::new();
    match what {
        Ablation::LoadPolicy => {
            let pre = pretrain(cfg, &mut log_for("shared", "pretrain")?)?;
            let window = cfg.pretrain.log_every;
            for policy in LoadPolicy::ALL {
                let arm = policy.name();
                rows.push(AblationRow {
                    arm: arm.into(),
                    pretrain_loss: pre.final_loss(window),
                    miou: semseg_miou(cfg, Some(&pre.checkpoint), policy, &mut log_for(arm, "finetune")?)?,
                });
            }
        }
        _ => {
            for arm in what.arms() {
                let mut c = cfg.clone();
                match what {
                    Ablation::MaskStrategy => c.pretrain.mask_strategy = arm.parse()?,
                    Ablation::MaskRatio => {
                        c.pretrain.mask_ratio = arm.parse().map_err(|_| Error::Config(format!("bad ratio {arm}")))?
                    }
                    Ablation::DecoderDepth => {
                        c.model.decoder.layers = arm.parse().map_err(|_| Error::Config(format!("bad depth {arm}")))?
                    }
                    Ablation::LoadPolicy => unreachable!(),
                }
                let pre = pretrain(&c, &mut log_for(&arm, "pretrain")?)?;
                rows.push(AblationRow {
                    pretrain_loss: pre.final_loss(c.pretrain.log_every),
                    miou: semseg_miou(&c, Some(&pre.checkpoint), LoadPolicy::Full, &mut log_for(&arm, "finetune")?)?,
                    arm,
                });
            }
        }
    }
    write_atomic(&out.join("summary.csv"), summary_csv(what, &rows).as_bytes())?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip_and_grids_have_expected_sizes() {
        for a in Ablation::ALL {
            assert_eq!(a.name().parse::<Ablation>().unwrap(), a);
        }
        assert!("depth".parse::<Ablation>().is_err());
        assert_eq!(Ablation::MaskStrategy.arms(), vec!["random", "block", "grid"]);
        assert_eq!(Ablation::MaskRatio.arms(), vec!["0.5", "0.6", "0.75"]);
        assert_eq!(Ablation::LoadPolicy.arms().len(), 4);
        assert_eq!(Ablation::DecoderDepth.arms(), vec!["3", "6", "9"]);
    }

    #[test]
    fn tiny_mask_ratio_grid_writes_three_rows() {
        let mut c = Config::default();
        c.pretrain.optim.steps = 1;
        c.pretrain.optim.batch_size = 1;
        c.pretrain.optim.warmup_steps = 0;
        c.finetune.optim.steps = 1;
        c.finetune.optim.batch_size = 1;
        c.finetune.optim.warmup_steps = 0;
        c.data.eval_scenes = 1;
        let dir = tempfile::tempdir().unwrap();
        let rows = run_ablation(&c, Ablation::MaskRatio, dir.path()).unwrap();
        assert_eq!(rows.len(), 3);
        let summary = std::fs::read_to_string(dir.path().join("summary.csv")).unwrap();
        assert_eq!(summary.lines().count(), 4);
        assert!(summary.starts_with(SUMMARY_HEADER));
        assert!(dir.path().join("0.6_pretrain.csv").exists());
    }
}
