//! Task descriptors, the swappable linear heads, and the fixed formulas that
//! turn head outputs into masks, depth and keypoint heatmaps.

use std::fmt;
use std::str::FromStr;

use mimq_tensor::{Float, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::data::{KEYPOINTS, SEM_CLASSES, THING_CLASSES};
use crate::error::{Error, Result};
use crate::masking::{mask_count, MaskPlan};
use crate::nn::{linear, linear_specs};
use crate::params::{Init, ParamSpec, Params};

/// Per-patch normalisation epsilon of reconstruction targets.
pub const TARGET_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskId {
    Pretrain,
    Detect,
    Semseg,
    Instseg,
    Panoptic,
    Depth,
    Pose,
}

impl TaskId {
    pub const ALL: [TaskId; 7] = [
        TaskId::Pretrain,
        TaskId::Detect,
        TaskId::Semseg,
        TaskId::Instseg,
        TaskId::Panoptic,
        TaskId::Depth,
        TaskId::Pose,
    ];

    pub const DOWNSTREAM: [TaskId; 6] = [
        TaskId::Detect,
        TaskId::Semseg,
        TaskId::Instseg,
        TaskId::Panoptic,
        TaskId::Depth,
        TaskId::Pose,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TaskId::Pretrain => "pretrain",
            TaskId::Detect => "detect",
            TaskId::Semseg => "semseg",
            TaskId::Instseg => "instseg",
            TaskId::Panoptic => "panoptic",
            TaskId::Depth => "depth",
            TaskId::Pose => "pose",
        }
    }

    pub fn is_segmentation(self) -> bool {
        matches!(self, TaskId::Semseg | TaskId::Instseg | TaskId::Panoptic)
    }

    /// Headline evaluation metric.
    pub fn metric(self) -> &'static str {
        match self {
            TaskId::Pretrain => "recon_mse",
            TaskId::Detect => "AP50",
            TaskId::Semseg => "mIoU",
            TaskId::Instseg => "mask_AP50",
            TaskId::Panoptic => "PQ",
            TaskId::Depth => "RMSE",
            TaskId::Pose => "PCK@0.1",
        }
    }
}

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TaskId::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::Task(format!("unknown task `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    pub task: TaskId,
    /// Query count M (for pre-training, 1 + masked count).
    pub queries: usize,
    /// Object classes K, excluding no-object; 0 where not applicable.
    pub classes: usize,
    pub d_min: f64,
    pub d_max: f64,
    pub keypoints: usize,
}

impl TaskSpec {
    pub fn new(task: TaskId, cfg: &Config) -> TaskSpec {
        let q = &cfg.finetune.queries;
        let grid = cfg.model.encoder.grid(cfg.model.image_size);
        let (queries, classes) = match task {
            TaskId::Pretrain => (1 + mask_count(cfg.pretrain.mask_ratio, grid * grid), 0),
            TaskId::Detect => (q.detect, THING_CLASSES),
            TaskId::Semseg => (q.semseg, SEM_CLASSES),
            TaskId::Instseg => (q.instseg, THING_CLASSES),
            TaskId::Panoptic => (q.panoptic, SEM_CLASSES),
            TaskId::Depth => (q.depth, 0),
            TaskId::Pose => (q.pose, 0),
        };
        TaskSpec {
            task,
            queries,
            classes,
            d_min: cfg.data.d_min,
            d_max: cfg.data.d_max,
            keypoints: if task == TaskId::Pose { KEYPOINTS } else { 0 },
        }
    }

    pub fn prefix(&self) -> String {
        format!("head.{}", self.task.name())
    }
}

/// Parameters of the head of `task`, including its zero-initialised query
/// embeddings.
pub fn head_specs(task: &TaskSpec, dim: usize, fpn_dim: usize, patch_size: usize) -> Vec<ParamSpec> {
    let mut out = Vec::new();
    let h = task.prefix();
    if task.task == TaskId::Pretrain {
        linear_specs(&mut out, &h, dim, patch_size * patch_size * 3);
        return out;
    }
    out.push(ParamSpec::new(format!("{h}.query_embed"), &[task.queries, dim], Init::Zeros));
    match task.task {
        TaskId::Detect => {
            linear_specs(&mut out, &format!("{h}.cls"), dim, task.classes + 1);
            linear_specs(&mut out, &format!("{h}.box"), dim, 4);
        }
        TaskId::Semseg | TaskId::Instseg | TaskId::Panoptic => {
            linear_specs(&mut out, &format!("{h}.cls"), dim, task.classes + 1);
            linear_specs(&mut out, &format!("{h}.mask"), dim, fpn_dim);
        }
        TaskId::Depth => {
            linear_specs(&mut out, &format!("{h}.len"), dim, 1);
            linear_specs(&mut out, &format!("{h}.bin"), dim, fpn_dim);
        }
        TaskId::Pose => linear_specs(&mut out, &format!("{h}.kp"), dim, fpn_dim),
        TaskId::Pretrain => unreachable!(),
    }
    for s in &mut out {
        if s.name.ends_with(".weight") {
            s.init = Init::Normal;
        }
    }
    out
}

#[derive(Debug, Clone)]
pub enum HeadOutput {
    Recon {
        /// `[N, patch²·3]`
        pixels: Tensor,
    },
    Detect {
        /// `[M, 4]` cxcywh in `[0, 1]`.
        boxes: Tensor,
        /// `[M, K+1]`, last column is no-object.
        class_logits: Tensor,
    },
    Seg {
        /// `[M, C]`
        mask_embed: Tensor,
        class_logits: Tensor,
    },
    Depth {
        /// `[M]` on the simplex.
        bin_lengths: Tensor,
        bin_embed: Tensor,
    },
    Pose {
        hm_embed: Tensor,
    },
}

/// Applies the head of `task` to decoder states `hidden` (`[M', D]`). For
/// pre-training, row 0 ([CLS]) is dropped.
pub fn head_forward(p: &Params, task: &TaskSpec, hidden: &Tensor) -> Result<HeadOutput> {
    let h = task.prefix();
    let lin = |name: &str, x: &Tensor| linear(p, &format!("{h}.{name}"), x);
    Ok(match task.task {
        TaskId::Pretrain => {
            let rows = hidden.shape()[0];
            HeadOutput::Recon {
                pixels: linear(p, &h, &hidden.slice(0, 1, rows)?)?,
            }
        }
        TaskId::Detect => HeadOutput::Detect {
            boxes: lin("box", hidden)?.sigmoid(),
            class_logits: lin("cls", hidden)?,
        },
        TaskId::Semseg | TaskId::Instseg | TaskId::Panoptic => HeadOutput::Seg {
            mask_embed: lin("mask", hidden)?,
            class_logits: lin("cls", hidden)?,
        },
        TaskId::Depth => {
            let m = hidden.shape()[0];
            HeadOutput::Depth {
                bin_lengths: lin("len", hidden)?.softmax(0)?.reshape(&[m])?,
                bin_embed: lin("bin", hidden)?,
            }
        }
        TaskId::Pose => HeadOutput::Pose {
            hm_embed: lin("kp", hidden)?,
        },
    })
}

/// `f_b · embedᵀ`: `[n, C] × [M, C] → [n, M]`.
pub fn dot_maps<F: Float>(embed: &Tensor<F>, f_b: &Tensor<F>) -> Result<Tensor<F>> {
    Ok(f_b.matmul(&embed.transpose(0, 1)?)?)
}

/// Mask probabilities `σ(⟨f_b[y,x], f^s_i⟩)`, `[n, M]`.
pub fn seg_masks<F: Float>(mask_embed: &Tensor<F>, f_b: &Tensor<F>) -> Result<Tensor<F>> {
    Ok(dot_maps(mask_embed, f_b)?.sigmoid())
}

/// Raw heatmaps `⟨f_b[y,x], f^k_i⟩`, `[n, M]`.
pub fn pose_heatmaps<F: Float>(hm_embed: &Tensor<F>, f_b: &Tensor<F>) -> Result<Tensor<F>> {
    dot_maps(hm_embed, f_b)
}

/// Bin centres `c_i = d_min + (d_max − d_min)(l_i/2 + Σ_{j<i} l_j)`.
pub fn bin_centers<F: Float>(lengths: &Tensor<F>, d_min: f64, d_max: f64) -> Result<Tensor<F>> {
    let m = lengths.numel();
    let mut tri = vec![F::zero(); m * m];
    for i in 0..m {
        for j in 0..i {
            tri[i * m + j] = F::one();
        }
        tri[i * m + i] = F::from_f64(0.5);
    }
    let tri = Tensor::from_vec(tri, &[m, m])?;
    let prefix = tri.matmul(&lengths.reshape(&[m, 1])?)?.reshape(&[m])?;
    Ok(prefix.scale(d_max - d_min).add_scalar(d_min))
}

/// Per-cell bin probabilities `softmax_i ⟨f_b, z_i⟩`, `[n, M]`.
pub fn bin_probabilities<F: Float>(bin_embed: &Tensor<F>, f_b: &Tensor<F>) -> Result<Tensor<F>> {
    Ok(dot_maps(bin_embed, f_b)?.softmax(1)?)
}

/// Depth `Σ_i c_i p_i` per cell, `[n]`.
pub fn depth_map<F: Float>(bin_embed: &Tensor<F>, f_b: &Tensor<F>, centers: &Tensor<F>) -> Result<Tensor<F>> {
    let probs = bin_probabilities(bin_embed, f_b)?;
    let n = probs.shape()[0];
    let m = centers.numel();
    Ok(probs.matmul(&centers.reshape(&[m, 1])?)?.reshape(&[n])?)
}

/// Arg-max cell centre of each heatmap channel, in pixels.
pub fn decode_keypoints(heatmaps: &[f32], grid: usize, channels: usize, factor: usize) -> Vec<(f64, f64)> {
    (0..channels)
        .map(|j| {
            let best = (0..grid * grid)
                .max_by(|&a, &b| heatmaps[a * channels + j].total_cmp(&heatmaps[b * channels + j]).then(b.cmp(&a)))
                .unwrap_or(0);
            let f = factor as f64;
            (((best % grid) as f64 + 0.5) * f, ((best / grid) as f64 + 0.5) * f)
        })
        .collect()
}

fn check_plan(image: &Tensor, plan: &MaskPlan, patch: usize) -> Result<()> {
    let s = image.shape();
    let (gh, gw) = (s[0] / patch, s[1] / patch);
    if (plan.grid_h, plan.grid_w) != (gh, gw) || s[0] % patch != 0 || s[1] % patch != 0 {
        return Err(Error::GridMismatch {
            plan_h: plan.grid_h,
            plan_w: plan.grid_w,
            grid_h: gh,
            grid_w: gw,
        });
    }
    Ok(())
}

/// Pixel patches at the masked cells of `plan`, `[N, patch²·3]`, each
/// optionally normalised to zero mean and unit variance.
pub fn recon_targets(image: &Tensor, plan: &MaskPlan, patch: usize, normalize: bool) -> Result<Tensor> {
    check_plan(image, plan, patch)?;
    let rows = image.detach().patchify(patch)?.select_rows(&plan.masked)?;
    if !normalize {
        return Ok(rows);
    }
    let d = rows.shape()[1];
    let mut data = rows.to_vec();
    for r in data.chunks_mut(d) {
        let mean = r.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
        let var = r.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + TARGET_EPS).sqrt();
        for v in r.iter_mut() {
            *v = ((*v as f64 - mean) * inv) as f32;
        }
    }
    Ok(Tensor::from_vec(data, rows.shape())?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masking::{make_mask, MaskStrategy};
    use crate::params::ParamStore;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t64(v: &[f64], shape: &[usize]) -> Tensor<f64> {
        Tensor::from_vec(v.to_vec(), shape).unwrap()
    }

    #[test]
    fn bin_center_examples() {
        let c = bin_centers(&t64(&[1.0], &[1]), 0.0, 10.0).unwrap();
        assert_eq!(c.data(), &[5.0]);
        let c = bin_centers(&t64(&[0.2, 0.3, 0.5], &[3]), 0.0, 10.0).unwrap();
        for (a, b) in c.data().iter().zip([1.0, 3.5, 7.5]) {
            assert!((a - b).abs() < 1e-12);
        }
        let m = 8;
        let c = bin_centers(&t64(&vec![1.0 / m as f64; m], &[m]), 1.0, 10.0).unwrap();
        for (i, v) in c.data().iter().enumerate() {
            let want = 1.0 + 9.0 * (2.0 * (i + 1) as f64 - 1.0) / (2.0 * m as f64);
            assert!((v - want).abs() < 1e-12);
        }
    }

    #[test]
    fn depth_map_examples() {
        // single bin: constant depth
        let f = t64(&[0.3, -1.0, 2.0, 0.5], &[2, 2]);
        let d = depth_map(&t64(&[4.0, 1.0], &[1, 2]), &f, &t64(&[6.0], &[1])).unwrap();
        assert!(d.data().iter().all(|&v| (v - 6.0).abs() < 1e-12));
        // zero embeddings: mean of centres
        let d = depth_map(&Tensor::zeros(&[2, 2]), &f, &t64(&[2.0, 6.0], &[2])).unwrap();
        assert!(d.data().iter().all(|&v| (v - 4.0).abs() < 1e-12));
        // logits [0, ln 3] on a 1×1 map
        let f = t64(&[1.0], &[1, 1]);
        let z = t64(&[0.0, 3f64.ln()], &[2, 1]);
        let d = depth_map(&z, &f, &t64(&[2.0, 6.0], &[2])).unwrap();
        assert!((d.item() - 5.0).abs() < 1e-12);
    }

    #[test]
    fn seg_and_pose_examples() {
        let f = t64(&[1.0, 0.0, -2.0, 3.0, 0.5, 0.5, 0.0, -1.0], &[4, 2]);
        let m = seg_masks(&Tensor::zeros(&[3, 2]), &f).unwrap();
        assert!(m.data().iter().all(|&v| v == 0.5));
        let m = seg_masks(&t64(&[1.0, 0.0], &[1, 2]), &f).unwrap();
        for (r, v) in m.data().iter().enumerate() {
            let want = 1.0 / (1.0 + (-f.data()[r * 2]).exp());
            assert!((v - want).abs() < 1e-15);
        }
        let hm = pose_heatmaps(&t64(&[1.0, 1.0], &[1, 2]), &t64(&[1.0, 0.0, 0.0, 2.0], &[2, 2])).unwrap();
        assert_eq!(hm.data(), &[1.0, 2.0]);
        let hm = pose_heatmaps(&Tensor::<f64>::zeros(&[2, 2]), &f).unwrap();
        assert!(hm.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn keypoint_decoding_uses_cell_centres() {
        let hm = [0.0, 1.0, 0.3, 0.2];
        assert_eq!(decode_keypoints(&hm, 2, 1, 4), vec![(6.0, 2.0)]);
    }

    #[test]
    fn recon_target_cases() {
        let plan = make_mask(MaskStrategy::Random, 0.75, 4, 4, 1).unwrap();
        let constant = Tensor::full(&[16, 16, 3], 0.7f32);
        let t = recon_targets(&constant, &plan, 4, true).unwrap();
        assert_eq!(t.shape(), &[12, 48]);
        assert!(t.data().iter().all(|&v| v.abs() < 1e-3));

        let img: Vec<f32> = (0..16 * 16 * 3).map(|i| (i % 97) as f32 / 97.0).collect();
        let img = Tensor::from_vec(img, &[16, 16, 3]).unwrap();
        let t = recon_targets(&img, &plan, 4, false).unwrap();
        // reassemble at masked cells
        for (r, &cell) in plan.masked.iter().enumerate() {
            let (gy, gx) = (cell / 4, cell % 4);
            for dy in 0..4 {
                for dx in 0..4 {
                    for c in 0..3 {
                        let v = t.data()[r * 48 + (dy * 4 + dx) * 3 + c];
                        let src = img.data()[((gy * 4 + dy) * 16 + gx * 4 + dx) * 3 + c];
                        assert_eq!(v.to_bits(), src.to_bits());
                    }
                }
            }
        }
        let wrong = make_mask(MaskStrategy::Random, 0.75, 8, 8, 1).unwrap();
        assert!(matches!(recon_targets(&img, &wrong, 4, true), Err(Error::GridMismatch { .. })));
    }

    #[test]
    fn zero_detect_head_gives_centred_boxes() {
        let cfg = Config::default();
        let task = TaskSpec::new(TaskId::Detect, &cfg);
        let specs = head_specs(&task, 32, 32, 4);
        let mut store = ParamStore::init(&specs, &mut ChaCha8Rng::seed_from_u64(0));
        let names: Vec<String> = store.names().map(str::to_string).collect();
        for n in names {
            store.get_mut(&n).unwrap().data.iter_mut().for_each(|v| *v = 0.0);
        }
        let hidden = Tensor::full(&[16, 32], 0.3f32);
        let HeadOutput::Detect { boxes, class_logits } = head_forward(&store.bind(false), &task, &hidden).unwrap() else {
            panic!()
        };
        assert!(boxes.data().iter().all(|&v| v == 0.5));
        assert_eq!(class_logits.shape(), &[16, 4]);
    }

    #[test]
    fn depth_head_lengths_are_a_simplex() {
        let cfg = Config::default();
        let task = TaskSpec::new(TaskId::Depth, &cfg);
        assert_eq!(task.queries, 64);
        let store = ParamStore::init(&head_specs(&task, 32, 32, 4), &mut ChaCha8Rng::seed_from_u64(2));
        let hidden: Vec<f32> = (0..64 * 32).map(|i| (i as f32 * 0.37).sin()).collect();
        let hidden = Tensor::from_vec(hidden, &[64, 32]).unwrap();
        let HeadOutput::Depth { bin_lengths, .. } = head_forward(&store.bind(false), &task, &hidden).unwrap() else {
            panic!()
        };
        let s: f64 = bin_lengths.data().iter().map(|&v| v as f64).sum();
        assert!((s - 1.0).abs() < 1e-6);
        assert!(bin_lengths.data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn recon_head_drops_cls_row() {
        let cfg = Config::default();
        let task = TaskSpec::new(TaskId::Pretrain, &cfg);
        assert_eq!(task.queries, 193);
        let store = ParamStore::init(&head_specs(&task, 32, 32, 4), &mut ChaCha8Rng::seed_from_u64(2));
        let HeadOutput::Recon { pixels } = head_forward(&store.bind(false), &task, &Tensor::zeros(&[13, 32])).unwrap()
        else {
            panic!()
        };
        assert_eq!(pixels.shape(), &[12, 48]);
    }

    #[test]
    fn task_names_parse() {
        for t in TaskId::ALL {
            assert_eq!(t.name().parse::<TaskId>().unwrap(), t);
        }
        assert!("classify".parse::<TaskId>().is_err());
    }
}
