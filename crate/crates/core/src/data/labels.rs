//! Task ground truth derived from a [`Scene`], on the label grid of side
//! `S / factor`.

use crate::data::scene::Scene;
use crate::data::KEYPOINTS;
use crate::error::{Error, Result};
use crate::heads::TaskId;

/// Standard deviation of the keypoint Gaussians, in label cells.
pub const HEATMAP_SIGMA: f64 = 1.0;

#[derive(Debug, Clone, PartialEq)]
pub enum Labels {
    Detect {
        /// Normalised `(cx, cy, w, h)`.
        boxes: Vec<[f64; 4]>,
        /// Thing classes.
        classes: Vec<usize>,
    },
    Semseg {
        /// Semantic class per cell, 0 is background.
        map: Vec<usize>,
    },
    Instseg {
        masks: Vec<Vec<bool>>,
        /// Thing classes.
        classes: Vec<usize>,
    },
    Panoptic {
        /// Pairwise disjoint, covering the grid.
        masks: Vec<Vec<bool>>,
        /// Semantic classes; 0 marks the background region.
        classes: Vec<usize>,
    },
    Depth {
        map: Vec<f32>,
    },
    Pose {
        /// `(x, y)` in pixels.
        keypoints: Vec<(f64, f64)>,
        /// `[cells, KEYPOINTS]` row-major.
        heatmaps: Vec<f32>,
    },
}

/// Owner of each label cell: the instance (or background, `None`) covering
/// the most pixels of the `factor × factor` block; ties go to the nearer.
pub fn cell_owners(scene: &Scene, factor: usize) -> Vec<Option<usize>> {
    let s = scene.size;
    let g = s / factor;
    let n = scene.instances.len();
    let mut out = Vec::with_capacity(g * g);
    let mut counts = vec![0usize; n + 1];
    for gy in 0..g {
        for gx in 0..g {
            counts.iter_mut().for_each(|c| *c = 0);
            for y in gy * factor..(gy + 1) * factor {
                for x in gx * factor..(gx + 1) * factor {
                    counts[scene.owner[y * s + x].map_or(0, |k| k + 1)] += 1;
                }
            }
            let mut best = 0;
            for k in 1..=n {
                if counts[k] >= counts[best] {
                    best = k;
                }
            }
            out.push(if best == 0 { None } else { Some(best - 1) });
        }
    }
    out
}

/// Gaussian heatmaps, `[g·g, k]`, for points given in pixels.
pub fn gaussian_heatmaps(points: &[(f64, f64)], grid: usize, factor: usize) -> Vec<f32> {
    let k = points.len();
    let mut out = vec![0.0f32; grid * grid * k];
    let two_s2 = 2.0 * HEATMAP_SIGMA * HEATMAP_SIGMA;
    for (j, &(px, py)) in points.iter().enumerate() {
        let (cx, cy) = (px / factor as f64 - 0.5, py / factor as f64 - 0.5);
        for y in 0..grid {
            for x in 0..grid {
                let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                out[(y * grid + x) * k + j] = (-d2 / two_s2).exp() as f32;
            }
        }
    }
    out
}

pub fn derive_labels(scene: &Scene, task: TaskId, factor: usize) -> Result<Labels> {
    if factor == 0 || !scene.size.is_multiple_of(factor) {
        return Err(Error::Task(format!("label factor {factor} does not divide {}", scene.size)));
    }
    let g = scene.size / factor;
    let owners = || cell_owners(scene, factor);
    let instance_masks = |owners: &[Option<usize>]| -> Vec<(usize, Vec<bool>)> {
        (0..scene.instances.len())
            .filter_map(|k| {
                let m: Vec<bool> = owners.iter().map(|&o| o == Some(k)).collect();
                m.iter().any(|&b| b).then_some((k, m))
            })
            .collect()
    };
    Ok(match task {
        TaskId::Pretrain => return Err(Error::Task("pre-training has no derived labels".into())),
        TaskId::Detect => Labels::Detect {
            boxes: scene.instances.iter().map(|i| i.bbox).collect(),
            classes: scene.instances.iter().map(|i| i.shape.thing_class()).collect(),
        },
        TaskId::Semseg => Labels::Semseg {
            map: owners()
                .iter()
                .map(|o| o.map_or(0, |k| scene.instances[k].shape.semantic_class()))
                .collect(),
        },
        TaskId::Instseg => {
            let (idx, masks): (Vec<usize>, Vec<Vec<bool>>) = instance_masks(&owners()).into_iter().unzip();
            Labels::Instseg {
                masks,
                classes: idx.iter().map(|&k| scene.instances[k].shape.thing_class()).collect(),
            }
        }
        TaskId::Panoptic => {
            let o = owners();
            let (idx, mut masks): (Vec<usize>, Vec<Vec<bool>>) = instance_masks(&o).into_iter().unzip();
            let mut classes: Vec<usize> = idx.iter().map(|&k| scene.instances[k].shape.semantic_class()).collect();
            let bg: Vec<bool> = o.iter().map(|c| c.is_none()).collect();
            if bg.iter().any(|&b| b) {
                masks.push(bg);
                classes.push(0);
            }
            Labels::Panoptic { masks, classes }
        }
        TaskId::Depth => {
            let s = scene.size;
            let mut map = vec![0.0f32; g * g];
            for (c, v) in map.iter_mut().enumerate() {
                let (gy, gx) = (c / g, c % g);
                let mut acc = 0.0f64;
                for y in gy * factor..(gy + 1) * factor {
                    for x in gx * factor..(gx + 1) * factor {
                        acc += scene.depth[y * s + x] as f64;
                    }
                }
                *v = (acc / (factor * factor) as f64) as f32;
            }
            Labels::Depth { map }
        }
        TaskId::Pose => {
            let inst = scene
                .instances
                .iter()
                .find(|i| i.keypoints.len() == KEYPOINTS)
                .ok_or_else(|| Error::Task("pose scene without a figure".into()))?;
            Labels::Pose {
                keypoints: inst.keypoints.clone(),
                heatmaps: gaussian_heatmaps(&inst.keypoints, g, factor),
            }
        }
    })
}
