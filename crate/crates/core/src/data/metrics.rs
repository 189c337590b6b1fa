//! Dataset-level evaluation metrics, accumulated image by image.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MATCH_IOU: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub task: String,
    pub metric: String,
    pub value: f64,
}

impl EvalResult {
    pub fn new(task: &str, metric: &str, value: f64) -> Self {
        EvalResult {
            task: task.into(),
            metric: metric.into(),
            value,
        }
    }
}

fn same_len(a: usize, b: usize, what: &str) -> Result<()> {
    if a == b {
        Ok(())
    } else {
        Err(Error::Metric(format!("{what}: prediction has {a} entries, ground truth {b}")))
    }
}

/// Class confusion counts for mean IoU.
#[derive(Debug, Clone)]
pub struct Confusion {
    k: usize,
    counts: Vec<u64>,
}

impl Confusion {
    pub fn new(classes: usize) -> Self {
        Confusion {
            k: classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn add(&mut self, pred: &[usize], gt: &[usize]) -> Result<()> {
        same_len(pred.len(), gt.len(), "semantic map")?;
        for (&p, &g) in pred.iter().zip(gt) {
            if p >= self.k || g >= self.k {
                return Err(Error::Metric(format!("class {} out of range", p.max(g))));
            }
            self.counts[g * self.k + p] += 1;
        }
        Ok(())
    }

    /// Per-class IoU; `None` for classes absent from both sides.
    pub fn ious(&self) -> Vec<Option<f64>> {
        (0..self.k)
            .map(|c| {
                let tp = self.counts[c * self.k + c];
                let gt: u64 = (0..self.k).map(|p| self.counts[c * self.k + p]).sum();
                let pred: u64 = (0..self.k).map(|g| self.counts[g * self.k + c]).sum();
                let union = gt + pred - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect()
    }

    pub fn miou(&self) -> f64 {
        let v: Vec<f64> = self.ious().into_iter().flatten().collect();
        if v.is_empty() {
            0.0
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    }
}

/// IoU of two normalised `(cx, cy, w, h)` boxes.
pub fn box_iou(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let corners = |r: &[f64; 4]| (r[0] - r[2] / 2.0, r[1] - r[3] / 2.0, r[0] + r[2] / 2.0, r[1] + r[3] / 2.0);
    let (ax0, ay0, ax1, ay1) = corners(a);
    let (bx0, by0, bx1, by1) = corners(b);
    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let inter = iw * ih;
    let union = a[2] * a[3] + b[2] * b[3] - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

pub fn mask_iou(a: &[bool], b: &[bool]) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Average precision at IoU 0.5, all-point interpolated, averaged over the
/// classes that have ground truth.
#[derive(Debug, Clone)]
pub struct ApAccumulator {
    /// Per class: `(score, true_positive)`.
    dets: Vec<Vec<(f64, bool)>>,
    n_gt: Vec<usize>,
}

impl ApAccumulator {
    pub fn new(classes: usize) -> Self {
        ApAccumulator {
            dets: vec![Vec::new(); classes],
            n_gt: vec![0; classes],
        }
    }

    /// Adds one image. Detections are matched greedily by descending score to
    /// the unmatched same-class ground truth of highest IoU.
    pub fn add_image<T>(&mut self, preds: &[(usize, f64, T)], gts: &[(usize, T)], iou: impl Fn(&T, &T) -> f64) {
        for (c, _) in gts {
            self.n_gt[*c] += 1;
        }
        let mut order: Vec<usize> = (0..preds.len()).collect();
        order.sort_by(|&a, &b| preds[b].1.total_cmp(&preds[a].1));
        let mut used = vec![false; gts.len()];
        for i in order {
            let (c, score, ref item) = preds[i];
            let mut best: Option<(usize, f64)> = None;
            for (j, (gc, g)) in gts.iter().enumerate() {
                if *gc != c || used[j] {
                    continue;
                }
                let v = iou(item, g);
                if v >= MATCH_IOU && best.is_none_or(|(_, b)| v > b) {
                    best = Some((j, v));
                }
            }
            if let Some((j, _)) = best {
                used[j] = true;
            }
            self.dets[c].push((score, best.is_some()));
        }
    }

    pub fn class_ap(&self, c: usize) -> Option<f64> {
        let n = self.n_gt[c];
        if n == 0 {
            return None;
        }
        let mut d = self.dets[c].clone();
        d.sort_by(|a, b| b.0.total_cmp(&a.0));
        let (mut tp, mut fp) = (0usize, 0usize);
        let mut curve = Vec::with_capacity(d.len());
        for (_, hit) in d {
            if hit {
                tp += 1;
            } else {
                fp += 1;
            }
            curve.push((tp as f64 / n as f64, tp as f64 / (tp + fp) as f64));
        }
        // precision envelope from the right
        for i in (0..curve.len().saturating_sub(1)).rev() {
            curve[i].1 = curve[i].1.max(curve[i + 1].1);
        }
        let mut ap = 0.0;
        let mut prev_recall = 0.0;
        for (r, p) in curve {
            ap += (r - prev_recall) * p;
            prev_recall = r;
        }
        Some(ap)
    }

    pub fn map(&self) -> f64 {
        let v: Vec<f64> = (0..self.n_gt.len()).filter_map(|c| self.class_ap(c)).collect();
        if v.is_empty() {
            0.0
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    }
}

/// Panoptic quality over non-overlapping segments.
#[derive(Debug, Clone)]
pub struct PqAccumulator {
    tp: Vec<usize>,
    fp: Vec<usize>,
    fneg: Vec<usize>,
    iou_sum: Vec<f64>,
}

impl PqAccumulator {
    pub fn new(classes: usize) -> Self {
        PqAccumulator {
            tp: vec![0; classes],
            fp: vec![0; classes],
            fneg: vec![0; classes],
            iou_sum: vec![0.0; classes],
        }
    }

    /// Segments are `(class, mask)`. A pair matches when classes agree and
    /// IoU exceeds 0.5, which makes matches unique.
    pub fn add_image(&mut self, preds: &[(usize, Vec<bool>)], gts: &[(usize, Vec<bool>)]) {
        let mut pred_hit = vec![false; preds.len()];
        for (gc, gm) in gts {
            let hit = preds
                .iter()
                .enumerate()
                .find(|(i, (pc, pm))| !pred_hit[*i] && pc == gc && mask_iou(pm, gm) > MATCH_IOU);
            match hit {
                Some((i, (_, pm))) => {
                    pred_hit[i] = true;
                    self.tp[*gc] += 1;
                    self.iou_sum[*gc] += mask_iou(pm, gm);
                }
                None => self.fneg[*gc] += 1,
            }
        }
        for (i, (pc, _)) in preds.iter().enumerate() {
            if !pred_hit[i] {
                self.fp[*pc] += 1;
            }
        }
    }

    pub fn pq(&self) -> f64 {
        let v: Vec<f64> = (0..self.tp.len())
            .filter(|&c| self.tp[c] + self.fp[c] + self.fneg[c] > 0)
            .map(|c| self.iou_sum[c] / (self.tp[c] as f64 + 0.5 * (self.fp[c] + self.fneg[c]) as f64))
            .collect();
        if v.is_empty() {
            0.0
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct DepthAccumulator {
    sq: f64,
    rel: f64,
    n: usize,
}

impl DepthAccumulator {
    pub fn add(&mut self, pred: &[f32], gt: &[f32]) -> Result<()> {
        same_len(pred.len(), gt.len(), "depth map")?;
        for (&p, &g) in pred.iter().zip(gt) {
            let (p, g) = (p as f64, g as f64);
            self.sq += (p - g).powi(2);
            self.rel += (p - g).abs() / g;
            self.n += 1;
        }
        Ok(())
    }

    pub fn rmse(&self) -> f64 {
        (self.sq / self.n.max(1) as f64).sqrt()
    }

    pub fn rel(&self) -> f64 {
        self.rel / self.n.max(1) as f64
    }
}

/// Fraction of keypoints within `radius` pixels of the truth.
#[derive(Debug, Clone, Default)]
pub struct PckAccumulator {
    hit: usize,
    total: usize,
}

impl PckAccumulator {
    pub fn add(&mut self, pred: &[(f64, f64)], gt: &[(f64, f64)], radius: f64) -> Result<()> {
        same_len(pred.len(), gt.len(), "keypoints")?;
        for (p, g) in pred.iter().zip(gt) {
            self.hit += (((p.0 - g.0).powi(2) + (p.1 - g.1).powi(2)).sqrt() <= radius) as usize;
            self.total += 1;
        }
        Ok(())
    }

    pub fn pck(&self) -> f64 {
        self.hit as f64 / self.total.max(1) as f64
    }
}
