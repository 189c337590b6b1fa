//! The full network: parameter inventory, per-task forward passes, losses
//! and evaluation-time inference.

use mimq_tensor::{no_grad, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{Config, ModelConfig};
use crate::data::metrics::{box_iou, mask_iou, ApAccumulator, Confusion, DepthAccumulator, EvalResult, PckAccumulator, PqAccumulator};
use crate::data::{derive_labels, scene_seed, Labels, Scene};
use crate::decoder::{build_finetune_queries, build_pretrain_queries, decode, decoder_specs, LayerTrace, Memory};
use crate::encoder::{encode_full, encode_visible_pyramid, encoder_specs, FeaturePyramid};
use crate::error::{Error, Result};
use crate::heads::{
    bin_centers, decode_keypoints, depth_map, head_forward, head_specs, pose_heatmaps, recon_targets, seg_masks,
    HeadOutput, TaskId, TaskSpec,
};
use crate::losses::{detect_loss, pose_loss, recon_loss, seg_loss, semantic_segments, si_depth_loss};
use crate::masking::MaskPlan;
use crate::params::{ParamSpec, ParamStore, Params};

/// Keypoint hit radius as a fraction of the image side.
pub const PCK_FRACTION: f64 = 0.1;
/// Minimum class probability of a panoptic segment.
pub const PANOPTIC_SCORE: f64 = 0.5;
/// Fraction of a query's own mask that must survive the pixel argmax.
pub const PANOPTIC_OVERLAP: f64 = 0.8;

/// Everything outside `head.*`: identical for every task.
pub fn trunk_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let mut out = encoder_specs(cfg);
    out.extend(decoder_specs(cfg));
    out
}

pub fn task_head_specs(cfg: &ModelConfig, task: &TaskSpec) -> Vec<ParamSpec> {
    head_specs(task, cfg.decoder.dim, cfg.encoder.fpn_dim, cfg.encoder.patch_size)
}

/// Fresh parameters for the trunk plus one head per task. The trunk draws
/// from `seed` alone and each head from its own stream, so the trunk values
/// do not depend on which heads are present.
pub fn init_store(cfg: &ModelConfig, tasks: &[TaskSpec], seed: u64) -> ParamStore {
    let mut store = ParamStore::init(&trunk_specs(cfg), &mut ChaCha8Rng::seed_from_u64(seed));
    for t in tasks {
        let mut rng = ChaCha8Rng::seed_from_u64(scene_seed(seed, 1 + t.task as u64));
        let head = ParamStore::init(&task_head_specs(cfg, t), &mut rng);
        for (name, e) in head.iter() {
            store.insert(name, e.shape.clone(), e.data.clone());
        }
    }
    store
}

/// `[S, S, 3]` image tensor of a scene.
pub fn image_tensor(scene: &Scene) -> Result<Tensor> {
    Ok(Tensor::from_vec(scene.image.clone(), &[scene.size, scene.size, 3])?)
}

/// Masked-patch reconstruction loss of one image.
pub fn pretrain_loss(p: &Params, cfg: &ModelConfig, task: &TaskSpec, image: &Tensor, plan: &MaskPlan) -> Result<Tensor> {
    let visible = encode_visible_pyramid(p, cfg, image, plan)?;
    let queries = build_pretrain_queries(p, cfg, plan)?;
    let hidden = decode(p, cfg, &queries, Memory::Pyramid(&visible), None)?;
    let HeadOutput::Recon { pixels } = head_forward(p, task, &hidden)? else {
        unreachable!("pretrain head yields pixels")
    };
    recon_loss(&pixels, &recon_targets(image, plan, cfg.encoder.patch_size, true)?)
}

/// Decoder states and head outputs of a fine-tuning forward pass.
pub struct Forward {
    pub pyramid: FeaturePyramid,
    pub hidden: Tensor,
    pub head: HeadOutput,
}

impl Forward {
    /// Quarter-scale fused map `f_b`, `[cells, C]`.
    pub fn f_b(&self) -> &Tensor {
        &self.pyramid.quarter_map().tokens
    }
}

pub fn finetune_forward(
    p: &Params,
    cfg: &ModelConfig,
    task: &TaskSpec,
    image: &Tensor,
    trace: Option<&mut Vec<LayerTrace>>,
) -> Result<Forward> {
    if task.task == TaskId::Pretrain {
        return Err(Error::Task("pre-training is not a fine-tuning task".into()));
    }
    let pyramid = encode_full(p, cfg, image)?;
    let queries = build_finetune_queries(p.get("query.cls")?, p.get(&format!("{}.query_embed", task.prefix()))?)?;
    let hidden = decode(p, cfg, &queries, Memory::Pyramid(&pyramid), trace)?;
    let head = head_forward(p, task, &hidden)?;
    Ok(Forward { pyramid, hidden, head })
}

fn depth_prediction(task: &TaskSpec, fwd: &Forward) -> Result<Tensor> {
    let HeadOutput::Depth { bin_lengths, bin_embed } = &fwd.head else {
        unreachable!()
    };
    let centers = bin_centers(bin_lengths, task.d_min, task.d_max)?;
    depth_map(bin_embed, fwd.f_b(), &centers)
}

/// Training loss of one fine-tuning sample.
pub fn task_loss(task: &TaskSpec, fwd: &Forward, labels: &Labels) -> Result<Tensor> {
    let f_b = fwd.f_b();
    Ok(match (&fwd.head, labels) {
        (HeadOutput::Detect { boxes, class_logits }, Labels::Detect { boxes: gb, classes }) => {
            detect_loss(boxes, class_logits, gb, classes)?.loss
        }
        (HeadOutput::Seg { mask_embed, class_logits }, Labels::Semseg { map }) => {
            let (masks, classes) = semantic_segments(map);
            seg_loss(mask_embed, class_logits, f_b, &masks, &classes)?.loss
        }
        (
            HeadOutput::Seg { mask_embed, class_logits },
            Labels::Instseg { masks, classes } | Labels::Panoptic { masks, classes },
        ) => seg_loss(mask_embed, class_logits, f_b, masks, classes)?.loss,
        (HeadOutput::Depth { .. }, Labels::Depth { map }) => si_depth_loss(&depth_prediction(task, fwd)?, map)?,
        (HeadOutput::Pose { hm_embed }, Labels::Pose { heatmaps, .. }) => {
            pose_loss(&pose_heatmaps(hm_embed, f_b)?, heatmaps)?
        }
        _ => {
            return Err(Error::Task(format!(
                "labels do not belong to task {}",
                task.task.name()
            )))
        }
    })
}

fn softmax_rows(logits: &[f32], cols: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks(cols) {
        let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
        let e: Vec<f64> = row.iter().map(|&v| (v as f64 - m).exp()).collect();
        let s: f64 = e.iter().sum();
        out.extend(e.iter().map(|v| v / s));
    }
    out
}

/// Best object class (excluding no-object) of each query with its probability.
fn best_classes(probs: &[f64], k1: usize) -> Vec<(usize, f64)> {
    probs
        .chunks(k1)
        .map(|r| {
            (0..k1 - 1)
                .map(|c| (c, r[c]))
                .fold((0, f64::NEG_INFINITY), |a, b| if b.1 > a.1 { b } else { a })
        })
        .collect()
}

/// Columns of a row-major `[n, m]` matrix as `m` vectors.
fn columns(data: &[f32], n: usize, m: usize) -> Vec<Vec<f64>> {
    (0..m).map(|q| (0..n).map(|i| data[i * m + q] as f64).collect()).collect()
}

/// Per-cell semantic class: argmax over `c` of `Σ_q p_q(c)·m_q`.
pub fn semantic_inference(probs: &[f64], masks: &[Vec<f64>], classes: usize) -> Vec<usize> {
    let k1 = classes + 1;
    let n = masks.first().map_or(0, Vec::len);
    (0..n)
        .map(|i| {
            let mut best = (0, f64::NEG_INFINITY);
            for c in 0..classes {
                let s: f64 = masks.iter().enumerate().map(|(q, m)| probs[q * k1 + c] * m[i]).sum();
                if s > best.1 {
                    best = (c, s);
                }
            }
            best.0
        })
        .collect()
}

/// Non-overlapping `(class, mask)` segments: confident queries compete per
/// cell on `score·mask`, and a query keeps its segment when most of its own
/// mask survives.
pub fn panoptic_inference(probs: &[f64], masks: &[Vec<f64>], classes: usize) -> Vec<(usize, Vec<bool>)> {
    let k1 = classes + 1;
    let n = masks.first().map_or(0, Vec::len);
    let kept: Vec<(usize, usize, f64)> = probs
        .chunks(k1)
        .enumerate()
        .filter_map(|(q, r)| {
            let (c, s) = (0..k1).map(|c| (c, r[c])).fold((0, f64::NEG_INFINITY), |a, b| if b.1 > a.1 { b } else { a });
            (c < classes && s > PANOPTIC_SCORE).then_some((q, c, s))
        })
        .collect();
    let owner: Vec<Option<usize>> = (0..n)
        .map(|i| {
            kept.iter()
                .enumerate()
                .map(|(j, &(q, _, s))| (j, s * masks[q][i]))
                .fold(None, |a: Option<(usize, f64)>, b| match a {
                    Some(a) if a.1 >= b.1 => Some(a),
                    _ => Some(b),
                })
                .map(|(j, _)| j)
        })
        .collect();
    let mut merged: Vec<(usize, Vec<bool>)> = Vec::new();
    for (j, &(q, c, _)) in kept.iter().enumerate() {
        let own = masks[q].iter().filter(|&&v| v >= 0.5).count();
        let seg: Vec<bool> = (0..n).map(|i| owner[i] == Some(j) && masks[q][i] >= 0.5).collect();
        let area = seg.iter().filter(|&&b| b).count();
        if area == 0 || (area as f64) < PANOPTIC_OVERLAP * own as f64 {
            continue;
        }
        // one segment per background class
        match merged.iter_mut().find(|(mc, _)| *mc == c && c == 0) {
            Some((_, m)) => m.iter_mut().zip(&seg).for_each(|(a, &b)| *a |= b),
            None => merged.push((c, seg)),
        }
    }
    merged
}

/// Streams scenes through inference and accumulates the task metrics.
pub struct Evaluator {
    task: TaskSpec,
    grid: usize,
    factor: usize,
    image_size: usize,
    confusion: Confusion,
    ap: ApAccumulator,
    pq: PqAccumulator,
    depth: DepthAccumulator,
    pck: PckAccumulator,
}

impl Evaluator {
    pub fn new(cfg: &ModelConfig, task: &TaskSpec) -> Self {
        let classes = task.classes.max(1);
        Evaluator {
            task: task.clone(),
            grid: cfg.encoder.grid(cfg.image_size),
            factor: cfg.encoder.patch_size,
            image_size: cfg.image_size,
            confusion: Confusion::new(classes),
            ap: ApAccumulator::new(classes),
            pq: PqAccumulator::new(classes),
            depth: DepthAccumulator::default(),
            pck: PckAccumulator::default(),
        }
    }

    pub fn add(&mut self, p: &Params, cfg: &ModelConfig, scene: &Scene) -> Result<()> {
        let labels = derive_labels(scene, self.task.task, self.factor)?;
        let fwd = no_grad(|| finetune_forward(p, cfg, &self.task, &image_tensor(scene)?, None))?;
        let n = self.grid * self.grid;
        let k1 = self.task.classes + 1;
        match (&fwd.head, &labels) {
            (HeadOutput::Detect { boxes, class_logits }, Labels::Detect { boxes: gb, classes }) => {
                let probs = softmax_rows(class_logits.data(), k1);
                let preds: Vec<(usize, f64, [f64; 4])> = best_classes(&probs, k1)
                    .into_iter()
                    .zip(boxes.data().chunks(4))
                    .map(|((c, s), b)| (c, s, std::array::from_fn(|i| b[i] as f64)))
                    .collect();
                let gts: Vec<(usize, [f64; 4])> = classes.iter().copied().zip(gb.iter().copied()).collect();
                self.ap.add_image(&preds, &gts, box_iou);
            }
            (HeadOutput::Seg { mask_embed, class_logits }, _) => {
                let m = mask_embed.shape()[0];
                let probs = softmax_rows(class_logits.data(), k1);
                let masks = columns(no_grad(|| seg_masks(mask_embed, fwd.f_b()))?.data(), n, m);
                match &labels {
                    Labels::Semseg { map } => {
                        let pred = semantic_inference(&probs, &masks, self.task.classes);
                        self.confusion.add(&pred, map)?;
                    }
                    Labels::Instseg { masks: gm, classes } => {
                        let preds: Vec<(usize, f64, Vec<bool>)> = best_classes(&probs, k1)
                            .into_iter()
                            .zip(&masks)
                            .filter_map(|((c, s), mk)| {
                                let bin: Vec<bool> = mk.iter().map(|&v| v >= 0.5).collect();
                                let on: Vec<f64> = mk.iter().copied().filter(|&v| v >= 0.5).collect();
                                if on.is_empty() {
                                    return None;
                                }
                                let mask_score = on.iter().sum::<f64>() / on.len() as f64;
                                Some((c, s * mask_score, bin))
                            })
                            .collect();
                        let gts: Vec<(usize, Vec<bool>)> = classes.iter().copied().zip(gm.iter().cloned()).collect();
                        self.ap.add_image(&preds, &gts, |a, b| mask_iou(a, b));
                    }
                    Labels::Panoptic { masks: gm, classes } => {
                        let preds = panoptic_inference(&probs, &masks, self.task.classes);
                        let gts: Vec<(usize, Vec<bool>)> = classes.iter().copied().zip(gm.iter().cloned()).collect();
                        self.pq.add_image(&preds, &gts);
                    }
                    _ => return Err(Error::Task("segmentation head with non-segmentation labels".into())),
                }
            }
            (HeadOutput::Depth { .. }, Labels::Depth { map }) => {
                let d = no_grad(|| depth_prediction(&self.task, &fwd))?;
                self.depth.add(d.data(), map)?;
            }
            (HeadOutput::Pose { hm_embed }, Labels::Pose { keypoints, .. }) => {
                let hm = no_grad(|| pose_heatmaps(hm_embed, fwd.f_b()))?;
                let pred = decode_keypoints(hm.data(), self.grid, self.task.keypoints, self.factor);
                self.pck.add(&pred, keypoints, PCK_FRACTION * self.image_size as f64)?;
            }
            _ => return Err(Error::Task(format!("cannot evaluate task {}", self.task.task.name()))),
        }
        Ok(())
    }

    /// Headline metric first; depth also reports REL.
    pub fn finish(&self) -> Vec<EvalResult> {
        let t = self.task.task;
        let name = t.name();
        match t {
            TaskId::Detect | TaskId::Instseg => vec![EvalResult::new(name, t.metric(), self.ap.map())],
            TaskId::Semseg => vec![EvalResult::new(name, t.metric(), self.confusion.miou())],
            TaskId::Panoptic => vec![EvalResult::new(name, t.metric(), self.pq.pq())],
            TaskId::Depth => vec![
                EvalResult::new(name, t.metric(), self.depth.rmse()),
                EvalResult::new(name, "REL", self.depth.rel()),
            ],
            TaskId::Pose => vec![EvalResult::new(name, t.metric(), self.pck.pck())],
            TaskId::Pretrain => vec![],
        }
    }
}

/// Metrics of `task` over `scenes`.
pub fn evaluate(store: &ParamStore, cfg: &Config, task: &TaskSpec, scenes: &[Scene]) -> Result<Vec<EvalResult>> {
    let p = store.bind(false);
    let mut ev = Evaluator::new(&cfg.model, task);
    for s in scenes {
        ev.add(&p, &cfg.model, s)?;
    }
    Ok(ev.finish())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_scene, SceneConfig, SceneKind};
    use crate::masking::{make_mask, MaskStrategy};
    use crate::params::LoadPolicy;

    fn scene(kind: SceneKind) -> Scene {
        let cfg = Config::default();
        let sc = SceneConfig {
            size: cfg.model.image_size,
            max_instances: cfg.data.max_instances,
            d_min: cfg.data.d_min,
            d_max: cfg.data.d_max,
            kind,
        };
        gen_scene(5, &sc).unwrap()
    }

    #[test]
    fn non_head_names_are_identical_across_tasks() {
        let cfg = Config::default();
        let names = |t: TaskId| -> Vec<String> {
            init_store(&cfg.model, &[TaskSpec::new(t, &cfg)], 0)
                .names()
                .filter(|n| !n.starts_with("head."))
                .map(String::from)
                .collect()
        };
        let base = names(TaskId::Pretrain);
        for t in TaskId::DOWNSTREAM {
            assert_eq!(names(t), base, "{}", t.name());
        }
    }

    #[test]
    fn trunk_init_ignores_head_set() {
        let cfg = Config::default();
        let a = init_store(&cfg.model, &[TaskSpec::new(TaskId::Semseg, &cfg)], 3);
        let b = init_store(&cfg.model, &[TaskSpec::new(TaskId::Depth, &cfg), TaskSpec::new(TaskId::Semseg, &cfg)], 3);
        for (name, e) in a.iter() {
            assert_eq!(e, b.get(name).unwrap(), "{name}");
        }
    }

    #[test]
    fn policies_nest_on_the_real_inventory() {
        let cfg = Config::default();
        let store = init_store(&cfg.model, &[TaskSpec::new(TaskId::Pretrain, &cfg)], 0);
        let sel = |p: LoadPolicy| -> Vec<&str> { store.names().filter(|n| p.selects(n)).collect() };
        let sets: Vec<Vec<&str>> = LoadPolicy::ALL.iter().map(|&p| sel(p)).collect();
        for w in sets.windows(2) {
            assert!(w[0].len() < w[1].len());
            assert!(w[0].iter().all(|n| w[1].contains(n)));
        }
        assert!(sets[3].iter().all(|n| !n.starts_with("head.")));
    }

    #[test]
    fn pretrain_loss_is_finite_and_reaches_cls() {
        let cfg = Config::default();
        let task = TaskSpec::new(TaskId::Pretrain, &cfg);
        let store = init_store(&cfg.model, std::slice::from_ref(&task), 0);
        let p = store.bind(true);
        let grid = cfg.model.encoder.grid(cfg.model.image_size);
        let plan = make_mask(MaskStrategy::Random, 0.75, grid, grid, 0).unwrap();
        let img = image_tensor(&scene(SceneKind::Shapes)).unwrap();
        let loss = pretrain_loss(&p, &cfg.model, &task, &img, &plan).unwrap();
        assert!(loss.item().is_finite());
        loss.backward().unwrap();
        let g = p.get("query.cls").unwrap().grad().unwrap();
        assert!(g.iter().any(|v| *v != 0.0));
    }

    #[test]
    fn every_task_trains_and_evaluates() {
        let cfg = Config::default();
        for t in TaskId::DOWNSTREAM {
            let task = TaskSpec::new(t, &cfg);
            let store = init_store(&cfg.model, std::slice::from_ref(&task), 1);
            let p = store.bind(true);
            let kind = if t == TaskId::Pose { SceneKind::Figure } else { SceneKind::Shapes };
            let sc = scene(kind);
            let fwd = finetune_forward(&p, &cfg.model, &task, &image_tensor(&sc).unwrap(), None).unwrap();
            let labels = derive_labels(&sc, t, cfg.model.encoder.patch_size).unwrap();
            let loss = task_loss(&task, &fwd, &labels).unwrap();
            assert!(loss.item().is_finite() && loss.item() >= 0.0, "{}", t.name());
            loss.backward().unwrap();
            let e = p.get(&format!("{}.query_embed", task.prefix())).unwrap();
            assert!(e.grad().is_some(), "{}", t.name());
            let res = evaluate(&store, &cfg, &task, &[sc]).unwrap();
            assert_eq!(res[0].metric, t.metric());
            assert!(res[0].value.is_finite());
        }
    }

    #[test]
    fn zero_query_embeddings_give_identical_rows() {
        let cfg = Config::default();
        let task = TaskSpec::new(TaskId::Semseg, &cfg);
        let store = init_store(&cfg.model, std::slice::from_ref(&task), 2);
        let p = store.bind(false);
        let fwd = finetune_forward(&p, &cfg.model, &task, &image_tensor(&scene(SceneKind::Shapes)).unwrap(), None).unwrap();
        let d = cfg.model.decoder.dim;
        let rows: Vec<&[f32]> = fwd.hidden.data().chunks(d).collect();
        for r in &rows[1..] {
            for (a, b) in r.iter().zip(rows[0]) {
                assert!((a - b).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn semantic_inference_picks_weighted_class() {
        // two queries, classes {0, 1} + no-object
        let probs = [0.9, 0.05, 0.05, 0.1, 0.8, 0.1];
        let masks = vec![vec![0.9, 0.1], vec![0.2, 0.95]];
        assert_eq!(semantic_inference(&probs, &masks, 2), vec![0, 1]);
    }

    #[test]
    fn panoptic_inference_drops_unconfident_and_overlapped() {
        let probs = [0.9, 0.05, 0.05, 0.1, 0.8, 0.1, 0.3, 0.3, 0.4];
        let masks = vec![vec![0.9, 0.9, 0.1], vec![0.1, 0.2, 0.9], vec![0.9, 0.9, 0.9]];
        let segs = panoptic_inference(&probs, &masks, 2);
        assert_eq!(segs, vec![(0, vec![true, true, false]), (1, vec![false, false, true])]);
    }
}
