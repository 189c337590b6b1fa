//! Training objectives. Set losses match predictions to ground truth with
//! [`hungarian`] on detached costs and then score the matched pairs.

use mimq_tensor::{Float, Tensor};

use crate::error::{Error, Result};
use crate::matching::{hungarian, CostMatrix};

pub const LAMBDA_CLS: f64 = 2.0;
pub const LAMBDA_L1: f64 = 5.0;
pub const LAMBDA_MASK: f64 = 5.0;
/// Cross-entropy weight of the no-object class.
pub const NO_OBJECT_WEIGHT: f64 = 0.1;
pub const SI_LAMBDA: f64 = 0.85;
pub const POSE_BETA: f64 = 1.0;
/// Below this the SI radicand counts as zero.
const SI_FLOOR: f64 = 1e-12;

/// A set loss and the `(query, gt)` pairs it was computed on.
#[derive(Debug, Clone)]
pub struct SetLoss<F: Float = f32> {
    pub loss: Tensor<F>,
    pub pairs: Vec<(usize, usize)>,
}

fn shape_error(op: &str, a: &[usize], b: &[usize]) -> Error {
    Error::Task(format!("{op}: prediction shape {a:?} does not match target {b:?}"))
}

/// `(1/N)·Σᵢ ‖pᵢ − tᵢ‖²` over `N` rows.
pub fn recon_loss<F: Float>(pred: &Tensor<F>, target: &Tensor<F>) -> Result<Tensor<F>> {
    if pred.shape() != target.shape() || pred.ndim() != 2 || pred.shape()[0] == 0 {
        return Err(shape_error("recon_loss", pred.shape(), target.shape()));
    }
    let n = pred.shape()[0] as f64;
    Ok(pred.sub(target)?.square().sum()?.scale(1.0 / n))
}

fn softmax_rows(logits: &[f64], cols: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks(cols) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        out.extend(e.iter().map(|v| v / s));
    }
    out
}

/// Class weights `[1, …, 1, NO_OBJECT_WEIGHT]` over `K + 1` columns.
pub fn class_weights(classes: usize) -> Vec<f64> {
    let mut w = vec![1.0; classes + 1];
    w[classes] = NO_OBJECT_WEIGHT;
    w
}

/// Weighted CE where matched queries target their gt class and the rest
/// target no-object.
fn class_loss<F: Float>(logits: &Tensor<F>, pairs: &[(usize, usize)], gt_classes: &[usize]) -> Result<Tensor<F>> {
    let (m, k1) = (logits.shape()[0], logits.shape()[1]);
    let mut targets = vec![k1 - 1; m];
    for &(q, g) in pairs {
        targets[q] = gt_classes[g];
    }
    Ok(logits.cross_entropy(&targets, Some(&class_weights(k1 - 1)))?)
}

fn check_logits<F: Float>(logits: &Tensor<F>, rows: usize, gt_classes: &[usize]) -> Result<usize> {
    let s = logits.shape();
    if s.len() != 2 || s[0] != rows || s[1] < 2 {
        return Err(Error::Task(format!("class logits of shape {s:?} for {rows} queries")));
    }
    let k = s[1] - 1;
    if let Some(&c) = gt_classes.iter().find(|&&c| c >= k) {
        return Err(Error::Task(format!("gt class {c} out of range for {k} classes")));
    }
    if gt_classes.len() > rows {
        return Err(Error::Task(format!("{} ground-truth items exceed {rows} queries", gt_classes.len())));
    }
    Ok(k)
}

/// Set loss for boxes. `boxes` is `[M, 4]`, `class_logits` `[M, K+1]`.
pub fn detect_loss<F: Float>(
    boxes: &Tensor<F>,
    class_logits: &Tensor<F>,
    gt_boxes: &[[f64; 4]],
    gt_classes: &[usize],
) -> Result<SetLoss<F>> {
    let m = boxes.shape()[0];
    if boxes.shape() != [m, 4] || gt_boxes.len() != gt_classes.len() {
        return Err(shape_error("detect_loss", boxes.shape(), &[gt_boxes.len(), 4]));
    }
    let k1 = check_logits(class_logits, m, gt_classes)? + 1;
    let g = gt_boxes.len();
    let probs = softmax_rows(&class_logits.to_f64_vec(), k1);
    let b = boxes.to_f64_vec();
    let mut cost = Vec::with_capacity(m * g);
    for q in 0..m {
        for (gb, &gc) in gt_boxes.iter().zip(gt_classes) {
            let l1: f64 = (0..4).map(|i| (b[q * 4 + i] - gb[i]).abs()).sum();
            cost.push(-LAMBDA_CLS * probs[q * k1 + gc] + LAMBDA_L1 * l1);
        }
    }
    let pairs = hungarian(&CostMatrix::new(m, g, cost)?).pairs;
    let mut loss = class_loss(class_logits, &pairs, gt_classes)?.scale(LAMBDA_CLS);
    if g > 0 {
        let rows: Vec<Option<usize>> = pairs.iter().map(|&(q, _)| Some(q)).collect();
        let target: Vec<f64> = pairs.iter().flat_map(|&(_, gi)| gt_boxes[gi]).collect();
        let target = Tensor::from_f64_slice(&target, &[g, 4])?;
        let l1 = boxes.gather_rows(&rows)?.sub(&target)?.abs().sum()?.scale(LAMBDA_L1 / g as f64);
        loss = loss.add(&l1)?;
    }
    Ok(SetLoss { loss, pairs })
}

/// Binary cross-entropy of `sigmoid(logit)` against `t`, stable form.
fn bce(logit: f64, t: f64) -> f64 {
    logit.max(0.0) - logit * t + (-logit.abs()).exp().ln_1p()
}

/// `1 − (2Σpt + 1)/(Σp² + Σt² + 1)`.
pub fn dice_value(p: &[f64], t: &[f64]) -> f64 {
    let pt: f64 = p.iter().zip(t).map(|(a, b)| a * b).sum();
    let pp: f64 = p.iter().map(|a| a * a).sum();
    let tt: f64 = t.iter().map(|b| b * b).sum();
    1.0 - (2.0 * pt + 1.0) / (pp + tt + 1.0)
}

/// Mean dice loss over rows of `probs` (`[G, n]`) against `targets`.
pub fn dice_loss<F: Float>(probs: &Tensor<F>, targets: &Tensor<F>) -> Result<Tensor<F>> {
    if probs.shape() != targets.shape() || probs.ndim() != 2 {
        return Err(shape_error("dice_loss", probs.shape(), targets.shape()));
    }
    let g = probs.shape()[0] as f64;
    let num = probs.mul(targets)?.sum_axis(1, false)?.scale(2.0).add_scalar(1.0);
    let den = probs
        .square()
        .sum_axis(1, false)?
        .add(&targets.square().sum_axis(1, false)?)?
        .add_scalar(1.0);
    Ok(num.div(&den)?.neg().add_scalar(1.0).sum()?.scale(1.0 / g))
}

/// Set loss for masks. `mask_embed` is `[M, C]`, `f_b` the `[n, C]`
/// quarter-scale map and each gt mask has `n` cells.
pub fn seg_loss<F: Float>(
    mask_embed: &Tensor<F>,
    class_logits: &Tensor<F>,
    f_b: &Tensor<F>,
    gt_masks: &[Vec<bool>],
    gt_classes: &[usize],
) -> Result<SetLoss<F>> {
    let m = mask_embed.shape()[0];
    let n = f_b.shape()[0];
    if gt_masks.len() != gt_classes.len() {
        return Err(Error::Task(format!("{} masks for {} classes", gt_masks.len(), gt_classes.len())));
    }
    if let Some(bad) = gt_masks.iter().find(|mk| mk.len() != n) {
        return Err(Error::Task(format!(
            "gt mask of {} cells against a feature map of {n} cells",
            bad.len()
        )));
    }
    let k1 = check_logits(class_logits, m, gt_classes)? + 1;
    let g = gt_masks.len();
    // [M, n]
    let logits = f_b.matmul(&mask_embed.transpose(0, 1)?)?.transpose(0, 1)?;
    let lv = logits.to_f64_vec();
    let probs = softmax_rows(&class_logits.to_f64_vec(), k1);
    let targets: Vec<Vec<f64>> = gt_masks
        .iter()
        .map(|mk| mk.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect())
        .collect();
    let mut cost = Vec::with_capacity(m * g);
    for q in 0..m {
        let row = &lv[q * n..(q + 1) * n];
        let p: Vec<f64> = row.iter().map(|&x| 1.0 / (1.0 + (-x).exp())).collect();
        for (t, &gc) in targets.iter().zip(gt_classes) {
            let b: f64 = row.iter().zip(t).map(|(&x, &y)| bce(x, y)).sum::<f64>() / n as f64;
            cost.push(-LAMBDA_CLS * probs[q * k1 + gc] + LAMBDA_MASK * (b + dice_value(&p, t)));
        }
    }
    let pairs = hungarian(&CostMatrix::new(m, g, cost)?).pairs;
    let mut loss = class_loss(class_logits, &pairs, gt_classes)?.scale(LAMBDA_CLS);
    if g > 0 {
        let rows: Vec<Option<usize>> = pairs.iter().map(|&(q, _)| Some(q)).collect();
        let t: Vec<f64> = pairs.iter().flat_map(|&(_, gi)| targets[gi].iter().copied()).collect();
        let t = Tensor::from_f64_slice(&t, &[g, n])?;
        let matched = logits.gather_rows(&rows)?;
        let mask_terms = matched.bce_with_logits(&t)?.add(&dice_loss(&matched.sigmoid(), &t)?)?;
        loss = loss.add(&mask_terms.scale(LAMBDA_MASK))?;
    }
    Ok(SetLoss { loss, pairs })
}

/// One gt segment per class present in a semantic map, in class order.
pub fn semantic_segments(map: &[usize]) -> (Vec<Vec<bool>>, Vec<usize>) {
    let mut present: Vec<usize> = map.to_vec();
    present.sort_unstable();
    present.dedup();
    let masks = present.iter().map(|&c| map.iter().map(|&v| v == c).collect()).collect();
    (masks, present)
}

/// Scale-invariant log loss `sqrt(mean g² − λ·(mean g)²)`, `g = log d − log d*`.
pub fn si_depth_loss_with<F: Float>(pred: &Tensor<F>, target: &[f32], lambda: f64) -> Result<Tensor<F>> {
    if pred.numel() != target.len() || target.is_empty() {
        return Err(shape_error("si_depth_loss", pred.shape(), &[target.len()]));
    }
    let nonpositive = |v: f64| !(v > 0.0);
    if pred.data().iter().any(|v| nonpositive(v.as_f64())) || target.iter().any(|&v| nonpositive(v as f64)) {
        return Err(Error::Task("si_depth_loss: depths must be positive".into()));
    }
    let n = target.len();
    let log_t: Vec<f64> = target.iter().map(|&v| (v as f64).ln()).collect();
    let g = pred.reshape(&[n])?.log().sub(&Tensor::from_f64_slice(&log_t, &[n])?)?;
    let mean = g.mean()?;
    let inner = g.square().mean()?.sub(&mean.square().scale(lambda))?;
    if inner.item().as_f64() <= SI_FLOOR {
        return Ok(inner.scale(0.0));
    }
    Ok(inner.sqrt())
}

pub fn si_depth_loss<F: Float>(pred: &Tensor<F>, target: &[f32]) -> Result<Tensor<F>> {
    si_depth_loss_with(pred, target, SI_LAMBDA)
}

/// Elementwise smooth-L1 mean against the gt heatmaps.
pub fn pose_loss<F: Float>(pred: &Tensor<F>, target: &[f32]) -> Result<Tensor<F>> {
    if pred.numel() != target.len() {
        return Err(shape_error("pose_loss", pred.shape(), &[target.len()]));
    }
    let t: Vec<f64> = target.iter().map(|&v| v as f64).collect();
    let t = Tensor::from_f64_slice(&t, pred.shape())?;
    Ok(pred.smooth_l1(&t, POSE_BETA)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matching::brute_force;
    use mimq_tensor::gradcheck::{check_op, CheckOp, Sample, FD_STEP, F64_TOLERANCE};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t64(v: &[f64], s: &[usize]) -> Tensor<f64> {
        Tensor::from_vec(v.to_vec(), s).unwrap()
    }

    fn p64(v: &[f64], s: &[usize]) -> Tensor<f64> {
        Tensor::param(v.to_vec(), s).unwrap()
    }

    #[test]
    fn recon_examples() {
        let a = t64(&[1.0, 2.0, 3.0, 4.0], &[2, 2]);
        assert_eq!(recon_loss(&a, &a).unwrap().item(), 0.0);
        let l = recon_loss(&t64(&[1.0, 0.0], &[1, 2]), &t64(&[0.0, 0.0], &[1, 2])).unwrap();
        assert_eq!(l.item(), 1.0);
        // squared norms 1 and 3
        let p = t64(&[1.0, 0.0, 1.0, 1.0, 1.0, 0.0], &[2, 3]);
        let l = recon_loss(&p, &Tensor::zeros(&[2, 3])).unwrap();
        assert!((l.item() - 2.0).abs() < 1e-12);
        assert!(recon_loss(&p, &Tensor::zeros(&[3, 2])).is_err());
    }

    #[test]
    fn recon_gradient_is_twice_the_residual_over_n() {
        let p = p64(&[0.3, -1.0, 2.0, 0.5, 0.0, 1.5], &[3, 2]);
        let t = t64(&[0.0, 1.0, 1.0, -0.5, 0.25, 1.5], &[3, 2]);
        recon_loss(&p, &t).unwrap().backward().unwrap();
        let want: Vec<f64> = p.data().iter().zip(t.data()).map(|(a, b)| 2.0 * (a - b) / 3.0).collect();
        for (g, w) in p.grad().unwrap().iter().zip(&want) {
            assert!((g - w).abs() < 1e-12);
        }
        let op = CheckOp::new("recon", &[(&[4, 3], Sample::Normal), (&[4, 3], Sample::Normal)], |x| {
            recon_loss(&x[0], &x[1]).map_err(|_| mimq_tensor::TensorError::UnknownOp("recon".into()))
        });
        assert!(check_op(&op, 5, 1, FD_STEP, F64_TOLERANCE).unwrap().pass);
    }

    #[test]
    fn dice_gradient_matches_finite_differences() {
        let op = CheckOp::new("dice", &[(&[2, 5], Sample::Unit), (&[2, 5], Sample::Unit)], |x| {
            dice_loss(&x[0], &x[1]).map_err(|_| mimq_tensor::TensorError::UnknownOp("dice".into()))
        });
        assert!(check_op(&op, 5, 2, FD_STEP, F64_TOLERANCE).unwrap().pass);
    }

    /// Logits confident in `class` among `k1` columns.
    fn confident(classes: &[usize], k1: usize) -> Vec<f64> {
        classes
            .iter()
            .flat_map(|&c| (0..k1).map(move |j| if j == c { 8.0 } else { -8.0 }))
            .collect()
    }

    #[test]
    fn detect_perfect_predictions_beat_no_object_floor() {
        let gt = [[0.3, 0.3, 0.2, 0.2], [0.7, 0.6, 0.3, 0.4]];
        let gc = [1, 2];
        let boxes = [0.3, 0.3, 0.2, 0.2, 0.7, 0.6, 0.3, 0.4, 0.5, 0.5, 0.1, 0.1];
        let good = detect_loss(&t64(&boxes, &[3, 4]), &t64(&confident(&[1, 2, 3], 4), &[3, 4]), &gt, &gc).unwrap();
        assert_eq!(good.pairs, vec![(0, 0), (1, 1)]);
        let floor = detect_loss(&t64(&boxes, &[3, 4]), &t64(&confident(&[3, 3, 3], 4), &[3, 4]), &gt, &gc).unwrap();
        assert!(good.loss.item() < 1e-3);
        assert!(good.loss.item() < floor.loss.item());
    }

    #[test]
    fn detect_empty_scene_is_no_object_ce() {
        let logits = [0.5, -0.2, 0.1, 1.0, 0.0, 0.3, -1.0, 0.2];
        let l = detect_loss(&t64(&[0.5; 8], &[2, 4]), &t64(&logits, &[2, 4]), &[], &[]).unwrap();
        assert!(l.pairs.is_empty());
        let ce: f64 = softmax_rows(&logits, 4).chunks(4).map(|r| -r[3].ln()).sum::<f64>() / 2.0;
        assert!((l.loss.item() - LAMBDA_CLS * ce).abs() < 1e-12);
    }

    #[test]
    fn detect_matching_is_globally_optimal() {
        // Greedy pairs query 0 with gt 0 and forces query 1 onto the far box.
        let gt = [[0.2, 0.5, 0.1, 0.1], [0.5, 0.5, 0.1, 0.1]];
        let boxes = [0.3, 0.5, 0.1, 0.1, 0.0, 0.5, 0.1, 0.1];
        let logits = [0.0; 8];
        let l = detect_loss(&t64(&boxes, &[2, 4]), &t64(&logits, &[2, 4]), &gt, &[0, 0]).unwrap();
        assert_eq!(l.pairs, vec![(0, 1), (1, 0)]);
        let cost: Vec<f64> = (0..2)
            .flat_map(|q| {
                gt.iter().map(move |g| {
                    -LAMBDA_CLS * 0.25 + LAMBDA_L1 * (0..4).map(|i| (boxes[q * 4 + i] - g[i]).abs()).sum::<f64>()
                })
            })
            .collect();
        assert_eq!(brute_force(&CostMatrix::new(2, 2, cost).unwrap()).pairs, l.pairs);
    }

    #[test]
    fn detect_rejects_too_many_gts() {
        let r = detect_loss(&t64(&[0.5; 4], &[1, 4]), &t64(&[0.0; 4], &[1, 4]), &[[0.5; 4]; 2], &[0, 1]);
        assert!(r.is_err());
    }

    #[test]
    fn seg_matches_the_channel_that_reproduces_the_mask() {
        // f_b is one-hot per cell; embedding q lights the cells it sets to +6.
        let n = 6;
        let f_b: Vec<f64> = (0..n * n).map(|i| if i % (n + 1) == 0 { 1.0 } else { 0.0 }).collect();
        let gt = vec![true, true, false, false, true, false];
        let emb = |on: &[bool]| -> Vec<f64> { on.iter().map(|&b| if b { 6.0 } else { -6.0 }).collect() };
        let mut e = emb(&[false, true, true, false, false, true]);
        e.extend(emb(&gt));
        e.extend(emb(&[true; 6]));
        let logits = confident(&[2, 1, 2], 3);
        let l = seg_loss(&t64(&e, &[3, n]), &t64(&logits, &[3, 3]), &t64(&f_b, &[n, n]), &[gt], &[1]).unwrap();
        assert_eq!(l.pairs, vec![(1, 0)]);
    }

    #[test]
    fn seg_without_ground_truth_is_no_object_ce() {
        let logits = [0.5, -0.2, 0.1, 1.0, 0.0, 0.3];
        let l = seg_loss(&t64(&[0.1; 4], &[2, 2]), &t64(&logits, &[2, 3]), &t64(&[0.2; 6], &[3, 2]), &[], &[]).unwrap();
        let ce: f64 = softmax_rows(&logits, 3).chunks(3).map(|r| -r[2].ln()).sum::<f64>() / 2.0;
        assert!((l.loss.item() - LAMBDA_CLS * ce).abs() < 1e-12);
    }

    #[test]
    fn all_ones_mask_against_half_probabilities() {
        // zero embedding gives logit 0, probability 0.5 everywhere
        let n = 4;
        let logits = confident(&[0], 2);
        let l = seg_loss(&t64(&[0.0; 2], &[1, 2]), &t64(&logits, &[1, 2]), &t64(&[1.0; 8], &[n, 2]), &[vec![true; n]], &[0])
            .unwrap();
        let bce = std::f64::consts::LN_2;
        let dice = 1.0 - (2.0 * 0.5 * n as f64 + 1.0) / (0.25 * n as f64 + n as f64 + 1.0);
        let p0 = softmax_rows(&logits, 2)[0];
        let want = -LAMBDA_CLS * p0.ln() + LAMBDA_MASK * (bce + dice);
        assert!((l.loss.item() - want).abs() < 1e-12);
    }

    #[test]
    fn seg_rejects_mask_scale_mismatch() {
        let r = seg_loss(&t64(&[0.0; 2], &[1, 2]), &t64(&[0.0; 2], &[1, 2]), &t64(&[1.0; 8], &[4, 2]), &[vec![true; 3]], &[0]);
        assert!(r.is_err());
    }

    #[test]
    fn semantic_segments_follow_class_order() {
        let (m, c) = semantic_segments(&[2, 0, 2, 3]);
        assert_eq!(c, vec![0, 2, 3]);
        assert_eq!(m[1], vec![true, false, true, false]);
    }

    #[test]
    fn si_examples() {
        let d = [1.0f32, 2.0, 4.0];
        let pred = t64(&[1.0, 2.0, 4.0], &[3]);
        assert_eq!(si_depth_loss(&pred, &d).unwrap().item(), 0.0);
        let doubled = t64(&[2.0, 4.0, 8.0], &[3]);
        assert!(si_depth_loss_with(&doubled, &d, 1.0).unwrap().item().abs() < 1e-7);
        let l = si_depth_loss(&t64(&[1.0, 2.0], &[2]), &[1.0, 1.0]).unwrap().item();
        let ln2 = std::f64::consts::LN_2;
        let want = (0.5 * ln2 * ln2 - 0.85 * (0.5 * ln2).powi(2)).sqrt();
        assert!((l - want).abs() < 1e-12);
        assert!(si_depth_loss(&t64(&[0.0, 1.0], &[2]), &[1.0, 1.0]).is_err());
        assert!(si_depth_loss(&t64(&[1.0, 1.0], &[2]), &[1.0, -1.0]).is_err());
    }

    #[test]
    fn si_loss_at_zero_has_finite_gradient() {
        let p = p64(&[1.0, 2.0], &[2]);
        si_depth_loss(&p, &[1.0, 2.0]).unwrap().backward().unwrap();
        assert!(p.grad().unwrap().iter().all(|g| g.is_finite()));
    }

    #[test]
    fn pose_examples() {
        let z = t64(&[0.0; 4], &[2, 2]);
        assert_eq!(pose_loss(&z, &[0.0; 4]).unwrap().item(), 0.0);
        let one = |v: f64| pose_loss(&t64(&[v], &[1, 1]), &[0.0]).unwrap().item();
        assert!((one(0.5) - 0.125).abs() < 1e-12);
        assert!((one(2.0) - 1.5).abs() < 1e-12);
        assert!(pose_loss(&z, &[0.0; 3]).is_err());
    }

    fn random_detect(rng: &mut ChaCha8Rng, m: usize, g: usize) -> (Vec<f64>, Vec<f64>, Vec<[f64; 4]>, Vec<usize>) {
        let boxes = (0..m * 4).map(|_| rng.random_range(0.0..1.0)).collect();
        let logits = (0..m * 4).map(|_| rng.random_range(-2.0..2.0)).collect();
        let gt = (0..g).map(|_| std::array::from_fn(|_| rng.random_range(0.0..1.0))).collect();
        let gc = (0..g).map(|_| rng.random_range(0..3)).collect();
        (boxes, logits, gt, gc)
    }

    proptest! {
        #[test]
        fn gt_permutation_keeps_detect_loss(m in 2usize..7, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = rng.random_range(0..=m);
            let (b, l, gt, gc) = random_detect(&mut rng, m, g);
            let a = detect_loss(&t64(&b, &[m, 4]), &t64(&l, &[m, 4]), &gt, &gc).unwrap();
            let (rgt, rgc): (Vec<_>, Vec<_>) = gt.iter().zip(&gc).rev().map(|(x, y)| (*x, *y)).unzip();
            let r = detect_loss(&t64(&b, &[m, 4]), &t64(&l, &[m, 4]), &rgt, &rgc).unwrap();
            prop_assert!((a.loss.item() - r.loss.item()).abs() < 1e-6);
            prop_assert!(a.loss.item() >= 0.0);
        }

        #[test]
        fn losses_are_nonnegative(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 6;
            let p: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..3.0)).collect();
            let t: Vec<f32> = (0..n).map(|_| rng.random_range(0.1f32..3.0)).collect();
            prop_assert!(si_depth_loss(&t64(&p, &[n]), &t).unwrap().item() >= 0.0);
            prop_assert!(pose_loss(&t64(&p, &[n]), &t).unwrap().item() >= 0.0);
            let pr: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
            let tr: Vec<f64> = (0..n).map(|_| if rng.random_bool(0.5) { 1.0 } else { 0.0 }).collect();
            prop_assert!(dice_loss(&t64(&pr, &[2, 3]), &t64(&tr, &[2, 3])).unwrap().item() >= 0.0);
        }
    }
}
