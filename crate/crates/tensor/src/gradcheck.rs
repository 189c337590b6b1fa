//! Central finite-difference checks of analytic gradients, run in `f64`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, TensorError};
use crate::init::normal_f64;
use crate::tensor::Tensor;

/// Default finite-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Pass threshold on the maximum relative error in 64-bit mode.
pub const F64_TOLERANCE: f64 = 1e-5;
/// Denominator floor so near-zero gradients are compared absolutely.
const REL_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub op: String,
    pub trials: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl GradCheckReport {
    fn new(op: &str, trials: usize, max_rel_error: f64, tolerance: f64) -> Self {
        GradCheckReport {
            op: op.to_string(),
            trials,
            max_rel_error,
            tolerance,
            // NaN compares false, so a NaN error fails
            pass: max_rel_error <= tolerance,
        }
    }
}

/// How to sample one input of a checked op.
#[derive(Debug, Clone, Copy)]
pub enum Sample {
    /// Standard normal.
    Normal,
    /// Uniform in [0.5, 2].
    Positive,
    /// Uniform in [0.05, 0.95].
    Unit,
}

pub type CheckFn = fn(&[Tensor<f64>]) -> Result<Tensor<f64>>;

pub struct CheckOp {
    pub name: &'static str,
    pub inputs: Vec<(Vec<usize>, Sample)>,
    pub f: Box<dyn Fn(&[Tensor<f64>]) -> Result<Tensor<f64>> + Send + Sync>,
}

impl CheckOp {
    pub fn new(name: &'static str, inputs: &[(&[usize], Sample)], f: CheckFn) -> Self {
        CheckOp {
            name,
            inputs: inputs.iter().map(|(s, k)| (s.to_vec(), *k)).collect(),
            f: Box::new(f),
        }
    }
}

fn sample(rng: &mut ChaCha8Rng, shape: &[usize], kind: Sample) -> Vec<f64> {
    let n: usize = shape.iter().product();
    match kind {
        Sample::Normal => normal_f64(rng, n, 1.0),
        Sample::Positive => (0..n).map(|_| rng.random_range(0.5..2.0)).collect(),
        Sample::Unit => (0..n).map(|_| rng.random_range(0.05..0.95)).collect(),
    }
}

/// Projects an op output to a scalar through fixed random weights.
fn probe(out: &Tensor<f64>, weights: &[f64]) -> Result<f64> {
    Ok(out.data().iter().zip(weights).map(|(a, b)| a * b).sum())
}

/// Checks `op` on `trials` random draws; inputs are perturbed one element at
/// a time with central differences.
pub fn check_op(op: &CheckOp, trials: usize, seed: u64, step: f64, tolerance: f64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let values: Vec<Vec<f64>> = op
            .inputs
            .iter()
            .map(|(shape, kind)| sample(&mut rng, shape, *kind))
            .collect();
        let leaves: Vec<Tensor<f64>> = values
            .iter()
            .zip(&op.inputs)
            .map(|(v, (shape, _))| Tensor::param(v.clone(), shape))
            .collect::<Result<_>>()?;
        let out = (op.f)(&leaves)?;
        let weights = normal_f64(&mut rng, out.numel(), 1.0);
        let w = Tensor::from_vec(weights.clone(), out.shape())?;
        out.mul(&w)?.sum()?.backward()?;

        for i in 0..op.inputs.len() {
            let analytic = leaves[i].grad().unwrap_or_else(|| vec![0.0; values[i].len()]);
            for j in 0..values[i].len() {
                let eval = |delta: f64| -> Result<f64> {
                    let inputs: Vec<Tensor<f64>> = values
                        .iter()
                        .zip(&op.inputs)
                        .enumerate()
                        .map(|(k, (v, (s, _)))| {
                            let mut v = v.clone();
                            if k == i {
                                v[j] += delta;
                            }
                            Tensor::from_vec(v, s)
                        })
                        .collect::<Result<_>>()?;
                    probe(&(op.f)(&inputs)?, &weights)
                };
                let numeric = (eval(step)? - eval(-step)?) / (2.0 * step);
                let a = analytic[j];
                let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
                if err.is_nan() {
                    worst = f64::NAN;
                } else if !worst.is_nan() {
                    worst = worst.max(err);
                }
            }
        }
    }
    Ok(GradCheckReport::new(op.name, trials, worst, tolerance))
}

/// Runs the registered check for `op_id`.
pub fn gradcheck(op_id: &str, trials: usize, seed: u64) -> Result<GradCheckReport> {
    let op = registry()
        .into_iter()
        .find(|o| o.name == op_id)
        .ok_or_else(|| TensorError::UnknownOp(op_id.to_string()))?;
    check_op(&op, trials, seed, FD_STEP, F64_TOLERANCE)
}

pub fn op_names() -> Vec<&'static str> {
    registry().into_iter().map(|o| o.name).collect()
}

/// Every differentiable primitive, with representative shapes.
pub fn registry() -> Vec<CheckOp> {
    use Sample::*;
    vec![
        CheckOp::new("add", &[(&[3, 4], Normal), (&[4], Normal)], |x| x[0].add(&x[1])),
        CheckOp::new("sub", &[(&[3, 1], Normal), (&[1, 4], Normal)], |x| x[0].sub(&x[1])),
        CheckOp::new("mul", &[(&[2, 3, 4], Normal), (&[3, 1], Normal)], |x| x[0].mul(&x[1])),
        CheckOp::new("div", &[(&[3, 4], Normal), (&[3, 4], Positive)], |x| x[0].div(&x[1])),
        CheckOp::new("matmul", &[(&[2, 3, 4], Normal), (&[4, 5], Normal)], |x| x[0].matmul(&x[1])),
        CheckOp::new("bmm", &[(&[2, 3, 4], Normal), (&[2, 4, 3], Normal)], |x| x[0].matmul(&x[1])),
        CheckOp::new("neg", &[(&[5], Normal)], |x| Ok(x[0].neg())),
        CheckOp::new("scale", &[(&[5], Normal)], |x| Ok(x[0].scale(-1.7))),
        CheckOp::new("add_scalar", &[(&[5], Normal)], |x| Ok(x[0].add_scalar(0.3))),
        CheckOp::new("exp", &[(&[6], Normal)], |x| Ok(x[0].exp())),
        CheckOp::new("log", &[(&[6], Positive)], |x| Ok(x[0].log())),
        CheckOp::new("sqrt", &[(&[6], Positive)], |x| Ok(x[0].sqrt())),
        CheckOp::new("abs", &[(&[6], Normal)], |x| Ok(x[0].abs())),
        CheckOp::new("square", &[(&[6], Normal)], |x| Ok(x[0].square())),
        CheckOp::new("sigmoid", &[(&[6], Normal)], |x| Ok(x[0].sigmoid())),
        CheckOp::new("softplus", &[(&[6], Normal)], |x| Ok(x[0].softplus())),
        CheckOp::new("gelu", &[(&[8], Normal)], |x| Ok(x[0].gelu())),
        CheckOp::new("softmax", &[(&[3, 5], Normal)], |x| x[0].softmax(1)),
        CheckOp::new("softmax_axis0", &[(&[4, 2, 3], Normal)], |x| x[0].softmax(0)),
        CheckOp::new("log_softmax", &[(&[3, 5], Normal)], |x| x[0].log_softmax(1)),
        CheckOp::new(
            "layernorm",
            &[(&[3, 6], Normal), (&[6], Normal), (&[6], Normal)],
            |x| x[0].layer_norm(&x[1], &x[2], 1e-5),
        ),
        CheckOp::new("sum", &[(&[3, 4], Normal)], |x| x[0].sum()),
        CheckOp::new("mean", &[(&[3, 4], Normal)], |x| x[0].mean()),
        CheckOp::new("sum_axis", &[(&[2, 3, 4], Normal)], |x| x[0].sum_axis(1, false)),
        CheckOp::new("mean_axis", &[(&[2, 3, 4], Normal)], |x| x[0].mean_axis(2, true)),
        CheckOp::new("reshape", &[(&[2, 6], Normal)], |x| x[0].reshape(&[3, 4])),
        CheckOp::new("transpose", &[(&[2, 3, 4], Normal)], |x| x[0].transpose(0, 2)),
        CheckOp::new("slice", &[(&[3, 5], Normal)], |x| x[0].slice(1, 1, 4)),
        CheckOp::new("concat", &[(&[2, 3], Normal), (&[2, 2], Normal)], |x| {
            Tensor::concat(&[x[0].clone(), x[1].clone()], 1)
        }),
        CheckOp::new("gather_rows", &[(&[4, 3], Normal)], |x| {
            x[0].gather_rows(&[Some(2), None, Some(0), Some(2)])
        }),
        CheckOp::new("patchify", &[(&[4, 4, 2], Normal)], |x| x[0].patchify(2)),
        CheckOp::new("upsample2x", &[(&[2, 3, 2], Normal)], |x| x[0].upsample2x()),
        CheckOp::new("avgpool2x", &[(&[4, 2, 3], Normal)], |x| x[0].avgpool2x()),
        CheckOp::new("mse", &[(&[3, 4], Normal), (&[3, 4], Normal)], |x| x[0].mse(&x[1])),
        CheckOp::new("smooth_l1", &[(&[3, 4], Normal), (&[3, 4], Normal)], |x| {
            x[0].smooth_l1(&x[1], 1.0)
        }),
        CheckOp::new("bce_with_logits", &[(&[3, 4], Normal), (&[3, 4], Unit)], |x| {
            x[0].bce_with_logits(&x[1])
        }),
        CheckOp::new("cross_entropy", &[(&[4, 5], Normal)], |x| {
            x[0].cross_entropy(&[0, 4, 2, 4], Some(&[1.0, 1.0, 1.0, 1.0, 0.1]))
        }),
    ]
}
