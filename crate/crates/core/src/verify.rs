//! Self-checks runnable from the command line: gradient checks, the
//! matching oracle, formula oracles, masking invariants and the query
//! identity at fine-tuning initialisation.

use std::fmt;
use std::str::FromStr;

use mimq_tensor::gradcheck::{check_op, registry, CheckOp, Sample, FD_STEP, F64_TOLERANCE};
use mimq_tensor::{no_grad, Float, GradFn, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::Config;
use crate::data::{gen_scene, SceneKind};
use crate::error::{Error, Result};
use crate::heads::{bin_centers, TaskId, TaskSpec};
use crate::masking::{mask_count, make_mask, MaskStrategy};
use crate::matching::{brute_force, hungarian, CostMatrix};
use crate::model::{finetune_forward, image_tensor, init_store};
use crate::train::scene_config;

pub const GRADCHECK_TRIALS: usize = 20;
pub const MATCHING_TRIALS: usize = 200;

/// Deliberate defects used to prove the suite can fail.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// Softmax backward returns `grad ⊙ y` without the Jacobian correction.
    Softmax,
}

impl FromStr for Fault {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "softmax" => Ok(Fault::Softmax),
            _ => Err(Error::Config(format!("unknown fault `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let verdict = if self.pass { "PASS" } else { "FAIL" };
        write!(f, "{verdict}  {:<28} {}", self.name, self.detail)
    }
}

fn result(name: impl Into<String>, pass: bool, detail: impl Into<String>) -> CheckResult {
    CheckResult {
        name: name.into(),
        pass,
        detail: detail.into(),
    }
}

struct FaultySoftmax<F: Float> {
    inputs: Vec<Tensor<F>>,
}

impl<F: Float> GradFn<F> for FaultySoftmax<F> {
    fn name(&self) -> &'static str {
        "faulty_softmax"
    }

    fn inputs(&self) -> &[Tensor<F>] {
        &self.inputs
    }

    fn backward(&self, output: &[F], grad: &[F]) -> Vec<Option<Vec<F>>> {
        vec![Some(grad.iter().zip(output).map(|(&g, &y)| g * y).collect())]
    }
}

fn faulty_softmax(x: &[Tensor<f64>]) -> mimq_tensor::Result<Tensor<f64>> {
    let y = no_grad(|| x[0].softmax(1))?;
    Ok(Tensor::from_op(
        y.to_vec(),
        y.shape().to_vec(),
        Box::new(FaultySoftmax { inputs: vec![x[0].clone()] }),
    ))
}

/// Every registered primitive, with `fault` swapped in where it applies.
pub fn gradient_checks(fault: Option<Fault>) -> Result<Vec<CheckResult>> {
    let mut ops = registry();
    if fault == Some(Fault::Softmax) {
        for op in ops.iter_mut().filter(|o| o.name == "softmax") {
            *op = CheckOp::new("softmax", &[(&[3, 5], Sample::Normal)], faulty_softmax);
        }
    }
    ops.iter()
        .map(|op| {
            let r = check_op(op, GRADCHECK_TRIALS, 0, FD_STEP, F64_TOLERANCE)?;
            Ok(result(
                format!("gradcheck/{}", op.name),
                r.pass,
                format!("max rel err {:.2e}", r.max_rel_error),
            ))
        })
        .collect()
}

/// Hungarian against exhaustive search on random matrices with `M ≤ 7`.
pub fn matching_check(trials: usize, seed: u64) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mismatches = 0;
    for _ in 0..trials {
        let m = rng.random_range(1..=7);
        let g = rng.random_range(0..=m);
        let v: Vec<f64> = (0..m * g).map(|_| rng.random_range(0.0..1.0)).collect();
        let c = CostMatrix::new(m, g, v).expect("valid by construction");
        let (h, b) = (hungarian(&c), brute_force(&c));
        if h.pairs != b.pairs || (h.cost - b.cost).abs() > 1e-9 {
            mismatches += 1;
        }
    }
    result("hungarian_vs_bruteforce", mismatches == 0, format!("{mismatches}/{trials} mismatches"))
}

/// Hand prefix sums of bin centres, including the `[0.2, 0.3, 0.5]` case.
pub fn bin_center_check(seed: u64) -> CheckResult {
    let mut worst = 0.0f64;
    let l = Tensor::<f64>::from_vec(vec![0.2, 0.3, 0.5], &[3]).expect("3 values");
    let c = bin_centers(&l, 0.0, 10.0).expect("valid lengths");
    for (a, b) in c.data().iter().zip([1.0, 3.5, 7.5]) {
        worst = worst.max((a - b).abs());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..50 {
        let m = rng.random_range(1..=64);
        let raw: Vec<f64> = (0..m).map(|_| rng.random_range(0.01..1.0)).collect();
        let s: f64 = raw.iter().sum();
        let l: Vec<f64> = raw.iter().map(|v| v / s).collect();
        let (lo, hi) = (rng.random_range(0.0..2.0), rng.random_range(3.0..20.0));
        let c = bin_centers(&Tensor::from_vec(l.clone(), &[m]).expect("m values"), lo, hi).expect("valid lengths");
        let mut prefix = 0.0;
        for i in 0..m {
            let want = lo + (hi - lo) * (l[i] / 2.0 + prefix);
            worst = worst.max((c.data()[i] - want).abs());
            prefix += l[i];
        }
        worst = worst.max((c.data()[m - 1] + (hi - lo) * l[m - 1] / 2.0 - hi).abs());
    }
    result("bin_centers_oracle", worst <= 1e-6, format!("max abs err {worst:.2e}"))
}

/// Exact counts and an exact partition for every strategy and ratio.
pub fn masking_check() -> CheckResult {
    let mut bad = Vec::new();
    for strategy in MaskStrategy::ALL {
        for ratio in [0.5, 0.6, 0.75] {
            for (h, w) in [(16, 16), (8, 12)] {
                for seed in 0..5 {
                    let ok = make_mask(strategy, ratio, h, w, seed).is_ok_and(|p| {
                        let mut all: Vec<usize> = p.masked.iter().chain(&p.visible).copied().collect();
                        all.sort_unstable();
                        p.masked.len() == mask_count(ratio, h * w) && all == (0..h * w).collect::<Vec<_>>()
                    });
                    if !ok {
                        bad.push(format!("{}/{ratio}/{h}x{w}/{seed}", strategy.name()));
                    }
                }
            }
        }
    }
    let detail = if bad.is_empty() { "counts and partitions exact".to_string() } else { bad.join(", ") };
    result("masking_invariants", bad.is_empty(), detail)
}

/// With zero query embeddings every decoder output row is the same.
pub fn query_identity_check(cfg: &Config) -> Result<CheckResult> {
    let task = TaskSpec::new(TaskId::Semseg, cfg);
    let store = init_store(&cfg.model, std::slice::from_ref(&task), 0);
    let p = store.bind(false);
    let scene = gen_scene(0, &scene_config(cfg, SceneKind::Shapes))?;
    let fwd = finetune_forward(&p, &cfg.model, &task, &image_tensor(&scene)?, None)?;
    let d = cfg.model.decoder.dim;
    let rows: Vec<&[f32]> = fwd.hidden.data().chunks(d).collect();
    let worst = rows
        .iter()
        .flat_map(|r| r.iter().zip(rows[0]).map(|(a, b)| (a - b).abs()))
        .fold(0.0f32, f32::max);
    Ok(result("query_identity_at_init", worst <= 1e-6, format!("max row deviation {worst:.2e}")))
}

pub fn run_suite(cfg: &Config, fault: Option<Fault>) -> Result<Vec<CheckResult>> {
    let mut out = gradient_checks(fault)?;
    out.push(matching_check(MATCHING_TRIALS, 0));
    out.push(bin_center_check(0));
    out.push(masking_check());
    out.push(query_identity_check(cfg)?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clean_suite_passes() {
        let r = run_suite(&Config::default(), None).unwrap();
        let failed: Vec<&CheckResult> = r.iter().filter(|c| !c.pass).collect();
        assert!(failed.is_empty(), "{failed:?}");
    }

    #[test]
    fn injected_softmax_fault_is_caught_by_name() {
        let r = gradient_checks(Some(Fault::Softmax)).unwrap();
        let failed: Vec<&str> = r.iter().filter(|c| !c.pass).map(|c| c.name.as_str()).collect();
        assert_eq!(failed, vec!["gradcheck/softmax"]);
    }

    #[test]
    fn fault_names_parse() {
        assert_eq!("softmax".parse::<Fault>().unwrap(), Fault::Softmax);
        assert!("matmul".parse::<Fault>().is_err());
    }
}
