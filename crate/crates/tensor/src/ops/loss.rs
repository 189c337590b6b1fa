use super::grad_fn;
use super::unary::sigmoid_scalar;
use crate::error::{Result, TensorError};
use crate::float::Float;
use crate::tensor::{GradFn, Tensor};

fn same_shape<F: Float>(op: &'static str, a: &Tensor<F>, b: &Tensor<F>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

#[derive(Clone, Copy)]
pub(crate) enum PairKind {
    Mse,
    SmoothL1(f64),
    BceLogits,
}

// Elementwise pair losses reduced by mean; inputs = [prediction, target].
grad_fn!(PairLossBackward { kind: PairKind });

impl<F: Float> GradFn<F> for PairLossBackward<F> {
    fn name(&self) -> &'static str {
        match self.kind {
            PairKind::Mse => "mse",
            PairKind::SmoothL1(_) => "smooth_l1",
            PairKind::BceLogits => "bce_with_logits",
        }
    }

    fn inputs(&self) -> &[Tensor<F>] {
        &self.inputs
    }

    fn backward(&self, _out: &[F], grad: &[F]) -> Vec<Option<Vec<F>>> {
        let (p, t) = (self.inputs[0].data(), self.inputs[1].data());
        let scale = grad[0] / F::from_usize(p.len().max(1));
        let two = F::from_f64(2.0);
        // d/dp; the target gradient follows from the same per-element slope
        let (dp, dt): (Vec<F>, Vec<F>) = match self.kind {
            PairKind::Mse => p
                .iter()
                .zip(t)
                .map(|(&a, &b)| {
                    let d = two * (a - b) * scale;
                    (d, -d)
                })
                .unzip(),
            PairKind::SmoothL1(beta) => {
                let beta = F::from_f64(beta);
                p.iter()
                    .zip(t)
                    .map(|(&a, &b)| {
                        let d = a - b;
                        let s = if d.abs() < beta {
                            d / beta
                        } else if d > F::zero() {
                            F::one()
                        } else {
                            -F::one()
                        };
                        (s * scale, -s * scale)
                    })
                    .unzip()
            }
            PairKind::BceLogits => p
                .iter()
                .zip(t)
                .map(|(&x, &y)| ((sigmoid_scalar(x) - y) * scale, -x * scale))
                .unzip(),
        };
        vec![
            self.inputs[0].requires_grad().then_some(dp),
            self.inputs[1].requires_grad().then_some(dt),
        ]
    }
}

fn pair_loss<F: Float>(kind: PairKind, a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    let name = match kind {
        PairKind::Mse => "mse",
        PairKind::SmoothL1(_) => "smooth_l1",
        PairKind::BceLogits => "bce_with_logits",
    };
    same_shape(name, a, b)?;
    let n = a.numel().max(1);
    let total = a
        .data()
        .iter()
        .zip(b.data())
        .fold(F::zero(), |acc, (&p, &t)| {
            acc + match kind {
                PairKind::Mse => (p - t) * (p - t),
                PairKind::SmoothL1(beta) => {
                    let beta = F::from_f64(beta);
                    let d = (p - t).abs();
                    if d < beta {
                        F::from_f64(0.5) * d * d / beta
                    } else {
                        d - F::from_f64(0.5) * beta
                    }
                }
                PairKind::BceLogits => p.max(F::zero()) - p * t + (-p.abs()).exp().ln_1p(),
            }
        });
    Ok(Tensor::from_op(
        vec![total / F::from_usize(n)],
        vec![1],
        Box::new(PairLossBackward {
            inputs: vec![a.clone(), b.clone()],
            kind,
        }),
    ))
}

grad_fn!(CrossEntropyBackward {
    targets: Vec<usize>,
    weights: Vec<F>,
    probs: Vec<F>,
    norm: F,
});

impl<F: Float> GradFn<F> for CrossEntropyBackward<F> {
    fn name(&self) -> &'static str {
        "cross_entropy"
    }

    fn inputs(&self) -> &[Tensor<F>] {
        &self.inputs
    }

    fn backward(&self, _out: &[F], grad: &[F]) -> Vec<Option<Vec<F>>> {
        let k = self.inputs[0].shape()[1];
        let mut g = self.probs.clone();
        for (i, &t) in self.targets.iter().enumerate() {
            let w = self.weights[i] * grad[0] / self.norm;
            g[i * k + t] -= F::one();
            for v in &mut g[i * k..(i + 1) * k] {
                *v *= w;
            }
        }
        vec![Some(g)]
    }
}

impl<F: Float> Tensor<F> {
    /// Mean squared error over all elements.
    pub fn mse(&self, target: &Tensor<F>) -> Result<Tensor<F>> {
        pair_loss(PairKind::Mse, self, target)
    }

    /// Mean Huber-style smooth-L1 with transition point `beta`.
    pub fn smooth_l1(&self, target: &Tensor<F>, beta: f64) -> Result<Tensor<F>> {
        pair_loss(PairKind::SmoothL1(beta), self, target)
    }

    /// Mean binary cross-entropy of `sigmoid(self)` against `target ∈ [0,1]`.
    pub fn bce_with_logits(&self, target: &Tensor<F>) -> Result<Tensor<F>> {
        pair_loss(PairKind::BceLogits, self, target)
    }

    /// Cross-entropy of `[n, k]` logits against class indices, averaged with
    /// per-class weights: `Σ w[tᵢ]·(−log pᵢ[tᵢ]) / Σ w[tᵢ]`.
    pub fn cross_entropy(&self, targets: &[usize], class_weights: Option<&[f64]>) -> Result<Tensor<F>> {
        if self.ndim() != 2 || self.shape()[0] != targets.len() {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                lhs: self.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let (n, k) = (self.shape()[0], self.shape()[1]);
        if let Some(w) = class_weights {
            if w.len() != k {
                return Err(TensorError::ShapeMismatch {
                    op: "cross_entropy",
                    lhs: self.shape().to_vec(),
                    rhs: vec![w.len()],
                });
            }
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
            return Err(TensorError::IndexOutOfRange {
                op: "cross_entropy",
                index: bad,
                size: k,
            });
        }
        let x = self.data();
        let mut probs = vec![F::zero(); n * k];
        let mut weights = Vec::with_capacity(n);
        let mut total = F::zero();
        let mut norm = F::zero();
        for i in 0..n {
            let row = &x[i * k..(i + 1) * k];
            let m = row.iter().fold(F::neg_infinity(), |a, &v| a.max(v));
            let mut s = F::zero();
            for j in 0..k {
                let e = (row[j] - m).exp();
                probs[i * k + j] = e;
                s += e;
            }
            for j in 0..k {
                probs[i * k + j] /= s;
            }
            let t = targets[i];
            let w = F::from_f64(class_weights.map_or(1.0, |w| w[t]));
            let nll = -(row[t] - m - s.ln());
            total += w * nll;
            norm += w;
            weights.push(w);
        }
        if norm <= F::zero() {
            norm = F::one();
        }
        Ok(Tensor::from_op(
            vec![total / norm],
            vec![1],
            Box::new(CrossEntropyBackward {
                inputs: vec![self.clone()],
                targets: targets.to_vec(),
                weights,
                probs,
                norm,
            }),
        ))
    }
}
