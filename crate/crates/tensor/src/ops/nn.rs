use super::{grad_fn, needs};
use super::reduce::split_axis;
use crate::error::{Result, TensorError};
use crate::float::Float;
use crate::tensor::{GradFn, Tensor};

/// sqrt(2/π), the tanh-approximation GELU constant.
pub const GELU_TANH_COEF: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

grad_fn!(SoftmaxBackward {
    outer: usize,
    len: usize,
    inner: usize,
    log: bool,
});

impl<F: Float> GradFn<F> for SoftmaxBackward<F> {
    fn name(&self) -> &'static str {
        if self.log {
            "log_softmax"
        } else {
            "softmax"
        }
    }

    fn inputs(&self) -> &[Tensor<F>] {
        &self.inputs
    }

    fn backward(&self, out: &[F], grad: &[F]) -> Vec<Option<Vec<F>>> {
        let (outer, len, inner) = (self.outer, self.len, self.inner);
        let mut g = vec![F::zero(); out.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                if self.log {
                    // dx = g - softmax * sum(g)
                    let gs = (0..len).fold(F::zero(), |a, l| a + grad[at(l)]);
                    for l in 0..len {
                        g[at(l)] = grad[at(l)] - out[at(l)].exp() * gs;
                    }
                } else {
                    // dx = y * (g - sum(g * y))
                    let dot = (0..len).fold(F::zero(), |a, l| a + grad[at(l)] * out[at(l)]);
                    for l in 0..len {
                        g[at(l)] = out[at(l)] * (grad[at(l)] - dot);
                    }
                }
            }
        }
        vec![Some(g)]
    }
}

fn softmax_impl<F: Float>(t: &Tensor<F>, axis: usize, log: bool) -> Result<Tensor<F>> {
    let (outer, len, inner) = split_axis("softmax", t.shape(), axis)?;
    let x = t.data();
    let mut out = vec![F::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |l: usize| (o * len + l) * inner + i;
            let m = (0..len).fold(F::neg_infinity(), |a, l| a.max(x[at(l)]));
            let mut s = F::zero();
            for l in 0..len {
                let e = (x[at(l)] - m).exp();
                out[at(l)] = e;
                s += e;
            }
            if log {
                let ls = s.ln();
                for l in 0..len {
                    out[at(l)] = x[at(l)] - m - ls;
                }
            } else {
                for l in 0..len {
                    out[at(l)] /= s;
                }
            }
        }
    }
    Ok(Tensor::from_op(
        out,
        t.shape().to_vec(),
        Box::new(SoftmaxBackward {
            inputs: vec![t.clone()],
            outer,
            len,
            inner,
            log,
        }),
    ))
}

grad_fn!(GeluBackward {});

fn gelu_parts<F: Float>(x: F) -> (F, F) {
    // returns (tanh(u), du/dx)
    let c = F::from_f64(GELU_TANH_COEF);
    let k = F::from_f64(GELU_CUBIC);
    let u = c * (x + k * x * x * x);
    let du = c * (F::one() + F::from_f64(3.0) * k * x * x);
    (u.tanh(), du)
}

impl<F: Float> GradFn<F> for GeluBackward<F> {
    fn name(&self) -> &'static str {
        "gelu"
    }

    fn inputs(&self) -> &[Tensor<F>] {
        &self.inputs
    }

    fn backward(&self, _out: &[F], grad: &[F]) -> Vec<Option<Vec<F>>> {
        let half = F::from_f64(0.5);
        let g = self.inputs[0]
            .data()
            .iter()
            .zip(grad)
            .map(|(&x, &g)| {
                let (t, du) = gelu_parts(x);
                g * (half * (F::one() + t) + half * x * (F::one() - t * t) * du)
            })
            .collect();
        vec![Some(g)]
    }
}

grad_fn!(LayerNormBackward {
    rows: usize,
    dim: usize,
    xhat: Vec<F>,
    rstd: Vec<F>,
});

impl<F: Float> GradFn<F> for LayerNormBackward<F> {
    fn name(&self) -> &'static str {
        "layer_norm"
    }

    fn inputs(&self) -> &[Tensor<F>] {
        &self.inputs
    }

    fn backward(&self, _out: &[F], grad: &[F]) -> Vec<Option<Vec<F>>> {
        let (rows, d) = (self.rows, self.dim);
        let gamma = self.inputs[1].data();
        let mut gx = needs(&self.inputs, 0).then(|| vec![F::zero(); rows * d]);
        let mut ggamma = vec![F::zero(); d];
        let mut gbeta = vec![F::zero(); d];
        let inv_d = F::one() / F::from_usize(d);
        let mut gxhat = vec![F::zero(); d];
        for r in 0..rows {
            let g = &grad[r * d..(r + 1) * d];
            let xh = &self.xhat[r * d..(r + 1) * d];
            for j in 0..d {
                ggamma[j] += g[j] * xh[j];
                gbeta[j] += g[j];
            }
            if let Some(gx) = gx.as_mut() {
                let mut s1 = F::zero();
                let mut s2 = F::zero();
                for j in 0..d {
                    gxhat[j] = g[j] * gamma[j];
                    s1 += gxhat[j];
                    s2 += gxhat[j] * xh[j];
                }
                let rs = self.rstd[r];
                for j in 0..d {
                    gx[r * d + j] = rs * (gxhat[j] - inv_d * s1 - xh[j] * inv_d * s2);
                }
            }
        }
        vec![gx, Some(ggamma), Some(gbeta)]
    }
}

impl<F: Float> Tensor<F> {
    pub fn softmax(&self, axis: usize) -> Result<Tensor<F>> {
        softmax_impl(self, axis, false)
    }

    pub fn log_softmax(&self, axis: usize) -> Result<Tensor<F>> {
        softmax_impl(self, axis, true)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Tensor<F> {
        let half = F::from_f64(0.5);
        let data = self
            .data()
            .iter()
            .map(|&x| half * x * (F::one() + gelu_parts(x).0))
            .collect();
        Tensor::from_op(
            data,
            self.shape().to_vec(),
            Box::new(GeluBackward {
                inputs: vec![self.clone()],
            }),
        )
    }

    /// Normalizes over the last axis, then applies `gamma`, `beta` (both `[d]`).
    pub fn layer_norm(&self, gamma: &Tensor<F>, beta: &Tensor<F>, eps: f64) -> Result<Tensor<F>> {
        let d = *self.shape().last().ok_or_else(|| TensorError::InvalidShape {
            op: "layer_norm",
            shape: vec![],
            reason: "scalar input".into(),
        })?;
        for p in [gamma, beta] {
            if p.shape() != [d] {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    lhs: self.shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
        }
        let rows = self.numel() / d.max(1);
        let x = self.data();
        let (g, b) = (gamma.data(), beta.data());
        let eps = F::from_f64(eps);
        let inv_d = F::one() / F::from_usize(d);
        let mut out = vec![F::zero(); x.len()];
        let mut xhat = vec![F::zero(); x.len()];
        let mut rstd = vec![F::zero(); rows];
        for r in 0..rows {
            let row = &x[r * d..(r + 1) * d];
            let mean = row.iter().fold(F::zero(), |a, &v| a + v) * inv_d;
            let var = row.iter().fold(F::zero(), |a, &v| a + (v - mean) * (v - mean)) * inv_d;
            let rs = F::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let xh = (row[j] - mean) * rs;
                xhat[r * d + j] = xh;
                out[r * d + j] = xh * g[j] + b[j];
            }
        }
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            Box::new(LayerNormBackward {
                inputs: vec![self.clone(), gamma.clone(), beta.clone()],
                rows,
                dim: d,
                xhat,
                rstd,
            }),
        ))
    }
}
