use super::grad_fn;
use crate::error::Result;
use crate::float::Float;
use crate::tensor::{GradFn, Tensor};

#[derive(Clone, Copy, Debug)]
pub(crate) enum UnaryKind {
    Neg,
    Scale(f64),
    AddScalar(f64),
    Exp,
    Log,
    Sqrt,
    Abs,
    Sigmoid,
    Softplus,
    Square,
}

impl UnaryKind {
    fn name(self) -> &'static str {
        match self {
            UnaryKind::Neg => "neg",
            UnaryKind::Scale(_) => "scale",
            UnaryKind::AddScalar(_) => "add_scalar",
            UnaryKind::Exp => "exp",
            UnaryKind::Log => "log",
            UnaryKind::Sqrt => "sqrt",
            UnaryKind::Abs => "abs",
            UnaryKind::Sigmoid => "sigmoid",
            UnaryKind::Softplus => "softplus",
            UnaryKind::Square => "square",
        }
    }
}

pub(crate) fn sigmoid_scalar<F: Float>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

/// log(1 + e^x) without overflow.
pub(crate) fn softplus_scalar<F: Float>(x: F) -> F {
    x.max(F::zero()) + (-x.abs()).exp().ln_1p()
}

grad_fn!(UnaryBackward { kind: UnaryKind });

impl<F: Float> GradFn<F> for UnaryBackward<F> {
    fn name(&self) -> &'static str {
        self.kind.name()
    }

    fn inputs(&self) -> &[Tensor<F>] {
        &self.inputs
    }

    fn backward(&self, out: &[F], grad: &[F]) -> Vec<Option<Vec<F>>> {
        let x = self.inputs[0].data();
        let two = F::from_f64(2.0);
        let g: Vec<F> = match self.kind {
            UnaryKind::Neg => grad.iter().map(|&g| -g).collect(),
            UnaryKind::Scale(c) => grad.iter().map(|&g| g * F::from_f64(c)).collect(),
            UnaryKind::AddScalar(_) => grad.to_vec(),
            UnaryKind::Exp => grad.iter().zip(out).map(|(&g, &y)| g * y).collect(),
            UnaryKind::Log => grad.iter().zip(x).map(|(&g, &x)| g / x).collect(),
            UnaryKind::Sqrt => grad
                .iter()
                .zip(out)
                .map(|(&g, &y)| if y > F::zero() { g / (two * y) } else { F::zero() })
                .collect(),
            UnaryKind::Abs => grad
                .iter()
                .zip(x)
                .map(|(&g, &x)| {
                    if x > F::zero() {
                        g
                    } else if x < F::zero() {
                        -g
                    } else {
                        F::zero()
                    }
                })
                .collect(),
            UnaryKind::Sigmoid => grad
                .iter()
                .zip(out)
                .map(|(&g, &y)| g * y * (F::one() - y))
                .collect(),
            UnaryKind::Softplus => grad
                .iter()
                .zip(x)
                .map(|(&g, &x)| g * sigmoid_scalar(x))
                .collect(),
            UnaryKind::Square => grad.iter().zip(x).map(|(&g, &x)| g * two * x).collect(),
        };
        vec![Some(g)]
    }
}

fn map<F: Float>(x: &[F], f: impl Fn(F) -> F) -> Vec<F> {
    x.iter().map(|&v| f(v)).collect()
}

fn unary<F: Float>(t: &Tensor<F>, kind: UnaryKind) -> Tensor<F> {
    let x = t.data();
    let data = match kind {
        UnaryKind::Neg => map(x, |v| -v),
        UnaryKind::Scale(c) => {
            let c = F::from_f64(c);
            map(x, |v| v * c)
        }
        UnaryKind::AddScalar(c) => {
            let c = F::from_f64(c);
            map(x, |v| v + c)
        }
        UnaryKind::Exp => map(x, |v| v.exp()),
        UnaryKind::Log => map(x, |v| v.ln()),
        // clamped at zero; the gradient there is taken as zero
        UnaryKind::Sqrt => map(x, |v| v.max(F::zero()).sqrt()),
        UnaryKind::Abs => map(x, |v| v.abs()),
        UnaryKind::Sigmoid => map(x, sigmoid_scalar),
        UnaryKind::Softplus => map(x, softplus_scalar),
        UnaryKind::Square => map(x, |v| v * v),
    };
    Tensor::from_op(
        data,
        t.shape().to_vec(),
        Box::new(UnaryBackward {
            inputs: vec![t.clone()],
            kind,
        }),
    )
}

impl<F: Float> Tensor<F> {
    pub fn neg(&self) -> Tensor<F> {
        unary(self, UnaryKind::Neg)
    }

    /// Multiplies every element by a constant.
    pub fn scale(&self, c: f64) -> Tensor<F> {
        unary(self, UnaryKind::Scale(c))
    }

    pub fn add_scalar(&self, c: f64) -> Tensor<F> {
        unary(self, UnaryKind::AddScalar(c))
    }

    pub fn exp(&self) -> Tensor<F> {
        unary(self, UnaryKind::Exp)
    }

    pub fn log(&self) -> Tensor<F> {
        unary(self, UnaryKind::Log)
    }

    pub fn sqrt(&self) -> Tensor<F> {
        unary(self, UnaryKind::Sqrt)
    }

    pub fn abs(&self) -> Tensor<F> {
        unary(self, UnaryKind::Abs)
    }

    pub fn sigmoid(&self) -> Tensor<F> {
        unary(self, UnaryKind::Sigmoid)
    }

    pub fn softplus(&self) -> Tensor<F> {
        unary(self, UnaryKind::Softplus)
    }

    pub fn square(&self) -> Tensor<F> {
        unary(self, UnaryKind::Square)
    }

    /// Elementwise map with no gradient (for masks, thresholds, metrics).
    pub fn map_detached(&self, f: impl Fn(F) -> F) -> Result<Tensor<F>> {
        Tensor::from_vec(self.data().iter().map(|&x| f(x)).collect(), self.shape())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_of_zero_is_half() {
        let t = Tensor::<f32>::scalar(0.0).sigmoid();
        assert_eq!(t.item(), 0.5);
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        let t = Tensor::<f32>::from_vec(vec![-1000.0, 1000.0], &[2]).unwrap().sigmoid();
        assert_eq!(t.data(), &[0.0, 1.0]);
        let s = Tensor::<f32>::from_vec(vec![-1000.0, 1000.0], &[2]).unwrap().softplus();
        assert_eq!(s.data(), &[0.0, 1000.0]);
    }

    #[test]
    fn sqrt_at_zero_has_zero_gradient() {
        let x = Tensor::<f64>::param(vec![0.0], &[1]).unwrap();
        x.sqrt().sum().unwrap().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.0]);
    }
}
