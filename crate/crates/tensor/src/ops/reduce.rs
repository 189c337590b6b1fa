use super::grad_fn;
use crate::error::{Result, TensorError};
use crate::float::Float;
use crate::tensor::{GradFn, Tensor};

/// Splits `shape` around `axis` into (outer, axis_len, inner).
pub(crate) fn split_axis(
    op: &'static str,
    shape: &[usize],
    axis: usize,
) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(TensorError::AxisOutOfRange {
            op,
            axis,
            rank: shape.len(),
        });
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

grad_fn!(SumAllBackward { scale: f64 });

impl<F: Float> GradFn<F> for SumAllBackward<F> {
    fn name(&self) -> &'static str {
        "sum"
    }

    fn inputs(&self) -> &[Tensor<F>] {
        &self.inputs
    }

    fn backward(&self, _out: &[F], grad: &[F]) -> Vec<Option<Vec<F>>> {
        let g = grad[0] * F::from_f64(self.scale);
        vec![Some(vec![g; self.inputs[0].numel()])]
    }
}

grad_fn!(SumAxisBackward {
    outer: usize,
    len: usize,
    inner: usize,
    scale: f64,
});

impl<F: Float> GradFn<F> for SumAxisBackward<F> {
    fn name(&self) -> &'static str {
        "sum_axis"
    }

    fn inputs(&self) -> &[Tensor<F>] {
        &self.inputs
    }

    fn backward(&self, _out: &[F], grad: &[F]) -> Vec<Option<Vec<F>>> {
        let (outer, len, inner) = (self.outer, self.len, self.inner);
        let s = F::from_f64(self.scale);
        let mut g = vec![F::zero(); outer * len * inner];
        for o in 0..outer {
            for l in 0..len {
                let dst = &mut g[(o * len + l) * inner..(o * len + l + 1) * inner];
                let src = &grad[o * inner..(o + 1) * inner];
                for (d, &v) in dst.iter_mut().zip(src) {
                    *d = v * s;
                }
            }
        }
        vec![Some(g)]
    }
}

impl<F: Float> Tensor<F> {
    /// Sum of all elements, shape `[1]`.
    pub fn sum(&self) -> Result<Tensor<F>> {
        let s = self.data().iter().fold(F::zero(), |a, &b| a + b);
        Ok(Tensor::from_op(
            vec![s],
            vec![1],
            Box::new(SumAllBackward {
                inputs: vec![self.clone()],
                scale: 1.0,
            }),
        ))
    }

    /// Mean of all elements, shape `[1]`.
    pub fn mean(&self) -> Result<Tensor<F>> {
        let n = self.numel().max(1);
        let s = self.data().iter().fold(F::zero(), |a, &b| a + b) / F::from_usize(n);
        Ok(Tensor::from_op(
            vec![s],
            vec![1],
            Box::new(SumAllBackward {
                inputs: vec![self.clone()],
                scale: 1.0 / n as f64,
            }),
        ))
    }

    fn reduce_axis(&self, axis: usize, keepdim: bool, mean: bool) -> Result<Tensor<F>> {
        let (outer, len, inner) = split_axis("sum_axis", self.shape(), axis)?;
        let x = self.data();
        let mut out = vec![F::zero(); outer * inner];
        for o in 0..outer {
            let dst = &mut out[o * inner..(o + 1) * inner];
            for l in 0..len {
                let src = &x[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (d, &v) in dst.iter_mut().zip(src) {
                    *d += v;
                }
            }
        }
        let scale = if mean { 1.0 / len.max(1) as f64 } else { 1.0 };
        if mean {
            let s = F::from_f64(scale);
            out.iter_mut().for_each(|v| *v *= s);
        }
        let mut shape = self.shape().to_vec();
        if keepdim {
            shape[axis] = 1;
        } else {
            shape.remove(axis);
            if shape.is_empty() {
                shape.push(1);
            }
        }
        Ok(Tensor::from_op(
            out,
            shape,
            Box::new(SumAxisBackward {
                inputs: vec![self.clone()],
                outer,
                len,
                inner,
                scale,
            }),
        ))
    }

    pub fn sum_axis(&self, axis: usize, keepdim: bool) -> Result<Tensor<F>> {
        self.reduce_axis(axis, keepdim, false)
    }

    pub fn mean_axis(&self, axis: usize, keepdim: bool) -> Result<Tensor<F>> {
        self.reduce_axis(axis, keepdim, true)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn axis_sums() {
        let t = Tensor::<f64>::from_vec((1..=6).map(|v| v as f64).collect(), &[2, 3]).unwrap();
        assert_eq!(t.sum_axis(0, false).unwrap().data(), &[5.0, 7.0, 9.0]);
        assert_eq!(t.sum_axis(1, true).unwrap().shape(), &[2, 1]);
        assert_eq!(t.mean_axis(1, false).unwrap().data(), &[2.0, 5.0]);
        assert_eq!(t.sum().unwrap().item(), 21.0);
        assert!(t.sum_axis(2, false).is_err());
    }

    #[test]
    fn quadratic_gradient() {
        let w = Tensor::<f64>::param(vec![1.0, 2.0], &[2]).unwrap();
        w.mul(&w).unwrap().sum().unwrap().backward().unwrap();
        assert_eq!(w.grad().unwrap(), vec![2.0, 4.0]);
    }
}
