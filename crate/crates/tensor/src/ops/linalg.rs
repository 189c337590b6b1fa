use super::{grad_fn, needs};
use crate::error::{Result, TensorError};
use crate::float::Float;
use crate::kernels::{gemm_nn, gemm_nt, gemm_tn};
use crate::tensor::{GradFn, Tensor};

/// (batch, m, k, n); batch = 0 means the right operand is a shared 2-D matrix.
#[derive(Clone, Copy)]
pub(crate) struct MatmulDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
}

grad_fn!(MatmulBackward { dims: MatmulDims });

impl<F: Float> GradFn<F> for MatmulBackward<F> {
    fn name(&self) -> &'static str {
        if self.dims.batch == 0 {
            "matmul"
        } else {
            "bmm"
        }
    }

    fn inputs(&self) -> &[Tensor<F>] {
        &self.inputs
    }

    fn backward(&self, _out: &[F], grad: &[F]) -> Vec<Option<Vec<F>>> {
        let MatmulDims { batch, m, k, n } = self.dims;
        let (a, b) = (self.inputs[0].data(), self.inputs[1].data());
        let mut ga = None;
        let mut gb = None;
        if batch == 0 {
            if needs(&self.inputs, 0) {
                let mut g = vec![F::zero(); m * k];
                gemm_nt(grad, b, &mut g, m, n, k);
                ga = Some(g);
            }
            if needs(&self.inputs, 1) {
                let mut g = vec![F::zero(); k * n];
                gemm_tn(a, grad, &mut g, m, k, n);
                gb = Some(g);
            }
        } else {
            if needs(&self.inputs, 0) {
                let mut g = vec![F::zero(); batch * m * k];
                for i in 0..batch {
                    gemm_nt(
                        &grad[i * m * n..(i + 1) * m * n],
                        &b[i * k * n..(i + 1) * k * n],
                        &mut g[i * m * k..(i + 1) * m * k],
                        m,
                        n,
                        k,
                    );
                }
                ga = Some(g);
            }
            if needs(&self.inputs, 1) {
                let mut g = vec![F::zero(); batch * k * n];
                for i in 0..batch {
                    gemm_tn(
                        &a[i * m * k..(i + 1) * m * k],
                        &grad[i * m * n..(i + 1) * m * n],
                        &mut g[i * k * n..(i + 1) * k * n],
                        m,
                        k,
                        n,
                    );
                }
                gb = Some(g);
            }
        }
        vec![ga, gb]
    }
}

impl<F: Float> Tensor<F> {
    /// Matrix product.
    ///
    /// * `[.., m, k] × [k, n] → [.., m, n]` (right operand shared)
    /// * `[b, m, k] × [b, k, n] → [b, m, n]` (batched)
    pub fn matmul(&self, rhs: &Tensor<F>) -> Result<Tensor<F>> {
        let (sa, sb) = (self.shape(), rhs.shape());
        let mismatch = || TensorError::ShapeMismatch {
            op: "matmul",
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch());
        }
        let k = sa[sa.len() - 1];
        if sb.len() == 2 {
            if sb[0] != k {
                return Err(mismatch());
            }
            let n = sb[1];
            let m: usize = sa[..sa.len() - 1].iter().product();
            let mut out = vec![F::zero(); m * n];
            gemm_nn(self.data(), rhs.data(), &mut out, m, k, n);
            let mut shape = sa[..sa.len() - 1].to_vec();
            shape.push(n);
            return Ok(Tensor::from_op(
                out,
                shape,
                Box::new(MatmulBackward {
                    inputs: vec![self.clone(), rhs.clone()],
                    dims: MatmulDims { batch: 0, m, k, n },
                }),
            ));
        }
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sb[1] != k {
            return Err(mismatch());
        }
        let (batch, m, n) = (sa[0], sa[1], sb[2]);
        let mut out = vec![F::zero(); batch * m * n];
        let (a, b) = (self.data(), rhs.data());
        for i in 0..batch {
            gemm_nn(
                &a[i * m * k..(i + 1) * m * k],
                &b[i * k * n..(i + 1) * k * n],
                &mut out[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        }
        Ok(Tensor::from_op(
            out,
            vec![batch, m, n],
            Box::new(MatmulBackward {
                inputs: vec![self.clone(), rhs.clone()],
                dims: MatmulDims { batch, m, k, n },
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_leaves_matrix_unchanged() {
        let a = Tensor::<f32>::from_vec((0..9).map(|v| v as f32 * 0.7 - 2.0).collect(), &[3, 3])
            .unwrap();
        let out = Tensor::eye(3).matmul(&a).unwrap();
        assert_eq!(out.data(), a.data());
    }

    #[test]
    fn rejects_contraction_mismatch() {
        let a = Tensor::<f32>::zeros(&[2, 3]);
        let b = Tensor::<f32>::zeros(&[4, 5]);
        let err = a.matmul(&b).unwrap_err();
        assert!(err.to_string().contains("matmul"));
        assert!(err.to_string().contains("[2, 3]"));
        assert!(err.to_string().contains("[4, 5]"));
    }

    #[test]
    fn batched_matches_per_item_products() {
        let a = Tensor::<f64>::from_vec((0..12).map(|v| v as f64).collect(), &[2, 2, 3]).unwrap();
        let b = Tensor::<f64>::from_vec((0..12).map(|v| 1.0 - v as f64).collect(), &[2, 3, 2])
            .unwrap();
        let c = a.matmul(&b).unwrap();
        for i in 0..2 {
            let ai = Tensor::<f64>::from_vec(a.data()[i * 6..(i + 1) * 6].to_vec(), &[2, 3]).unwrap();
            let bi = Tensor::<f64>::from_vec(b.data()[i * 6..(i + 1) * 6].to_vec(), &[3, 2]).unwrap();
            assert_eq!(&c.data()[i * 4..(i + 1) * 4], ai.matmul(&bi).unwrap().data());
        }
    }
}
