use super::{grad_fn, needs};
use crate::error::{Result, TensorError};
use crate::float::Float;
use crate::tensor::{numel_of, GradFn, Tensor};

/// Output shape under right-aligned broadcasting where each dimension is
/// either equal or 1 on one side. Anything else is rejected.
pub(crate) fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(TensorError::ShapeMismatch {
                    op,
                    lhs: a.to_vec(),
                    rhs: b.to_vec(),
                })
            }
        };
    }
    Ok(out)
}

/// For each output element, the flat index of the source element it reads.
/// `None` when the source already has the output shape.
pub(crate) fn index_map(out: &[usize], src: &[usize]) -> Option<Vec<usize>> {
    if out == src {
        return None;
    }
    let rank = out.len();
    let mut strides = vec![0usize; rank];
    let mut acc = 1;
    for i in (0..src.len()).rev() {
        let oi = i + rank - src.len();
        strides[oi] = if src[i] == 1 { 0 } else { acc };
        acc *= src[i];
    }
    let n = numel_of(out);
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut flat = 0usize;
    for _ in 0..n {
        map.push(flat);
        for d in (0..rank).rev() {
            idx[d] += 1;
            flat += strides[d];
            if idx[d] < out[d] {
                break;
            }
            flat -= strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    Some(map)
}

fn reduce_grad<F: Float>(grad: &[F], map: &Option<Vec<usize>>, src_len: usize) -> Vec<F> {
    match map {
        None => grad.to_vec(),
        Some(m) => {
            let mut out = vec![F::zero(); src_len];
            for (g, &j) in grad.iter().zip(m) {
                out[j] += *g;
            }
            out
        }
    }
}

#[derive(Clone, Copy)]
pub(crate) enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

grad_fn!(BinaryBackward {
    kind: BinKind,
    lhs_map: Option<Vec<usize>>,
    rhs_map: Option<Vec<usize>>,
});

impl<F: Float> GradFn<F> for BinaryBackward<F> {
    fn name(&self) -> &'static str {
        match self.kind {
            BinKind::Add => "add",
            BinKind::Sub => "sub",
            BinKind::Mul => "mul",
            BinKind::Div => "div",
        }
    }

    fn inputs(&self) -> &[Tensor<F>] {
        &self.inputs
    }

    fn backward(&self, _out: &[F], grad: &[F]) -> Vec<Option<Vec<F>>> {
        let (a, b) = (&self.inputs[0], &self.inputs[1]);
        let at = |i: usize| match &self.lhs_map {
            None => a.data()[i],
            Some(m) => a.data()[m[i]],
        };
        let bt = |i: usize| match &self.rhs_map {
            None => b.data()[i],
            Some(m) => b.data()[m[i]],
        };
        let n = grad.len();
        let (ga, gb): (Option<Vec<F>>, Option<Vec<F>>) = match self.kind {
            BinKind::Add => (
                needs(&self.inputs, 0).then(|| grad.to_vec()),
                needs(&self.inputs, 1).then(|| grad.to_vec()),
            ),
            BinKind::Sub => (
                needs(&self.inputs, 0).then(|| grad.to_vec()),
                needs(&self.inputs, 1).then(|| grad.iter().map(|&g| -g).collect()),
            ),
            BinKind::Mul => (
                needs(&self.inputs, 0).then(|| (0..n).map(|i| grad[i] * bt(i)).collect()),
                needs(&self.inputs, 1).then(|| (0..n).map(|i| grad[i] * at(i)).collect()),
            ),
            BinKind::Div => (
                needs(&self.inputs, 0).then(|| (0..n).map(|i| grad[i] / bt(i)).collect()),
                needs(&self.inputs, 1).then(|| {
                    (0..n)
                        .map(|i| {
                            let bv = bt(i);
                            -grad[i] * at(i) / (bv * bv)
                        })
                        .collect()
                }),
            ),
        };
        vec![
            ga.map(|g| reduce_grad(&g, &self.lhs_map, a.numel())),
            gb.map(|g| reduce_grad(&g, &self.rhs_map, b.numel())),
        ]
    }
}

fn binary<F: Float>(kind: BinKind, a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    let op = match kind {
        BinKind::Add => "add",
        BinKind::Sub => "sub",
        BinKind::Mul => "mul",
        BinKind::Div => "div",
    };
    let out_shape = broadcast_shape(op, a.shape(), b.shape())?;
    let lhs_map = index_map(&out_shape, a.shape());
    let rhs_map = index_map(&out_shape, b.shape());
    let n = numel_of(&out_shape);
    let f: fn(F, F) -> F = match kind {
        BinKind::Add => |x, y| x + y,
        BinKind::Sub => |x, y| x - y,
        BinKind::Mul => |x, y| x * y,
        BinKind::Div => |x, y| x / y,
    };
    let (ad, bd) = (a.data(), b.data());
    let data: Vec<F> = match (&lhs_map, &rhs_map) {
        (None, None) => ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect(),
        (None, Some(rm)) => ad.iter().zip(rm).map(|(&x, &j)| f(x, bd[j])).collect(),
        (Some(lm), None) => lm.iter().zip(bd).map(|(&i, &y)| f(ad[i], y)).collect(),
        (Some(lm), Some(rm)) => (0..n).map(|k| f(ad[lm[k]], bd[rm[k]])).collect(),
    };
    Ok(Tensor::from_op(
        data,
        out_shape,
        Box::new(BinaryBackward {
            inputs: vec![a.clone(), b.clone()],
            kind,
            lhs_map,
            rhs_map,
        }),
    ))
}

impl<F: Float> Tensor<F> {
    pub fn add(&self, other: &Tensor<F>) -> Result<Tensor<F>> {
        binary(BinKind::Add, self, other)
    }

    pub fn sub(&self, other: &Tensor<F>) -> Result<Tensor<F>> {
        binary(BinKind::Sub, self, other)
    }

    pub fn mul(&self, other: &Tensor<F>) -> Result<Tensor<F>> {
        binary(BinKind::Mul, self, other)
    }

    pub fn div(&self, other: &Tensor<F>) -> Result<Tensor<F>> {
        binary(BinKind::Div, self, other)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_rules() {
        assert_eq!(broadcast_shape("t", &[4, 3], &[3]).unwrap(), vec![4, 3]);
        assert_eq!(broadcast_shape("t", &[4, 1], &[1, 5]).unwrap(), vec![4, 5]);
        assert_eq!(broadcast_shape("t", &[2, 4, 3], &[4, 1]).unwrap(), vec![2, 4, 3]);
        let err = broadcast_shape("add", &[4, 3], &[4]).unwrap_err();
        assert_eq!(
            err,
            TensorError::ShapeMismatch {
                op: "add",
                lhs: vec![4, 3],
                rhs: vec![4]
            }
        );
    }

    #[test]
    fn index_map_repeats_rows_and_columns() {
        assert_eq!(index_map(&[2, 3], &[3]).unwrap(), vec![0, 1, 2, 0, 1, 2]);
        assert_eq!(index_map(&[2, 3], &[2, 1]).unwrap(), vec![0, 0, 0, 1, 1, 1]);
        assert!(index_map(&[2, 3], &[2, 3]).is_none());
    }

    #[test]
    fn bias_gradient_sums_over_rows() {
        let x = Tensor::<f64>::param(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]).unwrap();
        let b = Tensor::<f64>::param(vec![0.5, 0.5, 0.5], &[3]).unwrap();
        let y = x.add(&b).unwrap().sum().unwrap();
        y.backward().unwrap();
        assert_eq!(b.grad().unwrap(), vec![2.0, 2.0, 2.0]);
        assert_eq!(x.grad().unwrap(), vec![1.0; 6]);
    }
}
