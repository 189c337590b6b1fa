use super::grad_fn;
use crate::error::{Result, TensorError};
use crate::float::Float;
use crate::tensor::{numel_of, GradFn, Tensor};

const ZERO_FILL: usize = usize::MAX;

// Output element i reads input element map[i] (or zero for ZERO_FILL).
grad_fn!(GatherBackward {
    name: &'static str,
    map: Vec<usize>,
});

impl<F: Float> GradFn<F> for GatherBackward<F> {
    fn name(&self) -> &'static str {
        self.name
    }

    fn inputs(&self) -> &[Tensor<F>] {
        &self.inputs
    }

    fn backward(&self, _out: &[F], grad: &[F]) -> Vec<Option<Vec<F>>> {
        let mut g = vec![F::zero(); self.inputs[0].numel()];
        for (&j, &v) in self.map.iter().zip(grad) {
            if j != ZERO_FILL {
                g[j] += v;
            }
        }
        vec![Some(g)]
    }
}

fn gather<F: Float>(t: &Tensor<F>, name: &'static str, map: Vec<usize>, shape: Vec<usize>) -> Tensor<F> {
    let x = t.data();
    let data = map
        .iter()
        .map(|&j| if j == ZERO_FILL { F::zero() } else { x[j] })
        .collect();
    Tensor::from_op(
        data,
        shape,
        Box::new(GatherBackward {
            inputs: vec![t.clone()],
            name,
            map,
        }),
    )
}

grad_fn!(ReshapeBackward {});

impl<F: Float> GradFn<F> for ReshapeBackward<F> {
    fn name(&self) -> &'static str {
        "reshape"
    }

    fn inputs(&self) -> &[Tensor<F>] {
        &self.inputs
    }

    fn backward(&self, _out: &[F], grad: &[F]) -> Vec<Option<Vec<F>>> {
        vec![Some(grad.to_vec())]
    }
}

grad_fn!(ConcatBackward {
    outer: usize,
    inner: usize,
    sizes: Vec<usize>,
});

impl<F: Float> GradFn<F> for ConcatBackward<F> {
    fn name(&self) -> &'static str {
        "concat"
    }

    fn inputs(&self) -> &[Tensor<F>] {
        &self.inputs
    }

    fn backward(&self, _out: &[F], grad: &[F]) -> Vec<Option<Vec<F>>> {
        let total: usize = self.sizes.iter().sum();
        let mut offset = 0;
        let mut out = Vec::with_capacity(self.sizes.len());
        for (i, &len) in self.sizes.iter().enumerate() {
            if !self.inputs[i].requires_grad() {
                out.push(None);
                offset += len;
                continue;
            }
            let mut g = Vec::with_capacity(self.outer * len * self.inner);
            for o in 0..self.outer {
                let start = (o * total + offset) * self.inner;
                g.extend_from_slice(&grad[start..start + len * self.inner]);
            }
            out.push(Some(g));
            offset += len;
        }
        out
    }
}

grad_fn!(AvgPoolBackward { h: usize, w: usize, c: usize });

impl<F: Float> GradFn<F> for AvgPoolBackward<F> {
    fn name(&self) -> &'static str {
        "avgpool2x"
    }

    fn inputs(&self) -> &[Tensor<F>] {
        &self.inputs
    }

    fn backward(&self, _out: &[F], grad: &[F]) -> Vec<Option<Vec<F>>> {
        let (h, w, c) = (self.h, self.w, self.c);
        let ow = w / 2;
        let q = F::from_f64(0.25);
        let mut g = vec![F::zero(); h * w * c];
        for y in 0..h {
            for x in 0..w {
                let src = &grad[((y / 2) * ow + x / 2) * c..((y / 2) * ow + x / 2 + 1) * c];
                let dst = &mut g[(y * w + x) * c..(y * w + x + 1) * c];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = s * q;
                }
            }
        }
        vec![Some(g)]
    }
}

fn hwc(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() != 3 {
        return Err(TensorError::InvalidShape {
            op,
            shape: shape.to_vec(),
            reason: "expected an H×W×C map".into(),
        });
    }
    Ok((shape[0], shape[1], shape[2]))
}

impl<F: Float> Tensor<F> {
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<F>> {
        if numel_of(shape) != self.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        Ok(Tensor::from_op(
            self.data().to_vec(),
            shape.to_vec(),
            Box::new(ReshapeBackward {
                inputs: vec![self.clone()],
            }),
        ))
    }

    /// Swaps two axes (copying).
    pub fn transpose(&self, a0: usize, a1: usize) -> Result<Tensor<F>> {
        let shape = self.shape();
        let rank = shape.len();
        for a in [a0, a1] {
            if a >= rank {
                return Err(TensorError::AxisOutOfRange {
                    op: "transpose",
                    axis: a,
                    rank,
                });
            }
        }
        let mut in_strides = vec![1usize; rank];
        for d in (0..rank.saturating_sub(1)).rev() {
            in_strides[d] = in_strides[d + 1] * shape[d + 1];
        }
        let mut out_shape = shape.to_vec();
        out_shape.swap(a0, a1);
        let mut strides = in_strides.clone();
        strides.swap(a0, a1);
        let n = self.numel();
        let mut map = Vec::with_capacity(n);
        let mut idx = vec![0usize; rank];
        let mut flat = 0usize;
        for _ in 0..n {
            map.push(flat);
            for d in (0..rank).rev() {
                idx[d] += 1;
                flat += strides[d];
                if idx[d] < out_shape[d] {
                    break;
                }
                flat -= strides[d] * idx[d];
                idx[d] = 0;
            }
        }
        Ok(gather(self, "transpose", map, out_shape))
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, end: usize) -> Result<Tensor<F>> {
        let (outer, len, inner) = super::reduce::split_axis("slice", self.shape(), axis)?;
        if start > end || end > len {
            return Err(TensorError::IndexOutOfRange {
                op: "slice",
                index: end,
                size: len,
            });
        }
        let w = end - start;
        let mut map = Vec::with_capacity(outer * w * inner);
        for o in 0..outer {
            let base = (o * len + start) * inner;
            map.extend(base..base + w * inner);
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = w;
        Ok(gather(self, "slice", map, shape))
    }

    /// Concatenation along `axis`; all other dimensions must agree.
    pub fn concat(parts: &[Tensor<F>], axis: usize) -> Result<Tensor<F>> {
        let first = parts.first().ok_or_else(|| TensorError::InvalidShape {
            op: "concat",
            shape: vec![],
            reason: "no inputs".into(),
        })?;
        let (outer, _, inner) = super::reduce::split_axis("concat", first.shape(), axis)?;
        let mut sizes = Vec::with_capacity(parts.len());
        for p in parts {
            let s = p.shape();
            let same_rank = s.len() == first.ndim();
            let same_other = same_rank
                && s.iter()
                    .zip(first.shape())
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !same_other {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first.shape().to_vec(),
                    rhs: s.to_vec(),
                });
            }
            sizes.push(s[axis]);
        }
        let total: usize = sizes.iter().sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (p, &len) in parts.iter().zip(&sizes) {
                data.extend_from_slice(&p.data()[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = total;
        Ok(Tensor::from_op(
            data,
            shape,
            Box::new(ConcatBackward {
                inputs: parts.to_vec(),
                outer,
                inner,
                sizes,
            }),
        ))
    }

    /// Selects rows along axis 0; `None` produces a zero row.
    pub fn gather_rows(&self, rows: &[Option<usize>]) -> Result<Tensor<F>> {
        if self.ndim() == 0 {
            return Err(TensorError::InvalidShape {
                op: "gather_rows",
                shape: vec![],
                reason: "scalar".into(),
            });
        }
        let n = self.shape()[0];
        let inner: usize = self.shape()[1..].iter().product();
        let mut map = Vec::with_capacity(rows.len() * inner);
        for r in rows {
            match *r {
                Some(i) if i >= n => {
                    return Err(TensorError::IndexOutOfRange {
                        op: "gather_rows",
                        index: i,
                        size: n,
                    })
                }
                Some(i) => map.extend(i * inner..(i + 1) * inner),
                None => map.extend(std::iter::repeat_n(ZERO_FILL, inner)),
            }
        }
        let mut shape = self.shape().to_vec();
        shape[0] = rows.len();
        Ok(gather(self, "gather_rows", map, shape))
    }

    pub fn select_rows(&self, rows: &[usize]) -> Result<Tensor<F>> {
        let rows: Vec<Option<usize>> = rows.iter().map(|&r| Some(r)).collect();
        self.gather_rows(&rows)
    }

    /// Space-to-tokens: `[H, W, C] → [(H/p)·(W/p), p·p·C]`, tokens in row-major
    /// grid order, each token laid out as (dy, dx, c).
    pub fn patchify(&self, p: usize) -> Result<Tensor<F>> {
        let (h, w, c) = hwc("patchify", self.shape())?;
        if p == 0 || h % p != 0 || w % p != 0 {
            return Err(TensorError::InvalidShape {
                op: "patchify",
                shape: self.shape().to_vec(),
                reason: format!("patch size {p} does not divide the map"),
            });
        }
        let (gh, gw) = (h / p, w / p);
        let mut map = Vec::with_capacity(h * w * c);
        for gy in 0..gh {
            for gx in 0..gw {
                for dy in 0..p {
                    for dx in 0..p {
                        let base = ((gy * p + dy) * w + gx * p + dx) * c;
                        map.extend(base..base + c);
                    }
                }
            }
        }
        Ok(gather(self, "patchify", map, vec![gh * gw, p * p * c]))
    }

    /// Nearest-neighbour 2× upsample of an `[h, w, C]` map.
    pub fn upsample2x(&self) -> Result<Tensor<F>> {
        let (h, w, c) = hwc("upsample2x", self.shape())?;
        let mut map = Vec::with_capacity(4 * h * w * c);
        for y in 0..2 * h {
            for x in 0..2 * w {
                let base = ((y / 2) * w + x / 2) * c;
                map.extend(base..base + c);
            }
        }
        Ok(gather(self, "upsample2x", map, vec![2 * h, 2 * w, c]))
    }

    /// 2×2 mean pool of an `[h, w, C]` map with even sides.
    pub fn avgpool2x(&self) -> Result<Tensor<F>> {
        let (h, w, c) = hwc("avgpool2x", self.shape())?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(TensorError::InvalidShape {
                op: "avgpool2x",
                shape: self.shape().to_vec(),
                reason: "odd spatial size".into(),
            });
        }
        let (oh, ow) = (h / 2, w / 2);
        let x = self.data();
        let q = F::from_f64(0.25);
        let mut out = vec![F::zero(); oh * ow * c];
        for y in 0..oh {
            for xx in 0..ow {
                let dst = &mut out[(y * ow + xx) * c..(y * ow + xx + 1) * c];
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let s = ((2 * y + dy) * w + 2 * xx + dx) * c;
                    for (d, &v) in dst.iter_mut().zip(&x[s..s + c]) {
                        *d += v;
                    }
                }
                dst.iter_mut().for_each(|v| *v *= q);
            }
        }
        Ok(Tensor::from_op(
            out,
            vec![oh, ow, c],
            Box::new(AvgPoolBackward {
                inputs: vec![self.clone()],
                h,
                w,
                c,
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(shape: &[usize]) -> Tensor<f64> {
        Tensor::from_vec((0..numel_of(shape)).map(|v| v as f64).collect(), shape).unwrap()
    }

    #[test]
    fn transpose_swaps_axes() {
        let t = seq(&[2, 3]).transpose(0, 1).unwrap();
        assert_eq!(t.shape(), &[3, 2]);
        assert_eq!(t.data(), &[0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
        let u = seq(&[2, 3, 4]).transpose(0, 1).unwrap();
        assert_eq!(u.shape(), &[3, 2, 4]);
        assert_eq!(&u.data()[..8], &[0.0, 1.0, 2.0, 3.0, 12.0, 13.0, 14.0, 15.0]);
    }

    #[test]
    fn slice_and_concat_round_trip() {
        let t = seq(&[2, 5]);
        let a = t.slice(1, 0, 2).unwrap();
        let b = t.slice(1, 2, 5).unwrap();
        assert_eq!(a.data(), &[0.0, 1.0, 5.0, 6.0]);
        let back = Tensor::concat(&[a, b], 1).unwrap();
        assert!(back.same_data(&t));
        assert!(t.slice(1, 3, 6).is_err());
    }

    #[test]
    fn gather_rows_zero_fills() {
        let t = seq(&[3, 2]);
        let g = t.gather_rows(&[Some(2), None, Some(0)]).unwrap();
        assert_eq!(g.data(), &[4.0, 5.0, 0.0, 0.0, 0.0, 1.0]);
        assert!(t.gather_rows(&[Some(3)]).is_err());
    }

    #[test]
    fn patchify_token_layout() {
        // 4x4 single-channel map, 2x2 patches
        let t = seq(&[4, 4, 1]);
        let p = t.patchify(2).unwrap();
        assert_eq!(p.shape(), &[4, 4]);
        assert_eq!(&p.data()[..4], &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(&p.data()[4..8], &[2.0, 3.0, 6.0, 7.0]);
        assert!(t.patchify(3).is_err());
    }

    #[test]
    fn pool_inverts_upsample() {
        let t = seq(&[2, 3, 2]);
        let up = t.upsample2x().unwrap();
        assert_eq!(up.shape(), &[4, 6, 2]);
        let down = up.avgpool2x().unwrap();
        assert!(down.same_data(&t));
    }
}
