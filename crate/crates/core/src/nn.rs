//! Layer building blocks over bound [`Params`].

use mimq_tensor::Tensor;

use crate::error::Result;
use crate::params::{Init, ParamSpec, Params};

pub const LN_EPS: f64 = 1e-6;

pub fn linear_specs(out: &mut Vec<ParamSpec>, prefix: &str, d_in: usize, d_out: usize) {
    out.push(ParamSpec::new(format!("{prefix}.weight"), &[d_in, d_out], Init::XavierUniform));
    out.push(ParamSpec::new(format!("{prefix}.bias"), &[d_out], Init::Zeros));
}

pub fn norm_specs(out: &mut Vec<ParamSpec>, prefix: &str, d: usize) {
    out.push(ParamSpec::new(format!("{prefix}.gamma"), &[d], Init::Ones));
    out.push(ParamSpec::new(format!("{prefix}.beta"), &[d], Init::Zeros));
}

pub fn attention_specs(out: &mut Vec<ParamSpec>, prefix: &str, d: usize) {
    for p in ["q", "k", "v", "o"] {
        linear_specs(out, &format!("{prefix}.{p}"), d, d);
    }
}

pub fn mlp_specs(out: &mut Vec<ParamSpec>, prefix: &str, d: usize, ratio: usize) {
    linear_specs(out, &format!("{prefix}.fc1"), d, d * ratio);
    linear_specs(out, &format!("{prefix}.fc2"), d * ratio, d);
}

/// Pre-norm transformer block: self-attention then MLP, each residual.
pub fn block_specs(out: &mut Vec<ParamSpec>, prefix: &str, d: usize, ratio: usize) {
    norm_specs(out, &format!("{prefix}.norm1"), d);
    attention_specs(out, &format!("{prefix}.attn"), d);
    norm_specs(out, &format!("{prefix}.norm2"), d);
    mlp_specs(out, &format!("{prefix}.mlp"), d, ratio);
}

pub fn linear(p: &Params, prefix: &str, x: &Tensor) -> Result<Tensor> {
    let w = p.get(&format!("{prefix}.weight"))?;
    let b = p.get(&format!("{prefix}.bias"))?;
    Ok(x.matmul(w)?.add(b)?)
}

pub fn layer_norm(p: &Params, prefix: &str, x: &Tensor) -> Result<Tensor> {
    let g = p.get(&format!("{prefix}.gamma"))?;
    let b = p.get(&format!("{prefix}.beta"))?;
    Ok(x.layer_norm(g, b, LN_EPS)?)
}

pub fn mlp(p: &Params, prefix: &str, x: &Tensor) -> Result<Tensor> {
    let h = linear(p, &format!("{prefix}.fc1"), x)?.gelu();
    linear(p, &format!("{prefix}.fc2"), &h)
}

/// Multi-head attention of `xq` (`[m, d]`) over `xkv` (`[n, d]`). When
/// `trace` is given, receives the head-averaged weights as `m·n` values.
pub fn attention(
    p: &Params,
    prefix: &str,
    xq: &Tensor,
    xkv: &Tensor,
    heads: usize,
    trace: Option<&mut Vec<f32>>,
) -> Result<Tensor> {
    let (m, d) = (xq.shape()[0], xq.shape()[1]);
    let n = xkv.shape()[0];
    let dh = d / heads;
    let split = |t: Tensor, rows: usize| -> Result<Tensor> { Ok(t.reshape(&[rows, heads, dh])?.transpose(0, 1)?) };
    let q = split(linear(p, &format!("{prefix}.q"), xq)?, m)?;
    let k = split(linear(p, &format!("{prefix}.k"), xkv)?, n)?.transpose(1, 2)?;
    let v = split(linear(p, &format!("{prefix}.v"), xkv)?, n)?;
    let a = q.matmul(&k)?.scale(1.0 / (dh as f64).sqrt()).softmax(2)?;
    if let Some(tr) = trace {
        let w = a.data();
        let mut mean = vec![0.0f32; m * n];
        for h in 0..heads {
            for (acc, &x) in mean.iter_mut().zip(&w[h * m * n..(h + 1) * m * n]) {
                *acc += x / heads as f32;
            }
        }
        *tr = mean;
    }
    let o = a.matmul(&v)?.transpose(0, 1)?.reshape(&[m, d])?;
    linear(p, &format!("{prefix}.o"), &o)
}

/// Pre-norm self-attention block over `[n, d]` tokens.
pub fn block(p: &Params, prefix: &str, x: &Tensor, heads: usize) -> Result<Tensor> {
    let h = layer_norm(p, &format!("{prefix}.norm1"), x)?;
    let x = x.add(&attention(p, &format!("{prefix}.attn"), &h, &h, heads, None)?)?;
    let h = layer_norm(p, &format!("{prefix}.norm2"), &x)?;
    Ok(x.add(&mlp(p, &format!("{prefix}.mlp"), &h)?)?)
}

/// Fixed 2-D sinusoidal embedding of `(y, x)` positions, `dim` divisible by
/// four: a quarter each for sin y, cos y, sin x, cos x.
pub fn sincos_2d(coords: &[(f64, f64)], dim: usize) -> Vec<f32> {
    assert!(dim.is_multiple_of(4), "positional dim {dim} not divisible by 4");
    let q = dim / 4;
    let freqs: Vec<f64> = (0..q).map(|k| 1.0 / 10000f64.powf(k as f64 / q as f64)).collect();
    let mut out = Vec::with_capacity(coords.len() * dim);
    for &(y, x) in coords {
        out.extend(freqs.iter().map(|w| (y * w).sin() as f32));
        out.extend(freqs.iter().map(|w| (y * w).cos() as f32));
        out.extend(freqs.iter().map(|w| (x * w).sin() as f32));
        out.extend(freqs.iter().map(|w| (x * w).cos() as f32));
    }
    out
}

/// Positions of row-major `cells` on a grid of width `grid_w` whose cells are
/// `stride` stage-1 tokens wide, in stage-1 token units at cell centres.
pub fn cell_coords(cells: &[usize], grid_w: usize, stride: usize) -> Vec<(f64, f64)> {
    let s = stride as f64;
    cells
        .iter()
        .map(|&c| {
            let (y, x) = ((c / grid_w) as f64, (c % grid_w) as f64);
            ((y + 0.5) * s - 0.5, (x + 0.5) * s - 0.5)
        })
        .collect()
}

pub fn positions(cells: &[usize], grid_w: usize, stride: usize, dim: usize) -> Tensor {
    let data = sincos_2d(&cell_coords(cells, grid_w, stride), dim);
    Tensor::from_vec(data, &[cells.len(), dim]).expect("positional table shape")
}
