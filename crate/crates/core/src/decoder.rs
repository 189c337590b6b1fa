//! Query construction and the query decoder: per layer, cross-attention to
//! image features, then self-attention among queries, then an MLP, each
//! pre-normalised with a residual.

use mimq_tensor::Tensor;

use crate::config::ModelConfig;
use crate::encoder::{FeaturePyramid, TokenMap};
use crate::error::{Error, Result};
use crate::masking::MaskPlan;
use crate::nn::{self, attention, attention_specs, layer_norm, linear, linear_specs, mlp, mlp_specs, norm_specs};
use crate::params::{Init, ParamSpec, Params};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QueryKind {
    Pretrain,
    Finetune,
}

#[derive(Debug, Clone)]
pub struct QuerySet {
    /// `[M', D]`
    pub tokens: Tensor,
    pub kind: QueryKind,
    /// Row of the [CLS] query when present.
    pub cls_index: Option<usize>,
}

pub fn decoder_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let d = cfg.decoder.dim;
    let mut out = Vec::new();
    linear_specs(&mut out, "decoder.input_proj", cfg.encoder.fpn_dim, d);
    for l in 0..cfg.decoder.layers {
        let pre = format!("decoder.layers.{l}");
        norm_specs(&mut out, &format!("{pre}.norm_cross"), d);
        attention_specs(&mut out, &format!("{pre}.cross"), d);
        norm_specs(&mut out, &format!("{pre}.norm_self"), d);
        attention_specs(&mut out, &format!("{pre}.self_attn"), d);
        norm_specs(&mut out, &format!("{pre}.norm_mlp"), d);
        mlp_specs(&mut out, &format!("{pre}.mlp"), d, cfg.decoder.mlp_ratio);
    }
    norm_specs(&mut out, "decoder.norm", d);
    out.push(ParamSpec::new("query.cls", &[d], Init::Normal));
    out.push(ParamSpec::new("query.mask_token", &[d], Init::Normal));
    out
}

/// `[CLS]` followed by one mask token per masked cell, each carrying the
/// positional embedding of its cell.
pub fn build_pretrain_queries(p: &Params, cfg: &ModelConfig, plan: &MaskPlan) -> Result<QuerySet> {
    if plan.masked.is_empty() {
        return Err(Error::Mask("pre-training queries need at least one masked cell".into()));
    }
    let d = cfg.decoder.dim;
    let cls = p.get("query.cls")?.reshape(&[1, d])?;
    let pos = nn::positions(&plan.masked, plan.grid_w, 1, d);
    let masks = pos.add(p.get("query.mask_token")?)?;
    Ok(QuerySet {
        tokens: Tensor::concat(&[cls, masks], 0)?,
        kind: QueryKind::Pretrain,
        cls_index: Some(0),
    })
}

/// Query `i` is `cls_seed + e_i`.
pub fn build_finetune_queries(cls_seed: &Tensor, embeds: &Tensor) -> Result<QuerySet> {
    let d = cls_seed.numel();
    if embeds.ndim() != 2 || embeds.shape()[1] != d {
        return Err(Error::Tensor(mimq_tensor::TensorError::ShapeMismatch {
            op: "build_finetune_queries",
            lhs: cls_seed.shape().to_vec(),
            rhs: embeds.shape().to_vec(),
        }));
    }
    Ok(QuerySet {
        tokens: embeds.add(&cls_seed.reshape(&[d])?)?,
        kind: QueryKind::Finetune,
        cls_index: None,
    })
}

/// What the decoder cross-attends to.
#[derive(Debug, Clone, Copy)]
pub enum Memory<'a> {
    /// One single-scale token map, every layer attends to it.
    Single(&'a TokenMap),
    /// Pyramid levels, visited coarsest first, round robin. Pre-training
    /// passes the sparse pyramid of the visible tokens.
    Pyramid(&'a FeaturePyramid),
}

/// Pyramid level (index into `FeaturePyramid::maps`, 0 = finest) attended by
/// each of `layers` layers.
pub fn level_schedule(levels: usize, layers: usize) -> Vec<usize> {
    (0..layers).map(|l| levels - 1 - l % levels).collect()
}

/// Cross-attention weights of one layer.
#[derive(Debug, Clone)]
pub struct LayerTrace {
    pub layer: usize,
    /// Pyramid level index, 0 = finest.
    pub level: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub cells: Vec<usize>,
    /// Head-averaged, `[queries, cells]` row-major.
    pub weights: Vec<f32>,
}

fn project(p: &Params, map: &TokenMap, dim: usize) -> Result<Tensor> {
    let x = linear(p, "decoder.input_proj", &map.tokens)?;
    Ok(x.add(&nn::positions(&map.cells, map.grid_w, map.stride, dim))?)
}

/// Decoder states `[M', D]` for `queries`.
pub fn decode(
    p: &Params,
    cfg: &ModelConfig,
    queries: &QuerySet,
    memory: Memory<'_>,
    mut trace: Option<&mut Vec<LayerTrace>>,
) -> Result<Tensor> {
    let dc = &cfg.decoder;
    let maps: Vec<&TokenMap> = match memory {
        Memory::Single(m) => vec![m],
        Memory::Pyramid(pyr) => pyr.maps.iter().collect(),
    };
    let projected: Vec<Tensor> = maps.iter().map(|m| project(p, m, dc.dim)).collect::<Result<_>>()?;
    let schedule = level_schedule(maps.len(), dc.layers);
    let mut x = queries.tokens.clone();
    for (l, &lvl) in schedule.iter().enumerate() {
        let pre = format!("decoder.layers.{l}");
        let mem = &projected[lvl];
        let h = layer_norm(p, &format!("{pre}.norm_cross"), &x)?;
        let mut weights = Vec::new();
        let want = trace.is_some().then_some(&mut weights);
        x = x.add(&attention(p, &format!("{pre}.cross"), &h, mem, dc.heads, want)?)?;
        if let Some(tr) = trace.as_deref_mut() {
            let m = maps[lvl];
            tr.push(LayerTrace {
                layer: l,
                level: lvl,
                grid_h: m.grid_h,
                grid_w: m.grid_w,
                cells: m.cells.clone(),
                weights,
            });
        }
        let h = layer_norm(p, &format!("{pre}.norm_self"), &x)?;
        x = x.add(&attention(p, &format!("{pre}.self_attn"), &h, &h, dc.heads, None)?)?;
        let h = layer_norm(p, &format!("{pre}.norm_mlp"), &x)?;
        x = x.add(&mlp(p, &format!("{pre}.mlp"), &h)?)?;
    }
    layer_norm(p, "decoder.norm", &x)
}
