//! Hierarchical patch encoder and the bidirectional pyramid fuser.
//!
//! Stage 1 embeds `patch_size` pixel patches; every later stage merges 2×2
//! neighbourhoods. The dense path (all cells) uses the grid primitives
//! `patchify`, `avgpool2x` and `upsample2x`; the sparse path works on an
//! arbitrary subset of stage-1 cells by explicit row gathers. A merged cell
//! exists on the sparse path iff at least one child exists; missing
//! children contribute zeros to the merge and are left out of pooling.

use std::collections::HashMap;

use mimq_tensor::Tensor;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::masking::MaskPlan;
use crate::nn::{self, block, block_specs, layer_norm, linear, linear_specs, norm_specs};
use crate::params::{Init, ParamSpec, Params};

/// Raw fusion weight whose softplus is 1.
const FUSE_INIT: f32 = 0.541_324_85;
const FUSE_EPS: f64 = 1e-4;

/// Token set on one pyramid level.
#[derive(Debug, Clone)]
pub struct TokenMap {
    /// `[cells.len(), channels]`
    pub tokens: Tensor,
    pub grid_h: usize,
    pub grid_w: usize,
    /// Cell width in stage-1 tokens.
    pub stride: usize,
    /// Row-major grid cell of each token row.
    pub cells: Vec<usize>,
    pub dense: bool,
}

impl TokenMap {
    pub fn channels(&self) -> usize {
        self.tokens.shape()[1]
    }

    fn with_tokens(&self, tokens: Tensor) -> TokenMap {
        TokenMap {
            tokens,
            grid_h: self.grid_h,
            grid_w: self.grid_w,
            stride: self.stride,
            cells: self.cells.clone(),
            dense: self.dense,
        }
    }

    fn as_grid(&self) -> Result<Tensor> {
        Ok(self.tokens.reshape(&[self.grid_h, self.grid_w, self.channels()])?)
    }

    /// Coarser level: parents in order of first appearance.
    fn parent_level(&self) -> (Vec<usize>, Vec<Option<usize>>) {
        let (ph, pw) = (self.grid_h / 2, self.grid_w / 2);
        let mut row_of = vec![None; self.grid_h * self.grid_w];
        for (r, &c) in self.cells.iter().enumerate() {
            row_of[c] = Some(r);
        }
        let mut seen = vec![false; ph * pw];
        let mut parents = Vec::new();
        for &c in &self.cells {
            let p = (c / self.grid_w / 2) * pw + (c % self.grid_w) / 2;
            if !seen[p] {
                seen[p] = true;
                parents.push(p);
            }
        }
        // children rows in (dy, dx) order per parent
        let mut gather = Vec::with_capacity(parents.len() * 4);
        for &p in &parents {
            let (py, px) = (p / pw, p % pw);
            for dy in 0..2 {
                for dx in 0..2 {
                    gather.push(row_of[(2 * py + dy) * self.grid_w + 2 * px + dx]);
                }
            }
        }
        (parents, gather)
    }

    fn empty_parent(&self, parents: Vec<usize>, channels: usize) -> TokenMap {
        TokenMap {
            tokens: Tensor::zeros(&[parents.len(), channels]),
            grid_h: self.grid_h / 2,
            grid_w: self.grid_w / 2,
            stride: self.stride * 2,
            cells: parents,
            dense: self.dense,
        }
    }
}

/// Maps at 1/4, 1/8 and 1/16 of the input side, all with `fpn_dim` channels.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub maps: Vec<TokenMap>,
}

impl FeaturePyramid {
    /// The finest (1/4-scale) fused map.
    pub fn quarter_map(&self) -> &TokenMap {
        &self.maps[0]
    }
}

pub fn encoder_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let e = &cfg.encoder;
    let mut out = Vec::new();
    let patch_dim = e.patch_size * e.patch_size * 3;
    linear_specs(&mut out, "encoder.patch_embed", patch_dim, e.stage_dims[0]);
    for s in 0..e.stages() {
        let d = e.stage_dims[s];
        if s > 0 {
            let prev = e.stage_dims[s - 1];
            norm_specs(&mut out, &format!("encoder.stages.{s}.merge.norm"), 4 * prev);
            linear_specs(&mut out, &format!("encoder.stages.{s}.merge.proj"), 4 * prev, d);
        }
        for b in 0..e.stage_depths[s] {
            block_specs(&mut out, &format!("encoder.stages.{s}.blocks.{b}"), d, e.mlp_ratio);
        }
        norm_specs(&mut out, &format!("encoder.stages.{s}.norm"), d);
    }
    let c = e.fpn_dim;
    for s in 0..e.stages() {
        linear_specs(&mut out, &format!("fpn.lateral.{s}"), e.stage_dims[s], c);
    }
    for node in fpn_nodes() {
        out.push(ParamSpec::new(format!("{node}.fuse"), &[2], Init::Const(FUSE_INIT)));
        linear_specs(&mut out, &format!("{node}.proj"), c, c);
        norm_specs(&mut out, &format!("{node}.norm"), c);
    }
    out
}

fn fpn_nodes() -> [&'static str; 4] {
    ["fpn.bottom_up.1", "fpn.bottom_up.2", "fpn.top_down.1", "fpn.top_down.0"]
}

fn check_image(cfg: &ModelConfig, image: &Tensor) -> Result<(usize, usize)> {
    let e = &cfg.encoder;
    let unit = e.patch_size << (e.stages() - 1);
    let s = image.shape();
    if s.len() != 3 || s[2] != 3 || s[0] % unit != 0 || s[1] % unit != 0 || s[0] == 0 || s[1] == 0 {
        return Err(Error::Config(format!(
            "image shape {s:?} is not H×W×3 with sides divisible by {unit}"
        )));
    }
    Ok((s[0] / e.patch_size, s[1] / e.patch_size))
}

/// Runs all stages over the stage-1 `cells`; returns per-stage maps.
fn stages(p: &Params, cfg: &ModelConfig, image: &Tensor, cells: &[usize], dense: bool) -> Result<Vec<TokenMap>> {
    let e = &cfg.encoder;
    let (gh, gw) = check_image(cfg, image)?;
    let patches = image.patchify(e.patch_size)?;
    let patches = if dense { patches } else { patches.select_rows(cells)? };
    let x = linear(p, "encoder.patch_embed", &patches)?;
    let x = x.add(&nn::positions(cells, gw, 1, e.stage_dims[0]))?;
    let mut map = TokenMap {
        tokens: x,
        grid_h: gh,
        grid_w: gw,
        stride: 1,
        cells: cells.to_vec(),
        dense,
    };
    let mut outs = Vec::with_capacity(e.stages());
    for s in 0..e.stages() {
        if s > 0 {
            map = merge(p, &format!("encoder.stages.{s}.merge"), &map)?;
        }
        let mut x = map.tokens.clone();
        for b in 0..e.stage_depths[s] {
            x = block(p, &format!("encoder.stages.{s}.blocks.{b}"), &x, e.stage_heads[s])?;
        }
        map = map.with_tokens(layer_norm(p, &format!("encoder.stages.{s}.norm"), &x)?);
        outs.push(map.clone());
    }
    Ok(outs)
}

fn merge(p: &Params, prefix: &str, map: &TokenMap) -> Result<TokenMap> {
    let d = map.channels();
    let (parents, gather) = map.parent_level();
    let stacked = if map.dense {
        map.as_grid()?.patchify(2)?
    } else {
        map.tokens.gather_rows(&gather)?.reshape(&[parents.len(), 4 * d])?
    };
    let x = layer_norm(p, &format!("{prefix}.norm"), &stacked)?;
    let x = linear(p, &format!("{prefix}.proj"), &x)?;
    Ok(map.empty_parent(parents, 0).with_tokens(x))
}

/// Mean of the present children of every token of `coarse`.
fn down(fine: &TokenMap, coarse: &TokenMap) -> Result<Tensor> {
    let c = fine.channels();
    if fine.dense {
        return Ok(fine.as_grid()?.avgpool2x()?.reshape(&[coarse.cells.len(), c])?);
    }
    let (parents, gather) = fine.parent_level();
    debug_assert_eq!(parents, coarse.cells);
    let inv: Vec<f32> = gather
        .chunks(4)
        .map(|ch| 1.0 / ch.iter().filter(|r| r.is_some()).count() as f32)
        .collect();
    let inv = Tensor::from_vec(inv, &[parents.len(), 1])?;
    Ok(fine
        .tokens
        .gather_rows(&gather)?
        .reshape(&[parents.len(), 4, c])?
        .sum_axis(1, false)?
        .mul(&inv)?)
}

/// Parent value copied onto every token of `fine`.
fn up(coarse: &TokenMap, fine: &TokenMap) -> Result<Tensor> {
    let c = coarse.channels();
    if coarse.dense {
        return Ok(coarse.as_grid()?.upsample2x()?.reshape(&[fine.cells.len(), c])?);
    }
    let row_of: HashMap<usize, usize> = coarse.cells.iter().enumerate().map(|(r, &c)| (c, r)).collect();
    let rows: Vec<usize> = fine
        .cells
        .iter()
        .map(|&f| row_of[&((f / fine.grid_w / 2) * coarse.grid_w + (f % fine.grid_w) / 2)])
        .collect();
    Ok(coarse.tokens.select_rows(&rows)?)
}

/// Weighted two-input fusion: `norm(proj(gelu(w₀a + w₁b)))` with softplus
/// weights normalised to sum to one.
fn fuse(p: &Params, prefix: &str, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let w = p.get(&format!("{prefix}.fuse"))?.softplus();
    let w = w.div(&w.sum()?.add_scalar(FUSE_EPS))?;
    let x = a.mul(&w.slice(0, 0, 1)?)?.add(&b.mul(&w.slice(0, 1, 2)?)?)?;
    let x = linear(p, &format!("{prefix}.proj"), &x.gelu())?;
    layer_norm(p, &format!("{prefix}.norm"), &x)
}

fn pyramid(p: &Params, stage_maps: Vec<TokenMap>) -> Result<FeaturePyramid> {
    let lat: Vec<TokenMap> = stage_maps
        .iter()
        .enumerate()
        .map(|(s, m)| Ok(m.with_tokens(linear(p, &format!("fpn.lateral.{s}"), &m.tokens)?)))
        .collect::<Result<_>>()?;
    // bottom-up, fine to coarse
    let b0 = lat[0].clone();
    let b1 = lat[1].with_tokens(fuse(p, "fpn.bottom_up.1", &lat[1].tokens, &down(&b0, &lat[1])?)?);
    let b2 = lat[2].with_tokens(fuse(p, "fpn.bottom_up.2", &lat[2].tokens, &down(&b1, &lat[2])?)?);
    // top-down, coarse to fine
    let t1 = b1.with_tokens(fuse(p, "fpn.top_down.1", &b1.tokens, &up(&b2, &b1)?)?);
    let t0 = b0.with_tokens(fuse(p, "fpn.top_down.0", &b0.tokens, &up(&t1, &b0)?)?);
    Ok(FeaturePyramid { maps: vec![t0, t1, b2] })
}

/// Dense encoding of a whole `H×W×3` image.
pub fn encode_full(p: &Params, cfg: &ModelConfig, image: &Tensor) -> Result<FeaturePyramid> {
    let (gh, gw) = check_image(cfg, image)?;
    let cells: Vec<usize> = (0..gh * gw).collect();
    pyramid(p, stages(p, cfg, image, &cells, true)?)
}

/// Sparse encoding of the stage-1 `cells`, in the given order.
pub fn encode_cells(p: &Params, cfg: &ModelConfig, image: &Tensor, cells: &[usize]) -> Result<FeaturePyramid> {
    let (gh, gw) = check_image(cfg, image)?;
    if cells.is_empty() || cells.iter().any(|&c| c >= gh * gw) {
        return Err(Error::Config(format!("visible cells must be a nonempty subset of {gh}x{gw}")));
    }
    pyramid(p, stages(p, cfg, image, cells, false)?)
}

/// Sparse pyramid of the visible tokens of `plan`. Level `k` holds the
/// merged cells with at least one visible child.
pub fn encode_visible_pyramid(p: &Params, cfg: &ModelConfig, image: &Tensor, plan: &MaskPlan) -> Result<FeaturePyramid> {
    let (gh, gw) = check_image(cfg, image)?;
    if (plan.grid_h, plan.grid_w) != (gh, gw) {
        return Err(Error::GridMismatch {
            plan_h: plan.grid_h,
            plan_w: plan.grid_w,
            grid_h: gh,
            grid_w: gw,
        });
    }
    encode_cells(p, cfg, image, &plan.visible)
}

/// Quarter-scale fused features of the visible tokens of `plan`, one row per
/// visible cell in `plan.visible` order.
pub fn encode_visible(p: &Params, cfg: &ModelConfig, image: &Tensor, plan: &MaskPlan) -> Result<TokenMap> {
    Ok(encode_visible_pyramid(p, cfg, image, plan)?.maps.swap_remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Config;
    use crate::masking::{make_mask, MaskStrategy};
    use crate::params::ParamStore;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (ModelConfig, ParamStore, Tensor) {
        let cfg = Config::default().model;
        let store = ParamStore::init(&encoder_specs(&cfg), &mut ChaCha8Rng::seed_from_u64(7));
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let img: Vec<f32> = (0..64 * 64 * 3).map(|_| rand::Rng::random_range(&mut rng, 0.0..1.0)).collect();
        (cfg, store, Tensor::from_vec(img, &[64, 64, 3]).unwrap())
    }

    fn max_diff(a: &[f32], b: &[f32]) -> f32 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
    }

    #[test]
    fn pyramid_shapes() {
        let (cfg, store, img) = setup();
        let pyr = encode_full(&store.bind(false), &cfg, &img).unwrap();
        let sides: Vec<(usize, usize)> = pyr.maps.iter().map(|m| (m.grid_h, m.grid_w)).collect();
        assert_eq!(sides, vec![(16, 16), (8, 8), (4, 4)]);
        for m in &pyr.maps {
            assert_eq!(m.tokens.shape(), &[m.grid_h * m.grid_w, 32]);
        }
    }

    #[test]
    fn zero_image_is_finite_and_encoding_is_deterministic() {
        let (cfg, store, img) = setup();
        let p = store.bind(false);
        let zero = Tensor::zeros(&[64, 64, 3]);
        let pyr = encode_full(&p, &cfg, &zero).unwrap();
        assert!(pyr.maps.iter().all(|m| m.tokens.data().iter().all(|v| v.is_finite())));
        let a = encode_full(&p, &cfg, &img).unwrap();
        let b = encode_full(&p, &cfg, &img).unwrap();
        for (x, y) in a.maps.iter().zip(&b.maps) {
            assert!(x.tokens.same_data(&y.tokens));
        }
    }

    #[test]
    fn indivisible_input_is_rejected() {
        let (cfg, store, _) = setup();
        assert!(encode_full(&store.bind(false), &cfg, &Tensor::zeros(&[60, 64, 3])).is_err());
    }

    #[test]
    fn all_visible_sparse_path_matches_dense() {
        let (cfg, store, img) = setup();
        let p = store.bind(false);
        let dense = encode_full(&p, &cfg, &img).unwrap();
        let all: Vec<usize> = (0..256).collect();
        let sparse = encode_cells(&p, &cfg, &img, &all).unwrap();
        for (d, s) in dense.maps.iter().zip(&sparse.maps) {
            assert_eq!(d.cells, s.cells);
            assert!(max_diff(d.tokens.data(), s.tokens.data()) < 1e-5);
        }
    }

    #[test]
    fn visible_encoding_count_and_grid_check() {
        let (cfg, store, img) = setup();
        let p = store.bind(false);
        let plan = make_mask(MaskStrategy::Random, 0.75, 16, 16, 2).unwrap();
        let v = encode_visible(&p, &cfg, &img, &plan).unwrap();
        assert_eq!(v.tokens.shape(), &[64, 32]);
        let wrong = make_mask(MaskStrategy::Random, 0.75, 8, 8, 2).unwrap();
        assert!(matches!(encode_visible(&p, &cfg, &img, &wrong), Err(Error::GridMismatch { .. })));
    }

    #[test]
    fn visible_encoding_is_permutation_equivariant() {
        let (cfg, store, img) = setup();
        let p = store.bind(false);
        let plan = make_mask(MaskStrategy::Random, 0.75, 16, 16, 3).unwrap();
        let base = encode_cells(&p, &cfg, &img, &plan.visible).unwrap();
        let mut perm: Vec<usize> = (0..plan.visible.len()).collect();
        perm.reverse();
        perm.swap(3, 40);
        let cells: Vec<usize> = perm.iter().map(|&i| plan.visible[i]).collect();
        let moved = encode_cells(&p, &cfg, &img, &cells).unwrap();
        let c = 32;
        for (r, &i) in perm.iter().enumerate() {
            let a = &moved.maps[0].tokens.data()[r * c..(r + 1) * c];
            let b = &base.maps[0].tokens.data()[i * c..(i + 1) * c];
            assert!(max_diff(a, b) < 1e-5);
        }
    }

    #[test]
    fn every_pyramid_cell_reaches_patch_embedding() {
        let (cfg, store, img) = setup();
        let p = store.bind(true);
        let pyr = encode_full(&p, &cfg, &img).unwrap();
        for (lvl, cell) in [(0usize, 37usize), (1, 9), (2, 15)] {
            for (_, t) in p.iter() {
                t.zero_grad();
            }
            let m = &pyr.maps[lvl];
            let c = m.channels();
            let mut probe = vec![0.0f32; m.tokens.numel()];
            probe[cell * c..(cell + 1) * c].iter_mut().enumerate().for_each(|(i, v)| *v = (i as f32).sin());
            let probe = Tensor::from_vec(probe, m.tokens.shape()).unwrap();
            m.tokens.mul(&probe).unwrap().sum().unwrap().backward().unwrap();
            let g = p.get("encoder.patch_embed.weight").unwrap().grad().unwrap();
            assert!(g.iter().any(|&v| v != 0.0), "level {lvl}");
        }
    }

    #[test]
    fn sparse_quarter_map_depends_on_every_trunk_parameter() {
        let (cfg, store, img) = setup();
        let p = store.bind(true);
        let plan = make_mask(MaskStrategy::Random, 0.75, 16, 16, 5).unwrap();
        let v = encode_visible(&p, &cfg, &img, &plan).unwrap();
        let probe: Vec<f32> = (0..v.tokens.numel()).map(|i| ((i * 7) as f32).sin()).collect();
        let probe = Tensor::from_vec(probe, v.tokens.shape()).unwrap();
        v.tokens.mul(&probe).unwrap().sum().unwrap().backward().unwrap();
        for (name, t) in p.iter() {
            let g = t.grad().unwrap_or_default();
            assert!(g.iter().any(|&x| x != 0.0), "{name} has no gradient");
        }
    }
}
