//! Token-grid masks for the masked-image pretext task.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskStrategy {
    Random,
    Block,
    Grid,
}

impl MaskStrategy {
    pub const ALL: [MaskStrategy; 3] = [MaskStrategy::Random, MaskStrategy::Block, MaskStrategy::Grid];

    pub fn name(self) -> &'static str {
        match self {
            MaskStrategy::Random => "random",
            MaskStrategy::Block => "block",
            MaskStrategy::Grid => "grid",
        }
    }
}

impl fmt::Display for MaskStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MaskStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MaskStrategy::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Mask(format!("unknown strategy `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskPlan {
    pub grid_h: usize,
    pub grid_w: usize,
    /// Sorted row-major cell indices.
    pub masked: Vec<usize>,
    /// Sorted row-major cell indices.
    pub visible: Vec<usize>,
    pub ratio: f64,
    pub strategy: MaskStrategy,
}

impl MaskPlan {
    fn from_flags(flags: &[bool], grid_h: usize, grid_w: usize, ratio: f64, strategy: MaskStrategy) -> Self {
        let masked = (0..flags.len()).filter(|&i| flags[i]).collect();
        let visible = (0..flags.len()).filter(|&i| !flags[i]).collect();
        MaskPlan {
            grid_h,
            grid_w,
            masked,
            visible,
            ratio,
            strategy,
        }
    }

    /// Plan with an explicit masked set. Unlike [`make_mask`] this accepts
    /// the degenerate empty and full cases.
    pub fn from_masked(grid_h: usize, grid_w: usize, masked: &[usize]) -> Result<Self> {
        let n = grid_h * grid_w;
        let mut flags = vec![false; n];
        for &i in masked {
            if i >= n {
                return Err(Error::Mask(format!("cell {i} outside a {grid_h}x{grid_w} grid")));
            }
            flags[i] = true;
        }
        let ratio = masked.len() as f64 / n as f64;
        Ok(Self::from_flags(&flags, grid_h, grid_w, ratio, MaskStrategy::Random))
    }

    pub fn len(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_masked(&self, cell: usize) -> bool {
        self.masked.binary_search(&cell).is_ok()
    }

    /// Row-major boolean view, `true` where masked.
    pub fn flags(&self) -> Vec<bool> {
        let mut f = vec![false; self.len()];
        for &i in &self.masked {
            f[i] = true;
        }
        f
    }
}

/// Number of masked cells for `ratio` of `n`, rounding half up.
pub fn mask_count(ratio: f64, n: usize) -> usize {
    (ratio * n as f64 + 0.5).floor() as usize
}

pub fn make_mask(strategy: MaskStrategy, ratio: f64, grid_h: usize, grid_w: usize, seed: u64) -> Result<MaskPlan> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Mask(format!("ratio {ratio} outside (0, 1)")));
    }
    if grid_h < 2 || grid_w < 2 {
        return Err(Error::Mask(format!("grid {grid_h}x{grid_w} smaller than 2x2")));
    }
    let n = grid_h * grid_w;
    let count = mask_count(ratio, n);
    if count == 0 || count == n {
        return Err(Error::Mask(format!(
            "ratio {ratio} on {n} cells leaves no {} cells",
            if count == 0 { "masked" } else { "visible" }
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let flags = match strategy {
        MaskStrategy::Random => random_flags(&mut rng, n, count),
        MaskStrategy::Block => block_flags(&mut rng, grid_h, grid_w, count)?.0,
        MaskStrategy::Grid => grid_flags(&mut rng, grid_h, grid_w, ratio, count),
    };
    Ok(MaskPlan::from_flags(&flags, grid_h, grid_w, ratio, strategy))
}

fn random_flags(rng: &mut ChaCha8Rng, n: usize, count: usize) -> Vec<bool> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut flags = vec![false; n];
    for &i in &order[..count] {
        flags[i] = true;
    }
    flags
}

/// Axis-aligned block `[y, y+h) × [x, x+w)` in grid cells.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rect {
    pub y: usize,
    pub x: usize,
    pub h: usize,
    pub w: usize,
}

impl Rect {
    fn cells(self, grid_w: usize) -> impl Iterator<Item = usize> {
        (self.y..self.y + self.h).flat_map(move |y| (self.x..self.x + self.w).map(move |x| y * grid_w + x))
    }
}

const BLOCK_MIN: usize = 2;
const BLOCK_MAX: usize = 4;
const BLOCK_CANDIDATES: usize = 32;

/// Places rectangles with sides in 2..=4 until `count` cells are masked.
/// Each round keeps the candidate adding the most new cells; the last
/// rectangle contributes only its first new cells in row-major order.
pub(crate) fn block_flags(
    rng: &mut ChaCha8Rng,
    grid_h: usize,
    grid_w: usize,
    count: usize,
) -> Result<(Vec<bool>, Vec<Rect>)> {
    if grid_h < BLOCK_MIN || grid_w < BLOCK_MIN {
        return Err(Error::Mask(format!(
            "block of side {BLOCK_MIN} larger than the {grid_h}x{grid_w} grid"
        )));
    }
    let mut flags = vec![false; grid_h * grid_w];
    let mut rects = Vec::new();
    let mut masked = 0;
    while masked < count {
        let mut best: Option<(usize, Rect)> = None;
        for _ in 0..BLOCK_CANDIDATES {
            let h = rng.random_range(BLOCK_MIN..=BLOCK_MAX.min(grid_h));
            let w = rng.random_range(BLOCK_MIN..=BLOCK_MAX.min(grid_w));
            let r = Rect {
                y: rng.random_range(0..=grid_h - h),
                x: rng.random_range(0..=grid_w - w),
                h,
                w,
            };
            let new = r.cells(grid_w).filter(|&c| !flags[c]).count();
            if best.is_none_or(|(b, _)| new > b) {
                best = Some((new, r));
            }
        }
        let (new, mut rect) = best.expect("at least one candidate");
        if new == 0 {
            // Every candidate landed on masked cells: anchor on the first free one.
            let free = flags.iter().position(|&f| !f).expect("count < n");
            let (fy, fx) = (free / grid_w, free % grid_w);
            rect = Rect {
                y: fy.min(grid_h - BLOCK_MIN),
                x: fx.min(grid_w - BLOCK_MIN),
                h: BLOCK_MIN,
                w: BLOCK_MIN,
            };
        }
        for c in rect.cells(grid_w).collect::<Vec<_>>() {
            if masked == count {
                break;
            }
            if !flags[c] {
                flags[c] = true;
                masked += 1;
            }
        }
        rects.push(rect);
    }
    Ok((flags, rects))
}

/// Side `c` of the periodic cell whose masked fraction `1 - 1/c²` is nearest
/// `ratio`.
pub fn grid_cell(ratio: f64, grid_h: usize, grid_w: usize) -> usize {
    let max_c = grid_h.min(grid_w).max(2);
    (2..=max_c)
        .min_by(|&a, &b| {
            let fa = 1.0 - 1.0 / (a * a) as f64;
            let fb = 1.0 - 1.0 / (b * b) as f64;
            (fa - ratio).abs().total_cmp(&(fb - ratio).abs())
        })
        .expect("nonempty range")
}

fn grid_flags(rng: &mut ChaCha8Rng, grid_h: usize, grid_w: usize, ratio: f64, count: usize) -> Vec<bool> {
    let c = grid_cell(ratio, grid_h, grid_w);
    let oy = rng.random_range(0..c);
    let ox = rng.random_range(0..c);
    let mut flags: Vec<bool> = (0..grid_h * grid_w)
        .map(|i| !((i / grid_w) % c == oy && (i % grid_w) % c == ox))
        .collect();
    let mut masked = flags.iter().filter(|&&f| f).count();
    // Trim to the exact count in row-major order.
    for f in flags.iter_mut() {
        if masked == count {
            break;
        }
        if masked > count && *f {
            *f = false;
            masked -= 1;
        } else if masked < count && !*f {
            *f = true;
            masked += 1;
        }
    }
    flags
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn random_quarter_visible_on_4x4() {
        let p = make_mask(MaskStrategy::Random, 0.75, 4, 4, 3).unwrap();
        assert_eq!(p.masked.len(), 12);
        assert_eq!(p.visible.len(), 4);
    }

    #[test]
    fn half_of_2x2() {
        let p = make_mask(MaskStrategy::Random, 0.5, 2, 2, 11).unwrap();
        assert_eq!(p.masked.len(), 2);
    }

    #[test]
    fn grid_keeps_one_token_per_2x2_cell() {
        for seed in 0..8 {
            let p = make_mask(MaskStrategy::Grid, 0.75, 4, 4, seed).unwrap();
            assert_eq!(p.visible.len(), 4);
            let (oy, ox) = (p.visible[0] / 4, p.visible[0] % 4);
            let want: Vec<usize> = [(0, 0), (0, 2), (2, 0), (2, 2)]
                .iter()
                .map(|(y, x)| (y + oy) * 4 + x + ox)
                .collect();
            assert_eq!(p.visible, want);
        }
    }

    #[test]
    fn grid_cell_choice() {
        assert_eq!(grid_cell(0.75, 16, 16), 2);
        assert_eq!(grid_cell(0.88, 16, 16), 3);
        assert_eq!(grid_cell(0.5, 16, 16), 2);
    }

    #[test]
    fn bad_requests_are_errors() {
        assert!(make_mask(MaskStrategy::Random, 0.0, 4, 4, 0).is_err());
        assert!(make_mask(MaskStrategy::Random, 1.0, 4, 4, 0).is_err());
        assert!(make_mask(MaskStrategy::Random, f64::NAN, 4, 4, 0).is_err());
        assert!(make_mask(MaskStrategy::Block, 0.5, 1, 4, 0).is_err());
        assert!(make_mask(MaskStrategy::Random, 0.01, 2, 2, 0).is_err());
    }

    #[test]
    fn count_rounds_half_up() {
        assert_eq!(mask_count(0.5, 3), 2);
        assert_eq!(mask_count(0.6, 256), 154);
        assert_eq!(mask_count(0.75, 256), 192);
    }

    #[test]
    fn random_positions_are_uniform() {
        let n = 64;
        let mut hits = vec![0usize; n];
        for seed in 0..1000 {
            for i in make_mask(MaskStrategy::Random, 0.75, 8, 8, seed).unwrap().masked {
                hits[i] += 1;
            }
        }
        for h in hits {
            let f = h as f64 / 1000.0;
            assert!((f - 0.75).abs() <= 0.05, "frequency {f}");
        }
    }

    #[test]
    fn grid_pattern_is_periodic_before_trim() {
        let p = make_mask(MaskStrategy::Grid, 0.75, 16, 16, 5).unwrap();
        let f = p.flags();
        for y in 0..14 {
            for x in 0..14 {
                assert_eq!(f[y * 16 + x], f[(y + 2) * 16 + x]);
                assert_eq!(f[y * 16 + x], f[y * 16 + x + 2]);
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(96))]

        #[test]
        fn plans_partition_the_grid_exactly(
            s in 0usize..3,
            ratio in 0.05f64..0.95,
            h in 2usize..17,
            w in 2usize..17,
            seed in any::<u64>(),
        ) {
            let n = h * w;
            let count = mask_count(ratio, n);
            prop_assume!(count > 0 && count < n);
            let p = make_mask(MaskStrategy::ALL[s], ratio, h, w, seed).unwrap();
            prop_assert_eq!(p.masked.len(), count);
            prop_assert_eq!(p.masked.len() + p.visible.len(), n);
            let mut all: Vec<usize> = p.masked.iter().chain(&p.visible).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
            prop_assert!(p.masked.windows(2).all(|w| w[0] < w[1]));
            prop_assert_eq!(&make_mask(MaskStrategy::ALL[s], ratio, h, w, seed).unwrap(), &p);
        }

        #[test]
        fn block_masks_use_few_rectangles(ratio in prop::sample::select(vec![0.5, 0.6, 0.75]), seed in any::<u64>()) {
            let count = mask_count(ratio, 256);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (flags, rects) = block_flags(&mut rng, 16, 16, count).unwrap();
            prop_assert_eq!(flags.iter().filter(|&&f| f).count(), count);
            prop_assert!(rects.len() <= count.div_ceil(BLOCK_MIN * BLOCK_MIN) + 1, "{} rects", rects.len());
            for (i, &f) in flags.iter().enumerate() {
                if f {
                    prop_assert!(rects.iter().any(|r| r.cells(16).any(|c| c == i)));
                }
            }
        }
    }
}
