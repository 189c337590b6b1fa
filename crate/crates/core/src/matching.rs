//! Minimum-cost bipartite assignment of ground-truth items to queries.

use crate::error::{Error, Result};

/// Matched `(query, gt)` pairs sorted by query.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub pairs: Vec<(usize, usize)>,
    pub cost: f64,
}

/// Row-major `[queries, gts]` cost matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    pub queries: usize,
    pub gts: usize,
    pub data: Vec<f64>,
}

impl CostMatrix {
    pub fn new(queries: usize, gts: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != queries * gts {
            return Err(Error::Metric(format!(
                "cost matrix of {} entries is not {queries}x{gts}",
                data.len()
            )));
        }
        if gts > queries {
            return Err(Error::Task(format!("{gts} ground-truth items exceed {queries} queries")));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Metric("cost matrix has non-finite entries".into()));
        }
        Ok(CostMatrix { queries, gts, data })
    }

    #[inline]
    pub fn at(&self, q: usize, g: usize) -> f64 {
        self.data[q * self.gts + g]
    }

    fn total(&self, pairs: &[(usize, usize)]) -> f64 {
        pairs.iter().map(|&(q, g)| self.at(q, g)).sum()
    }
}

/// Shortest-augmenting-path assignment of every row to a distinct column,
/// rows ≤ columns. Returns the column of each row and the total cost.
fn solve(rows: &[usize], cols: &[usize], cost: impl Fn(usize, usize) -> f64) -> (Vec<usize>, f64) {
    let (n, m) = (rows.len(), cols.len());
    if n == 0 {
        return (vec![], 0.0);
    }
    let a = |i: usize, j: usize| cost(rows[i], cols[j]);
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = a(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut col_of = vec![0usize; n];
    for j in 1..=m {
        if p[j] != 0 {
            col_of[p[j] - 1] = j - 1;
        }
    }
    let total = (0..n).map(|i| a(i, col_of[i])).sum();
    (col_of, total)
}

fn tolerance(opt: f64) -> f64 {
    1e-9 * opt.abs().max(1.0)
}

/// Optimal assignment. Among optimal assignments, returns the one whose
/// query-sorted pair list is lexicographically smallest.
pub fn hungarian(cost: &CostMatrix) -> Assignment {
    let (m, g) = (cost.queries, cost.gts);
    let all_g: Vec<usize> = (0..g).collect();
    let all_q: Vec<usize> = (0..m).collect();
    let (_, opt) = solve(&all_g, &all_q, |gi, qj| cost.at(qj, gi));
    let tol = tolerance(opt);

    let mut pairs = Vec::with_capacity(g);
    let mut fixed = 0.0;
    let mut rem: Vec<usize> = all_g;
    for q in 0..m {
        if rem.is_empty() {
            break;
        }
        let later: Vec<usize> = (q + 1..m).collect();
        for k in 0..rem.len() {
            if rem.len() - 1 > later.len() {
                break;
            }
            let gi = rem[k];
            let rest: Vec<usize> = rem.iter().copied().filter(|&x| x != gi).collect();
            let (_, tail) = solve(&rest, &later, |a, b| cost.at(b, a));
            if fixed + cost.at(q, gi) + tail <= opt + tol {
                fixed += cost.at(q, gi);
                pairs.push((q, gi));
                rem = rest;
                break;
            }
        }
    }
    let total = cost.total(&pairs);
    Assignment { pairs, cost: total }
}

/// Exhaustive search over all injections of ground truth into queries,
/// with the same tie rule as [`hungarian`].
pub fn brute_force(cost: &CostMatrix) -> Assignment {
    fn rec(
        cost: &CostMatrix,
        g: usize,
        used: &mut Vec<bool>,
        cur: &mut Vec<(usize, usize)>,
        best: &mut Option<(f64, Vec<(usize, usize)>)>,
    ) {
        if g == cost.gts {
            let mut pairs = cur.clone();
            pairs.sort_unstable();
            let c = cost.total(&pairs);
            let better = match best {
                None => true,
                Some((b, bp)) => {
                    let tol = tolerance(*b);
                    c < *b - tol || ((c - *b).abs() <= tol && pairs < *bp)
                }
            };
            if better {
                *best = Some((c, pairs));
            }
            return;
        }
        for q in 0..cost.queries {
            if !used[q] {
                used[q] = true;
                cur.push((q, g));
                rec(cost, g + 1, used, cur, best);
                cur.pop();
                used[q] = false;
            }
        }
    }
    let mut best = None;
    rec(cost, 0, &mut vec![false; cost.queries], &mut Vec::new(), &mut best);
    let (c, pairs) = best.expect("gts ≤ queries");
    Assignment { pairs, cost: c }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cm(q: usize, g: usize, v: &[f64]) -> CostMatrix {
        CostMatrix::new(q, g, v.to_vec()).unwrap()
    }

    #[test]
    fn small_examples() {
        let a = hungarian(&cm(2, 2, &[1.0, 2.0, 2.0, 1.0]));
        assert_eq!(a.pairs, vec![(0, 0), (1, 1)]);
        assert_eq!(a.cost, 2.0);
        assert_eq!(hungarian(&cm(1, 1, &[5.0])).pairs, vec![(0, 0)]);
        assert_eq!(hungarian(&cm(3, 0, &[])).pairs, vec![]);
    }

    #[test]
    fn beats_greedy() {
        // greedy takes (0,0) at cost 1 and is forced into (1,1) at 10
        let c = cm(2, 2, &[1.0, 2.0, 3.0, 10.0]);
        let a = hungarian(&c);
        assert_eq!(a.pairs, vec![(0, 1), (1, 0)]);
        assert_eq!(a, brute_force(&c));
    }

    #[test]
    fn ties_resolve_lexicographically() {
        let c = cm(3, 2, &[0.0; 6]);
        assert_eq!(hungarian(&c).pairs, vec![(0, 0), (1, 1)]);
        let c = cm(3, 1, &[1.0, 0.5, 0.5]);
        assert_eq!(hungarian(&c).pairs, vec![(1, 0)]);
        assert_eq!(brute_force(&c).pairs, vec![(1, 0)]);
    }

    #[test]
    fn invalid_matrices_are_rejected() {
        assert!(CostMatrix::new(1, 2, vec![0.0, 0.0]).is_err());
        assert!(CostMatrix::new(2, 1, vec![0.0, f64::NAN]).is_err());
        assert!(CostMatrix::new(2, 1, vec![0.0]).is_err());
    }

    #[test]
    fn random_six_by_four_match_exhaustive() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..50 {
            let v: Vec<f64> = (0..24).map(|_| rng.random_range(0.0..10.0)).collect();
            let c = cm(6, 4, &v);
            let (h, b) = (hungarian(&c), brute_force(&c));
            assert_eq!(h.pairs, b.pairs);
            assert!((h.cost - b.cost).abs() < 1e-9);
        }
    }

    proptest! {
        #[test]
        fn optimal_on_random_matrices(
            m in 1usize..8,
            gfrac in 0.0f64..=1.0,
            seed in any::<u64>(),
            integer in any::<bool>(),
        ) {
            let g = ((m as f64) * gfrac).round() as usize;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let v: Vec<f64> = (0..m * g)
                .map(|_| if integer { rng.random_range(0..4) as f64 } else { rng.random_range(0.0..1.0) })
                .collect();
            let c = cm(m, g, &v);
            let (h, b) = (hungarian(&c), brute_force(&c));
            prop_assert!((h.cost - b.cost).abs() < 1e-9);
            prop_assert_eq!(h.pairs, b.pairs);
        }

        #[test]
        fn gt_permutation_keeps_matched_costs(m in 2usize..7, seed in any::<u64>()) {
            let g = m - 1;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let v: Vec<f64> = (0..m * g).map(|_| rng.random_range(0.0..1.0)).collect();
            let c = cm(m, g, &v);
            let perm: Vec<usize> = (0..g).rev().collect();
            let pv: Vec<f64> = (0..m).flat_map(|q| perm.iter().map(move |&j| (q, j))).map(|(q, j)| v[q * g + j]).collect();
            let pc = cm(m, g, &pv);
            let mut a: Vec<f64> = hungarian(&c).pairs.iter().map(|&(q, j)| c.at(q, j)).collect();
            let mut b: Vec<f64> = hungarian(&pc).pairs.iter().map(|&(q, j)| pc.at(q, j)).collect();
            a.sort_by(f64::total_cmp);
            b.sort_by(f64::total_cmp);
            prop_assert_eq!(a, b);
        }
    }
}
