//! Exact brute-force solvers.
//!
//! Ground truth for every approximation test and the base case of the
//! recursion. PCTSP enumerates terminal subsets and solves each with
//! Held–Karp; Steiner points never help a metric tour, so the tour vertex
//! set can be restricted to terminals. PCSTP runs Dreyfus–Wagner once with
//! all points as Steiner candidates and reads off minimal trees for every
//! terminal subset.

use alloc::collections::BTreeSet;
use alloc::vec;
use alloc::vec::Vec;

use crate::instance::{PcxInstance, Penalty, Solution, Variant};
use crate::metric::{MetricSpace, PointId};

/// Hard guards; beyond these the brute force is refused.
pub const MAX_POINTS: usize = 15;
pub const MAX_PCSTP_TERMINALS: usize = 10;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum OracleError {
    #[error("instance too large for brute force: {points} points, {terminals} terminals")]
    TooLarge { points: usize, terminals: usize },
}

#[derive(Debug, Clone)]
pub struct OracleSolution {
    pub cost: f64,
    pub solution: Solution,
}

/// Exact PCTSP by subset enumeration plus Held–Karp tours.
pub fn exact_pctsp(inst: &PcxInstance) -> Result<OracleSolution, OracleError> {
    let space = inst.space();
    let terms: Vec<(PointId, Penalty)> = inst.terminals().collect();
    if space.len() > MAX_POINTS {
        return Err(OracleError::TooLarge {
            points: space.len(),
            terminals: terms.len(),
        });
    }
    let nt = terms.len();
    let mut must_mask = 0usize;
    for (i, &(_, p)) in terms.iter().enumerate() {
        if p == Penalty::MustVisit {
            must_mask |= 1 << i;
        }
    }
    let mut best: Option<(f64, Solution)> = None;
    for mask in 0..(1usize << nt) {
        if mask & must_mask != must_mask {
            continue;
        }
        let chosen: Vec<PointId> = (0..nt)
            .filter(|&i| mask & (1 << i) != 0)
            .map(|i| terms[i].0)
            .collect();
        let (weight, sol) = match chosen.len() {
            0 => (0.0, Solution::empty()),
            1 => (0.0, Solution::self_loop(chosen[0])),
            2 => (
                2.0 * space.dist(chosen[0], chosen[1]),
                Solution::from_edges(vec![
                    (chosen[0], chosen[1]),
                    (chosen[0], chosen[1]),
                ]),
            ),
            _ => held_karp_tour(space, &chosen),
        };
        let mut cost = weight;
        for (i, &(_, p)) in terms.iter().enumerate() {
            if mask & (1 << i) == 0 {
                cost += p.value_or_inf();
            }
        }
        if best.as_ref().map_or(true, |(b, _)| cost < b - 1e-12) {
            best = Some((cost, sol));
        }
    }
    let (_, solution) = best.expect("subset enumeration is nonempty");
    let cost = inst.cost(&solution);
    Ok(OracleSolution { cost, solution })
}

/// Optimal tour over `s` (|s| >= 3) as an edge multiset, by bitmask DP.
fn held_karp_tour(space: &MetricSpace, s: &[PointId]) -> (f64, Solution) {
    let m = s.len();
    let full = (1usize << m) - 1;
    let mut d = vec![0.0; m * m];
    for a in 0..m {
        for b in 0..m {
            d[a * m + b] = space.dist(s[a], s[b]);
        }
    }
    let mut dp = vec![f64::INFINITY; (1 << m) * m];
    let mut par = vec![usize::MAX; (1 << m) * m];
    dp[(1 << 0) * m] = 0.0; // mask {0}, last = 0
    for mask in 1..=full {
        if mask & 1 == 0 {
            continue;
        }
        for last in 0..m {
            if mask & (1 << last) == 0 {
                continue;
            }
            let cur = dp[mask * m + last];
            if !cur.is_finite() {
                continue;
            }
            for nxt in 0..m {
                if mask & (1 << nxt) != 0 {
                    continue;
                }
                let nm = mask | (1 << nxt);
                let cand = cur + d[last * m + nxt];
                if cand < dp[nm * m + nxt] - 1e-12 {
                    dp[nm * m + nxt] = cand;
                    par[nm * m + nxt] = last;
                }
            }
        }
    }
    let mut best = f64::INFINITY;
    let mut best_last = 0;
    for last in 1..m {
        let c = dp[full * m + last] + d[last * m];
        if c < best - 1e-12 {
            best = c;
            best_last = last;
        }
    }
    let mut edges = Vec::with_capacity(m);
    let mut mask = full;
    let mut cur = best_last;
    edges.push((s[cur], s[0]));
    while cur != 0 {
        let prev = par[mask * m + cur];
        edges.push((s[prev], s[cur]));
        mask &= !(1 << cur);
        cur = prev;
    }
    (best, Solution::from_edges(edges))
}

/// Exact PCSTP by subset enumeration over a single Dreyfus–Wagner table
/// with all points as Steiner candidates.
pub fn exact_pcstp(inst: &PcxInstance) -> Result<OracleSolution, OracleError> {
    let space = inst.space();
    let terms: Vec<(PointId, Penalty)> = inst.terminals().collect();
    let nt = terms.len();
    if space.len() > MAX_POINTS || nt > MAX_PCSTP_TERMINALS {
        return Err(OracleError::TooLarge {
            points: space.len(),
            terminals: nt,
        });
    }
    let mut must_mask = 0usize;
    for (i, &(_, p)) in terms.iter().enumerate() {
        if p == Penalty::MustVisit {
            must_mask |= 1 << i;
        }
    }
    let dw = DreyfusWagner::run(space, &terms.iter().map(|&(t, _)| t).collect::<Vec<_>>());
    let mut best: Option<(f64, Solution)> = None;
    for mask in 0..(1usize << nt) {
        if mask & must_mask != must_mask {
            continue;
        }
        let popcnt = mask.count_ones();
        let (weight, sol) = match popcnt {
            0 => (0.0, Solution::empty()),
            1 => {
                let t = terms[mask.trailing_zeros() as usize].0;
                (0.0, Solution::self_loop(t))
            }
            _ => dw.tree_for(mask),
        };
        let mut cost = weight;
        for (i, &(_, p)) in terms.iter().enumerate() {
            if mask & (1 << i) == 0 {
                cost += p.value_or_inf();
            }
        }
        if best.as_ref().map_or(true, |(b, _)| cost < b - 1e-12) {
            best = Some((cost, sol));
        }
    }
    let (_, solution) = best.expect("subset enumeration is nonempty");
    let cost = inst.cost(&solution);
    Ok(OracleSolution { cost, solution })
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Back {
    None,
    /// Leaf: direct edge from the single terminal of the mask.
    Base,
    /// Split the terminal mask at the same attachment point.
    Merge(usize),
    /// Extend from another attachment point.
    Grow(usize),
}

struct DreyfusWagner<'a> {
    space: &'a MetricSpace,
    terms: Vec<PointId>,
    dp: Vec<f64>,
    back: Vec<Back>,
}

impl<'a> DreyfusWagner<'a> {
    fn idx(&self, mask: usize, v: usize) -> usize {
        mask * self.space.len() + v
    }

    fn run(space: &'a MetricSpace, terms: &[PointId]) -> Self {
        let np = space.len();
        let nt = terms.len();
        let size = (1usize << nt) * np;
        let mut dw = DreyfusWagner {
            space,
            terms: terms.to_vec(),
            dp: vec![f64::INFINITY; size],
            back: vec![Back::None; size],
        };
        for (i, &t) in terms.iter().enumerate() {
            for v in 0..np {
                let id = dw.idx(1 << i, v);
                dw.dp[id] = space.dist(t, v);
                dw.back[id] = Back::Base;
            }
        }
        for mask in 1..(1usize << nt) {
            if mask.count_ones() >= 2 {
                // Merge phase.
                for v in 0..np {
                    let mut sub = (mask - 1) & mask;
                    while sub > mask - sub {
                        let other = mask ^ sub;
                        let cand = dw.dp[dw.idx(sub, v)] + dw.dp[dw.idx(other, v)];
                        let id = dw.idx(mask, v);
                        if cand < dw.dp[id] - 1e-12 {
                            dw.dp[id] = cand;
                            dw.back[id] = Back::Merge(sub);
                        }
                        sub = (sub - 1) & mask;
                    }
                }
            }
            // Grow phase: Dijkstra-style settling over all points.
            let mut settled = vec![false; np];
            for _ in 0..np {
                let mut u = usize::MAX;
                let mut bestv = f64::INFINITY;
                for v in 0..np {
                    if !settled[v] && dw.dp[dw.idx(mask, v)] < bestv {
                        bestv = dw.dp[dw.idx(mask, v)];
                        u = v;
                    }
                }
                if u == usize::MAX {
                    break;
                }
                settled[u] = true;
                for v in 0..np {
                    if settled[v] {
                        continue;
                    }
                    let cand = bestv + space.dist(u, v);
                    let id = dw.idx(mask, v);
                    if cand < dw.dp[id] - 1e-12 {
                        dw.dp[id] = cand;
                        dw.back[id] = Back::Grow(u);
                    }
                }
            }
        }
        dw
    }

    /// Minimal tree spanning the terminals of `mask` (popcount >= 2).
    fn tree_for(&self, mask: usize) -> (f64, Solution) {
        let np = self.space.len();
        let mut best_v = 0;
        let mut best = f64::INFINITY;
        for v in 0..np {
            let c = self.dp[self.idx(mask, v)];
            if c < best - 1e-12 {
                best = c;
                best_v = v;
            }
        }
        let mut edges: BTreeSet<(PointId, PointId)> = BTreeSet::new();
        self.collect(mask, best_v, &mut edges);
        let sol = if edges.is_empty() {
            // All terminals of the mask coincide in one point.
            Solution::self_loop(self.terms[mask.trailing_zeros() as usize])
        } else {
            Solution::from_edges(edges)
        };
        let weight = sol.weight(self.space);
        (weight, sol)
    }

    fn collect(&self, mask: usize, v: usize, edges: &mut BTreeSet<(PointId, PointId)>) {
        match self.back[self.idx(mask, v)] {
            Back::None => {}
            Back::Base => {
                let t = self.terms[mask.trailing_zeros() as usize];
                if t != v {
                    edges.insert(norm(t, v));
                }
            }
            Back::Merge(sub) => {
                self.collect(sub, v, edges);
                self.collect(mask ^ sub, v, edges);
            }
            Back::Grow(u) => {
                edges.insert(norm(u, v));
                self.collect(mask, u, edges);
            }
        }
    }
}

fn norm(a: PointId, b: PointId) -> (PointId, PointId) {
    if a <= b {
        (a, b)
    } else {
        (b, a)
    }
}

/// Dispatch on the instance's variant.
pub fn exact(inst: &PcxInstance) -> Result<OracleSolution, OracleError> {
    match inst.variant() {
        Variant::Pctsp => exact_pctsp(inst),
        Variant::Pcstp => exact_pcstp(inst),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instance::Variant;
    use crate::metric::{HierarchicalNets, NetTree};
    use alloc::sync::Arc;

    fn build(
        coords: Vec<Vec<f64>>,
        k: u32,
        pens: &[(usize, f64)],
        variant: Variant,
    ) -> PcxInstance {
        let space = Arc::new(MetricSpace::from_euclidean(coords, k).unwrap());
        let nets = Arc::new(HierarchicalNets::build(&space, 4.0, 1, false).unwrap());
        let tree = Arc::new(NetTree::build(&space, &nets));
        PcxInstance::new(
            variant,
            space,
            nets,
            tree,
            pens.iter().map(|&(t, v)| (t, Penalty::Finite(v))),
        )
        .unwrap()
    }

    fn line(xs: &[f64]) -> Vec<Vec<f64>> {
        xs.iter().map(|&x| alloc::vec![x]).collect()
    }

    #[test]
    fn pctsp_three_collinear() {
        // Terminals at 0, 1, 2 with penalty 10 each: tour is twice the
        // span, cost 4.
        let inst = build(
            line(&[0.0, 1.0, 2.0]),
            1,
            &[(0, 10.0), (1, 10.0), (2, 10.0)],
            Variant::Pctsp,
        );
        let r = exact_pctsp(&inst).unwrap();
        assert!((r.cost - 4.0).abs() < 1e-9);
        assert!(inst.validate(&r.solution).is_ok());
        assert!((inst.cost(&r.solution) - r.cost).abs() < 1e-12);
    }

    #[test]
    fn pctsp_two_far_terminals() {
        // Distance 4 and penalties (1,1): best is a self-loop plus one
        // penalty.
        let inst = build(line(&[0.0, 4.0]), 1, &[(0, 1.0), (1, 1.0)], Variant::Pctsp);
        let r = exact_pctsp(&inst).unwrap();
        assert!((r.cost - 1.0).abs() < 1e-9);
    }

    #[test]
    fn figure_one_family_oracle_costs() {
        // Two clusters on a line: 2m terminals spaced 1, gap l, m terminals
        // spaced 1; penalty t each. With m = 3, t = 100, l = 10000 the
        // optimum visits the left cluster and pays the right cluster:
        // PCTSP 2*(2m-1) + m*t = 310, PCSTP (2m-1) + m*t = 305.
        let m = 3;
        let t = 100.0;
        let l = 10000.0;
        let mut xs: Vec<f64> = (0..2 * m).map(|i| i as f64).collect();
        let right0 = (2 * m - 1) as f64 + l;
        xs.extend((0..m).map(|i| right0 + i as f64));
        let pens: Vec<(usize, f64)> = (0..3 * m).map(|i| (i, t)).collect();
        let tsp = build(line(&xs), 1, &pens, Variant::Pctsp);
        let stp = build(line(&xs), 1, &pens, Variant::Pcstp);
        let rt = exact_pctsp(&tsp).unwrap();
        let rs = exact_pcstp(&stp).unwrap();
        assert!((rt.cost - 310.0).abs() < 1e-9, "pctsp cost {}", rt.cost);
        assert!((rs.cost - 305.0).abs() < 1e-9, "pcstp cost {}", rs.cost);
    }

    #[test]
    fn pcstp_single_terminal_is_free() {
        let inst = build(line(&[0.0, 5.0]), 1, &[(0, 3.0)], Variant::Pcstp);
        let r = exact_pcstp(&inst).unwrap();
        assert!(r.cost.abs() < 1e-12);
    }

    #[test]
    fn pcstp_equilateral_steiner_point() {
        // Corners of an equilateral triangle with side 1 plus the center:
        // the minimal Steiner tree routes through the center with weight
        // sqrt(3).
        let h = libm::sqrt(3.0) / 2.0;
        let coords = alloc::vec![
            alloc::vec![0.0, 0.0],
            alloc::vec![1.0, 0.0],
            alloc::vec![0.5, h],
            alloc::vec![0.5, h / 3.0], // circumcenter
        ];
        let inst = build(
            coords,
            2,
            &[(0, 100.0), (1, 100.0), (2, 100.0)],
            Variant::Pcstp,
        );
        let r = exact_pcstp(&inst).unwrap();
        assert!((r.cost - libm::sqrt(3.0)).abs() < 1e-9, "cost {}", r.cost);
        // The witness uses the Steiner point.
        assert!(r.solution.covers(3));
    }

    #[test]
    fn tree_tour_sandwich() {
        // exact_pcstp <= exact_pctsp <= 2 * exact_pcstp on identical input.
        let coords = line(&[0.0, 1.5, 4.0, 9.0]);
        let pens = [(0, 2.0), (1, 3.5), (2, 1.0), (3, 6.0)];
        let t = build(coords.clone(), 1, &pens, Variant::Pctsp);
        let s = build(coords, 1, &pens, Variant::Pcstp);
        let rt = exact_pctsp(&t).unwrap();
        let rs = exact_pcstp(&s).unwrap();
        assert!(rs.cost <= rt.cost + 1e-9);
        assert!(rt.cost <= 2.0 * rs.cost + 1e-9);
    }

    #[test]
    fn witness_cost_matches_reported() {
        let coords = line(&[0.0, 2.0, 3.0, 7.0, 11.0]);
        let pens = [(0, 4.0), (1, 1.0), (2, 2.0), (3, 3.0), (4, 8.0)];
        for variant in [Variant::Pctsp, Variant::Pcstp] {
            let inst = build(coords.clone(), 1, &pens, variant);
            let r = exact(&inst).unwrap();
            assert!((inst.cost(&r.solution) - r.cost).abs() < 1e-12);
            assert!(inst.validate(&r.solution).is_ok());
        }
    }

    #[test]
    fn size_guards() {
        let coords = line(&(0..16).map(|i| i as f64).collect::<Vec<_>>());
        let pens: Vec<(usize, f64)> = (0..16).map(|i| (i, 1.0)).collect();
        let inst = build(coords, 1, &pens, Variant::Pctsp);
        assert!(matches!(
            exact_pctsp(&inst),
            Err(OracleError::TooLarge { .. })
        ));
    }
}
