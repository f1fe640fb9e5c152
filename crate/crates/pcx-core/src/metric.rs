//! Finite metric spaces, rescaling, hierarchical nets, and the net tree.
//!
//! Points are dense indices into a distance matrix. Spaces come from
//! Euclidean coordinates or from an explicit symmetric matrix; matrix
//! sources are validated exhaustively (symmetry, zero diagonal, triangle
//! inequality), Euclidean sources satisfy these by construction.

use alloc::string::String;
use alloc::vec::Vec;
use alloc::{format, vec};

use crate::TOL;

/// Index of a point within its [`MetricSpace`].
pub type PointId = usize;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("matrix is not square at row {0}")]
    NotSquare(usize),
    #[error("matrix asymmetric at ({0},{1})")]
    Asymmetric(usize, usize),
    #[error("nonzero diagonal at {0}")]
    NonzeroDiagonal(usize),
    #[error("negative distance at ({0},{1})")]
    Negative(usize, usize),
    #[error("triangle inequality violated on ({0},{1},{2})")]
    Triangle(usize, usize, usize),
    #[error("coordinate dimension mismatch at point {0}")]
    DimensionMismatch(usize),
    #[error("degenerate guess: rescale pair at distance zero")]
    DegenerateGuess,
    #[error("epsilon must lie in (0,1), got {0}")]
    BadEpsilon(f64),
    #[error("net base {0} below 4 (set the small-base override for tests)")]
    SmallBase(f64),
    #[error("empty point set")]
    Empty,
}

/// A finite metric space with a declared doubling-dimension parameter `k`.
#[derive(Debug, Clone)]
pub struct MetricSpace {
    n: usize,
    dists: Vec<f64>,
    coords: Option<Vec<Vec<f64>>>,
    k: u32,
}

impl MetricSpace {
    /// Build from Euclidean coordinates; metric properties hold by
    /// construction.
    pub fn from_euclidean(coords: Vec<Vec<f64>>, k: u32) -> Result<Self, MetricError> {
        if coords.is_empty() {
            return Err(MetricError::Empty);
        }
        let dim = coords[0].len();
        for (i, c) in coords.iter().enumerate() {
            if c.len() != dim {
                return Err(MetricError::DimensionMismatch(i));
            }
        }
        let n = coords.len();
        let mut dists = vec![0.0; n * n];
        for a in 0..n {
            for b in (a + 1)..n {
                let d = euclid(&coords[a], &coords[b]);
                dists[a * n + b] = d;
                dists[b * n + a] = d;
            }
        }
        Ok(MetricSpace {
            n,
            dists,
            coords: Some(coords),
            k,
        })
    }

    /// Build from an explicit matrix, checking all metric axioms
    /// exhaustively.
    pub fn from_matrix(matrix: Vec<Vec<f64>>, k: u32) -> Result<Self, MetricError> {
        let n = matrix.len();
        if n == 0 {
            return Err(MetricError::Empty);
        }
        for (i, row) in matrix.iter().enumerate() {
            if row.len() != n {
                return Err(MetricError::NotSquare(i));
            }
        }
        for a in 0..n {
            if matrix[a][a].abs() > TOL {
                return Err(MetricError::NonzeroDiagonal(a));
            }
            for b in 0..n {
                if matrix[a][b] < 0.0 {
                    return Err(MetricError::Negative(a, b));
                }
                if (matrix[a][b] - matrix[b][a]).abs() > TOL {
                    return Err(MetricError::Asymmetric(a, b));
                }
            }
        }
        for a in 0..n {
            for b in 0..n {
                for c in 0..n {
                    if matrix[a][c] > matrix[a][b] + matrix[b][c] + TOL {
                        return Err(MetricError::Triangle(a, b, c));
                    }
                }
            }
        }
        let mut dists = vec![0.0; n * n];
        for a in 0..n {
            for b in 0..n {
                dists[a * n + b] = matrix[a][b];
            }
        }
        Ok(MetricSpace {
            n,
            dists,
            coords: None,
            k,
        })
    }

    /// Internal constructor for spaces derived from an already-validated
    /// metric (rescaling); skips the O(n^3) re-check.
    pub(crate) fn from_validated(dists: Vec<f64>, n: usize, coords: Option<Vec<Vec<f64>>>, k: u32) -> Self {
        MetricSpace { n, dists, coords, k }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// Declared doubling-dimension parameter.
    pub fn k(&self) -> u32 {
        self.k
    }

    pub fn coords(&self) -> Option<&[Vec<f64>]> {
        self.coords.as_deref()
    }

    #[inline]
    pub fn dist(&self, a: PointId, b: PointId) -> f64 {
        self.dists[a * self.n + b]
    }

    pub fn points(&self) -> impl Iterator<Item = PointId> {
        0..self.n
    }

    pub fn diameter(&self) -> f64 {
        let mut d = 0.0;
        for a in 0..self.n {
            for b in (a + 1)..self.n {
                if self.dist(a, b) > d {
                    d = self.dist(a, b);
                }
            }
        }
        d
    }

    /// Smallest nonzero inter-point distance; 0.0 for a singleton.
    pub fn min_positive_dist(&self) -> f64 {
        let mut m = f64::INFINITY;
        for a in 0..self.n {
            for b in (a + 1)..self.n {
                let d = self.dist(a, b);
                if d > 0.0 && d < m {
                    m = d;
                }
            }
        }
        if m.is_finite() {
            m
        } else {
            0.0
        }
    }

    /// Sum of all pairwise distances; used for effectively-infinite
    /// penalty surrogates.
    pub fn dist_sum(&self) -> f64 {
        let mut s = 0.0;
        for a in 0..self.n {
            for b in (a + 1)..self.n {
                s += self.dist(a, b);
            }
        }
        s
    }

    /// Points of the closed ball `B(center, radius)`.
    pub fn ball(&self, center: PointId, radius: f64) -> Vec<PointId> {
        (0..self.n)
            .filter(|&p| self.dist(center, p) <= radius)
            .collect()
    }

    /// Nearest point of `candidates` to `p`, ties broken by smallest id.
    pub fn nearest_of(&self, p: PointId, candidates: &[PointId]) -> Option<PointId> {
        let mut best: Option<(f64, PointId)> = None;
        for &c in candidates {
            let d = self.dist(p, c);
            match best {
                None => best = Some((d, c)),
                Some((bd, _)) if d < bd - TOL => best = Some((d, c)),
                _ => {}
            }
        }
        best.map(|(_, c)| c)
    }
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b.iter()) {
        s += (x - y) * (x - y);
    }
    libm::sqrt(s)
}

/// Result of [`rescale`]: the snapped, scaled space plus the bookkeeping
/// needed to map solutions and costs back to the original instance.
#[derive(Debug, Clone)]
pub struct Rescaled {
    pub space: MetricSpace,
    /// Multiplicative factor applied to all distances.
    pub scale: f64,
    /// For each original point: its representative in the new space, or
    /// `None` if the point was dropped.
    pub point_map: Vec<Option<PointId>>,
    /// For each new point: the original id it descends from.
    pub origin: Vec<PointId>,
}

/// Normalize an instance for one guess `(u, v)` of the optimum's extent.
///
/// Scales distances by `32 n^2 / (eps * d(u,v))`, drops points farther than
/// `n * d(u,v)` from `u`, and snaps survivors to an `(eps * d(u,v) / 32n^2)`-net,
/// so the output has min nonzero distance at least 1.
pub fn rescale(
    space: &MetricSpace,
    u: PointId,
    v: PointId,
    eps: f64,
) -> Result<Rescaled, MetricError> {
    if !(eps > 0.0 && eps < 1.0) {
        return Err(MetricError::BadEpsilon(eps));
    }
    let r = space.dist(u, v);
    if r <= 0.0 {
        return Err(MetricError::DegenerateGuess);
    }
    let n = space.len();
    let nf = n as f64;
    let scale = 32.0 * nf * nf / (eps * r);
    let survivors: Vec<PointId> = space
        .points()
        .filter(|&p| space.dist(u, p) <= nf * r + TOL)
        .collect();

    // Greedy net at the snap radius over the survivors, scanned in
    // ascending id order.
    let snap_radius = eps * r / (32.0 * nf * nf);
    let mut net: Vec<PointId> = Vec::new();
    for &p in &survivors {
        if net.iter().all(|&q| space.dist(p, q) > snap_radius) {
            net.push(p);
        }
    }

    let mut point_map = vec![None; n];
    for &p in &survivors {
        let rep = space.nearest_of(p, &net).expect("net covers survivors");
        let new_id = net.iter().position(|&q| q == rep).unwrap();
        point_map[p] = Some(new_id);
    }

    let m = net.len();
    let mut dists = vec![0.0; m * m];
    for a in 0..m {
        for b in 0..m {
            dists[a * m + b] = scale * space.dist(net[a], net[b]);
        }
    }
    let coords = space.coords.as_ref().map(|cs| {
        net.iter()
            .map(|&p| cs[p].iter().map(|x| x * scale).collect())
            .collect()
    });
    Ok(Rescaled {
        space: MetricSpace::from_validated(dists, m, coords, space.k),
        scale,
        point_map,
        origin: net,
    })
}

/// Nested nets `N_L ⊆ … ⊆ N_1 ⊆ N_0 = X`, where `N_i` is an `s^i`-net of
/// `N_{i-1}`.
#[derive(Debug, Clone)]
pub struct HierarchicalNets {
    s: f64,
    levels: Vec<Vec<PointId>>,
}

impl HierarchicalNets {
    /// Greedy net construction scanning points in ascending id order.
    ///
    /// Builds at least `levels` heights and keeps adding heights until the
    /// top net is a single point.
    pub fn build(
        space: &MetricSpace,
        s: f64,
        levels: usize,
        allow_small_base: bool,
    ) -> Result<Self, MetricError> {
        if space.is_empty() {
            return Err(MetricError::Empty);
        }
        if s < 4.0 && !allow_small_base {
            return Err(MetricError::SmallBase(s));
        }
        if s < 1.5 {
            return Err(MetricError::SmallBase(s));
        }
        let mut lv: Vec<Vec<PointId>> = Vec::new();
        lv.push(space.points().collect());
        let mut i = 1usize;
        loop {
            let radius = libm::pow(s, i as f64);
            let prev = &lv[i - 1];
            let mut next: Vec<PointId> = Vec::new();
            for &p in prev.iter() {
                if next.iter().all(|&q| space.dist(p, q) > radius) {
                    next.push(p);
                }
            }
            lv.push(next);
            if i >= levels && lv[i].len() == 1 {
                break;
            }
            i += 1;
        }
        Ok(HierarchicalNets { s, levels: lv })
    }

    pub fn s(&self) -> f64 {
        self.s
    }

    /// Top height `L` (the level whose net is a single point).
    pub fn top_height(&self) -> usize {
        self.levels.len() - 1
    }

    /// `s^i`.
    pub fn scale(&self, i: usize) -> f64 {
        libm::pow(self.s, i as f64)
    }

    /// Net at height `i`; heights above the top repeat the root level.
    pub fn level(&self, i: usize) -> &[PointId] {
        let i = i.min(self.top_height());
        &self.levels[i]
    }

    pub fn contains(&self, i: usize, p: PointId) -> bool {
        self.level(i).binary_search(&p).is_ok()
    }

    pub fn root(&self) -> PointId {
        self.levels[self.top_height()][0]
    }
}

/// Packing bound of doubling metrics: a `rho`-packing of diameter at most
/// `diam` has at most `(2 diam / rho)^k` points.
pub fn check_packing_bound(count: usize, rho: f64, diam: f64, k: u32) -> bool {
    if count <= 1 {
        return true;
    }
    if rho <= 0.0 {
        return false;
    }
    (count as f64) <= libm::pow(2.0 * diam / rho, k as f64) + TOL
}

/// Parent pointers over the nets: `(u, i)` maps to the nearest point of
/// `N_{i+1}` at height `i + 1`.
#[derive(Debug, Clone)]
pub struct NetTree {
    parents: Vec<Vec<(PointId, PointId)>>,
}

impl NetTree {
    pub fn build(space: &MetricSpace, nets: &HierarchicalNets) -> Self {
        let top = nets.top_height();
        let mut parents = Vec::with_capacity(top);
        for i in 0..top {
            let mut level_parents = Vec::with_capacity(nets.level(i).len());
            for &u in nets.level(i) {
                let p = space
                    .nearest_of(u, nets.level(i + 1))
                    .expect("upper net nonempty");
                level_parents.push((u, p));
            }
            parents.push(level_parents);
        }
        NetTree { parents }
    }

    /// Parent point of `(u, i)`; `None` at the root height.
    pub fn parent(&self, u: PointId, i: usize) -> Option<PointId> {
        self.parents.get(i).map(|lvl| {
            lvl.iter()
                .find(|&&(q, _)| q == u)
                .map(|&(_, p)| p)
                .expect("u must belong to N_i")
        })
    }

    /// Height-`j` ancestor of `(u, 0)`; heights at most 0 give `u` itself.
    pub fn anc(&self, u: PointId, j: i64) -> PointId {
        self.anc_from(u, 0, j)
    }

    /// Ancestor of `(u, from)` at height `to`, walking parent pointers.
    pub fn anc_from(&self, u: PointId, from: usize, to: i64) -> PointId {
        if to <= from as i64 {
            return u;
        }
        let mut cur = u;
        for i in from..(to as usize).min(self.parents.len()) {
            match self.parent(cur, i) {
                Some(p) => cur = p,
                None => break,
            }
        }
        cur
    }
}

/// Exhaustive checker for the net invariants; returns a description of the
/// first violation.
pub fn verify_nets(space: &MetricSpace, nets: &HierarchicalNets) -> Result<(), String> {
    let top = nets.top_height();
    if nets.level(0).len() != space.len() {
        return Err(format!(
            "N_0 has {} points, space has {}",
            nets.level(0).len(),
            space.len()
        ));
    }
    if nets.level(top).len() != 1 {
        return Err(format!("top net has {} points", nets.level(top).len()));
    }
    for i in 1..=top {
        let cur = nets.level(i);
        let prev = nets.level(i - 1);
        let radius = nets.scale(i);
        for &p in cur {
            if !prev.contains(&p) {
                return Err(format!("nesting broken: {p} in N_{i} not in N_{}", i - 1));
            }
        }
        for (ai, &a) in cur.iter().enumerate() {
            for &b in cur.iter().skip(ai + 1) {
                if space.dist(a, b) <= radius {
                    return Err(format!(
                        "packing broken at height {i}: d({a},{b}) = {} <= {radius}",
                        space.dist(a, b)
                    ));
                }
            }
        }
        for &p in prev {
            if !cur.iter().any(|&q| space.dist(p, q) <= radius + TOL) {
                return Err(format!("cover broken at height {i} for point {p}"));
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(points: &[f64]) -> MetricSpace {
        MetricSpace::from_euclidean(points.iter().map(|&x| vec![x]).collect(), 1).unwrap()
    }

    #[test]
    fn rescale_two_points() {
        // Two points at distance 5, n = 2, eps = 0.5: scale factor 256/5.
        let space = line(&[0.0, 5.0]);
        let r = rescale(&space, 0, 1, 0.5).unwrap();
        assert!((r.scale - 256.0 / 5.0).abs() < TOL);
        assert_eq!(r.space.len(), 2);
        assert!((r.space.dist(0, 1) - 256.0).abs() < 1e-6);
        assert!(r.space.min_positive_dist() >= 1.0);
    }

    #[test]
    fn rescale_drops_far_points() {
        // Points beyond n * d(u,v) from u are dropped.
        let space = line(&[0.0, 1.0, 100.0]);
        let r = rescale(&space, 0, 1, 0.5).unwrap();
        assert_eq!(r.space.len(), 2);
        assert_eq!(r.point_map[2], None);
        assert!(r.point_map[0].is_some() && r.point_map[1].is_some());
    }

    #[test]
    fn rescale_single_survivor() {
        let space = MetricSpace::from_matrix(
            vec![
                vec![0.0, 0.5, 60.0],
                vec![0.5, 0.0, 60.0],
                vec![60.0, 60.0, 0.0],
            ],
            1,
        )
        .unwrap();
        // n * R = 3 * 0.5 = 1.5; point 2 dropped; snapping may merge 0 and 1
        // only if within the snap radius (it is not).
        let r = rescale(&space, 0, 1, 0.5).unwrap();
        assert_eq!(r.point_map[2], None);
        assert_eq!(r.space.len(), 2);
    }

    #[test]
    fn rescale_degenerate_guess() {
        let space = MetricSpace::from_matrix(
            vec![vec![0.0, 0.0], vec![0.0, 0.0]],
            1,
        )
        .unwrap();
        assert!(matches!(
            rescale(&space, 0, 1, 0.5),
            Err(MetricError::DegenerateGuess)
        ));
    }

    #[test]
    fn rescale_cost_identity_bound() {
        // Rescaled cost divided by the scale factor recovers the original
        // cost up to the snapping error eps * d(u,v) * n.
        let space = line(&[0.0, 1.4, 2.9, 7.3, 11.0]);
        let eps = 0.3;
        let r = rescale(&space, 0, 4, eps).unwrap();
        let bound = eps * space.dist(0, 4) * space.len() as f64;
        for a in 0..space.len() {
            for b in 0..space.len() {
                let (Some(ra), Some(rb)) = (r.point_map[a], r.point_map[b]) else {
                    continue;
                };
                let back = r.space.dist(ra, rb) / r.scale;
                assert!(
                    (back - space.dist(a, b)).abs() <= bound + TOL,
                    "snap error too large: {back} vs {}",
                    space.dist(a, b)
                );
            }
        }
    }

    #[test]
    fn greedy_net_line_example() {
        // Line {0,1,3,7}, s = 2: N_1 = {0,3,7}, N_2 = {0,7}, N_3 = {0}.
        let space = line(&[0.0, 1.0, 3.0, 7.0]);
        let nets = HierarchicalNets::build(&space, 2.0, 1, true).unwrap();
        assert_eq!(nets.level(1), &[0, 2, 3]); // points at coords 0, 3, 7
        assert_eq!(nets.level(2), &[0, 3]);
        assert_eq!(nets.level(3), &[0]);
        verify_nets(&space, &nets).unwrap();
    }

    #[test]
    fn single_point_nets() {
        let space = line(&[42.0]);
        let nets = HierarchicalNets::build(&space, 4.0, 3, false).unwrap();
        for i in 0..=nets.top_height() {
            assert_eq!(nets.level(i), &[0]);
        }
        verify_nets(&space, &nets).unwrap();
    }

    #[test]
    fn two_far_points_packing_forced() {
        // Distance 10 > s = 2: both points stay in N_1.
        let space = line(&[0.0, 10.0]);
        let nets = HierarchicalNets::build(&space, 2.0, 1, true).unwrap();
        assert_eq!(nets.level(1).len(), 2);
    }

    #[test]
    fn small_base_rejected_without_override() {
        let space = line(&[0.0, 1.0]);
        assert!(matches!(
            HierarchicalNets::build(&space, 2.0, 1, false),
            Err(MetricError::SmallBase(_))
        ));
    }

    #[test]
    fn anc_walks_parent_chain() {
        // Line {0,1,3,7}, s = 2: anc(1, 2) = point 0 via 1 -> 0 -> 0.
        let space = line(&[0.0, 1.0, 3.0, 7.0]);
        let nets = HierarchicalNets::build(&space, 2.0, 2, true).unwrap();
        let tree = NetTree::build(&space, &nets);
        assert_eq!(tree.anc(1, 0), 1);
        assert_eq!(tree.anc(1, -3), 1);
        assert_eq!(tree.anc(1, 2), 0);
    }

    #[test]
    fn anc_single_point() {
        let space = line(&[5.0]);
        let nets = HierarchicalNets::build(&space, 4.0, 2, false).unwrap();
        let tree = NetTree::build(&space, &nets);
        for j in 0..5 {
            assert_eq!(tree.anc(0, j), 0);
        }
    }

    #[test]
    fn anc_displacement_bound() {
        let space = line(&[0.0, 1.0, 2.5, 4.0, 9.0, 17.5, 33.0]);
        let nets = HierarchicalNets::build(&space, 2.0, 3, true).unwrap();
        let tree = NetTree::build(&space, &nets);
        for p in space.points() {
            for j in 0..=nets.top_height() {
                let a = tree.anc(p, j as i64);
                assert!(
                    space.dist(p, a) <= 2.0 * nets.scale(j) + TOL,
                    "anc displacement broken for p={p}, j={j}"
                );
            }
        }
    }

    #[test]
    fn packing_bound_examples() {
        // Singleton always passes.
        assert!(check_packing_bound(1, 1.0, 0.0, 1));
        // Points spaced 1.01 on a line within span 2: at most 2 fit, and
        // 2 <= (2*2/1)^1 = 4.
        assert!(check_packing_bound(2, 1.0, 2.0, 1));
        // 3x3 unit grid in the plane: 9 <= (2 * 2*sqrt(2))^2.
        assert!(check_packing_bound(9, 1.0, 2.0 * core::f64::consts::SQRT_2, 2));
        // A count exceeding the bound fails.
        assert!(!check_packing_bound(5, 1.0, 2.0, 1));
    }

    #[test]
    fn packing_bound_on_built_nets() {
        // Fact-style check on every level restricted to balls B(u, 3 s^i).
        let space = MetricSpace::from_euclidean(
            (0..5)
                .flat_map(|x| (0..5).map(move |y| vec![x as f64, y as f64]))
                .collect(),
            2,
        )
        .unwrap();
        let nets = HierarchicalNets::build(&space, 4.0, 2, false).unwrap();
        verify_nets(&space, &nets).unwrap();
        for i in 1..=nets.top_height() {
            let si = nets.scale(i);
            for &u in nets.level(i) {
                let ball = space.ball(u, 3.0 * si);
                let inside: Vec<_> = nets
                    .level(i)
                    .iter()
                    .copied()
                    .filter(|p| ball.contains(p))
                    .collect();
                assert!(
                    check_packing_bound(inside.len(), si, 6.0 * si, space.k()),
                    "packing bound failed at height {i}, center {u}"
                );
            }
        }
    }

    #[test]
    fn matrix_validation_catches_violations() {
        let bad = vec![
            vec![0.0, 1.0, 5.0],
            vec![1.0, 0.0, 1.0],
            vec![5.0, 1.0, 0.0],
        ];
        assert!(matches!(
            MetricSpace::from_matrix(bad, 1),
            Err(MetricError::Triangle(_, _, _))
        ));
        let asym = vec![vec![0.0, 1.0], vec![2.0, 0.0]];
        assert!(matches!(
            MetricSpace::from_matrix(asym, 1),
            Err(MetricError::Asymmetric(_, _))
        ));
    }
}
