//! PCX instances and solutions.
//!
//! A solution is an edge multiset over point ids; a self-loop `{x}` is the
//! degenerate single-vertex visit of weight 0. Cost is edge weight plus the
//! penalties of uncovered terminals.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::sync::Arc;
use alloc::vec::Vec;

use crate::metric::{HierarchicalNets, MetricSpace, NetTree, PointId};
use crate::TOL;

/// Problem variant under the shared prize-collecting cost model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// Solutions are Eulerian multigraphs (circuits).
    Pctsp,
    /// Solutions are connected graphs (trees suffice).
    Pcstp,
}

/// Terminal penalty. `MustVisit` encodes an infinite penalty; negative
/// finite values are allowed only on internal instances produced by the
/// splitting step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Penalty {
    Finite(f64),
    MustVisit,
}

impl Penalty {
    pub fn value_or_inf(self) -> f64 {
        match self {
            Penalty::Finite(v) => v,
            Penalty::MustVisit => f64::INFINITY,
        }
    }

    /// Non-negative view used by the estimator and the moat solver; the
    /// caller supplies the finite surrogate for `MustVisit`.
    pub fn clamped(self, surrogate: f64) -> f64 {
        match self {
            Penalty::Finite(v) => {
                if v > 0.0 {
                    v
                } else {
                    0.0
                }
            }
            Penalty::MustVisit => surrogate,
        }
    }
}

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum InstanceError {
    #[error("terminal {0} is not a point of the space")]
    UnknownTerminal(PointId),
    #[error("negative penalty {1} on terminal {0} in a user-facing instance")]
    NegativePenalty(PointId, f64),
}

/// A prize-collecting instance over a shared metric space and net
/// hierarchy.
#[derive(Debug, Clone)]
pub struct PcxInstance {
    variant: Variant,
    space: Arc<MetricSpace>,
    nets: Arc<HierarchicalNets>,
    tree: Arc<NetTree>,
    terminals: BTreeMap<PointId, Penalty>,
    internal: bool,
}

impl PcxInstance {
    /// User-facing constructor; rejects negative penalties.
    pub fn new(
        variant: Variant,
        space: Arc<MetricSpace>,
        nets: Arc<HierarchicalNets>,
        tree: Arc<NetTree>,
        terminals: impl IntoIterator<Item = (PointId, Penalty)>,
    ) -> Result<Self, InstanceError> {
        let map: BTreeMap<PointId, Penalty> = terminals.into_iter().collect();
        for (&t, &p) in &map {
            if t >= space.len() {
                return Err(InstanceError::UnknownTerminal(t));
            }
            if let Penalty::Finite(v) = p {
                if v < 0.0 {
                    return Err(InstanceError::NegativePenalty(t, v));
                }
            }
        }
        Ok(PcxInstance {
            variant,
            space,
            nets,
            tree,
            terminals: map,
            internal: false,
        })
    }

    /// Constructor for instances produced by the splitting step; signed
    /// penalties are permitted.
    pub fn new_internal(
        variant: Variant,
        space: Arc<MetricSpace>,
        nets: Arc<HierarchicalNets>,
        tree: Arc<NetTree>,
        terminals: impl IntoIterator<Item = (PointId, Penalty)>,
    ) -> Self {
        PcxInstance {
            variant,
            space,
            nets,
            tree,
            terminals: terminals.into_iter().collect(),
            internal: true,
        }
    }

    /// Same space and nets, different terminal set.
    pub fn with_terminals(
        &self,
        terminals: impl IntoIterator<Item = (PointId, Penalty)>,
        internal: bool,
    ) -> Self {
        PcxInstance {
            variant: self.variant,
            space: Arc::clone(&self.space),
            nets: Arc::clone(&self.nets),
            tree: Arc::clone(&self.tree),
            terminals: terminals.into_iter().collect(),
            internal,
        }
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn space(&self) -> &MetricSpace {
        &self.space
    }

    pub fn space_arc(&self) -> Arc<MetricSpace> {
        Arc::clone(&self.space)
    }

    pub fn nets(&self) -> &HierarchicalNets {
        &self.nets
    }

    pub fn nets_arc(&self) -> Arc<HierarchicalNets> {
        Arc::clone(&self.nets)
    }

    pub fn net_tree(&self) -> &NetTree {
        &self.tree
    }

    pub fn is_internal(&self) -> bool {
        self.internal
    }

    pub fn terminals(&self) -> impl Iterator<Item = (PointId, Penalty)> + '_ {
        self.terminals.iter().map(|(&t, &p)| (t, p))
    }

    pub fn terminal_ids(&self) -> impl Iterator<Item = PointId> + '_ {
        self.terminals.keys().copied()
    }

    pub fn terminal_count(&self) -> usize {
        self.terminals.len()
    }

    pub fn penalty(&self, t: PointId) -> Option<Penalty> {
        self.terminals.get(&t).copied()
    }

    pub fn is_terminal(&self, t: PointId) -> bool {
        self.terminals.contains_key(&t)
    }

    /// Signed penalty sum over a point set; `MustVisit` contributes
    /// infinity.
    pub fn penalty_sum(&self, points: impl IntoIterator<Item = PointId>) -> f64 {
        let mut s = 0.0;
        for p in points {
            if let Some(pen) = self.terminals.get(&p) {
                s += pen.value_or_inf();
            }
        }
        s
    }

    /// Finite surrogate for an infinite penalty: strictly above any
    /// achievable edge weight of this space.
    pub fn must_visit_surrogate(&self) -> f64 {
        2.0 * self.space.dist_sum() + 1.0
    }

    /// True cost: edge weight plus signed penalties of uncovered
    /// terminals; infinite when a `MustVisit` terminal is uncovered.
    pub fn cost(&self, f: &Solution) -> f64 {
        let covered = f.vertices();
        let mut c = f.weight(&self.space);
        for (&t, &p) in &self.terminals {
            if !covered.contains(&t) {
                c += p.value_or_inf();
            }
        }
        c
    }

    /// Cost under the clamped penalty view (negatives to zero, `MustVisit`
    /// to a finite surrogate); used for estimator values and solver
    /// selection so that heuristic values stay non-negative.
    pub fn cost_clamped(&self, f: &Solution) -> f64 {
        let covered = f.vertices();
        let surrogate = self.must_visit_surrogate();
        let mut c = f.weight(&self.space);
        for (&t, &p) in &self.terminals {
            if !covered.contains(&t) {
                c += p.clamped(surrogate);
            }
        }
        c
    }

    /// First violation of the variant's structural invariants, if any.
    pub fn validate(&self, f: &Solution) -> Result<(), SolutionViolation> {
        for &(a, b) in f.edges() {
            if a >= self.space.len() || b >= self.space.len() {
                return Err(SolutionViolation::UnknownPoint(a.max(b)));
            }
        }
        let verts: Vec<PointId> = f.vertices().into_iter().collect();
        if verts.is_empty() {
            return Ok(());
        }
        // Connectivity over V(F), self-loop vertices included.
        let mut comp: BTreeMap<PointId, usize> = BTreeMap::new();
        for (i, &v) in verts.iter().enumerate() {
            comp.insert(v, i);
        }
        let mut dsu: Vec<usize> = (0..verts.len()).collect();
        fn find(dsu: &mut Vec<usize>, x: usize) -> usize {
            if dsu[x] != x {
                let r = find(dsu, dsu[x]);
                dsu[x] = r;
            }
            dsu[x]
        }
        for &(a, b) in f.edges() {
            let (ia, ib) = (comp[&a], comp[&b]);
            let (ra, rb) = (find(&mut dsu, ia), find(&mut dsu, ib));
            if ra != rb {
                dsu[ra] = rb;
            }
        }
        let root = find(&mut dsu, 0);
        for i in 1..verts.len() {
            if find(&mut dsu, i) != root {
                return Err(SolutionViolation::Disconnected(verts[i]));
            }
        }
        if self.variant == Variant::Pctsp {
            let mut deg: BTreeMap<PointId, usize> = BTreeMap::new();
            for &(a, b) in f.edges() {
                *deg.entry(a).or_insert(0) += 1;
                *deg.entry(b).or_insert(0) += 1;
            }
            for (&v, &d) in &deg {
                if d % 2 != 0 {
                    return Err(SolutionViolation::OddDegree(v));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum SolutionViolation {
    #[error("vertex {0} has odd degree")]
    OddDegree(PointId),
    #[error("vertex {0} is disconnected from the rest of the solution")]
    Disconnected(PointId),
    #[error("edge endpoint {0} is not a point of the space")]
    UnknownPoint(PointId),
}

/// Edge multiset over point ids; pairs are stored normalized (`a <= b`) and
/// sorted, so equal solutions compare equal. A pair with `a == b` is a
/// self-loop of weight 0.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Solution {
    edges: Vec<(PointId, PointId)>,
}

impl Solution {
    pub fn empty() -> Self {
        Solution { edges: Vec::new() }
    }

    pub fn self_loop(x: PointId) -> Self {
        Solution { edges: alloc::vec![(x, x)] }
    }

    pub fn from_edges(edges: impl IntoIterator<Item = (PointId, PointId)>) -> Self {
        let mut es: Vec<(PointId, PointId)> = edges
            .into_iter()
            .map(|(a, b)| if a <= b { (a, b) } else { (b, a) })
            .collect();
        es.sort_unstable();
        Solution { edges: es }
    }

    pub fn edges(&self) -> &[(PointId, PointId)] {
        &self.edges
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }

    pub fn len(&self) -> usize {
        self.edges.len()
    }

    pub fn vertices(&self) -> BTreeSet<PointId> {
        let mut v = BTreeSet::new();
        for &(a, b) in &self.edges {
            v.insert(a);
            v.insert(b);
        }
        v
    }

    pub fn covers(&self, x: PointId) -> bool {
        self.edges.iter().any(|&(a, b)| a == x || b == x)
    }

    pub fn weight(&self, space: &MetricSpace) -> f64 {
        self.edges.iter().map(|&(a, b)| space.dist(a, b)).sum()
    }

    /// Multiset union.
    pub fn union(&self, other: &Solution) -> Solution {
        Solution::from_edges(self.edges.iter().chain(other.edges.iter()).copied())
    }
}

/// Convert a solution to a net-respecting one: every edge `{x, y}` must
/// have both endpoints in `N_i` where `s^i <= eps_nr * d(x,y) < s^{i+1}`.
///
/// An offending edge is replaced by the parent-chain path
/// `x, anc_1(x), .., anc_i(x), anc_i(y), .., y`; replacing an edge by a
/// path changes no vertex parity, so circuits stay circuits. The bridge
/// between the two chain tops may itself need a higher level and is
/// reprocessed until it settles.
pub fn make_net_respecting(
    f: &Solution,
    space: &MetricSpace,
    nets: &HierarchicalNets,
    tree: &NetTree,
    eps_nr: f64,
) -> Solution {
    let mut out: Vec<(PointId, PointId)> = Vec::new();
    for &(x, y) in f.edges() {
        convert_edge(x, y, 0, space, nets, tree, eps_nr, &mut out);
    }
    Solution::from_edges(out)
}

/// Level an edge of length `d` must respect; at most 0 means unconstrained
/// since `N_0` is the whole space.
fn required_level(nets: &HierarchicalNets, eps_nr: f64, d: f64) -> i64 {
    let v = eps_nr * d;
    if v < 1.0 {
        return 0;
    }
    let lvl = libm::floor(libm::log(v) / libm::log(nets.s())) as i64;
    lvl.min(nets.top_height() as i64)
}

fn convert_edge(
    x: PointId,
    y: PointId,
    known_level: usize,
    space: &MetricSpace,
    nets: &HierarchicalNets,
    tree: &NetTree,
    eps_nr: f64,
    out: &mut Vec<(PointId, PointId)>,
) {
    if x == y {
        out.push((x, y));
        return;
    }
    let d = space.dist(x, y);
    let lvl = required_level(nets, eps_nr, d);
    if lvl <= known_level as i64 || (nets.contains(lvl as usize, x) && nets.contains(lvl as usize, y)) {
        out.push((x, y));
        return;
    }
    let lvl = lvl as usize;
    // Climb both endpoints along the net tree; each hop spans at most one
    // net height and is net-respecting by the cover property.
    let mut a = x;
    for h in known_level..lvl {
        let p = tree.anc_from(a, h, h as i64 + 1);
        if p != a {
            out.push((a, p));
            a = p;
        }
    }
    let mut b = y;
    for h in known_level..lvl {
        let p = tree.anc_from(b, h, h as i64 + 1);
        if p != b {
            out.push((b, p));
            b = p;
        }
    }
    if a != b {
        // Both tops are in N_lvl now; the bridge may still be too long for
        // its own level when the detour inflated it past s^{lvl+1}.
        convert_edge(a, b, lvl, space, nets, tree, eps_nr, out);
    } else {
        // The chains met; the path already connects x and y. Parity at the
        // meeting point changed by 2 per chain, so nothing to fix.
    }
}

/// Checker used by tests: is every edge endpoint pair on its required net
/// level?
pub fn is_net_respecting(
    f: &Solution,
    space: &MetricSpace,
    nets: &HierarchicalNets,
    eps_nr: f64,
) -> bool {
    f.edges().iter().all(|&(x, y)| {
        if x == y {
            return true;
        }
        let lvl = required_level(nets, eps_nr, space.dist(x, y));
        lvl <= 0 || (nets.contains(lvl as usize, x) && nets.contains(lvl as usize, y))
    })
}

/// Sanity bound used by tests: `cost` is within tolerance of what an
/// independent recomputation gives.
pub fn costs_close(a: f64, b: f64) -> bool {
    if a.is_infinite() || b.is_infinite() {
        return a == b;
    }
    (a - b).abs() <= TOL
}
