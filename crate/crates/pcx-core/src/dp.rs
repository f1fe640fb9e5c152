//! Dynamic program over the cluster tree.
//!
//! An entry `(C, R, P)` fixes a cluster, the subset of its portals the
//! solution uses to cross the boundary, and the connectivity contract over
//! them: for tours a set of distinct ordered portal pairs (one crossing
//! each), for trees a partition of the used portals into components. The
//! value is the cheapest graph on the portals of `C` and its descendants
//! meeting the contract, with penalties for the terminals of `C` it skips.
//!
//! Evaluation is lazy and memoized: the root entry is queried and child
//! entries materialize on demand. For one parent candidate the interface
//! graph between the cluster's portals and its children's portals is
//! enumerated directly (directed for tours), checked for consistency
//! against the paper-style conditions, and priced.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::rc::Rc;
use alloc::string::String;
use alloc::vec::Vec;
use alloc::{format, vec};
use core::cell::RefCell;

use crate::hierdecomp::{ClusterId, Decomposition, PgNode};
use crate::instance::{PcxInstance, Penalty, Solution, Variant};
use crate::metric::PointId;
use crate::TOL;

/// Search caps; exceeding `max_candidates` aborts the run with a budget
/// error so the caller can fall back.
#[derive(Debug, Clone)]
pub struct DpParams {
    pub m: usize,
    pub r: usize,
    pub max_pairs: usize,
    pub max_interface_edges: usize,
    pub max_node_degree: usize,
    pub max_candidates: u64,
}

impl Default for DpParams {
    fn default() -> Self {
        DpParams {
            m: 64,
            r: 4,
            max_pairs: 4,
            max_interface_edges: 8,
            max_node_degree: 4,
            max_candidates: 2_000_000,
        }
    }
}

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum DpError {
    #[error("enumeration budget exceeded after {candidates} candidates")]
    Budget { candidates: u64 },
    #[error("no feasible entry at the root")]
    NoFeasible,
    #[error("cluster has {portals} portals, above the cap m = {m}")]
    PortalCap { portals: usize, m: usize },
    #[error("internal inconsistency: {0}")]
    Internal(String),
}

#[derive(Debug, Clone, Default)]
pub struct DpStats {
    /// Entry sets materialized per cluster height.
    pub entries_per_height: Vec<usize>,
    pub candidates: u64,
    /// Internal objective minus the exact cost of the reconstruction;
    /// nonzero only when a penalty was paid for a terminal the solution
    /// happens to pass through.
    pub internal_gap: f64,
}

#[derive(Debug, Clone)]
pub struct DpOutcome {
    pub solution: Solution,
    /// Exact cost of `solution` under the instance's cost function.
    pub value: f64,
    pub stats: DpStats,
}

/// Connectivity contract over the used portals `R`, indexed `0..|R|`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub enum InterfaceSpec {
    /// Distinct ordered pairs; every portal appears in at least one pair.
    Pairs(Vec<(u8, u8)>),
    /// Partition of the portals.
    Parts(Vec<Vec<u8>>),
}

impl InterfaceSpec {
    pub fn empty(variant: Variant) -> Self {
        match variant {
            Variant::Pctsp => InterfaceSpec::Pairs(Vec::new()),
            Variant::Pcstp => InterfaceSpec::Parts(Vec::new()),
        }
    }

    fn canonical(mut self) -> Self {
        match &mut self {
            InterfaceSpec::Pairs(ps) => {
                ps.sort_unstable();
                ps.dedup();
            }
            InterfaceSpec::Parts(parts) => {
                for p in parts.iter_mut() {
                    p.sort_unstable();
                }
                parts.sort_unstable();
            }
        }
        self
    }
}

/// The augmented interface graph a consistency check runs on. Nodes are
/// compact indices; `r_nodes` are the parent portals, `child_groups` the
/// per-child used portals. Edges are directed for tours and undirected for
/// trees; `virtual_edges` stand for the children's internal structure.
#[derive(Debug, Clone, Default)]
pub struct InterfaceGraph {
    pub node_count: usize,
    pub r_nodes: Vec<usize>,
    pub child_groups: Vec<Vec<usize>>,
    pub real_edges: Vec<(usize, usize)>,
    pub virtual_edges: Vec<(usize, usize)>,
}

struct Dsu(Vec<usize>);

impl Dsu {
    fn new(n: usize) -> Self {
        Dsu((0..n).collect())
    }
    fn find(&mut self, x: usize) -> usize {
        if self.0[x] != x {
            let r = self.find(self.0[x]);
            self.0[x] = r;
        }
        self.0[x]
    }
    fn union(&mut self, a: usize, b: usize) -> bool {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            false
        } else {
            self.0[ra] = rb;
            true
        }
    }
}

/// Consistency of an augmented interface graph with the contract `(R, P)`.
///
/// Condition 1: with parent portals present, every child portal connects
/// to one of them; otherwise all child portals are mutually connected.
/// Condition 2 is variant-specific: tours need the graph to decompose into
/// directed trails matching the pairs exactly (an Eulerian orientation
/// when there are no parent portals); trees need a forest inducing exactly
/// the given partition.
pub fn check_consistency(g: &InterfaceGraph, p: &InterfaceSpec, variant: Variant) -> bool {
    let n = g.node_count;
    let all_edges: Vec<(usize, usize)> = g
        .real_edges
        .iter()
        .chain(g.virtual_edges.iter())
        .copied()
        .collect();

    // Condition 1 (undirected connectivity view).
    let mut dsu = Dsu::new(n);
    for &(a, b) in &all_edges {
        dsu.union(a, b);
    }
    if g.r_nodes.is_empty() {
        let mut root: Option<usize> = None;
        for grp in &g.child_groups {
            for &x in grp {
                match root {
                    None => root = Some(dsu.find(x)),
                    Some(r) => {
                        if dsu.find(x) != r {
                            return false;
                        }
                    }
                }
            }
        }
    } else {
        for grp in &g.child_groups {
            for &x in grp {
                let connected = g.r_nodes.iter().any(|&r| {
                    let (a, b) = (dsu.find(x), dsu.find(r));
                    a == b
                });
                if !connected {
                    return false;
                }
            }
        }
    }

    match (variant, p) {
        (Variant::Pctsp, InterfaceSpec::Pairs(pairs)) => {
            if g.r_nodes.is_empty() {
                if !pairs.is_empty() {
                    return false;
                }
                // Eulerian: balanced everywhere and connected over
                // non-isolated nodes.
                let mut in_deg = vec![0usize; n];
                let mut out_deg = vec![0usize; n];
                for &(a, b) in &all_edges {
                    out_deg[a] += 1;
                    in_deg[b] += 1;
                }
                if (0..n).any(|v| in_deg[v] != out_deg[v]) {
                    return false;
                }
                let mut dsu2 = Dsu::new(n);
                for &(a, b) in &all_edges {
                    dsu2.union(a, b);
                }
                let mut root: Option<usize> = None;
                for v in 0..n {
                    if in_deg[v] + out_deg[v] == 0 {
                        continue;
                    }
                    match root {
                        None => root = Some(dsu2.find(v)),
                        Some(r) => {
                            if dsu2.find(v) != r {
                                return false;
                            }
                        }
                    }
                }
                true
            } else {
                // Every parent portal appears in some pair.
                let in_pairs: BTreeSet<usize> = pairs
                    .iter()
                    .flat_map(|&(a, b)| [a as usize, b as usize])
                    .collect();
                if g.r_nodes.iter().enumerate().any(|(i, _)| !in_pairs.contains(&i)) {
                    return false;
                }
                trail_partition_exists(g, pairs, &all_edges)
            }
        }
        (Variant::Pcstp, InterfaceSpec::Parts(parts)) => {
            if g.r_nodes.is_empty() {
                return parts.is_empty();
            }
            // Forest check over the multigraph.
            let mut dsu3 = Dsu::new(n);
            for &(a, b) in &all_edges {
                if !dsu3.union(a, b) {
                    return false; // cycle (multi-edges included)
                }
            }
            // Components restricted to R must match the partition exactly.
            let mut part_of = vec![usize::MAX; g.r_nodes.len()];
            for (pi, part) in parts.iter().enumerate() {
                for &x in part {
                    if (x as usize) >= g.r_nodes.len() || part_of[x as usize] != usize::MAX {
                        return false;
                    }
                    part_of[x as usize] = pi;
                }
            }
            if part_of.iter().any(|&p| p == usize::MAX) {
                return false; // partition must cover R
            }
            for i in 0..g.r_nodes.len() {
                for j in (i + 1)..g.r_nodes.len() {
                    let same_comp = dsu3.find(g.r_nodes[i]) == dsu3.find(g.r_nodes[j]);
                    let same_part = part_of[i] == part_of[j];
                    if same_comp != same_part {
                        return false;
                    }
                }
            }
            true
        }
        _ => false,
    }
}

/// Exact search: can the directed edge multiset be partitioned into trails
/// realizing each pair in order? Memoizes failed states.
fn trail_partition_exists(
    g: &InterfaceGraph,
    pairs: &[(u8, u8)],
    edges: &[(usize, usize)],
) -> bool {
    if edges.len() > 30 {
        return false; // out of scope for the bitmask search
    }
    let full: u32 = if edges.is_empty() {
        0
    } else {
        (1u32 << edges.len()) - 1
    };
    let mut failed: BTreeSet<(u8, u32, u8)> = BTreeSet::new();

    fn rec(
        g: &InterfaceGraph,
        pairs: &[(u8, u8)],
        edges: &[(usize, usize)],
        full: u32,
        pair_idx: usize,
        mask: u32,
        pos: Option<usize>,
        failed: &mut BTreeSet<(u8, u32, u8)>,
    ) -> bool {
        let key = (
            pair_idx as u8,
            mask,
            pos.map(|p| p as u8).unwrap_or(u8::MAX),
        );
        if failed.contains(&key) {
            return false;
        }
        let ok = (|| {
            match pos {
                None => {
                    if pair_idx == pairs.len() {
                        return mask == full;
                    }
                    let (p, q) = pairs[pair_idx];
                    let (p, q) = (g.r_nodes[p as usize], g.r_nodes[q as usize]);
                    if p == q {
                        // Degenerate closed trail consuming nothing.
                        if rec(g, pairs, edges, full, pair_idx + 1, mask, None, failed) {
                            return true;
                        }
                    }
                    for (ei, &(a, b)) in edges.iter().enumerate() {
                        if mask & (1 << ei) != 0 || a != p {
                            continue;
                        }
                        let nm = mask | (1 << ei);
                        let _ = q;
                        if rec(g, pairs, edges, full, pair_idx, nm, Some(b), failed) {
                            return true;
                        }
                    }
                    false
                }
                Some(cur) => {
                    let (_, q) = pairs[pair_idx];
                    let q = g.r_nodes[q as usize];
                    if cur == q
                        && rec(g, pairs, edges, full, pair_idx + 1, mask, None, failed)
                    {
                        return true;
                    }
                    for (ei, &(a, b)) in edges.iter().enumerate() {
                        if mask & (1 << ei) != 0 || a != cur {
                            continue;
                        }
                        let nm = mask | (1 << ei);
                        if rec(g, pairs, edges, full, pair_idx, nm, Some(b), failed) {
                            return true;
                        }
                    }
                    false
                }
            }
        })();
        if !ok {
            failed.insert(key);
        }
        ok
    }

    rec(g, pairs, edges, full, 0, 0, None, &mut failed)
}

/// The two-branch candidate pricing: interface weight plus attached child
/// values plus the full penalties of unattached children; entries without
/// parent portals may instead delegate to a single child and pay the rest.
pub fn candidate_value(
    w_g: f64,
    attached_values: &[f64],
    unattached_penalties: &[f64],
    solo_candidates: &[(f64, f64)],
    r_empty: bool,
) -> f64 {
    let mut expr = w_g;
    for v in attached_values {
        expr += v;
    }
    for p in unattached_penalties {
        expr += p;
    }
    if r_empty {
        for &(v, pen) in solo_candidates {
            let alt = v + pen;
            if alt < expr {
                expr = alt;
            }
        }
    }
    expr
}

#[derive(Debug, Clone)]
enum Choice {
    /// Singleton base: cover the point with a free self-loop.
    BaseVisit(PointId),
    /// Singleton base: leave the point and pay its penalty (possibly
    /// negative on internal instances).
    BasePay,
    /// Delegate to one child's standalone solution.
    SoloChild { child: ClusterId, entry: usize },
    /// Interface graph plus chosen child entries.
    Assembled {
        g_points: Vec<(PgNode, PgNode)>,
        children: Vec<(ClusterId, Vec<PgNode>, usize)>,
    },
}

#[derive(Debug, Clone)]
struct Entry {
    interface: InterfaceSpec,
    value: f64,
    choice: Choice,
}

type EntrySet = Rc<Vec<Entry>>;

struct Pool {
    nodes: Vec<PgNode>,
    /// Child index owning the node, when it is some child's portal.
    owner: Vec<Option<usize>>,
}

struct Ctx<'a> {
    inst: &'a PcxInstance,
    decomp: &'a Decomposition,
    params: &'a DpParams,
    /// Prune partial costs above this; infinity disables weight pruning.
    prune_above: f64,
    memo: RefCell<BTreeMap<(ClusterId, Vec<PgNode>), EntrySet>>,
    pools: RefCell<BTreeMap<ClusterId, Rc<Pool>>>,
    candidates: core::cell::Cell<u64>,
    /// Signed penalty of all terminals in a cluster, memoized.
    cluster_penalty: RefCell<BTreeMap<ClusterId, f64>>,
}

impl<'a> Ctx<'a> {
    fn penalty_of(&self, c: ClusterId) -> f64 {
        if let Some(&v) = self.cluster_penalty.borrow().get(&c) {
            return v;
        }
        let v = self
            .inst
            .penalty_sum(self.decomp.cluster(c).points.iter().copied());
        self.cluster_penalty.borrow_mut().insert(c, v);
        v
    }

    fn bump(&self) -> Result<(), DpError> {
        let c = self.candidates.get() + 1;
        self.candidates.set(c);
        if c > self.params.max_candidates {
            Err(DpError::Budget { candidates: c })
        } else {
            Ok(())
        }
    }

    fn pool_of(&self, c: ClusterId) -> Rc<Pool> {
        if let Some(p) = self.pools.borrow().get(&c) {
            return Rc::clone(p);
        }
        let cluster = self.decomp.cluster(c);
        let mut nodes: Vec<PgNode> = Vec::new();
        let mut owner: Vec<Option<usize>> = Vec::new();
        for (t, &child) in cluster.children.iter().enumerate() {
            for &p in &self.decomp.cluster(child).portals {
                if !nodes.contains(&p) {
                    nodes.push(p);
                    owner.push(Some(t));
                }
            }
        }
        for &p in &cluster.portals {
            if !nodes.contains(&p) {
                nodes.push(p);
                owner.push(None);
            }
        }
        let pool = Rc::new(Pool { nodes, owner });
        self.pools.borrow_mut().insert(c, Rc::clone(&pool));
        pool
    }
}

/// Search for a minimum-cost light solution over the sampled
/// decomposition. The returned value is the exact cost of the returned
/// solution; the gap between the internal objective and that cost is
/// reported in the stats and is nonnegative up to tolerance.
pub fn dp_solve(
    inst: &PcxInstance,
    decomp: &Decomposition,
    params: &DpParams,
    upper_bound: Option<f64>,
) -> Result<DpOutcome, DpError> {
    for c in decomp.clusters() {
        if c.portals.len() > params.m {
            return Err(DpError::PortalCap {
                portals: c.portals.len(),
                m: params.m,
            });
        }
    }
    let neg_slack: f64 = inst
        .terminals()
        .map(|(_, p)| match p {
            Penalty::Finite(v) if v < 0.0 => -v,
            _ => 0.0,
        })
        .sum();
    let prune_above = upper_bound.map_or(f64::INFINITY, |ub| ub + neg_slack + 1.0);
    let ctx = Ctx {
        inst,
        decomp,
        params,
        prune_above,
        memo: RefCell::new(BTreeMap::new()),
        pools: RefCell::new(BTreeMap::new()),
        candidates: core::cell::Cell::new(0),
        cluster_penalty: RefCell::new(BTreeMap::new()),
    };
    let root = decomp.root();
    let entries = entries_for(&ctx, root, Vec::new())?;
    let want = InterfaceSpec::empty(inst.variant());
    let root_entry = entries
        .iter()
        .enumerate()
        .filter(|(_, e)| e.interface == want)
        .min_by(|a, b| a.1.value.partial_cmp(&b.1.value).unwrap())
        .map(|(i, e)| (i, e.value));
    let Some((idx, internal_value)) = root_entry else {
        return Err(DpError::NoFeasible);
    };
    if !internal_value.is_finite() {
        return Err(DpError::NoFeasible);
    }

    // Reconstruct.
    let mut point_edges: Vec<(PointId, PointId)> = Vec::new();
    let mut covered: BTreeSet<PointId> = BTreeSet::new();
    reconstruct(&ctx, root, &Vec::new(), idx, &mut point_edges, &mut covered)?;
    let mut edges: Vec<(PointId, PointId)> = point_edges
        .iter()
        .copied()
        .filter(|&(a, b)| a != b)
        .collect();
    let with_edge: BTreeSet<PointId> = edges.iter().flat_map(|&(a, b)| [a, b]).collect();
    for p in covered {
        if !with_edge.contains(&p) {
            edges.push((p, p));
        }
    }
    let solution = Solution::from_edges(edges);
    if let Err(v) = inst.validate(&solution) {
        return Err(DpError::Internal(format!(
            "reconstructed solution invalid: {v}"
        )));
    }
    let value = inst.cost(&solution);
    let internal_gap = internal_value - value;
    if internal_gap < -TOL {
        return Err(DpError::Internal(format!(
            "value undercounts reconstruction by {internal_gap}"
        )));
    }

    let mut entries_per_height = vec![0usize; decomp.top_height() + 1];
    for ((c, _), set) in ctx.memo.borrow().iter() {
        entries_per_height[decomp.cluster(*c).height] += set.len();
    }
    Ok(DpOutcome {
        solution,
        value,
        stats: DpStats {
            entries_per_height,
            candidates: ctx.candidates.get(),
            internal_gap,
        },
    })
}

fn reconstruct(
    ctx: &Ctx<'_>,
    cluster: ClusterId,
    r: &Vec<PgNode>,
    entry_idx: usize,
    edges: &mut Vec<(PointId, PointId)>,
    covered: &mut BTreeSet<PointId>,
) -> Result<(), DpError> {
    let set = {
        let memo = ctx.memo.borrow();
        Rc::clone(memo.get(&(cluster, r.clone())).ok_or_else(|| {
            DpError::Internal(format!("missing memo for cluster {cluster}"))
        })?)
    };
    let entry = &set[entry_idx];
    match &entry.choice {
        Choice::BaseVisit(x) => {
            covered.insert(*x);
        }
        Choice::BasePay => {}
        Choice::SoloChild { child, entry } => {
            reconstruct(ctx, *child, &Vec::new(), *entry, edges, covered)?;
        }
        Choice::Assembled { g_points, children } => {
            for &(a, b) in g_points {
                covered.insert(a.point);
                covered.insert(b.point);
                if a.point != b.point {
                    edges.push((a.point, b.point));
                }
            }
            for (child, rt, idx) in children {
                reconstruct(ctx, *child, rt, *idx, edges, covered)?;
            }
        }
    }
    Ok(())
}

/// All finite-value interfaces for `(cluster, R)`, memoized.
fn entries_for(ctx: &Ctx<'_>, cluster: ClusterId, r: Vec<PgNode>) -> Result<EntrySet, DpError> {
    if let Some(set) = ctx.memo.borrow().get(&(cluster, r.clone())) {
        return Ok(Rc::clone(set));
    }
    let c = ctx.decomp.cluster(cluster);
    let set = if c.height == 0 {
        base_entries(ctx, cluster, &r)
    } else {
        assemble_entries(ctx, cluster, &r)?
    };
    let set = Rc::new(set);
    ctx.memo
        .borrow_mut()
        .insert((cluster, r), Rc::clone(&set));
    Ok(set)
}

fn base_entries(ctx: &Ctx<'_>, cluster: ClusterId, r: &[PgNode]) -> Vec<Entry> {
    let c = ctx.decomp.cluster(cluster);
    let x = c.points[0];
    let variant = ctx.inst.variant();
    let mut out = Vec::new();
    if r.is_empty() {
        let pay = ctx.penalty_of(cluster);
        if pay <= 0.0 {
            out.push(Entry {
                interface: InterfaceSpec::empty(variant),
                value: pay,
                choice: Choice::BasePay,
            });
        } else {
            out.push(Entry {
                interface: InterfaceSpec::empty(variant),
                value: 0.0,
                choice: Choice::BaseVisit(x),
            });
        }
    } else if r.len() == 1 && r[0] == PgNode::new(x, 0) {
        let interface = match variant {
            Variant::Pctsp => InterfaceSpec::Pairs(vec![(0, 0)]),
            Variant::Pcstp => InterfaceSpec::Parts(vec![vec![0]]),
        };
        out.push(Entry {
            interface,
            value: 0.0,
            choice: Choice::BaseVisit(x),
        });
    }
    out
}

/// Per-pair multiplicity states of the interface-graph enumeration:
/// `(forward, backward)` copies for tours, plain copies for trees.
const TOUR_STATES: [(u8, u8); 5] = [(1, 0), (0, 1), (2, 0), (0, 2), (1, 1)];

fn assemble_entries(
    ctx: &Ctx<'_>,
    cluster: ClusterId,
    r: &[PgNode],
) -> Result<Vec<Entry>, DpError> {
    let c = ctx.decomp.cluster(cluster);
    let pool = ctx.pool_of(cluster);
    let variant = ctx.inst.variant();
    let space = ctx.inst.space();
    let nchild = c.children.len();

    // Indices of R in the pool; R must be a subset of this cluster's
    // portal set and therefore of the pool.
    let mut r_pool: Vec<usize> = Vec::with_capacity(r.len());
    for n in r {
        match pool.nodes.iter().position(|p| p == n) {
            Some(i) => r_pool.push(i),
            None => return Ok(Vec::new()),
        }
    }

    // Hand-down: parent portals owned by a child are forced into that
    // child's used set, which is what keeps penalty accounting exact.
    let mut handed: Vec<Vec<usize>> = vec![Vec::new(); nchild];
    for &pi in &r_pool {
        if let Some(t) = pool.owner[pi] {
            handed[t].push(pi);
        }
    }

    // Allowed interface pairs: everything except within one child.
    let mut allowed: Vec<(usize, usize, f64)> = Vec::new();
    for i in 0..pool.nodes.len() {
        for j in (i + 1)..pool.nodes.len() {
            if let (Some(a), Some(b)) = (pool.owner[i], pool.owner[j]) {
                if a == b {
                    continue;
                }
            }
            let d = space.dist(pool.nodes[i].point, pool.nodes[j].point);
            allowed.push((i, j, d));
        }
    }
    allowed.sort_by(|a, b| {
        a.2.partial_cmp(&b.2)
            .unwrap()
            .then(a.0.cmp(&b.0))
            .then(a.1.cmp(&b.1))
    });

    let mut best: BTreeMap<InterfaceSpec, (f64, Choice)> = BTreeMap::new();

    // The solo-child branch for the standalone entry.
    if r.is_empty() {
        for (t, &child) in c.children.iter().enumerate() {
            let _ = t;
            let child_entries = entries_for(ctx, child, Vec::new())?;
            let want = InterfaceSpec::empty(variant);
            for (idx, e) in child_entries.iter().enumerate() {
                if e.interface != want {
                    continue;
                }
                let rest: f64 = c
                    .children
                    .iter()
                    .filter(|&&o| o != child)
                    .map(|&o| ctx.penalty_of(o))
                    .sum();
                let value = candidate_value(0.0, &[e.value], &[rest], &[], false);
                ctx.bump()?;
                update_best(&mut best, InterfaceSpec::empty(variant), value, || {
                    Choice::SoloChild { child, entry: idx }
                });
            }
        }
    }

    // DFS over multiplicity assignments to the allowed pairs.
    struct SearchState {
        mult: Vec<(u8, u8)>,
        total_edges: usize,
        degree: Vec<u8>,
        weight: f64,
    }
    let mut st = SearchState {
        mult: vec![(0, 0); allowed.len()],
        total_edges: 0,
        degree: vec![0; pool.nodes.len()],
        weight: 0.0,
    };

    // Evaluates the current interface graph.
    fn eval(
        ctx: &Ctx<'_>,
        cluster: ClusterId,
        r: &[PgNode],
        r_pool: &[usize],
        pool: &Pool,
        handed: &[Vec<usize>],
        allowed: &[(usize, usize, f64)],
        st: &SearchState,
        best: &mut BTreeMap<InterfaceSpec, (f64, Choice)>,
    ) -> Result<(), DpError> {
        let c = ctx.decomp.cluster(cluster);
        let variant = ctx.inst.variant();
        let nchild = c.children.len();

        // Used set per child.
        let mut used: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); nchild];
        for (t, h) in handed.iter().enumerate() {
            used[t].extend(h.iter().copied());
        }
        for (k, &(i, j, _)) in allowed.iter().enumerate() {
            let (f, b) = st.mult[k];
            if f + b == 0 {
                continue;
            }
            for idx in [i, j] {
                if let Some(t) = pool.owner[idx] {
                    used[t].insert(idx);
                }
            }
        }
        for u in &used {
            if u.len() > ctx.params.r {
                return Ok(());
            }
        }

        // Base cost: interface weight plus penalties of unattached
        // children.
        let mut base = st.weight;
        let mut unattached: Vec<f64> = Vec::new();
        for (t, &child) in c.children.iter().enumerate() {
            if used[t].is_empty() {
                let pen = ctx.penalty_of(child);
                if pen.is_infinite() {
                    return Ok(()); // a must-visit terminal cannot be skipped
                }
                unattached.push(pen);
                base += pen;
            }
        }
        if base > ctx.prune_above {
            return Ok(());
        }

        // Child entry sets.
        let mut attach: Vec<(usize, ClusterId, Vec<PgNode>, EntrySet)> = Vec::new();
        for (t, &child) in c.children.iter().enumerate() {
            if used[t].is_empty() {
                continue;
            }
            let rt: Vec<PgNode> = used[t].iter().map(|&i| pool.nodes[i]).collect();
            let set = entries_for(ctx, child, rt.clone())?;
            if set.is_empty() {
                return Ok(());
            }
            attach.push((t, child, rt, set));
        }

        // Node compaction for the consistency graph.
        let mut node_ids: Vec<usize> = r_pool.to_vec();
        for (_, _, rt, _) in &attach {
            for n in rt {
                let pi = pool.nodes.iter().position(|p| p == n).unwrap();
                if !node_ids.contains(&pi) {
                    node_ids.push(pi);
                }
            }
        }
        for (k, &(i, j, _)) in allowed.iter().enumerate() {
            let (f, b) = st.mult[k];
            if f + b == 0 {
                continue;
            }
            for idx in [i, j] {
                if !node_ids.contains(&idx) {
                    node_ids.push(idx);
                }
            }
        }
        let compact: BTreeMap<usize, usize> = node_ids
            .iter()
            .enumerate()
            .map(|(ci, &pi)| (pi, ci))
            .collect();
        let mut real_edges: Vec<(usize, usize)> = Vec::new();
        for (k, &(i, j, _)) in allowed.iter().enumerate() {
            let (f, b) = st.mult[k];
            if f + b == 0 {
                continue;
            }
            let (ci, cj) = (compact[&i], compact[&j]);
            for _ in 0..f {
                real_edges.push((ci, cj));
            }
            for _ in 0..b {
                real_edges.push((cj, ci));
            }
        }
        let g_points: Vec<(PgNode, PgNode)> = allowed
            .iter()
            .enumerate()
            .flat_map(|(k, &(i, j, _))| {
                let (f, b) = st.mult[k];
                core::iter::repeat((pool.nodes[i], pool.nodes[j])).take((f + b) as usize)
            })
            .collect();

        // Product over child entries, cheapest first.
        let mut pick = vec![0usize; attach.len()];
        let order: Vec<Vec<usize>> = attach
            .iter()
            .map(|(_, _, _, set)| {
                let mut idxs: Vec<usize> = (0..set.len()).collect();
                idxs.sort_by(|&a, &b| set[a].value.partial_cmp(&set[b].value).unwrap());
                idxs
            })
            .collect();

        fn product(
            ctx: &Ctx<'_>,
            depth: usize,
            base: f64,
            attach: &[(usize, ClusterId, Vec<PgNode>, EntrySet)],
            order: &[Vec<usize>],
            pick: &mut Vec<usize>,
            r_pool: &[usize],
            node_ids: &[usize],
            compact: &BTreeMap<usize, usize>,
            pool: &Pool,
            real_edges: &[(usize, usize)],
            g_points: &[(PgNode, PgNode)],
            variant: Variant,
            best: &mut BTreeMap<InterfaceSpec, (f64, Choice)>,
        ) -> Result<(), DpError> {
            if base > ctx.prune_above {
                return Ok(());
            }
            if depth == attach.len() {
                ctx.bump()?;
                finish_candidate(
                    ctx, base, attach, pick, r_pool, node_ids, compact, pool, real_edges,
                    g_points, variant, best,
                )?;
                return Ok(());
            }
            let (_, _, _, set) = &attach[depth];
            for &ei in &order[depth] {
                let v = set[ei].value;
                if base + v > ctx.prune_above {
                    break; // sorted ascending; the rest are worse
                }
                pick[depth] = ei;
                product(
                    ctx,
                    depth + 1,
                    base + v,
                    attach,
                    order,
                    pick,
                    r_pool,
                    node_ids,
                    compact,
                    pool,
                    real_edges,
                    g_points,
                    variant,
                    best,
                )?;
            }
            Ok(())
        }

        product(
            ctx,
            0,
            base,
            &attach,
            &order,
            &mut pick,
            r_pool,
            &node_ids,
            &compact,
            pool,
            &real_edges,
            &g_points,
            variant,
            best,
        )
    }

    // Assemble one fully chosen candidate: build virtual edges, derive the
    // parent interfaces it can serve, and record values.
    #[allow(clippy::too_many_arguments)]
    fn finish_candidate(
        ctx: &Ctx<'_>,
        total: f64,
        attach: &[(usize, ClusterId, Vec<PgNode>, EntrySet)],
        pick: &[usize],
        r_pool: &[usize],
        node_ids: &[usize],
        compact: &BTreeMap<usize, usize>,
        pool: &Pool,
        real_edges: &[(usize, usize)],
        g_points: &[(PgNode, PgNode)],
        variant: Variant,
        best: &mut BTreeMap<InterfaceSpec, (f64, Choice)>,
    ) -> Result<(), DpError> {
        let n = node_ids.len();
        let r_compact: Vec<usize> = r_pool.iter().map(|pi| compact[pi]).collect();
        let mut child_groups: Vec<Vec<usize>> = Vec::new();
        let mut virtual_edges: Vec<(usize, usize)> = Vec::new();
        for (ai, (_, _, rt, set)) in attach.iter().enumerate() {
            let entry = &set[pick[ai]];
            let rt_compact: Vec<usize> = rt
                .iter()
                .map(|nd| compact[&pool.nodes.iter().position(|p| p == nd).unwrap()])
                .collect();
            child_groups.push(rt_compact.clone());
            match &entry.interface {
                InterfaceSpec::Pairs(ps) => {
                    for &(a, b) in ps {
                        if a != b {
                            virtual_edges.push((rt_compact[a as usize], rt_compact[b as usize]));
                        }
                    }
                }
                InterfaceSpec::Parts(parts) => {
                    for part in parts {
                        for w in part.windows(2) {
                            virtual_edges
                                .push((rt_compact[w[0] as usize], rt_compact[w[1] as usize]));
                        }
                    }
                }
            }
        }
        let g = InterfaceGraph {
            node_count: n,
            r_nodes: r_compact.clone(),
            child_groups,
            real_edges: real_edges.to_vec(),
            virtual_edges,
        };
        let make_choice = || Choice::Assembled {
            g_points: g_points.to_vec(),
            children: attach
                .iter()
                .zip(pick.iter())
                .map(|((_, child, rt, _), &ei)| (*child, rt.clone(), ei))
                .collect(),
        };

        if r_compact.is_empty() {
            let spec = InterfaceSpec::empty(variant);
            if check_consistency(&g, &spec, variant) {
                update_best(best, spec, total, make_choice);
            }
            return Ok(());
        }

        match variant {
            Variant::Pcstp => {
                // The induced partition is unique; the checker enforces the
                // forest condition.
                let mut dsu = Dsu::new(n);
                for &(a, b) in g.real_edges.iter().chain(g.virtual_edges.iter()) {
                    dsu.union(a, b);
                }
                let mut groups: BTreeMap<usize, Vec<u8>> = BTreeMap::new();
                for (i, &rc) in r_compact.iter().enumerate() {
                    groups.entry(dsu.find(rc)).or_default().push(i as u8);
                }
                let parts: Vec<Vec<u8>> = groups.into_values().collect();
                if parts.len() > ctx.params.max_pairs {
                    return Ok(());
                }
                let spec = InterfaceSpec::Parts(parts).canonical();
                if check_consistency(&g, &spec, variant) {
                    update_best(best, spec, total, make_choice);
                }
            }
            Variant::Pctsp => {
                // Candidate pair sets come from the directed imbalance of
                // the parent portals; balanced portals close on themselves.
                let mut in_deg = vec![0i32; n];
                let mut out_deg = vec![0i32; n];
                for &(a, b) in g.real_edges.iter().chain(g.virtual_edges.iter()) {
                    out_deg[a] += 1;
                    in_deg[b] += 1;
                }
                for v in 0..n {
                    if r_compact.contains(&v) {
                        continue;
                    }
                    if in_deg[v] != out_deg[v] {
                        return Ok(()); // trails may only end at parent portals
                    }
                }
                let mut starts: Vec<u8> = Vec::new();
                let mut ends: Vec<u8> = Vec::new();
                for (i, &rc) in r_compact.iter().enumerate() {
                    let diff = out_deg[rc] - in_deg[rc];
                    for _ in 0..diff.max(0) {
                        starts.push(i as u8);
                    }
                    for _ in 0..(-diff).max(0) {
                        ends.push(i as u8);
                    }
                }
                if starts.len() != ends.len() {
                    return Ok(());
                }
                let mut specs: Vec<Vec<(u8, u8)>> = Vec::new();
                enumerate_matchings(&starts, &ends, &mut Vec::new(), &mut specs);
                for open_pairs in specs {
                    let mut pairs = open_pairs.clone();
                    let covered: BTreeSet<u8> =
                        pairs.iter().flat_map(|&(a, b)| [a, b]).collect();
                    for i in 0..r_compact.len() {
                        if !covered.contains(&(i as u8)) {
                            pairs.push((i as u8, i as u8));
                        }
                    }
                    if pairs.len() > ctx.params.max_pairs {
                        continue;
                    }
                    let spec = InterfaceSpec::Pairs(pairs).canonical();
                    // Distinctness: duplicate open pairs collapse under
                    // canonicalization, which would misrepresent the
                    // multiset; skip those.
                    let InterfaceSpec::Pairs(ref cp) = spec else {
                        unreachable!()
                    };
                    if cp.len() != open_pairs.len()
                        + r_compact
                            .len()
                            .saturating_sub(covered.len())
                    {
                        continue;
                    }
                    if check_consistency(&g, &spec, variant) {
                        update_best(best, spec, total, make_choice);
                    }
                }
            }
        }
        Ok(())
    }

    fn enumerate_matchings(
        starts: &[u8],
        ends: &[u8],
        acc: &mut Vec<(u8, u8)>,
        out: &mut Vec<Vec<(u8, u8)>>,
    ) {
        if starts.is_empty() {
            out.push(acc.clone());
            return;
        }
        let s = starts[0];
        let rest: Vec<u8> = starts[1..].to_vec();
        let mut seen = BTreeSet::new();
        for (i, &e) in ends.iter().enumerate() {
            if !seen.insert(e) {
                continue;
            }
            let mut rest_ends = ends.to_vec();
            rest_ends.remove(i);
            acc.push((s, e));
            enumerate_matchings(&rest, &rest_ends, acc, out);
            acc.pop();
        }
    }

    fn update_best(
        best: &mut BTreeMap<InterfaceSpec, (f64, Choice)>,
        spec: InterfaceSpec,
        value: f64,
        choice: impl FnOnce() -> Choice,
    ) {
        match best.get(&spec) {
            Some(&(v, _)) if value >= v - 1e-12 => {}
            _ => {
                best.insert(spec, (value, choice()));
            }
        }
    }

    // Depth-first over the allowed pairs; every prefix is itself a
    // candidate interface graph.
    fn dfs(
        ctx: &Ctx<'_>,
        cluster: ClusterId,
        r: &[PgNode],
        r_pool: &[usize],
        pool: &Pool,
        handed: &[Vec<usize>],
        allowed: &[(usize, usize, f64)],
        st: &mut SearchState,
        from: usize,
        best: &mut BTreeMap<InterfaceSpec, (f64, Choice)>,
        variant: Variant,
    ) -> Result<(), DpError> {
        eval(ctx, cluster, r, r_pool, pool, handed, allowed, st, best)?;
        for k in from..allowed.len() {
            let (i, j, d) = allowed[k];
            if st.total_edges >= ctx.params.max_interface_edges {
                break;
            }
            if st.weight + d > ctx.prune_above {
                break; // pairs are sorted by weight
            }
            let states: &[(u8, u8)] = match variant {
                Variant::Pctsp => &TOUR_STATES,
                Variant::Pcstp => &[(1, 0)],
            };
            for &(f, b) in states {
                let copies = (f + b) as usize;
                if st.total_edges + copies > ctx.params.max_interface_edges {
                    continue;
                }
                if st.degree[i] as usize + copies > ctx.params.max_node_degree
                    || st.degree[j] as usize + copies > ctx.params.max_node_degree
                {
                    continue;
                }
                if st.weight + d * copies as f64 > ctx.prune_above {
                    continue;
                }
                st.mult[k] = (f, b);
                st.total_edges += copies;
                st.degree[i] += copies as u8;
                st.degree[j] += copies as u8;
                st.weight += d * copies as f64;
                dfs(
                    ctx, cluster, r, r_pool, pool, handed, allowed, st, k + 1, best, variant,
                )?;
                st.mult[k] = (0, 0);
                st.total_edges -= copies;
                st.degree[i] -= copies as u8;
                st.degree[j] -= copies as u8;
                st.weight -= d * copies as f64;
            }
        }
        Ok(())
    }

    dfs(
        ctx, cluster, r, &r_pool, &pool, &handed, &allowed, &mut st, 0, &mut best, variant,
    )?;

    let mut entries: Vec<Entry> = best
        .into_iter()
        .filter(|(_, (v, _))| v.is_finite())
        .map(|(interface, (value, choice))| Entry {
            interface,
            value,
            choice,
        })
        .collect();
    entries.sort_by(|a, b| {
        a.value
            .partial_cmp(&b.value)
            .unwrap()
            .then_with(|| a.interface.cmp(&b.interface))
    });
    Ok(entries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hierdecomp::sample_decomposition;
    use crate::instance::Variant;
    use crate::metric::{HierarchicalNets, MetricSpace, NetTree};
    use crate::oracle;
    use alloc::sync::Arc;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn consistency_empty_graph() {
        let g = InterfaceGraph::default();
        assert!(check_consistency(
            &g,
            &InterfaceSpec::Pairs(vec![]),
            Variant::Pctsp
        ));
        assert!(check_consistency(
            &g,
            &InterfaceSpec::Parts(vec![]),
            Variant::Pcstp
        ));
    }

    #[test]
    fn consistency_tree_partition() {
        // R = {p, q}, one edge pq: the partition {{p,q}} is consistent and
        // {{p},{q}} is not.
        let g = InterfaceGraph {
            node_count: 2,
            r_nodes: vec![0, 1],
            child_groups: vec![],
            real_edges: vec![(0, 1)],
            virtual_edges: vec![],
        };
        assert!(check_consistency(
            &g,
            &InterfaceSpec::Parts(vec![vec![0, 1]]),
            Variant::Pcstp
        ));
        assert!(!check_consistency(
            &g,
            &InterfaceSpec::Parts(vec![vec![0], vec![1]]),
            Variant::Pcstp
        ));
    }

    #[test]
    fn consistency_tour_cycle_through_portal() {
        // R = {p}, directed 2-cycle through p: consistent with {(p,p)}.
        let g = InterfaceGraph {
            node_count: 2,
            r_nodes: vec![0],
            child_groups: vec![vec![1]],
            real_edges: vec![(0, 1), (1, 0)],
            virtual_edges: vec![],
        };
        assert!(check_consistency(
            &g,
            &InterfaceSpec::Pairs(vec![(0, 0)]),
            Variant::Pctsp
        ));
    }

    #[test]
    fn consistency_tour_cross_pairing_rejected() {
        // Real edges p1 -> q2 and p2 -> q1 cannot realize the pairs
        // (p1, q1), (p2, q2) even though degrees balance.
        let g = InterfaceGraph {
            node_count: 4,
            r_nodes: vec![0, 1, 2, 3],
            child_groups: vec![],
            real_edges: vec![(0, 3), (2, 1)],
            virtual_edges: vec![],
        };
        assert!(!check_consistency(
            &g,
            &InterfaceSpec::Pairs(vec![(0, 1), (2, 3)]),
            Variant::Pctsp
        ));
        assert!(check_consistency(
            &g,
            &InterfaceSpec::Pairs(vec![(0, 3), (2, 1)]),
            Variant::Pctsp
        ));
    }

    #[test]
    fn candidate_value_formula() {
        // All children unattached, no edges: sum of their penalties
        // against the best solo candidate.
        let v = candidate_value(0.0, &[], &[3.0, 4.0], &[(1.0, 5.0)], true);
        assert!((v - 6.0).abs() < 1e-12);
        // Leaf-like parent with one attached child passes the value
        // through.
        let v = candidate_value(0.0, &[2.5], &[], &[], false);
        assert!((v - 2.5).abs() < 1e-12);
    }

    fn build_instance(
        xs: &[(f64, f64)],
        pens: &[f64],
        variant: Variant,
        seed: u64,
        theta: f64,
    ) -> (PcxInstance, crate::hierdecomp::Decomposition) {
        let coords: Vec<Vec<f64>> = xs.iter().map(|&(a, b)| vec![a, b]).collect();
        let space = Arc::new(MetricSpace::from_euclidean(coords, 2).unwrap());
        let nets = Arc::new(HierarchicalNets::build(&space, 4.0, 1, false).unwrap());
        let tree = Arc::new(NetTree::build(&space, &nets));
        let inst = PcxInstance::new(
            variant,
            Arc::clone(&space),
            Arc::clone(&nets),
            Arc::clone(&tree),
            pens.iter()
                .enumerate()
                .map(|(i, &p)| (i, Penalty::Finite(p))),
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = sample_decomposition(&space, &nets, &tree, theta, 2.0, &mut rng);
        (inst, d)
    }

    #[test]
    fn single_terminal_costs_nothing() {
        let (inst, d) = build_instance(&[(0.0, 0.0)], &[7.0], Variant::Pctsp, 1, 1e-9);
        let out = dp_solve(&inst, &d, &DpParams::default(), None).unwrap();
        assert!(out.value.abs() < 1e-12);
        assert_eq!(out.solution, Solution::self_loop(0));
    }

    #[test]
    fn two_terminals_pay_or_connect() {
        let (inst, d) = build_instance(
            &[(0.0, 0.0), (100.0, 0.0)],
            &[1.0, 1.0],
            Variant::Pctsp,
            2,
            1e-9,
        );
        let out = dp_solve(&inst, &d, &DpParams::default(), None).unwrap();
        assert!(out.value <= 2.0 + TOL, "value {}", out.value);
        assert!(inst.validate(&out.solution).is_ok());
    }

    #[test]
    fn value_is_exact_cost_of_reconstruction() {
        for variant in [Variant::Pctsp, Variant::Pcstp] {
            let (inst, d) = build_instance(
                &[(0.0, 0.0), (3.0, 1.0), (7.0, 2.0), (1.0, 6.0)],
                &[2.0, 5.0, 3.0, 4.0],
                variant,
                3,
                1e-9,
            );
            let out = dp_solve(&inst, &d, &DpParams::default(), None).unwrap();
            assert!((inst.cost(&out.solution) - out.value).abs() < 1e-12);
            assert!(out.stats.internal_gap >= -TOL);
        }
    }

    #[test]
    fn matches_oracle_on_small_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        use rand::Rng;
        for trial in 0..12 {
            let n = rng.gen_range(2..6usize);
            let xs: Vec<(f64, f64)> = (0..n)
                .map(|_| (rng.gen_range(0.0..30.0), rng.gen_range(0.0..30.0)))
                .collect();
            let pens: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..20.0)).collect();
            for variant in [Variant::Pctsp, Variant::Pcstp] {
                let (inst, d) = build_instance(&xs, &pens, variant, trial, 1e-9);
                let params = DpParams {
                    r: 8,
                    max_pairs: 6,
                    max_interface_edges: 10,
                    max_node_degree: 6,
                    max_candidates: 40_000_000,
                    ..DpParams::default()
                };
                let out = dp_solve(&inst, &d, &params, None).unwrap();
                let opt = oracle::exact(&inst).unwrap().cost;
                assert!(
                    out.value >= opt - TOL,
                    "dp beat the oracle: {} vs {opt}",
                    out.value
                );
                assert!(
                    out.value <= opt + TOL,
                    "trial {trial} {variant:?}: dp {} vs opt {opt}",
                    out.value
                );
            }
        }
    }

    #[test]
    fn enlarging_r_never_hurts() {
        let (inst, d) = build_instance(
            &[(0.0, 0.0), (2.0, 0.5), (5.0, 3.0), (9.0, 1.0)],
            &[4.0, 6.0, 3.0, 5.0],
            Variant::Pcstp,
            17,
            1e-9,
        );
        let mut prev = f64::INFINITY;
        for r in [1usize, 2, 4, 6] {
            let params = DpParams {
                r,
                max_candidates: 20_000_000,
                ..DpParams::default()
            };
            match dp_solve(&inst, &d, &params, None) {
                Ok(out) => {
                    assert!(out.value <= prev + TOL, "value rose when r grew");
                    prev = out.value;
                }
                Err(DpError::NoFeasible) => {}
                Err(e) => panic!("unexpected error {e}"),
            }
        }
    }

    #[test]
    fn budget_error_reported() {
        let (inst, d) = build_instance(
            &[(0.0, 0.0), (3.0, 1.0), (7.0, 2.0), (1.0, 6.0), (4.0, 4.0)],
            &[2.0, 5.0, 3.0, 4.0, 6.0],
            Variant::Pctsp,
            5,
            1e-9,
        );
        let params = DpParams {
            max_candidates: 10,
            ..DpParams::default()
        };
        assert!(matches!(
            dp_solve(&inst, &d, &params, None),
            Err(DpError::Budget { .. })
        ));
    }
}
