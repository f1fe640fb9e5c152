//! Randomized hierarchical decompositions, portals, and the transforms
//! that turn arbitrary solutions into portal-respecting, economical, and
//! light ones.
//!
//! A decomposition fixes, per height, a permutation of the net points and
//! a truncated-exponential radius per net point. Points join the first net
//! ball that contains them; height-0 clusters are singletons so the DP has
//! a clean base case. Portals of a height-`i` cluster are the net-tree
//! ancestors of its points at granularity `theta * s^i`.
//!
//! The transforms work on multigraphs over net-tree nodes where every edge
//! carries the clusters its endpoints act for; portal-respecting edges
//! join portals of sibling clusters (same parent, possibly the same
//! cluster) or of a child and its parent.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec::Vec;
use alloc::{format, vec};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::instance::Solution;
use crate::metric::{HierarchicalNets, MetricSpace, NetTree, PointId};
use crate::TOL;

pub type ClusterId = usize;

/// A node `(point, height)` of the net tree.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct PgNode {
    pub point: PointId,
    pub height: usize,
}

impl PgNode {
    pub fn new(point: PointId, height: usize) -> Self {
        PgNode { point, height }
    }
}

#[derive(Debug, Clone)]
pub struct Cluster {
    pub id: ClusterId,
    pub height: usize,
    pub center: PointId,
    /// Sorted point set.
    pub points: Vec<PointId>,
    pub parent: Option<ClusterId>,
    /// Children ordered by center id.
    pub children: Vec<ClusterId>,
    /// Net height of this cluster's portals.
    pub portal_height: usize,
    /// Sorted, deduplicated portal set.
    pub portals: Vec<PgNode>,
}

/// Per-height sampling record; sufficient to rebuild the decomposition.
#[derive(Debug, Clone)]
pub struct HeightSample {
    pub height: usize,
    /// Net points of this height in assignment priority order.
    pub order: Vec<PointId>,
    /// Radius per entry of `order`.
    pub radii: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Decomposition {
    s: f64,
    theta: f64,
    top: usize,
    clusters: Vec<Cluster>,
    root: ClusterId,
    by_height: Vec<Vec<ClusterId>>,
    /// `assign[h][p]` = id of the height-`h` cluster containing `p`.
    assign: Vec<Vec<ClusterId>>,
    pub samples: Vec<HeightSample>,
    /// Points that no sampled ball contained and that were assigned to the
    /// nearest net point instead.
    pub fallback_assignments: usize,
}

/// Draw from the truncated exponential with density proportional to
/// `exp(-t ln(chi) / scale)` on `[0, scale]`.
pub fn sample_truncated_exp(rng: &mut ChaCha8Rng, scale: f64, chi: f64) -> f64 {
    let u: f64 = rng.gen_range(0.0..1.0);
    if chi <= 1.0 + 1e-12 {
        return u * scale;
    }
    let ln_chi = libm::log(chi);
    -(scale / ln_chi) * libm::log(1.0 - u * (chi - 1.0) / chi)
}

/// Sample orderings and radii for every height and build the cluster tree.
pub fn sample_decomposition(
    space: &MetricSpace,
    nets: &HierarchicalNets,
    tree: &NetTree,
    theta: f64,
    chi_base: f64,
    rng: &mut ChaCha8Rng,
) -> Decomposition {
    let top = nets.top_height();
    let chi = libm::pow(chi_base, space.k() as f64).max(1.0);
    let mut samples = Vec::new();
    for h in (1..top).rev() {
        let mut order: Vec<PointId> = nets.level(h).to_vec();
        order.shuffle(rng);
        let scale = nets.scale(h);
        let radii: Vec<f64> = order
            .iter()
            .map(|_| scale + sample_truncated_exp(rng, scale, chi))
            .collect();
        samples.push(HeightSample {
            height: h,
            order,
            radii,
        });
    }
    Decomposition::from_samples(space, nets, tree, theta, samples)
}

impl Decomposition {
    /// Deterministic rebuild from sampling records; the replay entry point.
    pub fn from_samples(
        space: &MetricSpace,
        nets: &HierarchicalNets,
        tree: &NetTree,
        theta: f64,
        samples: Vec<HeightSample>,
    ) -> Decomposition {
        let top = nets.top_height();
        let n = space.len();
        let mut fallback = 0usize;

        // Global class per height: class[h][p] = owning net point of p in
        // the height-h partition (height `top` is the single root class;
        // height 0 is the point itself).
        let mut class: Vec<Vec<PointId>> = vec![Vec::new(); top + 1];
        class[top] = vec![nets.root(); n];
        for h in 1..top {
            let sample = samples
                .iter()
                .find(|s| s.height == h)
                .expect("sample for every height in 1..top");
            let mut owner = vec![usize::MAX; n];
            for p in 0..n {
                for (idx, &u) in sample.order.iter().enumerate() {
                    if space.dist(p, u) <= sample.radii[idx] + TOL {
                        owner[p] = u;
                        break;
                    }
                }
                if owner[p] == usize::MAX {
                    owner[p] = space
                        .nearest_of(p, nets.level(h))
                        .expect("net level nonempty");
                    fallback += 1;
                }
            }
            class[h] = owner;
        }
        class[0] = (0..n).collect();

        // Build clusters top-down; children split their parent's points by
        // the class of the child height.
        let mut clusters: Vec<Cluster> = Vec::new();
        let mut by_height: Vec<Vec<ClusterId>> = vec![Vec::new(); top + 1];
        let mut assign: Vec<Vec<ClusterId>> = vec![vec![usize::MAX; n]; top + 1];

        let root_id = 0;
        clusters.push(Cluster {
            id: root_id,
            height: top,
            center: nets.root(),
            points: (0..n).collect(),
            parent: None,
            children: Vec::new(),
            portal_height: portal_height(nets.s(), theta, top),
            portals: Vec::new(),
        });
        by_height[top].push(root_id);
        for p in 0..n {
            assign[top][p] = root_id;
        }

        for h in (0..top).rev() {
            let parent_ids = by_height[h + 1].clone();
            for pid in parent_ids {
                let parent_points = clusters[pid].points.clone();
                let mut groups: BTreeMap<PointId, Vec<PointId>> = BTreeMap::new();
                for &p in &parent_points {
                    let c = if h == 0 { p } else { class[h][p] };
                    groups.entry(c).or_default().push(p);
                }
                for (center, pts) in groups {
                    let id = clusters.len();
                    clusters.push(Cluster {
                        id,
                        height: h,
                        center,
                        points: pts.clone(),
                        parent: Some(pid),
                        children: Vec::new(),
                        portal_height: portal_height(nets.s(), theta, h),
                        portals: Vec::new(),
                    });
                    clusters[pid].children.push(id);
                    by_height[h].push(id);
                    for p in pts {
                        assign[h][p] = id;
                    }
                }
            }
        }

        // Portals: ancestors of the cluster's points at the portal height.
        for c in clusters.iter_mut() {
            let j = c.portal_height;
            let set: BTreeSet<PgNode> = c
                .points
                .iter()
                .map(|&w| PgNode::new(tree.anc(w, j as i64), j))
                .collect();
            c.portals = set.into_iter().collect();
        }

        Decomposition {
            s: nets.s(),
            theta,
            top,
            clusters,
            root: root_id,
            by_height,
            assign,
            samples,
            fallback_assignments: fallback,
        }
    }

    pub fn top_height(&self) -> usize {
        self.top
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    pub fn s(&self) -> f64 {
        self.s
    }

    pub fn root(&self) -> ClusterId {
        self.root
    }

    pub fn cluster(&self, id: ClusterId) -> &Cluster {
        &self.clusters[id]
    }

    pub fn clusters(&self) -> &[Cluster] {
        &self.clusters
    }

    pub fn at_height(&self, h: usize) -> &[ClusterId] {
        &self.by_height[h]
    }

    /// Height-`h` cluster containing `p`.
    pub fn cluster_of(&self, h: usize, p: PointId) -> ClusterId {
        self.assign[h][p]
    }

    /// A pair is cut at height `i` exactly when its height-`i` clusters
    /// differ.
    pub fn is_cut_at(&self, i: usize, x: PointId, y: PointId) -> bool {
        self.cluster_of(i, x) != self.cluster_of(i, y)
    }

    /// Largest height at which the pair is cut; `None` when `x == y`.
    pub fn top_cut_height(&self, x: PointId, y: PointId) -> Option<usize> {
        if x == y {
            return None;
        }
        // Height-0 clusters are singletons, so distinct points are cut at 0.
        let mut h = 0;
        while h < self.top && self.is_cut_at(h + 1, x, y) {
            h += 1;
        }
        Some(h)
    }

    pub fn is_descendant(&self, d: ClusterId, anc: ClusterId) -> bool {
        let mut cur = d;
        loop {
            if cur == anc {
                return true;
            }
            match self.clusters[cur].parent {
                Some(p) => cur = p,
                None => return false,
            }
        }
    }

    pub fn has_portal(&self, c: ClusterId, n: PgNode) -> bool {
        self.clusters[c].portals.binary_search(&n).is_ok()
    }
}

/// Portal net-height of a height-`h` cluster: `s^j <= theta * s^h < s^{j+1}`,
/// clamped into `[0, h]`.
fn portal_height(s: f64, theta: f64, h: usize) -> usize {
    let shift = libm::floor(libm::log(theta) / libm::log(s)) as i64;
    let j = h as i64 + shift;
    j.clamp(0, h as i64) as usize
}

/// An edge of a portal multigraph; each endpoint acts as a portal of the
/// recorded cluster.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct PgEdge {
    pub a: PgNode,
    pub ca: ClusterId,
    pub b: PgNode,
    pub cb: ClusterId,
}

impl PgEdge {
    fn normalized(self) -> Self {
        if (self.a, self.ca) <= (self.b, self.cb) {
            self
        } else {
            PgEdge {
                a: self.b,
                ca: self.cb,
                b: self.a,
                cb: self.ca,
            }
        }
    }
}

/// Multigraph over net-tree nodes with per-edge cluster attribution.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PortalGraph {
    pub edges: Vec<PgEdge>,
}

impl PortalGraph {
    pub fn from_edges(edges: impl IntoIterator<Item = PgEdge>) -> Self {
        let mut es: Vec<PgEdge> = edges.into_iter().map(PgEdge::normalized).collect();
        es.sort_unstable();
        PortalGraph { edges: es }
    }

    pub fn weight(&self, space: &MetricSpace) -> f64 {
        self.edges
            .iter()
            .map(|e| space.dist(e.a.point, e.b.point))
            .sum()
    }

    pub fn covered_points(&self) -> BTreeSet<PointId> {
        let mut s = BTreeSet::new();
        for e in &self.edges {
            s.insert(e.a.point);
            s.insert(e.b.point);
        }
        s
    }

    pub fn nodes(&self) -> BTreeSet<PgNode> {
        let mut s = BTreeSet::new();
        for e in &self.edges {
            s.insert(e.a);
            s.insert(e.b);
        }
        s
    }

    /// Point-level solution: node edges between distinct points become
    /// edges; points covered only by degenerate node edges keep a
    /// self-loop.
    pub fn induced_solution(&self) -> Solution {
        let mut edges: Vec<(PointId, PointId)> = Vec::new();
        let mut with_edge: BTreeSet<PointId> = BTreeSet::new();
        for e in &self.edges {
            if e.a.point != e.b.point {
                edges.push((e.a.point, e.b.point));
                with_edge.insert(e.a.point);
                with_edge.insert(e.b.point);
            }
        }
        for p in self.covered_points() {
            if !with_edge.contains(&p) {
                edges.push((p, p));
            }
        }
        Solution::from_edges(edges)
    }

    /// Node degrees counting self-loops twice.
    pub fn degrees(&self) -> BTreeMap<PgNode, usize> {
        let mut d = BTreeMap::new();
        for e in &self.edges {
            *d.entry(e.a).or_insert(0) += 1;
            *d.entry(e.b).or_insert(0) += 1;
        }
        d
    }

    pub fn is_eulerian(&self) -> bool {
        if self.edges.is_empty() {
            return true;
        }
        if self.degrees().values().any(|&d| d % 2 != 0) {
            return false;
        }
        let nodes: Vec<PgNode> = self.nodes().into_iter().collect();
        let index: BTreeMap<PgNode, usize> = nodes
            .iter()
            .enumerate()
            .map(|(i, &n)| (n, i))
            .collect();
        let mut dsu: Vec<usize> = (0..nodes.len()).collect();
        fn find(dsu: &mut Vec<usize>, x: usize) -> usize {
            if dsu[x] != x {
                let r = find(dsu, dsu[x]);
                dsu[x] = r;
            }
            dsu[x]
        }
        for e in &self.edges {
            let (x, y) = (index[&e.a], index[&e.b]);
            let (rx, ry) = (find(&mut dsu, x), find(&mut dsu, y));
            if rx != ry {
                dsu[rx] = ry;
            }
        }
        let r0 = find(&mut dsu, 0);
        (1..nodes.len()).all(|i| find(&mut dsu, i) == r0)
    }
}

/// Result of the portal-respecting transform: the graph plus, for every
/// activated portal, a witness edge of the source solution.
#[derive(Debug, Clone)]
pub struct PortalRespecting {
    pub graph: PortalGraph,
    pub witnesses: BTreeMap<(PgNode, ClusterId), (PointId, PointId)>,
}

/// Replace every edge by its ancestor path at the granularity of the top
/// cut height. Terminal visits are preserved exactly and parity is
/// untouched (paths substitute edges), so Eulerian inputs stay Eulerian.
pub fn make_portal_respecting(
    f: &Solution,
    decomp: &Decomposition,
    tree: &NetTree,
) -> PortalRespecting {
    let mut edges: Vec<PgEdge> = Vec::new();
    let mut witnesses: BTreeMap<(PgNode, ClusterId), (PointId, PointId)> = BTreeMap::new();
    for &(x, y) in f.edges() {
        if x == y {
            let c = decomp.cluster_of(0, x);
            let n = PgNode::new(x, 0);
            edges.push(PgEdge {
                a: n,
                ca: c,
                b: n,
                cb: c,
            });
            witnesses.entry((n, c)).or_insert((x, y));
            continue;
        }
        let i = decomp
            .top_cut_height(x, y)
            .expect("distinct points are cut somewhere");
        let hi_cluster_x = decomp.cluster_of(i, x);
        let j = decomp.cluster(hi_cluster_x).portal_height;
        let base = i - j; // cluster height acted for by the height-0 node
        let chain = |p: PointId| -> Vec<(PgNode, ClusterId)> {
            let mut v = Vec::with_capacity(j + 1);
            for l in 0..=j {
                let node = PgNode::new(tree.anc(p, l as i64), l);
                let cl = decomp.cluster_of(base + l, p);
                v.push((node, cl));
            }
            v
        };
        let cx = chain(x);
        let cy = chain(y);
        for w in cx.windows(2) {
            edges.push(PgEdge {
                a: w[0].0,
                ca: w[0].1,
                b: w[1].0,
                cb: w[1].1,
            });
        }
        for w in cy.windows(2) {
            edges.push(PgEdge {
                a: w[0].0,
                ca: w[0].1,
                b: w[1].0,
                cb: w[1].1,
            });
        }
        let (top_x, top_y) = (*cx.last().unwrap(), *cy.last().unwrap());
        edges.push(PgEdge {
            a: top_x.0,
            ca: top_x.1,
            b: top_y.0,
            cb: top_y.1,
        });
        for (n, c) in cx.into_iter().chain(cy.into_iter()) {
            witnesses.entry((n, c)).or_insert((x, y));
        }
    }
    PortalRespecting {
        graph: PortalGraph::from_edges(edges),
        witnesses,
    }
}

/// Active portals of cluster `c`: portals with an edge to a portal of the
/// parent or of a different sibling cluster. Intra-cluster edges and edges
/// to child clusters never activate.
pub fn active_portals(g: &PortalGraph, decomp: &Decomposition, c: ClusterId) -> BTreeSet<PgNode> {
    let mut act = BTreeSet::new();
    let my_parent = decomp.cluster(c).parent;
    let my_height = decomp.cluster(c).height;
    for e in &g.edges {
        for (n, cn, _m, cm) in [(e.a, e.ca, e.b, e.cb), (e.b, e.cb, e.a, e.ca)] {
            if cn != c || cm == c {
                continue;
            }
            let other = decomp.cluster(cm);
            let activates = match my_parent {
                Some(p) => cm == p || (other.height == my_height && other.parent == Some(p)),
                None => false,
            };
            if activates {
                act.insert(n);
            }
        }
    }
    act
}

/// Portal-respecting legality of every edge (endpoints are portals of
/// their clusters; clusters are siblings-or-same or child and parent).
pub fn check_portal_respecting(g: &PortalGraph, decomp: &Decomposition) -> Result<(), String> {
    for e in &g.edges {
        if !decomp.has_portal(e.ca, e.a) {
            return Err(format!("{:?} is not a portal of cluster {}", e.a, e.ca));
        }
        if !decomp.has_portal(e.cb, e.b) {
            return Err(format!("{:?} is not a portal of cluster {}", e.b, e.cb));
        }
        if e.ca == e.cb {
            continue;
        }
        let (ca, cb) = (decomp.cluster(e.ca), decomp.cluster(e.cb));
        let ok = if ca.height == cb.height {
            ca.parent == cb.parent && ca.parent.is_some()
        } else if ca.height + 1 == cb.height {
            ca.parent == Some(cb.id)
        } else if cb.height + 1 == ca.height {
            cb.parent == Some(ca.id)
        } else {
            false
        };
        if !ok {
            return Err(format!(
                "edge between cluster {} (h={}) and cluster {} (h={}) is not portal-respecting",
                e.ca, ca.height, e.cb, cb.height
            ));
        }
    }
    Ok(())
}

/// Full lightness check: portal-respecting, portal counts at most `m`,
/// active portal counts at most `r`.
pub fn is_light(
    g: &PortalGraph,
    decomp: &Decomposition,
    m: usize,
    r: usize,
) -> Result<(), String> {
    check_portal_respecting(g, decomp)?;
    for c in decomp.clusters() {
        if c.portals.len() > m {
            return Err(format!(
                "cluster {} has {} portals > m = {m}",
                c.id,
                c.portals.len()
            ));
        }
        let act = active_portals(g, decomp, c.id);
        if act.len() > r {
            return Err(format!(
                "cluster {} has {} active portals > r = {r}",
                c.id,
                act.len()
            ));
        }
    }
    Ok(())
}

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum TransformError {
    #[error("input multigraph is not Eulerian")]
    NotEulerian,
}

/// Oriented edge of a circuit.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Step {
    from: PgNode,
    cfrom: ClusterId,
    to: PgNode,
    cto: ClusterId,
}

impl Step {
    fn reversed(self) -> Step {
        Step {
            from: self.to,
            cfrom: self.cto,
            to: self.from,
            cto: self.cfrom,
        }
    }

    fn edge(self) -> PgEdge {
        PgEdge {
            a: self.from,
            ca: self.cfrom,
            b: self.to,
            cb: self.cto,
        }
    }
}

fn euler_circuit(g: &PortalGraph) -> Result<Vec<Step>, TransformError> {
    if !g.is_eulerian() {
        return Err(TransformError::NotEulerian);
    }
    if g.edges.is_empty() {
        return Ok(Vec::new());
    }
    let edges = &g.edges;
    let mut adj: BTreeMap<PgNode, Vec<usize>> = BTreeMap::new();
    for (i, e) in edges.iter().enumerate() {
        adj.entry(e.a).or_default().push(i);
        if e.a != e.b {
            adj.entry(e.b).or_default().push(i);
        }
    }
    let start = *adj.keys().next().unwrap();
    let mut used = vec![false; edges.len()];
    let mut cursors: BTreeMap<PgNode, usize> = BTreeMap::new();
    let mut trail: Vec<usize> = Vec::new();
    let mut node_stack: Vec<(PgNode, Option<usize>)> = vec![(start, None)];
    while let Some(&(v, via)) = node_stack.last() {
        let list = adj.get(&v).cloned().unwrap_or_default();
        let cursor = cursors.entry(v).or_insert(0);
        let mut advanced = false;
        while *cursor < list.len() {
            let ei = list[*cursor];
            *cursor += 1;
            if used[ei] {
                continue;
            }
            used[ei] = true;
            let e = edges[ei];
            let next = if e.a == v { e.b } else { e.a };
            node_stack.push((next, Some(ei)));
            advanced = true;
            break;
        }
        if !advanced {
            node_stack.pop();
            if let Some(ei) = via {
                trail.push(ei);
            }
        }
    }
    trail.reverse();
    // Orient the trail into steps.
    let mut steps = Vec::with_capacity(trail.len());
    let mut cur = start;
    for ei in trail {
        let e = edges[ei];
        let step = if e.a == cur {
            Step {
                from: e.a,
                cfrom: e.ca,
                to: e.b,
                cto: e.cb,
            }
        } else {
            Step {
                from: e.b,
                cfrom: e.cb,
                to: e.a,
                cto: e.ca,
            }
        };
        cur = step.to;
        steps.push(step);
    }
    Ok(steps)
}

/// Crossing of a cluster: entering boundary step index, leaving boundary
/// step index, and the ordered portal pair.
#[derive(Debug, Clone, Copy)]
struct Crossing {
    enter: usize,
    leave: usize,
    p: PgNode,
    q: PgNode,
}

fn crossings_of(circuit: &[Step], decomp: &Decomposition, c: ClusterId) -> Vec<Crossing> {
    let n = circuit.len();
    let inside = |cl: ClusterId| decomp.is_descendant(cl, c);
    let mut result = Vec::new();
    for s in 0..n {
        let st = circuit[s];
        if inside(st.cfrom) || !inside(st.cto) {
            continue;
        }
        let p = st.to;
        let mut t = (s + 1) % n;
        loop {
            let cur = circuit[t];
            if inside(cur.cfrom) && !inside(cur.cto) {
                result.push(Crossing {
                    enter: s,
                    leave: t,
                    p,
                    q: cur.from,
                });
                break;
            }
            t = (t + 1) % n;
            if t == s {
                break;
            }
        }
    }
    result
}

/// Make an Eulerian portal-respecting tour economical: every cluster is
/// crossed through each ordered portal pair at most once, and removable
/// scratches are shortcut. Length never increases.
pub fn make_economical(
    g: &PortalGraph,
    decomp: &Decomposition,
) -> Result<PortalGraph, TransformError> {
    let mut circuit = euler_circuit(g)?;
    loop {
        if circuit.len() <= 1 {
            break;
        }
        match find_double_crossing(&circuit, decomp) {
            Some((c, c1, c2)) => {
                circuit = rewrite_double_crossing(circuit, c, c1, c2);
            }
            None => match find_removable_scratch(&circuit, decomp) {
                Some(at) => {
                    circuit = shortcut_at(circuit, at);
                }
                None => break,
            },
        }
    }
    Ok(PortalGraph::from_edges(circuit.into_iter().map(Step::edge)))
}

fn find_double_crossing(
    circuit: &[Step],
    decomp: &Decomposition,
) -> Option<(ClusterId, Crossing, Crossing)> {
    for c in decomp.clusters() {
        let crossings = crossings_of(circuit, decomp, c.id);
        for i in 0..crossings.len() {
            for j in (i + 1)..crossings.len() {
                if crossings[i].p == crossings[j].p && crossings[i].q == crossings[j].q {
                    return Some((c.id, crossings[i], crossings[j]));
                }
            }
        }
    }
    None
}

/// Rotate so the first crossing opens the circuit, reverse the second
/// inside run and the span between them, then shortcut the scratch left at
/// `q`. One edge disappears per rewrite, which bounds the loop.
fn rewrite_double_crossing(
    circuit: Vec<Step>,
    _c: ClusterId,
    c1: Crossing,
    c2: Crossing,
) -> Vec<Step> {
    let n = circuit.len();
    let rot = |i: usize| (i + n - c1.enter) % n;
    let rotated: Vec<Step> = (0..n).map(|i| circuit[(i + c1.enter) % n]).collect();
    let (e1, l1) = (0usize, rot(c1.leave));
    let (s2, l2) = (rot(c2.enter), rot(c2.leave));
    debug_assert!(e1 < l1 && l1 <= s2 && s2 < l2);
    // rotated = [enter1 | P1 | leave1 .. enter2 | P2 | leave2 | E3]
    let p1 = &rotated[e1 + 1..l1];
    let e2 = &rotated[l1..=s2];
    let p2 = &rotated[s2 + 1..l2];
    let e3 = &rotated[l2..];

    let mut out: Vec<Step> = Vec::with_capacity(n - 1);
    out.push(rotated[e1]);
    out.extend_from_slice(p1);
    out.extend(p2.iter().rev().map(|s| s.reversed()));
    // rev(E2) runs p -> .. -> q; its last step enters q and the next step
    // (leave2) exits q: a scratch, shortcut it on the spot.
    let rev_e2: Vec<Step> = e2.iter().rev().map(|s| s.reversed()).collect();
    out.extend_from_slice(&rev_e2[..rev_e2.len() - 1]);
    let into_q = rev_e2[rev_e2.len() - 1];
    let out_of_q = rotated[l2];
    out.push(Step {
        from: into_q.from,
        cfrom: into_q.cfrom,
        to: out_of_q.to,
        cto: out_of_q.cto,
    });
    out.extend_from_slice(&e3[1..]);
    out
}

/// A scratch: a portal visited between two boundary steps with no inside
/// run; removable when the node is visited at another circuit position.
fn find_removable_scratch(circuit: &[Step], decomp: &Decomposition) -> Option<usize> {
    let n = circuit.len();
    if n < 2 {
        return None;
    }
    for c in decomp.clusters() {
        let crossings = crossings_of(circuit, decomp, c.id);
        for cr in crossings {
            if cr.p != cr.q {
                continue;
            }
            if (cr.enter + 1) % n != cr.leave {
                continue;
            }
            let visits = circuit.iter().filter(|s| s.to == cr.p).count();
            if visits >= 2 {
                return Some(cr.enter);
            }
        }
    }
    None
}

fn shortcut_at(circuit: Vec<Step>, enter: usize) -> Vec<Step> {
    let n = circuit.len();
    let leave = (enter + 1) % n;
    let a = circuit[enter];
    let b = circuit[leave];
    let joined = Step {
        from: a.from,
        cfrom: a.cfrom,
        to: b.to,
        cto: b.cto,
    };
    let mut out = Vec::with_capacity(n - 1);
    for (i, s) in circuit.into_iter().enumerate() {
        if i == enter {
            out.push(joined);
        } else if i == leave {
            continue;
        } else {
            out.push(s);
        }
    }
    out
}

/// Patch one cluster down to a single active portal.
///
/// Keeps the smallest active portal `u`, removes the boundary edges of the
/// other active portals, reattaches the severed inside components to `u`
/// with intra-cluster edges, rebuilds outside connectivity with a spanning
/// tree per removed portal plus a link to `u`, and (for tours) restores
/// parity by duplicating existing edges along paths.
pub fn patch_cluster(
    g: &PortalGraph,
    decomp: &Decomposition,
    c: ClusterId,
    r: usize,
    space: &MetricSpace,
    eulerian: bool,
) -> PortalGraph {
    let act = active_portals(g, decomp, c);
    if act.len() <= r {
        return g.clone();
    }
    let u = *act.iter().next().unwrap();
    let others: BTreeSet<PgNode> = act.iter().copied().skip(1).collect();

    let cluster = decomp.cluster(c);
    let activating = |other_cluster: ClusterId| -> bool {
        if other_cluster == c {
            return false;
        }
        match cluster.parent {
            Some(p) => {
                other_cluster == p || {
                    let o = decomp.cluster(other_cluster);
                    o.height == cluster.height && o.parent == Some(p)
                }
            }
            None => false,
        }
    };

    let mut kept: Vec<PgEdge> = Vec::new();
    let mut removed_by: BTreeMap<PgNode, Vec<(PgNode, ClusterId)>> = BTreeMap::new();
    for e in &g.edges {
        let mut removed = false;
        for (n, cn, m, cm) in [(e.a, e.ca, e.b, e.cb), (e.b, e.cb, e.a, e.ca)] {
            if cn == c && others.contains(&n) && activating(cm) {
                removed_by.entry(n).or_default().push((m, cm));
                removed = true;
                break;
            }
        }
        if !removed {
            kept.push(*e);
        }
    }

    // Inside components: nodes of edges fully inside the subtree of c,
    // plus the formerly active portals and u, which must stay covered.
    let mut universe: BTreeSet<PgNode> = BTreeSet::new();
    universe.insert(u);
    for &n in &others {
        universe.insert(n);
    }
    let mut inside_pairs: Vec<(PgNode, PgNode)> = Vec::new();
    for e in &kept {
        if decomp.is_descendant(e.ca, c) && decomp.is_descendant(e.cb, c) {
            universe.insert(e.a);
            universe.insert(e.b);
            inside_pairs.push((e.a, e.b));
        }
    }
    let nodes: Vec<PgNode> = universe.into_iter().collect();
    let index: BTreeMap<PgNode, usize> = nodes.iter().enumerate().map(|(i, &n)| (n, i)).collect();
    let mut dsu: Vec<usize> = (0..nodes.len()).collect();
    fn find(dsu: &mut Vec<usize>, x: usize) -> usize {
        if dsu[x] != x {
            let r = find(dsu, dsu[x]);
            dsu[x] = r;
        }
        dsu[x]
    }
    for (a, b) in inside_pairs {
        let (x, y) = (index[&a], index[&b]);
        let (rx, ry) = (find(&mut dsu, x), find(&mut dsu, y));
        if rx != ry {
            dsu[rx] = ry;
        }
    }
    let u_root = find(&mut dsu, index[&u]);
    let mut comp_rep: BTreeMap<usize, PgNode> = BTreeMap::new();
    for (i, &n) in nodes.iter().enumerate() {
        let root = find(&mut dsu, i);
        if root == u_root {
            continue;
        }
        match comp_rep.entry(root) {
            alloc::collections::btree_map::Entry::Vacant(v) => {
                v.insert(n);
            }
            alloc::collections::btree_map::Entry::Occupied(mut o) => {
                let cur = *o.get();
                if !decomp.has_portal(c, cur) && decomp.has_portal(c, n) {
                    o.insert(n);
                }
            }
        }
    }
    let mut added: Vec<PgEdge> = Vec::new();
    for (_, rep) in comp_rep {
        if decomp.has_portal(c, rep) {
            added.push(PgEdge {
                a: rep,
                ca: c,
                b: u,
                cb: c,
            });
        } else {
            // Climb the rep to the portal height of c via child-parent
            // hops, then link at c's level.
            let hc = cluster.height;
            let base = hc - cluster.portal_height;
            let mut cur = rep;
            for l in cur.height..cluster.portal_height {
                let nxt = PgNode::new(cur.point, l + 1);
                let ca = decomp.cluster_of((base + l).min(hc), cur.point);
                let cb = decomp.cluster_of((base + l + 1).min(hc), cur.point);
                added.push(PgEdge {
                    a: cur,
                    ca,
                    b: nxt,
                    cb,
                });
                cur = nxt;
            }
            added.push(PgEdge {
                a: cur,
                ca: c,
                b: u,
                cb: c,
            });
        }
    }

    // Outside: spanning tree over each removed portal's far nodes, linked
    // back to u.
    for (_a, fars) in removed_by {
        let uniq: Vec<(PgNode, ClusterId)> = fars
            .into_iter()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        if uniq.len() > 1 {
            let mut in_tree = vec![false; uniq.len()];
            in_tree[0] = true;
            for _ in 1..uniq.len() {
                let mut best: Option<(f64, usize, usize)> = None;
                for i in 0..uniq.len() {
                    if !in_tree[i] {
                        continue;
                    }
                    for j in 0..uniq.len() {
                        if in_tree[j] {
                            continue;
                        }
                        let d = space.dist(uniq[i].0.point, uniq[j].0.point);
                        if best.map_or(true, |(bd, _, _)| d < bd - 1e-12) {
                            best = Some((d, i, j));
                        }
                    }
                }
                let (_, i, j) = best.unwrap();
                in_tree[j] = true;
                added.push(PgEdge {
                    a: uniq[i].0,
                    ca: uniq[i].1,
                    b: uniq[j].0,
                    cb: uniq[j].1,
                });
            }
        }
        added.push(PgEdge {
            a: uniq[0].0,
            ca: uniq[0].1,
            b: u,
            cb: c,
        });
    }

    let mut result = PortalGraph::from_edges(kept.into_iter().chain(added.into_iter()));
    if eulerian {
        restore_parity(&mut result);
    }
    result
}

/// Duplicate existing edges along paths between odd-degree nodes; the
/// duplicates keep every attribution legal and activate nothing new.
fn restore_parity(g: &mut PortalGraph) {
    loop {
        let odd: Vec<PgNode> = g
            .degrees()
            .into_iter()
            .filter(|&(_, d)| d % 2 != 0)
            .map(|(n, _)| n)
            .collect();
        if odd.is_empty() {
            return;
        }
        let from = odd[0];
        let to = odd[1];
        let mut prev: BTreeMap<PgNode, PgEdge> = BTreeMap::new();
        let mut seen: BTreeSet<PgNode> = BTreeSet::new();
        seen.insert(from);
        let mut frontier = vec![from];
        'bfs: while !frontier.is_empty() {
            let mut next = Vec::new();
            for &v in &frontier {
                for e in &g.edges {
                    let other = if e.a == v {
                        e.b
                    } else if e.b == v {
                        e.a
                    } else {
                        continue;
                    };
                    if seen.insert(other) {
                        prev.insert(other, *e);
                        if other == to {
                            break 'bfs;
                        }
                        next.push(other);
                    }
                }
            }
            frontier = next;
        }
        if !prev.contains_key(&to) {
            // Odd nodes in different components cannot happen for
            // connected inputs; bail rather than loop forever.
            return;
        }
        let mut dup = Vec::new();
        let mut cur = to;
        while cur != from {
            let e = prev[&cur];
            dup.push(e);
            cur = if e.a == cur { e.b } else { e.a };
        }
        let mut edges = g.edges.clone();
        edges.extend(dup);
        *g = PortalGraph::from_edges(edges);
    }
}

/// Top-down sweep: patch every cluster from the root height downwards.
pub fn make_light(
    g: &PortalGraph,
    decomp: &Decomposition,
    r: usize,
    space: &MetricSpace,
    eulerian: bool,
) -> PortalGraph {
    let mut cur = g.clone();
    for h in (0..=decomp.top_height()).rev() {
        for &c in decomp.at_height(h) {
            cur = patch_cluster(&cur, decomp, c, r, space, eulerian);
        }
    }
    cur
}

/// Partition sanity of a decomposition; returns the first violation.
pub fn verify_decomposition(space: &MetricSpace, decomp: &Decomposition) -> Result<(), String> {
    let n = space.len();
    for h in 0..=decomp.top_height() {
        let mut seen = BTreeSet::new();
        for &cid in decomp.at_height(h) {
            let c = decomp.cluster(cid);
            if c.height != h {
                return Err(format!("cluster {cid} listed at wrong height"));
            }
            for &p in &c.points {
                if !seen.insert(p) {
                    return Err(format!("point {p} appears in two height-{h} clusters"));
                }
                if decomp.cluster_of(h, p) != cid {
                    return Err(format!("assignment map mismatch for point {p}"));
                }
            }
            if let Some(parent) = c.parent {
                let pc = decomp.cluster(parent);
                if !c.points.iter().all(|p| pc.points.contains(p)) {
                    return Err(format!("cluster {cid} not contained in its parent"));
                }
            }
        }
        if seen.len() != n {
            return Err(format!("height {h} covers {} of {n} points", seen.len()));
        }
    }
    for c in decomp.clusters() {
        let child_points: usize = c
            .children
            .iter()
            .map(|&ch| decomp.cluster(ch).points.len())
            .sum();
        if !c.children.is_empty() && child_points != c.points.len() {
            return Err(format!("children of {} do not partition it", c.id));
        }
    }
    Ok(())
}
