//! Network graphs: random geometric generation, degree capping, hop
//! distances, K-medoids and spread Sybil attack-edge placement.
//!
//! Honest nodes have ids `0..honest_count`; Sybils follow contiguously.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub type NodeId = usize;

/// Regeneration attempts before `random_geometric_graph` gives up.
pub const CONNECTIVITY_RETRIES: usize = 100;

/// Boundary between sparse and distributed attack scenarios. Only a label.
pub const SPARSE_EPSILON: f64 = 0.25;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Topology {
    honest_count: usize,
    sybil_count: usize,
    adjacency: Vec<BTreeSet<NodeId>>,
    degree_bound: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct TopologyJson {
    nodes: Vec<NodeId>,
    sybils: Vec<NodeId>,
    edges: Vec<(NodeId, NodeId)>,
    degree_bound: usize,
}

impl Topology {
    /// Builds a topology from an edge list. Invariants are checked.
    pub fn from_edges(
        honest_count: usize,
        sybil_count: usize,
        edges: &[(NodeId, NodeId)],
        degree_bound: usize,
    ) -> Result<Self> {
        let total = honest_count + sybil_count;
        let mut adjacency = vec![BTreeSet::new(); total];
        for &(a, b) in edges {
            if a >= total || b >= total {
                return Err(Error::Topology(format!("edge ({a}, {b}) names an unknown node")));
            }
            if a == b {
                return Err(Error::Topology(format!("self-loop on node {a}")));
            }
            if !adjacency[a].insert(b) {
                return Err(Error::Topology(format!("duplicate edge ({a}, {b})")));
            }
            adjacency[b].insert(a);
        }
        let g = Topology {
            honest_count,
            sybil_count,
            adjacency,
            degree_bound,
        };
        g.validate()?;
        Ok(g)
    }

    fn honest_unbounded(honest_count: usize, edges: &[(NodeId, NodeId)]) -> Self {
        let mut adjacency = vec![BTreeSet::new(); honest_count];
        for &(a, b) in edges {
            adjacency[a].insert(b);
            adjacency[b].insert(a);
        }
        Topology {
            honest_count,
            sybil_count: 0,
            adjacency,
            degree_bound: honest_count.saturating_sub(1).max(1),
        }
    }

    pub fn honest_count(&self) -> usize {
        self.honest_count
    }

    pub fn sybil_count(&self) -> usize {
        self.sybil_count
    }

    pub fn node_count(&self) -> usize {
        self.adjacency.len()
    }

    pub fn degree_bound(&self) -> usize {
        self.degree_bound
    }

    pub fn is_sybil(&self, id: NodeId) -> bool {
        id >= self.honest_count
    }

    pub fn honest_nodes(&self) -> std::ops::Range<NodeId> {
        0..self.honest_count
    }

    pub fn sybil_nodes(&self) -> std::ops::Range<NodeId> {
        self.honest_count..self.node_count()
    }

    pub fn neighbors(&self, id: NodeId) -> &BTreeSet<NodeId> {
        &self.adjacency[id]
    }

    pub fn degree(&self, id: NodeId) -> usize {
        self.adjacency[id].len()
    }

    pub fn has_edge(&self, a: NodeId, b: NodeId) -> bool {
        self.adjacency.get(a).is_some_and(|n| n.contains(&b))
    }

    /// Undirected edges as `(low, high)` pairs in ascending order.
    pub fn edges(&self) -> Vec<(NodeId, NodeId)> {
        self.adjacency
            .iter()
            .enumerate()
            .flat_map(|(a, ns)| ns.range(a + 1..).map(move |&b| (a, b)))
            .collect()
    }

    pub fn edge_count(&self) -> usize {
        self.adjacency.iter().map(BTreeSet::len).sum::<usize>() / 2
    }

    /// Same graph with a different degree bound, re-validated.
    pub fn with_degree_bound(mut self, degree_bound: usize) -> Result<Self> {
        self.degree_bound = degree_bound;
        self.validate()?;
        Ok(self)
    }

    /// Checks the degree bound, honest connectivity and that every node has
    /// at least one honest neighbor.
    pub fn validate(&self) -> Result<()> {
        for (id, ns) in self.adjacency.iter().enumerate() {
            if ns.contains(&id) {
                return Err(Error::Topology(format!("self-loop on node {id}")));
            }
            if ns.len() > self.degree_bound {
                return Err(Error::Topology(format!(
                    "node {id} has degree {} above bound {}",
                    ns.len(),
                    self.degree_bound
                )));
            }
            if self.node_count() > 1 && !ns.iter().any(|&n| !self.is_sybil(n)) {
                return Err(Error::Topology(format!("node {id} has no honest neighbor")));
            }
        }
        if !self.honest_connected() {
            return Err(Error::Topology("honest subgraph is disconnected".into()));
        }
        Ok(())
    }

    fn honest_connected(&self) -> bool {
        if self.honest_count == 0 {
            return true;
        }
        let reached = self.honest_bfs(&[0], None);
        reached.iter().all(Option::is_some)
    }

    /// Hop distances restricted to honest nodes, optionally ignoring one edge.
    fn honest_bfs(&self, sources: &[NodeId], skip: Option<(NodeId, NodeId)>) -> Vec<Option<usize>> {
        let mut dist = vec![None; self.honest_count];
        let mut queue = VecDeque::new();
        for &s in sources {
            dist[s] = Some(0);
            queue.push_back(s);
        }
        while let Some(u) = queue.pop_front() {
            let du = dist[u].expect("queued nodes have distances");
            for &v in &self.adjacency[u] {
                if v >= self.honest_count || dist[v].is_some() {
                    continue;
                }
                if let Some((a, b)) = skip {
                    if (u, v) == (a, b) || (u, v) == (b, a) {
                        continue;
                    }
                }
                dist[v] = Some(du + 1);
                queue.push_back(v);
            }
        }
        dist
    }

    /// All-pairs hop distances between honest nodes.
    pub fn honest_distance_matrix(&self) -> Vec<Vec<f64>> {
        self.honest_nodes()
            .map(|s| {
                self.honest_bfs(&[s], None)
                    .into_iter()
                    .map(|d| d.map_or(f64::INFINITY, |d| d as f64))
                    .collect()
            })
            .collect()
    }

    fn remove_edge(&mut self, a: NodeId, b: NodeId) {
        self.adjacency[a].remove(&b);
        self.adjacency[b].remove(&a);
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = TopologyJson {
            nodes: self.honest_nodes().collect(),
            sybils: self.sybil_nodes().collect(),
            edges: self.edges(),
            degree_bound: self.degree_bound,
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: TopologyJson = serde_json::from_str(text)?;
        let honest = doc.nodes.len();
        if doc.nodes.iter().copied().ne(0..honest)
            || doc.sybils.iter().copied().ne(honest..honest + doc.sybils.len())
        {
            return Err(Error::Topology("node ids must be contiguous, honest first".into()));
        }
        Topology::from_edges(honest, doc.sybils.len(), &doc.edges, doc.degree_bound)
    }
}

/// `n` uniform points on the unit square, joined when closer than `radius`.
/// Disconnected draws are regenerated from fresh sub-seeds.
pub fn random_geometric_graph(n: usize, radius: f64, seed: u64) -> Result<Topology> {
    if n < 2 {
        return Err(Error::invalid("random geometric graph needs at least 2 nodes"));
    }
    // radii above sqrt 2 simply give the complete graph
    if !(radius > 0.0 && radius.is_finite()) {
        return Err(Error::invalid(format!("radius {radius} must be positive and finite")));
    }
    for attempt in 0..CONNECTIVITY_RETRIES {
        let mut rng = rng::stream(seed, rng::Stream::Topology, attempt as u64, 0);
        let points: Vec<(f64, f64)> = (0..n).map(|_| (rng.random(), rng.random())).collect();
        let mut edges = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                let (dx, dy) = (points[i].0 - points[j].0, points[i].1 - points[j].1);
                if (dx * dx + dy * dy).sqrt() < radius {
                    edges.push((i, j));
                }
            }
        }
        let g = Topology::honest_unbounded(n, &edges);
        if g.honest_connected() {
            return Ok(g);
        }
    }
    Err(Error::Generation(format!(
        "no connected graph with n={n}, radius={radius} within {CONNECTIVITY_RETRIES} attempts"
    )))
}

/// Removes random non-bridge edges touching over-degree nodes until every
/// degree is at most `e`.
pub fn cap_degrees(g: &Topology, e: usize, seed: u64) -> Result<Topology> {
    if e < 2 {
        return Err(Error::invalid("degree cap must be at least 2"));
    }
    let mut g = g.clone();
    let mut rng = rng::stream(seed, rng::Stream::Topology, u64::MAX, e as u64);
    loop {
        let over: Vec<NodeId> = (0..g.node_count()).filter(|&i| g.degree(i) > e).collect();
        if over.is_empty() {
            break;
        }
        let mut candidates: Vec<(NodeId, NodeId)> = g
            .edges()
            .into_iter()
            .filter(|&(a, b)| g.degree(a) > e || g.degree(b) > e)
            .collect();
        candidates.shuffle(&mut rng);
        let removable = candidates.into_iter().find(|&(a, b)| {
            // both endpoints honest here; the edge is a bridge iff b becomes unreachable from a
            g.honest_bfs(&[a], Some((a, b)))[b].is_some()
        });
        match removable {
            Some((a, b)) => g.remove_edge(a, b),
            None => {
                return Err(Error::Capping(format!(
                    "nodes {over:?} exceed degree {e} but every incident edge is a bridge"
                )))
            }
        }
    }
    g.degree_bound = e;
    g.validate()?;
    Ok(g)
}

/// Multi-source shortest hop counts over the whole graph. Unreachable nodes
/// are absent from the map.
pub fn bfs_distances(g: &Topology, sources: &BTreeSet<NodeId>) -> Result<BTreeMap<NodeId, usize>> {
    if sources.is_empty() {
        return Err(Error::invalid("bfs needs at least one source"));
    }
    let mut dist = BTreeMap::new();
    let mut queue = VecDeque::new();
    for &s in sources {
        if s >= g.node_count() {
            return Err(Error::invalid(format!("unknown source node {s}")));
        }
        dist.insert(s, 0);
        queue.push_back(s);
    }
    while let Some(u) = queue.pop_front() {
        let du = dist[&u];
        for &v in g.neighbors(u) {
            if let std::collections::btree_map::Entry::Vacant(slot) = dist.entry(v) {
                slot.insert(du + 1);
                queue.push_back(v);
            }
        }
    }
    Ok(dist)
}

/// Result of a K-medoids run.
#[derive(Debug, Clone, PartialEq)]
pub struct Clustering {
    /// Medoid indices in ascending order.
    pub medoids: Vec<usize>,
    pub cost: f64,
    pub initial_cost: f64,
}

/// Sum over points of the distance to the nearest medoid.
pub fn medoid_cost(dist: &[Vec<f64>], medoids: &[usize]) -> f64 {
    (0..dist.len())
        .map(|p| {
            medoids
                .iter()
                .map(|&m| dist[p][m])
                .fold(f64::INFINITY, f64::min)
        })
        .sum()
}

/// Seeded random restarts of PAM before keeping the cheapest result.
pub const KMEDOIDS_RESTARTS: usize = 10;

/// PAM: seeded random initial medoids, then repeatedly apply the single
/// medoid/non-medoid swap that lowers total cost the most, until none does.
/// Swap descent stops at local optima, so several seeded starts are run and
/// the cheapest (earliest on ties) wins. `initial_cost` is that of the first start.
pub fn kmedoids(dist: &[Vec<f64>], k: usize, seed: u64) -> Result<Clustering> {
    let n = dist.len();
    if dist.iter().any(|row| row.len() != n) {
        return Err(Error::invalid("distance matrix must be square"));
    }
    if k == 0 || k > n {
        return Err(Error::invalid(format!("k={k} must be in 1..={n}")));
    }
    for i in 0..n {
        if dist[i][i] != 0.0 {
            return Err(Error::invalid(format!("distance matrix diagonal at {i} is nonzero")));
        }
        for j in 0..i {
            if dist[i][j] != dist[j][i] {
                return Err(Error::invalid(format!("distance matrix not symmetric at ({i}, {j})")));
            }
        }
    }
    let mut rng = rng::from_seed(seed);
    let all: Vec<usize> = (0..n).collect();
    let mut best: Option<Clustering> = None;
    let mut initial_cost = f64::NAN;
    for restart in 0..KMEDOIDS_RESTARTS {
        let start: Vec<usize> = all.choose_multiple(&mut rng, k).copied().collect();
        let run = pam_descent(dist, start);
        if restart == 0 {
            initial_cost = run.initial_cost;
        }
        if best.as_ref().is_none_or(|b| run.cost < b.cost) {
            best = Some(run);
        }
    }
    let mut out = best.expect("at least one restart");
    out.initial_cost = initial_cost;
    Ok(out)
}

fn pam_descent(dist: &[Vec<f64>], mut medoids: Vec<usize>) -> Clustering {
    let n = dist.len();
    let initial_cost = medoid_cost(dist, &medoids);
    let mut cost = initial_cost;
    loop {
        // nearest and second-nearest medoid per point make each swap O(n)
        let mut nearest = vec![(f64::INFINITY, usize::MAX); n];
        let mut second = vec![f64::INFINITY; n];
        for p in 0..n {
            for (slot, &m) in medoids.iter().enumerate() {
                let d = dist[p][m];
                if d < nearest[p].0 {
                    second[p] = nearest[p].0;
                    nearest[p] = (d, slot);
                } else if d < second[p] {
                    second[p] = d;
                }
            }
        }
        let mut best: Option<(f64, usize, usize)> = None;
        for slot in 0..medoids.len() {
            for candidate in 0..n {
                if medoids.contains(&candidate) {
                    continue;
                }
                let c: f64 = (0..n)
                    .map(|p| {
                        let kept = if nearest[p].1 == slot { second[p] } else { nearest[p].0 };
                        kept.min(dist[p][candidate])
                    })
                    .sum();
                if c < cost - 1e-12 && best.is_none_or(|(bc, _, _)| c < bc) {
                    best = Some((c, slot, candidate));
                }
            }
        }
        match best {
            Some((c, slot, candidate)) => {
                medoids[slot] = candidate;
                cost = c;
            }
            None => break,
        }
    }
    medoids.sort_unstable();
    Clustering {
        medoids,
        cost,
        initial_cost,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    Dense,
    Distributed,
    Sparse,
}

impl Scenario {
    pub fn classify(phi: f64) -> Self {
        if phi >= 2.0 {
            Scenario::Dense
        } else if phi > SPARSE_EPSILON {
            Scenario::Distributed
        } else {
            Scenario::Sparse
        }
    }
}

impl std::fmt::Display for Scenario {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Scenario::Dense => "dense",
            Scenario::Distributed => "distributed",
            Scenario::Sparse => "sparse",
        })
    }
}

/// Attack-edge placement of a spread Sybil poisoning attack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SspPlan {
    pub phi: f64,
    pub honest_count: usize,
    pub sybil_count: usize,
    /// `(sybil id, honest id)` pairs, sorted.
    pub attack_edges: Vec<(NodeId, NodeId)>,
    /// Honest nodes that received the fractional remainder.
    pub medoids: Vec<NodeId>,
    pub scenario: Scenario,
}

impl SspPlan {
    pub fn empty(honest_count: usize) -> Self {
        SspPlan {
            phi: 0.0,
            honest_count,
            sybil_count: 0,
            attack_edges: Vec::new(),
            medoids: Vec::new(),
            scenario: Scenario::Sparse,
        }
    }

    /// Attack edges per honest node.
    pub fn per_node_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.honest_count];
        for &(_, h) in &self.attack_edges {
            counts[h] += 1;
        }
        counts
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// `ceil(n * phi)`, tolerant of binary rounding in the product.
pub fn total_attack_edges(honest_count: usize, phi: f64) -> usize {
    ((honest_count as f64 * phi) - 1e-9).ceil().max(0.0) as usize
}

/// Places `ceil(|N| * phi)` attack edges: `floor(phi)` on every honest node,
/// the remainder on the K-medoids of the hop metric, then grouped onto the
/// fewest Sybils allowed by the degree bound.
pub fn plan_ssp_attack(g: &Topology, phi: f64, seed: u64) -> Result<SspPlan> {
    if !(phi > 0.0 && phi.is_finite()) {
        return Err(Error::invalid("phi must be positive and finite"));
    }
    if g.sybil_count() != 0 {
        return Err(Error::invalid("plan_ssp_attack expects an honest-only graph"));
    }
    g.validate()?;
    let n = g.honest_count();
    let total = total_attack_edges(n, phi);
    let base = ((phi + 1e-9).floor() as usize).min(total / n.max(1));
    let remainder = total - base * n;
    let dist = g.honest_distance_matrix();
    let medoids = if remainder > 0 {
        kmedoids(&dist, remainder, rng::derive_seed(seed, &[rng::Stream::Attack as u64]))?.medoids
    } else {
        Vec::new()
    };
    let mut counts = vec![base; n];
    for &m in &medoids {
        counts[m] += 1;
    }

    // saturated honest nodes hand their excess to the nearest node with room
    let capacity: Vec<usize> = (0..n).map(|i| g.degree_bound().saturating_sub(g.degree(i))).collect();
    for i in 0..n {
        while counts[i] > capacity[i] {
            let target = (0..n)
                .filter(|&j| counts[j] < capacity[j])
                .min_by(|&a, &b| dist[i][a].total_cmp(&dist[i][b]).then(a.cmp(&b)))
                .ok_or_else(|| {
                    Error::Attachment(format!("no honest node has room for attack edges of node {i}"))
                })?;
            counts[i] -= 1;
            counts[target] += 1;
        }
    }

    let bound = g.degree_bound();
    let max_per_node = counts.iter().copied().max().unwrap_or(0);
    let sybil_count = if total == 0 { 0 } else { total.div_ceil(bound).max(max_per_node) };
    let mut attack_edges = Vec::with_capacity(total);
    let mut next = 0;
    for (h, &c) in counts.iter().enumerate() {
        for _ in 0..c {
            attack_edges.push((n + next % sybil_count, h));
            next += 1;
        }
    }
    attack_edges.sort_unstable();
    Ok(SspPlan {
        phi,
        honest_count: n,
        sybil_count,
        attack_edges,
        medoids,
        scenario: Scenario::classify(phi),
    })
}

/// Adds the plan's Sybils and attack edges. No Sybil-Sybil edges are created.
pub fn attach_sybils(g: &Topology, plan: &SspPlan) -> Result<Topology> {
    if g.sybil_count() != 0 || plan.honest_count != g.honest_count() {
        return Err(Error::Attachment("plan does not match the honest graph".into()));
    }
    let n = g.honest_count();
    let mut out = g.clone();
    out.sybil_count = plan.sybil_count;
    out.adjacency.resize(n + plan.sybil_count, BTreeSet::new());
    for &(s, h) in &plan.attack_edges {
        if s < n || s >= n + plan.sybil_count || h >= n {
            return Err(Error::Attachment(format!("attack edge ({s}, {h}) is malformed")));
        }
        if !out.adjacency[s].insert(h) {
            return Err(Error::Attachment(format!("sybil {s} connects twice to node {h}")));
        }
        out.adjacency[h].insert(s);
        if out.degree(h) > out.degree_bound {
            return Err(Error::Attachment(format!(
                "honest node {h} would exceed degree bound {}",
                out.degree_bound
            )));
        }
    }
    out.validate()
        .map_err(|e| Error::Attachment(e.to_string()))?;
    Ok(out)
}
