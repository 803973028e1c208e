//! Balanced k-way partitioning of the interaction graph.
//!
//! Multilevel scheme: heavy-edge matching (plus two-hop matching of leftover
//! vertices that share a neighbor) coarsens the graph, sequential greedy
//! region growing produces an initial partition of the coarsest graph, and
//! boundary refinement improves it on the way back up. Refinement only
//! applies moves that strictly reduce the cut and keep every part under
//! capacity, so the cut never increases during a pass.

use std::cmp::Reverse;
use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::BipartiteGraph;

pub const DEFAULT_EPS: f64 = 0.05;

const INITIAL_TRIALS: usize = 8;
const MAX_REFINE_PASSES: usize = 12;
const MAX_LEVELS: usize = 64;

/// Vertex → cluster assignment over the unified query+document vertex set.
#[derive(Clone, Debug, PartialEq)]
pub struct Partitioning {
    assignment: Vec<u32>,
    r: usize,
    eps: f64,
    seed: u64,
}

impl Partitioning {
    pub fn new(assignment: Vec<u32>, r: usize, eps: f64) -> Result<Self> {
        if r == 0 {
            return Err(Error::InvalidInput("cluster count must be at least 1".into()));
        }
        if !(eps >= 0.0 && eps.is_finite()) {
            return Err(Error::InvalidInput(format!("balance tolerance must be ≥ 0, got {eps}")));
        }
        if let Some((v, &c)) = assignment.iter().enumerate().find(|(_, &c)| c as usize >= r) {
            return Err(Error::InvalidInput(format!("vertex {v} assigned to cluster {c} ≥ r={r}")));
        }
        Ok(Self {
            assignment,
            r,
            eps,
            seed: 0,
        })
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn r(&self) -> usize {
        self.r
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.assignment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignment.is_empty()
    }

    pub fn assignment(&self) -> &[u32] {
        &self.assignment
    }

    pub fn cluster_of(&self, v: u32) -> u32 {
        self.assignment[v as usize]
    }

    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0usize; self.r];
        for &c in &self.assignment {
            sizes[c as usize] += 1;
        }
        sizes
    }

    /// Largest permitted cluster size, ⌊(1+ε)·⌈|V|/r⌉⌋.
    pub fn capacity(&self) -> usize {
        capacity(self.assignment.len(), self.r, self.eps)
    }

    pub fn check_covers(&self, graph: &BipartiteGraph) -> Result<()> {
        if self.assignment.len() != graph.num_vertices() {
            return Err(Error::InvalidInput(format!(
                "partitioning covers {} vertices but the graph has {}",
                self.assignment.len(),
                graph.num_vertices()
            )));
        }
        Ok(())
    }

    /// Document indices (not unified vertex ids) per cluster.
    pub fn docs_by_cluster(&self, graph: &BipartiteGraph) -> Vec<Vec<u32>> {
        let mut out = vec![Vec::new(); self.r];
        for d in 0..graph.num_docs() as u32 {
            out[self.cluster_of(graph.doc_vertex(d)) as usize].push(d);
        }
        out
    }

    /// Writes `#r=<r> eps=<ε> seed=<seed>` followed by one `entity_id<TAB>cluster_id`
    /// row per vertex, queries first.
    pub fn save(&self, path: impl AsRef<Path>, graph: &BipartiteGraph) -> Result<()> {
        self.check_covers(graph)?;
        let path = path.as_ref();
        let io = |e| Error::io(path, e);
        let mut out = BufWriter::new(File::create(path).map_err(io)?);
        writeln!(out, "#r={} eps={} seed={}", self.r, self.eps, self.seed).map_err(io)?;
        for v in 0..graph.num_vertices() as u32 {
            writeln!(out, "{}\t{}", graph.vertex_label(v), self.cluster_of(v)).map_err(io)?;
        }
        out.flush().map_err(io)
    }

    /// Reads a partitioning file against `graph`. A name present in both id
    /// namespaces resolves to the query on its first row and to the document on its second.
    pub fn load(path: impl AsRef<Path>, graph: &BipartiteGraph) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut lines = BufReader::new(file).lines();
        let header = match lines.next() {
            Some(l) => l.map_err(|e| Error::io(path, e))?,
            None => return Err(Error::parse(path, 1, "missing header")),
        };
        let (r, eps, seed) = parse_header(&header).ok_or_else(|| Error::parse(path, 1, "bad header"))?;
        const UNSET: u32 = u32::MAX;
        let mut assignment = vec![UNSET; graph.num_vertices()];
        for (i, line) in lines.enumerate() {
            let lineno = i + 2;
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.is_empty() {
                continue;
            }
            let (id, cluster) = line
                .split_once('\t')
                .ok_or_else(|| Error::parse(path, lineno, "expected entity_id<TAB>cluster_id"))?;
            let cluster: u32 = cluster
                .parse()
                .map_err(|_| Error::parse(path, lineno, "cluster id is not an integer"))?;
            let as_query = graph.queries().index_of(id).filter(|&q| assignment[q as usize] == UNSET);
            let vertex = match as_query {
                Some(q) => q,
                None => match graph.docs().index_of(id).map(|d| graph.doc_vertex(d)) {
                    Some(v) if assignment[v as usize] == UNSET => v,
                    Some(_) => return Err(Error::parse(path, lineno, format!("duplicate entity {id:?}"))),
                    None => return Err(Error::parse(path, lineno, format!("unknown entity {id:?}"))),
                },
            };
            assignment[vertex as usize] = cluster;
        }
        if let Some(v) = assignment.iter().position(|&c| c == UNSET) {
            return Err(Error::InvalidInput(format!(
                "{}: vertex {:?} missing from partitioning",
                path.display(),
                graph.vertex_label(v as u32)
            )));
        }
        Ok(Self::new(assignment, r, eps)?.with_seed(seed))
    }
}

fn parse_header(line: &str) -> Option<(usize, f64, u64)> {
    let rest = line.strip_prefix('#')?;
    let (mut r, mut eps, mut seed) = (None, None, None);
    for kv in rest.split_whitespace() {
        let (k, v) = kv.split_once('=')?;
        match k {
            "r" => r = v.parse().ok(),
            "eps" => eps = v.parse().ok(),
            "seed" => seed = v.parse().ok(),
            _ => {}
        }
    }
    Some((r?, eps?, seed?))
}

fn capacity(n: usize, r: usize, eps: f64) -> usize {
    let ideal = n.div_ceil(r);
    ((1.0 + eps) * ideal as f64 + 1e-9).floor() as usize
}

/// Total weight of edges whose endpoints lie in different clusters.
pub fn edge_cut(graph: &BipartiteGraph, partitioning: &Partitioning) -> Result<u64> {
    partitioning.check_covers(graph)?;
    Ok(graph
        .edges()
        .iter()
        .filter(|&&(q, d, _)| partitioning.cluster_of(q) != partitioning.cluster_of(graph.doc_vertex(d)))
        .map(|e| e.2 as u64)
        .sum())
}

/// max_c |c| / ⌈|V|/r⌉.
pub fn balance_factor(partitioning: &Partitioning) -> f64 {
    let ideal = partitioning.len().div_ceil(partitioning.r()).max(1);
    let largest = partitioning.cluster_sizes().into_iter().max().unwrap_or(0);
    largest as f64 / ideal as f64
}

/// Vertex count at which coarsening stops.
pub fn coarsening_target(r: usize) -> usize {
    (30 * r).max(200)
}

/// Partitions `graph` into `r` clusters of at most ⌊(1+ε)·⌈|V|/r⌉⌋ vertices each,
/// approximately minimizing the weighted edge cut. Deterministic in `seed`.
pub fn partition(graph: &BipartiteGraph, r: usize, eps: f64, seed: u64) -> Result<Partitioning> {
    let n = graph.num_vertices();
    if r == 0 {
        return Err(Error::InvalidInput("cluster count must be at least 1".into()));
    }
    if r > n {
        return Err(Error::InvalidInput(format!("r={r} exceeds the vertex count {n}")));
    }
    if !(eps >= 0.0 && eps.is_finite()) {
        return Err(Error::InvalidInput(format!("balance tolerance must be ≥ 0, got {eps}")));
    }
    let cap = capacity(n, r, eps) as u64;
    if cap * (r as u64) < n as u64 {
        return Err(Error::InvalidInput(format!("no {r}-way partition of {n} vertices fits ε={eps}")));
    }
    if r == 1 {
        return Ok(Partitioning::new(vec![0; n], 1, eps)?.with_seed(seed));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let finest = WGraph::from_bipartite(graph);

    // coarsen
    let target = coarsening_target(r);
    let max_vw = ((1.5 * n as f64 / target as f64).ceil() as u64).clamp(1, (cap / 2).max(1));
    let mut levels: Vec<(WGraph, Vec<u32>)> = Vec::new();
    let mut current = finest;
    while current.len() > target && levels.len() < MAX_LEVELS {
        let cmap = match_vertices(&current, max_vw, &mut rng);
        let coarse = current.contract(&cmap);
        if coarse.len() as f64 > 0.95 * current.len() as f64 {
            break;
        }
        let fine = std::mem::replace(&mut current, coarse);
        levels.push((fine, cmap));
    }
    log::debug!(
        "coarsened {} → {} vertices over {} levels",
        n,
        current.len(),
        levels.len()
    );

    // initial partition: best of several seeded growings
    let mut best: Option<(u64, u64, Vec<u32>)> = None;
    for _ in 0..INITIAL_TRIALS {
        let mut assign = grow_regions(&current, r, cap, &mut rng);
        let mut pw = current.part_weights(&assign, r);
        rebalance(&current, &mut assign, &mut pw, cap);
        refine(&current, &mut assign, &mut pw, cap, MAX_REFINE_PASSES);
        let cut = current.cut(&assign);
        let overload: u64 = pw.iter().map(|&w| w.saturating_sub(cap)).sum();
        let better = match &best {
            None => true,
            Some((bo, bc, _)) => (overload, cut) < (*bo, *bc),
        };
        if better {
            best = Some((overload, cut, assign));
        }
    }
    let mut assign = best.expect("at least one trial").2;

    // uncoarsen
    let mut graph_at_level = current;
    while let Some((fine, cmap)) = levels.pop() {
        assign = cmap.iter().map(|&c| assign[c as usize]).collect();
        graph_at_level = fine;
        let mut pw = graph_at_level.part_weights(&assign, r);
        rebalance(&graph_at_level, &mut assign, &mut pw, cap);
        refine(&graph_at_level, &mut assign, &mut pw, cap, MAX_REFINE_PASSES);
    }
    let pw = graph_at_level.part_weights(&assign, r);
    if pw.iter().any(|&w| w > cap) {
        return Err(Error::Invariant(format!(
            "partition exceeds capacity {cap}: part weights {pw:?}"
        )));
    }
    Ok(Partitioning::new(assign, r, eps)?.with_seed(seed))
}

/// Undirected graph with vertex and edge weights, in CSR form.
#[derive(Clone, Debug)]
pub(crate) struct WGraph {
    xadj: Vec<usize>,
    adj: Vec<u32>,
    ew: Vec<u64>,
    vw: Vec<u64>,
}

impl WGraph {
    pub(crate) fn from_bipartite(g: &BipartiteGraph) -> Self {
        let n = g.num_vertices();
        let mut xadj = Vec::with_capacity(n + 1);
        let mut adj = Vec::with_capacity(2 * g.num_edges());
        let mut ew = Vec::with_capacity(2 * g.num_edges());
        xadj.push(0);
        for v in 0..n as u32 {
            for (u, w) in g.vertex_neighbors(v) {
                adj.push(u);
                ew.push(w as u64);
            }
            xadj.push(adj.len());
        }
        Self {
            xadj,
            adj,
            ew,
            vw: vec![1; n],
        }
    }

    fn len(&self) -> usize {
        self.vw.len()
    }

    fn neighbors(&self, v: usize) -> impl Iterator<Item = (usize, u64)> + '_ {
        let range = self.xadj[v]..self.xadj[v + 1];
        self.adj[range.clone()]
            .iter()
            .map(|&u| u as usize)
            .zip(self.ew[range].iter().copied())
    }

    fn part_weights(&self, assign: &[u32], r: usize) -> Vec<u64> {
        let mut pw = vec![0u64; r];
        for (v, &p) in assign.iter().enumerate() {
            pw[p as usize] += self.vw[v];
        }
        pw
    }

    pub(crate) fn cut(&self, assign: &[u32]) -> u64 {
        let mut twice = 0;
        for v in 0..self.len() {
            for (u, w) in self.neighbors(v) {
                if assign[u] != assign[v] {
                    twice += w;
                }
            }
        }
        twice / 2
    }

    /// Builds the coarse graph whose vertex `c` merges every fine `v` with `cmap[v] == c`.
    fn contract(&self, cmap: &[u32]) -> WGraph {
        let nc = cmap.iter().map(|&c| c as usize + 1).max().unwrap_or(0);
        let mut members: Vec<Vec<usize>> = vec![Vec::new(); nc];
        for (v, &c) in cmap.iter().enumerate() {
            members[c as usize].push(v);
        }
        let mut vw = vec![0u64; nc];
        let mut xadj = Vec::with_capacity(nc + 1);
        let mut adj = Vec::new();
        let mut ew = Vec::new();
        let mut slot = vec![usize::MAX; nc];
        xadj.push(0);
        for (c, group) in members.iter().enumerate() {
            let start = adj.len();
            for &v in group {
                vw[c] += self.vw[v];
                for (u, w) in self.neighbors(v) {
                    let cu = cmap[u] as usize;
                    if cu == c {
                        continue;
                    }
                    if slot[cu] == usize::MAX || slot[cu] < start {
                        slot[cu] = adj.len();
                        adj.push(cu as u32);
                        ew.push(w);
                    } else {
                        ew[slot[cu]] += w;
                    }
                }
            }
            xadj.push(adj.len());
        }
        WGraph { xadj, adj, ew, vw }
    }
}

/// Heavy-edge matching in a random visit order, ties to the lowest vertex
/// index, followed by pairing of still-unmatched vertices that share their
/// heaviest neighbor. Returns the fine → coarse map.
fn match_vertices(g: &WGraph, max_vw: u64, rng: &mut ChaCha8Rng) -> Vec<u32> {
    const NONE: usize = usize::MAX;
    let n = g.len();
    let mut mate = vec![NONE; n];
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    for &v in &order {
        if mate[v] != NONE {
            continue;
        }
        let mut best: Option<(u64, usize)> = None;
        for (u, w) in g.neighbors(v) {
            if u == v || mate[u] != NONE || g.vw[v] + g.vw[u] > max_vw {
                continue;
            }
            let better = match best {
                None => true,
                Some((bw, bu)) => w > bw || (w == bw && u < bu),
            };
            if better {
                best = Some((w, u));
            }
        }
        if let Some((_, u)) = best {
            mate[v] = u;
            mate[u] = v;
        }
    }

    // two-hop: leftovers hanging off the same hub get merged pairwise
    let mut pending: Vec<usize> = vec![NONE; n];
    for &v in &order {
        if mate[v] != NONE {
            continue;
        }
        let hub = g
            .neighbors(v)
            .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
            .map(|(u, _)| u);
        let Some(hub) = hub else { continue };
        let other = pending[hub];
        if other != NONE && g.vw[v] + g.vw[other] <= max_vw {
            mate[v] = other;
            mate[other] = v;
            pending[hub] = NONE;
        } else {
            pending[hub] = v;
        }
    }

    let mut cmap = vec![u32::MAX; n];
    let mut next = 0u32;
    for v in 0..n {
        if cmap[v] != u32::MAX {
            continue;
        }
        cmap[v] = next;
        if mate[v] != NONE {
            cmap[mate[v]] = next;
        }
        next += 1;
    }
    cmap
}

/// Sequential greedy region growing: part `p` starts from a random unassigned
/// seed and absorbs the frontier vertex most strongly connected to it until it
/// reaches its share of the total weight. The last part takes the remainder.
fn grow_regions(g: &WGraph, r: usize, cap: u64, rng: &mut ChaCha8Rng) -> Vec<u32> {
    const NONE: u32 = u32::MAX;
    let n = g.len();
    let total: u64 = g.vw.iter().sum();
    let mut assign = vec![NONE; n];
    let mut unassigned: Vec<usize> = (0..n).collect();
    let mut assigned_weight = 0u64;
    let mut gain = vec![0u64; n];

    for p in 0..r - 1 {
        let cumulative_target = ((p as u64 + 1) * total + r as u64 / 2) / r as u64;
        let target = cumulative_target.saturating_sub(assigned_weight);
        let mut region = 0u64;
        let mut frontier: BTreeSet<(Reverse<u64>, usize)> = BTreeSet::new();
        let mut touched: Vec<usize> = Vec::new();
        while region < target {
            let next = match frontier.pop_first() {
                Some((_, v)) => v,
                None => {
                    unassigned.retain(|&v| assign[v] == NONE);
                    let fits: Vec<usize> = unassigned
                        .iter()
                        .copied()
                        .filter(|&v| region + g.vw[v] <= cap)
                        .collect();
                    if fits.is_empty() {
                        break;
                    }
                    fits[rng.gen_range(0..fits.len())]
                }
            };
            if region + g.vw[next] > cap {
                // too heavy for this part; leave it for later parts
                gain[next] = 0;
                continue;
            }
            assign[next] = p as u32;
            region += g.vw[next];
            for (u, w) in g.neighbors(next) {
                if assign[u] != NONE {
                    continue;
                }
                if gain[u] > 0 {
                    frontier.remove(&(Reverse(gain[u]), u));
                }
                gain[u] += w;
                touched.push(u);
                frontier.insert((Reverse(gain[u]), u));
            }
        }
        for u in touched {
            gain[u] = 0;
        }
        assigned_weight += region;
    }
    for a in assign.iter_mut() {
        if *a == NONE {
            *a = (r - 1) as u32;
        }
    }
    assign
}

/// Connection weight from `v` to every adjacent part, written into `conn`
/// (indexed by part) with the touched parts listed in `parts`.
fn connections(g: &WGraph, assign: &[u32], v: usize, conn: &mut [u64], parts: &mut Vec<usize>) {
    for &p in parts.iter() {
        conn[p] = 0;
    }
    parts.clear();
    for (u, w) in g.neighbors(v) {
        let p = assign[u] as usize;
        if conn[p] == 0 {
            parts.push(p);
        }
        conn[p] += w;
    }
}

/// Moves vertices out of overweight parts, choosing for each the feasible
/// destination that loses the least cut.
fn rebalance(g: &WGraph, assign: &mut [u32], pw: &mut [u64], cap: u64) {
    let r = pw.len();
    let mut conn = vec![0u64; r];
    let mut parts = Vec::new();
    for _round in 0..4 {
        let over: Vec<usize> = (0..r).filter(|&p| pw[p] > cap).collect();
        if over.is_empty() {
            return;
        }
        for p in over {
            let mut candidates: Vec<(i64, usize)> = Vec::new();
            for v in 0..g.len() {
                if assign[v] as usize != p {
                    continue;
                }
                connections(g, assign, v, &mut conn, &mut parts);
                let own = conn[p] as i64;
                let best_adjacent = parts.iter().filter(|&&q| q != p).map(|&q| conn[q]).max().unwrap_or(0);
                candidates.push((best_adjacent as i64 - own, v));
            }
            candidates.sort_by_key(|&(gain, v)| (Reverse(gain), v));
            for (_, v) in candidates {
                if pw[p] <= cap {
                    break;
                }
                connections(g, assign, v, &mut conn, &mut parts);
                let vw = g.vw[v];
                let adjacent = parts
                    .iter()
                    .copied()
                    .filter(|&q| q != p && pw[q] + vw <= cap)
                    .max_by(|&a, &b| conn[a].cmp(&conn[b]).then(b.cmp(&a)));
                let dest = adjacent.or_else(|| {
                    (0..r)
                        .filter(|&q| q != p && pw[q] + vw <= cap)
                        .min_by_key(|&q| (pw[q], q))
                });
                if let Some(q) = dest {
                    assign[v] = q as u32;
                    pw[p] -= vw;
                    pw[q] += vw;
                }
            }
        }
    }
}

/// Boundary refinement. Vertices are visited in index order; a vertex moves
/// to the adjacent part it is most connected to (lowest id on ties) when that
/// strictly reduces the cut and the destination stays within capacity.
/// Returns the number of passes that moved at least one vertex.
pub(crate) fn refine(g: &WGraph, assign: &mut [u32], pw: &mut [u64], cap: u64, max_passes: usize) -> usize {
    let r = pw.len();
    let mut conn = vec![0u64; r];
    let mut parts = Vec::new();
    let mut productive = 0;
    for _ in 0..max_passes {
        let mut moved = 0usize;
        for v in 0..g.len() {
            connections(g, assign, v, &mut conn, &mut parts);
            let own = assign[v] as usize;
            if parts.iter().all(|&p| p == own) {
                continue;
            }
            let vw = g.vw[v];
            let dest = parts
                .iter()
                .copied()
                .filter(|&q| q != own && pw[q] + vw <= cap)
                .max_by(|&a, &b| conn[a].cmp(&conn[b]).then(b.cmp(&a)));
            let own_conn = if parts.contains(&own) { conn[own] } else { 0 };
            if let Some(q) = dest {
                if conn[q] > own_conn {
                    assign[v] = q as u32;
                    pw[own] -= vw;
                    pw[q] += vw;
                    moved += 1;
                }
            }
        }
        if moved == 0 {
            break;
        }
        productive += 1;
    }
    productive
}
