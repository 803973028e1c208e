//! Weighted query–document interaction graph.
//!
//! Queries and documents live in separate id namespaces. Internally every
//! entity gets a dense `u32` index; when the two sides are viewed as one
//! vertex set (for partitioning) queries come first, so document `d` is
//! vertex `num_queries + d`.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::partition::Partitioning;

/// One positive (query, document) observation with its event count.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct InteractionRecord {
    pub query_id: String,
    pub doc_id: String,
    pub weight: u32,
}

impl InteractionRecord {
    pub fn new(query_id: impl Into<String>, doc_id: impl Into<String>, weight: u32) -> Self {
        Self {
            query_id: query_id.into(),
            doc_id: doc_id.into(),
            weight,
        }
    }
}

/// Reads `query_id<TAB>doc_id<TAB>weight` lines. Line numbers in errors are 1-based.
pub fn load_interactions(path: impl AsRef<Path>) -> Result<Vec<InteractionRecord>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let lineno = i + 1;
        if line.is_empty() {
            continue;
        }
        records.push(parse_interaction(&line).map_err(|msg| Error::parse(path, lineno, msg))?);
    }
    Ok(records)
}

fn parse_interaction(line: &str) -> std::result::Result<InteractionRecord, String> {
    let cols: Vec<&str> = line.split('\t').collect();
    if cols.len() != 3 {
        return Err(format!("expected 3 tab-separated columns, found {}", cols.len()));
    }
    if cols[0].is_empty() || cols[1].is_empty() {
        return Err("empty query or document id".into());
    }
    let weight: i64 = cols[2]
        .trim()
        .parse()
        .map_err(|_| format!("weight {:?} is not an integer", cols[2]))?;
    if weight < 1 || weight > u32::MAX as i64 {
        return Err(format!("weight must be a positive integer, got {weight}"));
    }
    Ok(InteractionRecord::new(cols[0], cols[1], weight as u32))
}

pub fn write_interactions(path: impl AsRef<Path>, records: &[InteractionRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut out = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    for r in records {
        writeln!(out, "{}\t{}\t{}", r.query_id, r.doc_id, r.weight).map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Dense id table: index ↔ string id, first-seen order.
#[derive(Clone, Debug, Default)]
pub struct IdTable {
    ids: Vec<String>,
    index: HashMap<String, u32>,
}

impl IdTable {
    pub fn get_or_insert(&mut self, id: &str) -> u32 {
        if let Some(&i) = self.index.get(id) {
            return i;
        }
        let i = self.ids.len() as u32;
        self.ids.push(id.to_owned());
        self.index.insert(id.to_owned(), i);
        i
    }

    pub fn index_of(&self, id: &str) -> Option<u32> {
        self.index.get(id).copied()
    }

    pub fn id(&self, index: u32) -> &str {
        &self.ids[index as usize]
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// One id per line; line number is the dense index.
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
        for id in &self.ids {
            writeln!(out, "{id}").map_err(|e| Error::io(path, e))?;
        }
        out.flush().map_err(|e| Error::io(path, e))
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct GraphOptions {
    /// Treat every aggregated edge as weight 1.
    pub ignore_weights: bool,
}

/// Compressed adjacency for one side of the bipartite graph.
#[derive(Clone, Debug, Default)]
struct Csr {
    offsets: Vec<usize>,
    targets: Vec<u32>,
    weights: Vec<u32>,
}

impl Csr {
    fn from_edges(n: usize, edges: &[(u32, u32, u32)], flip: bool) -> Self {
        let mut offsets = vec![0usize; n + 1];
        for &(a, b, _) in edges {
            let src = if flip { b } else { a };
            offsets[src as usize + 1] += 1;
        }
        for i in 0..n {
            offsets[i + 1] += offsets[i];
        }
        let mut cursor = offsets.clone();
        let mut targets = vec![0u32; edges.len()];
        let mut weights = vec![0u32; edges.len()];
        for &(a, b, w) in edges {
            let (src, dst) = if flip { (b, a) } else { (a, b) };
            let slot = cursor[src as usize];
            targets[slot] = dst;
            weights[slot] = w;
            cursor[src as usize] += 1;
        }
        Self {
            offsets,
            targets,
            weights,
        }
    }

    fn row(&self, v: u32) -> impl Iterator<Item = (u32, u32)> + '_ {
        let range = self.offsets[v as usize]..self.offsets[v as usize + 1];
        self.targets[range.clone()]
            .iter()
            .copied()
            .zip(self.weights[range].iter().copied())
    }

    fn degree(&self, v: u32) -> usize {
        self.offsets[v as usize + 1] - self.offsets[v as usize]
    }
}

/// Immutable weighted bipartite graph over queries and documents.
#[derive(Clone, Debug)]
pub struct BipartiteGraph {
    queries: IdTable,
    docs: IdTable,
    /// (query, doc, weight), sorted by (query, doc), no duplicates.
    edges: Vec<(u32, u32, u32)>,
    by_query: Csr,
    by_doc: Csr,
    total_edge_weight: u64,
}

pub fn build_graph(records: &[InteractionRecord]) -> Result<BipartiteGraph> {
    build_graph_with(records, GraphOptions::default())
}

/// Aggregates duplicate pairs by summing weights and assigns dense indices in first-seen order.
pub fn build_graph_with(records: &[InteractionRecord], opts: GraphOptions) -> Result<BipartiteGraph> {
    if records.is_empty() {
        return Err(Error::InvalidInput("cannot build a graph from zero interactions".into()));
    }
    let mut queries = IdTable::default();
    let mut docs = IdTable::default();
    let mut agg: HashMap<(u32, u32), u64> = HashMap::new();
    for (i, r) in records.iter().enumerate() {
        if r.weight == 0 || r.query_id.is_empty() || r.doc_id.is_empty() {
            return Err(Error::InvalidInput(format!("record {i} violates weight ≥ 1 / nonempty ids")));
        }
        let q = queries.get_or_insert(&r.query_id);
        let d = docs.get_or_insert(&r.doc_id);
        *agg.entry((q, d)).or_insert(0) += r.weight as u64;
    }
    let mut edges: Vec<(u32, u32, u32)> = agg
        .into_iter()
        .map(|((q, d), w)| {
            let w = if opts.ignore_weights { 1 } else { w.min(u32::MAX as u64) as u32 };
            (q, d, w)
        })
        .collect();
    edges.sort_unstable();
    let total_edge_weight = edges.iter().map(|e| e.2 as u64).sum();
    let by_query = Csr::from_edges(queries.len(), &edges, false);
    let by_doc = Csr::from_edges(docs.len(), &edges, true);
    Ok(BipartiteGraph {
        queries,
        docs,
        edges,
        by_query,
        by_doc,
        total_edge_weight,
    })
}

impl BipartiteGraph {
    pub fn queries(&self) -> &IdTable {
        &self.queries
    }

    pub fn docs(&self) -> &IdTable {
        &self.docs
    }

    pub fn num_queries(&self) -> usize {
        self.queries.len()
    }

    pub fn num_docs(&self) -> usize {
        self.docs.len()
    }

    /// Queries plus documents.
    pub fn num_vertices(&self) -> usize {
        self.queries.len() + self.docs.len()
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn total_edge_weight(&self) -> u64 {
        self.total_edge_weight
    }

    /// All edges as (query index, doc index, weight), sorted.
    pub fn edges(&self) -> &[(u32, u32, u32)] {
        &self.edges
    }

    pub fn query_neighbors(&self, q: u32) -> impl Iterator<Item = (u32, u32)> + '_ {
        self.by_query.row(q)
    }

    pub fn doc_neighbors(&self, d: u32) -> impl Iterator<Item = (u32, u32)> + '_ {
        self.by_doc.row(d)
    }

    pub fn query_degree(&self, q: u32) -> usize {
        self.by_query.degree(q)
    }

    pub fn doc_degree(&self, d: u32) -> usize {
        self.by_doc.degree(d)
    }

    pub fn doc_vertex(&self, d: u32) -> u32 {
        self.queries.len() as u32 + d
    }

    pub fn is_query_vertex(&self, v: u32) -> bool {
        (v as usize) < self.queries.len()
    }

    /// Neighbors of a vertex in the unified numbering, with edge weights.
    pub fn vertex_neighbors(&self, v: u32) -> Box<dyn Iterator<Item = (u32, u32)> + '_> {
        let nq = self.queries.len() as u32;
        if v < nq {
            Box::new(self.by_query.row(v).map(move |(d, w)| (d + nq, w)))
        } else {
            Box::new(self.by_doc.row(v - nq))
        }
    }

    pub fn vertex_label(&self, v: u32) -> &str {
        let nq = self.queries.len() as u32;
        if v < nq {
            self.queries.id(v)
        } else {
            self.docs.id(v - nq)
        }
    }

    pub fn has_edge(&self, q: u32, d: u32) -> bool {
        let range = self.by_query.offsets[q as usize]..self.by_query.offsets[q as usize + 1];
        self.by_query.targets[range].binary_search(&d).is_ok()
    }

    /// Persists the graph as the interactions TSV plus the two id tables.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let records: Vec<InteractionRecord> = self
            .edges
            .iter()
            .map(|&(q, d, w)| InteractionRecord::new(self.queries.id(q), self.docs.id(d), w))
            .collect();
        write_interactions(dir.join("interactions.tsv"), &records)?;
        self.queries.write(dir.join("queries.txt"))?;
        self.docs.write(dir.join("docs.txt"))
    }
}

/// Symmetric r×r matrix of cross-cluster edge weight. The diagonal holds
/// intra-cluster weight and is never consulted by sampling.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AffinityMatrix {
    r: usize,
    values: Vec<u64>,
}

impl AffinityMatrix {
    pub fn zeros(r: usize) -> Self {
        Self {
            r,
            values: vec![0; r * r],
        }
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let r = rows.len();
        let mut m = Self::zeros(r);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != r {
                return Err(Error::InvalidInput("affinity matrix must be square".into()));
            }
            for (j, &v) in row.iter().enumerate() {
                m.values[i * r + j] = v;
            }
        }
        for i in 0..r {
            for j in 0..i {
                if m.get(i, j) != m.get(j, i) {
                    return Err(Error::InvalidInput("affinity matrix must be symmetric".into()));
                }
            }
        }
        Ok(m)
    }

    pub fn r(&self) -> usize {
        self.r
    }

    pub fn get(&self, i: usize, j: usize) -> u64 {
        self.values[i * self.r + j]
    }

    pub fn row(&self, i: usize) -> &[u64] {
        &self.values[i * self.r..(i + 1) * self.r]
    }

    /// Σ_{i<j} A[i][j], which equals the edge cut of the partitioning it came from.
    pub fn off_diagonal_sum(&self) -> u64 {
        (0..self.r)
            .flat_map(|i| (i + 1..self.r).map(move |j| (i, j)))
            .map(|(i, j)| self.get(i, j))
            .sum()
    }

    fn add(&mut self, i: usize, j: usize, w: u64) {
        if i == j {
            self.values[i * self.r + i] += w;
        } else {
            self.values[i * self.r + j] += w;
            self.values[j * self.r + i] += w;
        }
    }
}

pub fn cluster_affinity(graph: &BipartiteGraph, partitioning: &Partitioning) -> Result<AffinityMatrix> {
    partitioning.check_covers(graph)?;
    let mut a = AffinityMatrix::zeros(partitioning.r());
    for &(q, d, w) in graph.edges() {
        let cq = partitioning.cluster_of(q) as usize;
        let cd = partitioning.cluster_of(graph.doc_vertex(d)) as usize;
        a.add(cq, cd, w as u64);
    }
    Ok(a)
}
