//! Glue between raw interaction/text files and the model inputs: held-out
//! query split, token tables, training pairs, evaluation sets, and the
//! per-document cluster labels used to build a partitioned index.

use std::collections::{BTreeMap, HashMap};

use crate::embed::{encode, fnv1a64, ModelParams, TokenVocab, TrainData, VocabConfig};
use crate::error::{Error, Result};
use crate::graph::{BipartiteGraph, InteractionRecord};
use crate::knn::VectorSet;
use crate::partition::Partitioning;
use crate::router::{assign_document, RouterModel};
use crate::synth::Entity;

/// Whether a query belongs to the held-out set. Hash-based, so the split
/// depends only on the id, the fraction and the seed.
pub fn is_test_query(query_id: &str, test_fraction: f64, seed: u64) -> bool {
    let h = fnv1a64(&format!("{seed}\t{query_id}"));
    ((h % 1_000_000) as f64) < test_fraction * 1_000_000.0
}

/// Splits interactions into (train, test) by query.
pub fn split_records(
    records: &[InteractionRecord],
    test_fraction: f64,
    seed: u64,
) -> Result<(Vec<InteractionRecord>, Vec<InteractionRecord>)> {
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(Error::InvalidInput(format!("test fraction {test_fraction} not in [0, 1)")));
    }
    let (test, train): (Vec<_>, Vec<_>) = records
        .iter()
        .cloned()
        .partition(|r| is_test_query(&r.query_id, test_fraction, seed));
    if train.is_empty() {
        return Err(Error::InvalidInput("split left no training interactions".into()));
    }
    Ok((train, test))
}

/// Entity texts in file order; a row number doubles as the entity's vector id.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Texts {
    ids: Vec<String>,
    tokens: Vec<Vec<String>>,
    index: HashMap<String, usize>,
}

impl Texts {
    pub fn new(rows: Vec<(String, Vec<String>)>) -> Result<Self> {
        let mut t = Texts::default();
        for (id, toks) in rows {
            if t.index.insert(id.clone(), t.ids.len()).is_some() {
                return Err(Error::InvalidInput(format!("duplicate text id {id}")));
            }
            t.ids.push(id);
            t.tokens.push(toks);
        }
        Ok(t)
    }

    pub fn from_entities(entities: &[Entity]) -> Result<Self> {
        Self::new(entities.iter().map(|e| (e.id.clone(), e.tokens.clone())).collect())
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn tokens(&self, row: usize) -> &[String] {
        &self.tokens[row]
    }

    pub fn row_of(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    fn require(&self, id: &str, what: &str) -> Result<usize> {
        self.row_of(id)
            .ok_or_else(|| Error::InvalidInput(format!("{what} {id:?} has no text")))
    }
}

/// Fits the vocabulary on document texts plus the texts of the training
/// graph's queries (held-out query texts are not counted).
pub fn fit_vocab(graph: &BipartiteGraph, queries: &Texts, docs: &Texts, cfg: VocabConfig) -> Result<TokenVocab> {
    let mut rows = Vec::with_capacity(graph.num_queries() + docs.len());
    for id in graph.queries().ids() {
        rows.push(queries.tokens(queries.require(id, "query")?));
    }
    rows.extend(docs.tokens.iter().map(Vec::as_slice));
    TokenVocab::fit(rows, cfg)
}

pub fn tokenize_all(vocab: &TokenVocab, texts: &Texts) -> Vec<Vec<u32>> {
    texts.tokens.iter().map(|t| vocab.tokenize(t)).collect()
}

/// Training pairs over the graph's own indices.
pub fn train_data(
    graph: &BipartiteGraph,
    vocab_size: usize,
    queries: &Texts,
    query_tokens: &[Vec<u32>],
    docs: &Texts,
    doc_tokens: &[Vec<u32>],
) -> Result<TrainData> {
    let query_rows = graph
        .queries()
        .ids()
        .iter()
        .map(|id| queries.require(id, "query"))
        .collect::<Result<Vec<_>>>()?;
    let doc_rows = graph
        .docs()
        .ids()
        .iter()
        .map(|id| docs.require(id, "document"))
        .collect::<Result<Vec<_>>>()?;
    Ok(TrainData {
        vocab_size,
        query_tokens: query_rows.iter().map(|&r| query_tokens[r].clone()).collect(),
        doc_tokens: doc_rows.iter().map(|&r| doc_tokens[r].clone()).collect(),
        positives: graph.edges().iter().map(|&(q, d, _)| (q, d)).collect(),
    })
}

/// Held-out queries with their relevant document rows, in query-row order.
/// Returns (query row, relevant doc rows) pairs.
pub fn relevance(records: &[InteractionRecord], queries: &Texts, docs: &Texts) -> Result<Vec<(usize, Vec<u32>)>> {
    let mut rel: BTreeMap<usize, Vec<u32>> = BTreeMap::new();
    for r in records {
        let q = queries.require(&r.query_id, "query")?;
        let d = docs.require(&r.doc_id, "document")? as u32;
        let e = rel.entry(q).or_default();
        if !e.contains(&d) {
            e.push(d);
        }
    }
    Ok(rel.into_iter().collect())
}

/// Unit-norm embeddings of the given rows; vector ids are the row numbers.
pub fn embed_rows(params: &ModelParams, tokens: &[Vec<u32>], rows: &[usize]) -> Result<VectorSet> {
    let mut data = Vec::with_capacity(rows.len() * params.dim());
    for &r in rows {
        let v = encode(&tokens[r], params).map_err(|e| Error::InvalidInput(format!("row {r}: {e}")))?;
        data.extend(v.iter().map(|&x| x as f32));
    }
    VectorSet::new(params.dim(), rows.iter().map(|&r| r as u64).collect(), data)
}

/// Router training examples: every graph query's embedding, labeled with
/// its cluster. `query_vectors` holds vectors keyed by query text row.
pub fn router_examples(
    graph: &BipartiteGraph,
    partitioning: &Partitioning,
    queries: &Texts,
    query_vectors: &VectorSet,
) -> Result<Vec<(Vec<f32>, u32)>> {
    let pos: HashMap<u64, usize> = query_vectors.ids().iter().enumerate().map(|(i, &id)| (id, i)).collect();
    graph
        .queries()
        .ids()
        .iter()
        .enumerate()
        .map(|(qi, id)| {
            let row = queries.require(id, "query")? as u64;
            let at = *pos
                .get(&row)
                .ok_or_else(|| Error::InvalidInput(format!("no embedding for query {id}")))?;
            Ok((query_vectors.row(at).to_vec(), partitioning.cluster_of(qi as u32)))
        })
        .collect()
}

/// Cluster of each corpus vector (ids are document text rows): documents in
/// the training graph keep their partition cluster, the rest are routed.
pub fn assign_corpus(
    graph: &BipartiteGraph,
    partitioning: &Partitioning,
    docs: &Texts,
    corpus: &VectorSet,
    router: &RouterModel,
) -> Result<Vec<u32>> {
    if router.num_clusters() != partitioning.r() {
        return Err(Error::InvalidInput(format!(
            "router predicts {} clusters, partitioning has {}",
            router.num_clusters(),
            partitioning.r()
        )));
    }
    let mut routed = 0usize;
    let out = corpus
        .rows()
        .map(|(id, v)| {
            let name = docs
                .ids()
                .get(id as usize)
                .ok_or_else(|| Error::InvalidInput(format!("corpus id {id} has no document text")))?;
            match graph.docs().index_of(name) {
                Some(d) => Ok(partitioning.cluster_of(graph.doc_vertex(d))),
                None => {
                    routed += 1;
                    assign_document(router, v)
                }
            }
        })
        .collect::<Result<Vec<_>>>()?;
    log::info!("{routed} of {} corpus documents assigned by the router", corpus.len());
    Ok(out)
}
