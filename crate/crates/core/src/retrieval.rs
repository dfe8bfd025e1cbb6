//! Hybrid dense + keyword retrieval with blocklist enforcement.
//!
//! Candidates are scored exactly over every live index entry; the top
//! `top_k * oversample_r` are then filtered against the blocklist and node
//! status, and the first `top_k` survivors are returned. Removal is a
//! tombstone until the next rebuild.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, HashSet};

use serde::{Deserialize, Serialize};

use crate::blocklist::Blocklist;
use crate::error::{Error, Result};
use crate::graph::{MemoryGraph, NodeId};
use crate::text::{fnv1a, tokenize};

pub const DEFAULT_EMBED_DIM: usize = 256;

pub trait EmbeddingProvider {
    fn dim(&self) -> usize;
    fn embed(&self, text: &str) -> Vec<f64>;
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    DeterministicHash,
    ExternalService,
}

/// Signed feature hashing of tokens, L2-normalized.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct HashEmbedder {
    dim: usize,
}

impl HashEmbedder {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        HashEmbedder { dim }
    }
}

impl Default for HashEmbedder {
    fn default() -> Self {
        HashEmbedder::new(DEFAULT_EMBED_DIM)
    }
}

impl EmbeddingProvider for HashEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        for tok in tokenize(text) {
            let h = fnv1a(tok.as_bytes());
            let sign = if h >> 63 == 1 { -1.0 } else { 1.0 };
            v[(h % self.dim as u64) as usize] += sign;
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            // no tokens, or every token cancelled out
            v[0] = 1.0;
        } else {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        v
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb)).clamp(-1.0, 1.0)
    }
}

/// Fraction of distinct query tokens that occur in the document.
pub fn keyword_score(query: &HashSet<String>, doc: &HashSet<String>) -> f64 {
    if query.is_empty() {
        return 0.0;
    }
    query.iter().filter(|t| doc.contains(*t)).count() as f64 / query.len() as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct HybridQuery {
    pub text: String,
    pub top_k: usize,
    pub oversample_r: usize,
    pub w_sem: f64,
    pub w_kw: f64,
}

impl HybridQuery {
    pub fn new(text: impl Into<String>) -> Self {
        HybridQuery { text: text.into(), top_k: 5, oversample_r: 3, w_sem: 0.7, w_kw: 0.3 }
    }

    pub fn with_top_k(mut self, k: usize) -> Self {
        self.top_k = k;
        self
    }

    pub fn with_oversample(mut self, r: usize) -> Self {
        self.oversample_r = r;
        self
    }

    pub fn with_weights(mut self, w_sem: f64, w_kw: f64) -> Self {
        self.w_sem = w_sem;
        self.w_kw = w_kw;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.top_k == 0 || self.oversample_r == 0 {
            return Err(Error::Config("top_k and oversample_r must be at least 1".into()));
        }
        if (self.w_sem + self.w_kw - 1.0).abs() > 1e-9 || self.w_sem < 0.0 || self.w_kw < 0.0 {
            return Err(Error::Config("w_sem and w_kw must be nonnegative and sum to 1".into()));
        }
        Ok(())
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredHit {
    pub id: NodeId,
    pub sem_score: f64,
    pub kw_score: f64,
    pub combined: f64,
}

/// Descending combined score, ascending id on ties.
pub fn rank_order(a: &ScoredHit, b: &ScoredHit) -> Ordering {
    b.combined.total_cmp(&a.combined).then(a.id.cmp(&b.id))
}

#[derive(Clone, Debug, PartialEq)]
struct IndexEntry {
    vector: Vec<f64>,
    tokens: HashSet<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VectorIndex {
    dim: usize,
    entries: BTreeMap<NodeId, IndexEntry>,
    tombstones: BTreeSet<NodeId>,
    generation: u64,
}

impl VectorIndex {
    pub fn new(dim: usize) -> Self {
        VectorIndex { dim, entries: BTreeMap::new(), tombstones: BTreeSet::new(), generation: 0 }
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    /// Entries that are searchable.
    pub fn live_len(&self) -> usize {
        self.entries.len() - self.tombstones.len()
    }

    /// Entries physically held, including tombstones.
    pub fn stored_len(&self) -> usize {
        self.entries.len()
    }

    pub fn contains_live(&self, id: NodeId) -> bool {
        self.entries.contains_key(&id) && !self.tombstones.contains(&id)
    }

    pub fn is_stored(&self, id: NodeId) -> bool {
        self.entries.contains_key(&id)
    }

    pub fn live_ids(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.entries.keys().copied().filter(|id| !self.tombstones.contains(id))
    }

    pub fn tombstones(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.tombstones.iter().copied()
    }

    pub fn insert(&mut self, id: NodeId, text: &str, embedder: &dyn EmbeddingProvider) {
        debug_assert_eq!(embedder.dim(), self.dim);
        let entry = IndexEntry { vector: embedder.embed(text), tokens: tokenize(text).into_iter().collect() };
        self.entries.insert(id, entry);
        self.tombstones.remove(&id);
    }

    /// Logical removal: the id stays until the next rebuild but its vector
    /// is dropped. Removing an already tombstoned id is a no-op.
    pub fn remove(&mut self, id: NodeId) -> Result<()> {
        let entry = self.entries.get_mut(&id).ok_or(Error::NotIndexed(id))?;
        *entry = IndexEntry { vector: Vec::new(), tokens: HashSet::new() };
        self.tombstones.insert(id);
        Ok(())
    }

    /// Exact hybrid scores of the best `n` live entries.
    pub fn candidates(&self, query: &HybridQuery, embedder: &dyn EmbeddingProvider, n: usize) -> Vec<ScoredHit> {
        let qv = embedder.embed(&query.text);
        let qt: HashSet<String> = tokenize(&query.text).into_iter().collect();
        let mut hits: Vec<ScoredHit> = self
            .entries
            .iter()
            .filter(|(id, _)| !self.tombstones.contains(id))
            .map(|(&id, e)| {
                let sem_score = cosine(&qv, &e.vector);
                let kw_score = keyword_score(&qt, &e.tokens);
                ScoredHit { id, sem_score, kw_score, combined: query.w_sem * sem_score + query.w_kw * kw_score }
            })
            .collect();
        if hits.len() > n {
            hits.select_nth_unstable_by(n, rank_order);
            hits.truncate(n);
        }
        hits.sort_by(rank_order);
        hits
    }

    /// Oversampled search with blocklist and status filtering. Never returns a
    /// blocked id or a node that is not Active. If fewer than `top_k`
    /// candidates survive, the shorter list is returned.
    pub fn search(
        &self,
        query: &HybridQuery,
        embedder: &dyn EmbeddingProvider,
        blocklist: &Blocklist,
        graph: &MemoryGraph,
    ) -> Vec<ScoredHit> {
        let pool = query.top_k.saturating_mul(query.oversample_r);
        self.candidates(query, embedder, pool)
            .into_iter()
            .filter(|h| !blocklist.is_blocked(h.id) && graph.is_active(h.id))
            .take(query.top_k)
            .collect()
    }

    /// Reconstructs the index over Active, unblocked nodes and bumps the
    /// generation.
    pub fn rebuild(&mut self, graph: &MemoryGraph, blocklist: &Blocklist, embedder: &dyn EmbeddingProvider) {
        let mut fresh = VectorIndex::new(self.dim);
        for id in graph.active_view().filter(|id| !blocklist.is_blocked(*id)) {
            let node = graph.get(id).expect("active ids exist");
            fresh.insert(id, &node.content, embedder);
        }
        fresh.generation = self.generation + 1;
        *self = fresh;
    }

    /// Restores a persisted index: live entries are re-embedded from graph
    /// content, tombstones are kept as bare ids.
    pub fn restore(
        dim: usize,
        generation: u64,
        live: impl IntoIterator<Item = NodeId>,
        tombstones: impl IntoIterator<Item = NodeId>,
        graph: &MemoryGraph,
        embedder: &dyn EmbeddingProvider,
    ) -> std::result::Result<Self, String> {
        let mut idx = VectorIndex::new(dim);
        idx.generation = generation;
        for id in live {
            let node = graph.get(id).ok_or_else(|| format!("indexed node {id} missing from graph"))?;
            idx.insert(id, &node.content, embedder);
        }
        for id in tombstones {
            idx.entries.entry(id).or_insert_with(|| IndexEntry { vector: Vec::new(), tokens: HashSet::new() });
            idx.tombstones.insert(id);
        }
        Ok(idx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Layer;

    #[test]
    fn hash_embedding_is_deterministic_unit_norm() {
        let e = HashEmbedder::new(64);
        for text in ["", "a", "hello world", "the the the", "Zorvax kelimine treatment"] {
            let v = e.embed(text);
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-9, "{text:?}");
            assert_eq!(v, e.embed(text));
            assert!((cosine(&v, &v) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn keyword_overlap() {
        let q: HashSet<String> = ["a", "b", "c", "d"].map(String::from).into();
        let d: HashSet<String> = ["b", "d", "x"].map(String::from).into();
        assert_eq!(keyword_score(&q, &d), 0.5);
        assert_eq!(keyword_score(&HashSet::new(), &d), 0.0);
    }

    #[test]
    fn query_validation() {
        assert!(HybridQuery::new("x").validate().is_ok());
        assert!(HybridQuery::new("x").with_top_k(0).validate().is_err());
        assert!(HybridQuery::new("x").with_oversample(0).validate().is_err());
        assert!(HybridQuery::new("x").with_weights(0.6, 0.3).validate().is_err());
    }

    #[test]
    fn weights_sanity() {
        let a = ScoredHit { id: NodeId(1), sem_score: 1.0, kw_score: 0.0, combined: 0.7 * 1.0 + 0.3 * 0.0 };
        let b = ScoredHit { id: NodeId(0), sem_score: 0.0, kw_score: 1.0, combined: 0.7 * 0.0 + 0.3 * 1.0 };
        assert!((a.combined - 0.7).abs() < 1e-12 && (b.combined - 0.3).abs() < 1e-12);
        let mut v = vec![b, a];
        v.sort_by(rank_order);
        assert_eq!(v[0].id, NodeId(1));
    }

    #[test]
    fn empty_index_returns_nothing() {
        let idx = VectorIndex::new(16);
        let hits = idx.search(&HybridQuery::new("x"), &HashEmbedder::new(16), &Blocklist::new(), &MemoryGraph::new());
        assert!(hits.is_empty());
    }

    #[test]
    fn insert_remove_search() {
        let e = HashEmbedder::new(32);
        let mut g = MemoryGraph::new();
        let id = g.add_memory(Layer::Episodic, "alpha beta", &[]).unwrap();
        let mut idx = VectorIndex::new(32);
        idx.insert(id, "alpha beta", &e);
        let q = HybridQuery::new("alpha");
        assert_eq!(idx.search(&q, &e, &Blocklist::new(), &g).len(), 1);
        idx.remove(id).unwrap();
        idx.remove(id).unwrap();
        assert!(idx.search(&q, &e, &Blocklist::new(), &g).is_empty());
        assert!(matches!(idx.remove(NodeId(9)), Err(Error::NotIndexed(_))));
    }

    #[test]
    fn blocked_best_match_yields_second_best() {
        let e = HashEmbedder::new(64);
        let mut g = MemoryGraph::new();
        let mut idx = VectorIndex::new(64);
        let texts = [
            "cardiac arrest protocol", "renal dosage table", "cardiac rhythm strip", "neuro exam steps",
            "cardiac arrest drugs epinephrine", "skin rash chart", "lung sounds guide", "cardiac enzymes",
            "bone density", "eye pressure",
        ];
        for t in texts {
            let id = g.add_memory(Layer::Episodic, t, &[]).unwrap();
            idx.insert(id, t, &e);
        }
        let q = HybridQuery::new("cardiac arrest protocol").with_top_k(1).with_oversample(3);
        // independent linear scan over all stored texts
        let qt: HashSet<String> = tokenize(&q.text).into_iter().collect();
        let qv = e.embed(&q.text);
        let mut oracle: Vec<(f64, u64)> = texts
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let dt: HashSet<String> = tokenize(t).into_iter().collect();
                (0.7 * cosine(&qv, &e.embed(t)) + 0.3 * keyword_score(&qt, &dt), i as u64)
            })
            .collect();
        oracle.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));

        let mut bl = Blocklist::new();
        assert_eq!(idx.search(&q, &e, &bl, &g)[0].id, NodeId(oracle[0].1));
        bl.insert_all([NodeId(oracle[0].1)], 0);
        let hits = idx.search(&q, &e, &bl, &g);
        assert_eq!(hits.len(), 1);
        assert_eq!(hits[0].id, NodeId(oracle[1].1));
    }

    #[test]
    fn rebuild_drops_tombstones_and_keeps_results() {
        let e = HashEmbedder::new(32);
        let mut g = MemoryGraph::new();
        let mut idx = VectorIndex::new(32);
        for i in 0..20 {
            let t = format!("doc {i} topic{}", i % 4);
            let id = g.add_memory(Layer::Episodic, t.clone(), &[]).unwrap();
            idx.insert(id, &t, &e);
        }
        let gone = crate::graph::ForgetRequest::new("r", (0..5).map(NodeId));
        g.prune(&gone, &BTreeSet::new()).unwrap();
        for &id in &gone.targets {
            idx.remove(id).unwrap();
        }
        let q = HybridQuery::new("topic1 doc").with_top_k(4);
        let before = idx.search(&q, &e, &Blocklist::new(), &g);
        idx.rebuild(&g, &Blocklist::new(), &e);
        assert_eq!(idx.generation(), 1);
        assert_eq!((idx.live_len(), idx.stored_len()), (15, 15));
        assert_eq!(idx.search(&q, &e, &Blocklist::new(), &g), before);
    }
}
