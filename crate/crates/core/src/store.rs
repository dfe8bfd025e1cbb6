//! The memory store: graph, blocklist, vector index and audit log behind a
//! single writer.
//!
//! Every mutation is planned against the current state, logged, and only
//! then applied. If the process dies between the log append and the
//! mutation, [`MemoryStore::recover`] replays the log tail over the last
//! persisted snapshot.

use std::collections::BTreeSet;
use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write as _};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::audit::{AuditLog, AuditOp, AuditRecord, Digest};
use crate::blocklist::{Blocklist, BlocklistEntry};
use crate::config::RetrievalConfig;
use crate::error::{Error, Result};
use crate::graph::{DependencyEdge, ForgetRequest, Layer, MemoryGraph, MemoryNode, NodeId, PruneReport};
use crate::retrieval::{EmbeddingProvider, HashEmbedder, HybridQuery, ProviderKind, ScoredHit, VectorIndex};
use crate::text::tokenize;

pub const STORE_FORMAT_VERSION: u32 = 1;

pub const NODES_FILE: &str = "nodes.jsonl";
pub const EDGES_FILE: &str = "edges.jsonl";
pub const BLOCKLIST_FILE: &str = "blocklist.jsonl";
pub const INDEX_FILE: &str = "index.jsonl";
pub const AUDIT_FILE: &str = "audit.log";
const LOCK_FILE: &str = "store.lock";

/// Digest of the normalized token stream of `content`, so that case and
/// punctuation changes do not evade the write guard.
pub fn content_digest(content: &str) -> Digest {
    Digest::of(tokenize(content).join(" ").as_bytes())
}

pub type SharedEmbedder = Arc<dyn EmbeddingProvider + Send + Sync>;

pub fn embedder_for(cfg: &RetrievalConfig) -> Result<SharedEmbedder> {
    match cfg.provider {
        ProviderKind::DeterministicHash => Ok(Arc::new(HashEmbedder::new(cfg.embed_dim))),
        ProviderKind::ExternalService => {
            Err(Error::Config("no external embedding service is configured; use provider = hash".into()))
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize)]
pub struct RebuildOutcome {
    pub rebuilt: bool,
    pub generation: u64,
    pub purged: usize,
    pub unblocked: usize,
}

/// The parts of a store that are persisted as a snapshot, plus the audit
/// sequence number up to which they are current.
#[derive(Clone, Debug, PartialEq)]
pub struct StoreSnapshot {
    pub graph: MemoryGraph,
    pub blocklist: Blocklist,
    pub index: VectorIndex,
    pub applied_seq: u64,
}

#[derive(Clone)]
pub struct MemoryStore {
    graph: MemoryGraph,
    blocklist: Blocklist,
    index: VectorIndex,
    audit: AuditLog,
    embedder: SharedEmbedder,
    retrieval: RetrievalConfig,
    applied_seq: u64,
    fault: Option<AuditOp>,
}

impl fmt::Debug for MemoryStore {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MemoryStore")
            .field("nodes", &self.graph.len())
            .field("blocked", &self.blocklist.len())
            .field("index_generation", &self.index.generation())
            .field("audit_records", &self.audit.len())
            .finish()
    }
}

impl MemoryStore {
    pub fn new(retrieval: RetrievalConfig) -> Result<Self> {
        let embedder = embedder_for(&retrieval)?;
        Ok(Self::with_embedder(retrieval, embedder))
    }

    pub fn with_embedder(retrieval: RetrievalConfig, embedder: SharedEmbedder) -> Self {
        MemoryStore {
            graph: MemoryGraph::new(),
            blocklist: Blocklist::new(),
            index: VectorIndex::new(embedder.dim()),
            audit: AuditLog::new(),
            embedder,
            retrieval,
            applied_seq: 0,
            fault: None,
        }
    }

    pub fn graph(&self) -> &MemoryGraph {
        &self.graph
    }

    pub fn blocklist(&self) -> &Blocklist {
        &self.blocklist
    }

    pub fn index(&self) -> &VectorIndex {
        &self.index
    }

    pub fn audit(&self) -> &AuditLog {
        &self.audit
    }

    pub fn retrieval_config(&self) -> &RetrievalConfig {
        &self.retrieval
    }

    pub fn embedder(&self) -> &dyn EmbeddingProvider {
        self.embedder.as_ref()
    }

    pub fn is_blocked(&self, id: NodeId) -> bool {
        self.blocklist.is_blocked(id)
    }

    /// Makes the next mutation of kind `op` fail right after its audit
    /// record is written, leaving state untouched. For crash testing.
    #[doc(hidden)]
    pub fn inject_fault_after(&mut self, op: AuditOp) {
        self.fault = Some(op);
    }

    fn log(&mut self, op: AuditOp, payload: Value) -> Result<()> {
        self.audit.append(op, payload)?;
        if self.fault == Some(op) {
            self.fault = None;
            return Err(Error::InjectedFault);
        }
        Ok(())
    }

    fn mark_applied(&mut self) {
        self.applied_seq = self.audit.next_seq();
    }

    /// The write function of the agent: stores a memory derived from
    /// `parents`. Content matching a forgotten memory is refused.
    pub fn add_memory(&mut self, layer: Layer, content: &str, parents: &[NodeId]) -> Result<NodeId> {
        let parent_set = self.graph.check_add(layer, parents)?;
        let digest = content_digest(content);
        if self.blocklist.is_forbidden(&digest) {
            return Err(Error::ContentBlocked);
        }
        let id = self.graph.next_id();
        self.log(
            AuditOp::Write,
            json!({ "id": id, "layer": layer, "parents": parent_set, "content_digest": digest }),
        )?;
        let created = self.graph.add_memory(layer, content, parents)?;
        debug_assert_eq!(created, id);
        self.index.insert(id, content, self.embedder.as_ref());
        self.mark_applied();
        Ok(id)
    }

    /// `B <- B ∪ targets`. The Block record is written before the set
    /// changes. Returns the new blocklist size.
    pub fn block(&mut self, targets: &BTreeSet<NodeId>) -> Result<usize> {
        self.log(AuditOp::Block, json!({ "ids": targets }))?;
        self.apply_block(targets);
        self.mark_applied();
        Ok(self.blocklist.len())
    }

    fn apply_block(&mut self, targets: &BTreeSet<NodeId>) {
        for &t in targets {
            if let Some(n) = self.graph.get(t) {
                if !n.content.is_empty() {
                    self.blocklist.forbid_digest(content_digest(&n.content));
                }
            }
        }
        self.blocklist.insert_all(targets.iter().copied(), self.index.generation());
    }

    pub fn dependency_closure(&self, targets: &BTreeSet<NodeId>) -> Result<BTreeSet<NodeId>> {
        self.graph.dependency_closure(targets)
    }

    /// Deletes the request's targets and prunes their closure, then drops
    /// the vectors of every node that left the Active state. Targets must
    /// already be blocked.
    pub fn prune(&mut self, request: &ForgetRequest, closure: &BTreeSet<NodeId>) -> Result<PruneReport> {
        if let Some(&t) =
            request.targets.iter().find(|t| self.graph.get(**t).is_some() && !self.blocklist.is_blocked(**t))
        {
            return Err(Error::NotBlocked(t));
        }
        let plan = self.graph.plan_prune(&request.targets, closure)?;
        self.log(
            AuditOp::Prune,
            json!({
                "request": request.request_id,
                "targets": request.targets,
                "closure": closure,
                "report": plan.report,
            }),
        )?;
        let deactivated: BTreeSet<NodeId> = plan.deactivated().collect();
        self.graph.apply_prune(&plan);
        self.mark_applied();
        self.delete_vectors(&deactivated)?;
        Ok(plan.report)
    }

    /// Deletes `ids` alone: no blocklist entry and no closure, so anything
    /// derived from them stays Active. This is the naive baseline, not part
    /// of the forgetting protocol.
    pub fn remove_entries(&mut self, ids: &BTreeSet<NodeId>) -> Result<PruneReport> {
        let plan = self.graph.plan_prune(ids, &BTreeSet::new())?;
        self.log(
            AuditOp::Prune,
            json!({ "request": "entries-only", "targets": ids, "closure": [], "report": plan.report }),
        )?;
        let deactivated: BTreeSet<NodeId> = plan.deactivated().collect();
        self.graph.apply_prune(&plan);
        self.mark_applied();
        self.delete_vectors(&deactivated)?;
        Ok(plan.report)
    }

    /// Tombstones the vectors of `ids` in the live index.
    pub fn delete_vectors(&mut self, ids: &BTreeSet<NodeId>) -> Result<usize> {
        let live: BTreeSet<NodeId> = ids.iter().copied().filter(|&id| self.index.contains_live(id)).collect();
        if live.is_empty() {
            return Ok(0);
        }
        self.log(AuditOp::Delete, json!({ "ids": live }))?;
        for &id in &live {
            self.index.remove(id)?;
        }
        self.mark_applied();
        Ok(live.len())
    }

    /// Hybrid search with the blocklist enforced at the boundary.
    pub fn search(&self, query: &HybridQuery) -> Result<Vec<ScoredHit>> {
        query.validate()?;
        Ok(self.index.search(query, self.embedder.as_ref(), &self.blocklist, &self.graph))
    }

    /// Search with the configured retrieval parameters.
    pub fn retrieve(&self, text: &str) -> Result<Vec<ScoredHit>> {
        self.search(&self.retrieval.query(text))
    }

    /// Rebuilds the index when `|B| > tau`, then compacts: tombstoned nodes
    /// are purged from the graph and blocklist entries whose nodes are gone
    /// and whose block predates the new index generation are dropped.
    pub fn maybe_rebuild(&mut self) -> Result<RebuildOutcome> {
        if self.blocklist.len() <= self.retrieval.tau {
            return Ok(RebuildOutcome {
                rebuilt: false,
                generation: self.index.generation(),
                purged: 0,
                unblocked: 0,
            });
        }
        self.force_rebuild()
    }

    /// Unconditional rebuild and compaction.
    pub fn force_rebuild(&mut self) -> Result<RebuildOutcome> {
        let generation = self.index.generation() + 1;
        self.log(AuditOp::Rebuild, json!({ "generation": generation }))?;
        self.index.rebuild(&self.graph, &self.blocklist, self.embedder.as_ref());
        self.mark_applied();

        let purged: Vec<NodeId> = self.graph.nodes().filter(|n| !n.is_active()).map(|n| n.id).collect();
        let purged_set: BTreeSet<NodeId> = purged.iter().copied().collect();
        let unblocked: Vec<NodeId> = self
            .blocklist
            .entries()
            .into_iter()
            .filter_map(|e| match e {
                BlocklistEntry::Id { id, index_generation } if index_generation < generation => Some(id),
                _ => None,
            })
            .filter(|id| purged_set.contains(id) || self.graph.get(*id).is_none())
            .filter(|id| !self.index.is_stored(*id))
            .collect();
        self.log(AuditOp::Compact, json!({ "purged": purged, "unblocked": unblocked }))?;
        self.apply_compact(&unblocked);
        self.mark_applied();
        Ok(RebuildOutcome { rebuilt: true, generation, purged: purged.len(), unblocked: unblocked.len() })
    }

    fn apply_compact(&mut self, unblocked: &[NodeId]) {
        self.graph.compact();
        let drop: BTreeSet<NodeId> = unblocked.iter().copied().collect();
        self.blocklist.compact(u64::MAX, |id| drop.contains(&id));
    }

    /// Appends a record that carries no state change (archive markers,
    /// parameter-training records).
    pub fn append_note(&mut self, op: AuditOp, payload: Value) -> Result<&AuditRecord> {
        self.log(op, payload)?;
        self.mark_applied();
        Ok(self.audit.records().last().expect("just appended"))
    }

    pub fn snapshot(&self) -> StoreSnapshot {
        StoreSnapshot {
            graph: self.graph.clone(),
            blocklist: self.blocklist.clone(),
            index: self.index.clone(),
            applied_seq: self.applied_seq,
        }
    }

    /// Rebuilds a store from a snapshot and the full audit log by replaying
    /// every record at or after the snapshot's `applied_seq`. Writes cannot
    /// be replayed because the log holds no content; a write whose mutation
    /// never happened only retires its id.
    pub fn recover(
        snapshot: StoreSnapshot,
        audit: AuditLog,
        retrieval: RetrievalConfig,
        embedder: SharedEmbedder,
    ) -> Result<Self> {
        let mut store = MemoryStore {
            graph: snapshot.graph,
            blocklist: snapshot.blocklist,
            index: snapshot.index,
            audit: AuditLog::new(),
            embedder,
            retrieval,
            applied_seq: snapshot.applied_seq,
            fault: None,
        };
        let tail: Vec<AuditRecord> = audit.records().iter().skip(snapshot.applied_seq as usize).cloned().collect();
        store.audit = audit;
        for rec in &tail {
            store.replay(rec)?;
        }
        store.mark_applied();
        Ok(store)
    }

    fn replay(&mut self, rec: &AuditRecord) -> Result<()> {
        let bad = |reason: &str| Error::Malformed { what: "audit payload", line: rec.seq as usize + 1, reason: reason.into() };
        let ids = |key: &str| -> Result<BTreeSet<NodeId>> {
            serde_json::from_value(rec.payload.get(key).cloned().unwrap_or(Value::Null)).map_err(|_| bad(key))
        };
        match rec.op {
            AuditOp::Write => {
                let id: NodeId = serde_json::from_value(rec.payload["id"].clone()).map_err(|_| bad("id"))?;
                if self.graph.get(id).is_none() {
                    self.graph.burn_id(id);
                }
            }
            AuditOp::Block => self.apply_block(&ids("ids")?),
            AuditOp::Prune => {
                let targets = ids("targets")?;
                let closure = ids("closure")?;
                let known: BTreeSet<NodeId> = targets.into_iter().filter(|t| self.graph.get(*t).is_some()).collect();
                let plan = self.graph.plan_prune(&known, &closure)?;
                let deactivated: Vec<NodeId> = plan.deactivated().collect();
                self.graph.apply_prune(&plan);
                for id in deactivated {
                    if self.index.contains_live(id) {
                        self.index.remove(id)?;
                    }
                }
            }
            AuditOp::Delete => {
                for id in ids("ids")? {
                    if self.index.is_stored(id) {
                        self.index.remove(id)?;
                    }
                }
            }
            AuditOp::Rebuild => self.index.rebuild(&self.graph, &self.blocklist, self.embedder.as_ref()),
            AuditOp::Compact => {
                let unblocked: Vec<NodeId> = ids("unblocked")?.into_iter().collect();
                self.apply_compact(&unblocked);
            }
            AuditOp::Archive | AuditOp::Train => {}
        }
        Ok(())
    }

    /// Writes the snapshot files into `dir`. The audit log is not touched
    /// here; a file-backed log is appended to as records are created.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let nodes_header = json!({
            "format": "sbu-nodes",
            "version": STORE_FORMAT_VERSION,
            "next_id": self.graph.next_id(),
            "applied_seq": self.applied_seq,
        });
        write_jsonl(&dir.join(NODES_FILE), &nodes_header, self.graph.nodes())?;
        let edges_header = json!({ "format": "sbu-edges", "version": STORE_FORMAT_VERSION });
        write_jsonl(&dir.join(EDGES_FILE), &edges_header, self.graph.edges())?;
        let bl_header = json!({
            "format": "sbu-blocklist",
            "version": STORE_FORMAT_VERSION,
            "generation": self.blocklist.generation(),
        });
        write_jsonl(&dir.join(BLOCKLIST_FILE), &bl_header, self.blocklist.entries().iter())?;
        let idx_header = json!({
            "format": "sbu-index",
            "version": STORE_FORMAT_VERSION,
            "generation": self.index.generation(),
            "dim": self.embedder.dim(),
        });
        let entries: Vec<IndexLine> = self
            .index
            .live_ids()
            .map(|id| IndexLine { id, live: true })
            .chain(self.index.tombstones().map(|id| IndexLine { id, live: false }))
            .collect();
        write_jsonl(&dir.join(INDEX_FILE), &idx_header, entries.iter())?;
        Ok(())
    }

    /// Opens a store directory, creating an empty store if it holds no
    /// snapshot yet. The audit log in the directory becomes the live,
    /// file-backed log and any records past the snapshot are replayed.
    pub fn open(dir: &Path, retrieval: RetrievalConfig) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let embedder = embedder_for(&retrieval)?;
        let audit = AuditLog::open(&dir.join(AUDIT_FILE))?;
        let snapshot = if dir.join(NODES_FILE).exists() {
            load_snapshot(dir, embedder.as_ref())?
        } else {
            StoreSnapshot {
                graph: MemoryGraph::new(),
                blocklist: Blocklist::new(),
                index: VectorIndex::new(embedder.dim()),
                applied_seq: 0,
            }
        };
        Self::recover(snapshot, audit, retrieval, embedder)
    }
}

#[derive(Serialize, Deserialize)]
struct IndexLine {
    id: NodeId,
    live: bool,
}

#[derive(Deserialize)]
struct NodesHeader {
    format: String,
    version: u32,
    next_id: NodeId,
    applied_seq: u64,
}

#[derive(Deserialize)]
struct GenHeader {
    format: String,
    version: u32,
    #[serde(default)]
    generation: u64,
    #[serde(default)]
    dim: Option<usize>,
}

fn write_jsonl<'a, T: Serialize + 'a>(path: &Path, header: &Value, rows: impl Iterator<Item = T>) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::io::BufWriter::new(File::create(&tmp)?);
        serde_json::to_writer(&mut f, header)?;
        f.write_all(b"\n")?;
        for row in rows {
            serde_json::to_writer(&mut f, &row)?;
            f.write_all(b"\n")?;
        }
        f.flush()?;
    }
    fs::rename(tmp, path)?;
    Ok(())
}

fn read_jsonl<H: DeserializeOwned + HasFormat, T: DeserializeOwned>(
    path: &Path,
    what: &'static str,
    format: &str,
) -> Result<(H, Vec<T>)> {
    let reader = BufReader::new(File::open(path)?);
    let mut lines = reader.lines();
    let malformed = |line: usize, reason: String| Error::Malformed { what, line, reason };
    let header_line = lines.next().ok_or_else(|| malformed(1, "missing header".into()))??;
    let header: H = serde_json::from_str(&header_line).map_err(|e| malformed(1, e.to_string()))?;
    if header.format() != format || header.version() != STORE_FORMAT_VERSION {
        return Err(malformed(1, format!("expected {format} version {STORE_FORMAT_VERSION}")));
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        rows.push(serde_json::from_str(&line).map_err(|e| malformed(i + 2, e.to_string()))?);
    }
    Ok((header, rows))
}

trait HasFormat {
    fn format(&self) -> &str;
    fn version(&self) -> u32;
}

impl HasFormat for NodesHeader {
    fn format(&self) -> &str {
        &self.format
    }
    fn version(&self) -> u32 {
        self.version
    }
}

impl HasFormat for GenHeader {
    fn format(&self) -> &str {
        &self.format
    }
    fn version(&self) -> u32 {
        self.version
    }
}

fn load_snapshot(dir: &Path, embedder: &dyn EmbeddingProvider) -> Result<StoreSnapshot> {
    let (nh, nodes): (NodesHeader, Vec<MemoryNode>) = read_jsonl(&dir.join(NODES_FILE), "nodes file", "sbu-nodes")?;
    let (_, edges): (GenHeader, Vec<DependencyEdge>) = read_jsonl(&dir.join(EDGES_FILE), "edges file", "sbu-edges")?;
    let graph = MemoryGraph::from_parts(nodes, edges, nh.next_id)
        .map_err(|reason| Error::Malformed { what: "store graph", line: 0, reason })?;
    let (bh, entries): (GenHeader, Vec<BlocklistEntry>) =
        read_jsonl(&dir.join(BLOCKLIST_FILE), "blocklist file", "sbu-blocklist")?;
    let blocklist = Blocklist::from_entries(bh.generation, entries);
    let (ih, lines): (GenHeader, Vec<IndexLine>) = read_jsonl(&dir.join(INDEX_FILE), "index file", "sbu-index")?;
    if ih.dim.is_some_and(|d| d != embedder.dim()) {
        return Err(Error::Config(format!("index was built with dim {:?}, embedder has {}", ih.dim, embedder.dim())));
    }
    let (live, dead): (Vec<IndexLine>, Vec<IndexLine>) = lines.into_iter().partition(|l| l.live);
    let index = VectorIndex::restore(
        embedder.dim(),
        ih.generation,
        live.into_iter().map(|l| l.id),
        dead.into_iter().map(|l| l.id),
        &graph,
        embedder,
    )
    .map_err(|reason| Error::Malformed { what: "index file", line: 0, reason })?;
    Ok(StoreSnapshot { graph, blocklist, index, applied_seq: nh.applied_seq })
}

/// Exclusive ownership of a store directory for the lifetime of the guard.
#[derive(Debug)]
pub struct StoreLock {
    path: PathBuf,
}

impl StoreLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id())?;
                Ok(StoreLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Locked(dir.to_path_buf())),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for StoreLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}
