use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::audit::Digest;
use crate::graph::NodeId;

/// Persistent set of forgotten node ids with O(1) membership.
///
/// Each id remembers the index generation current when it was blocked, so
/// compaction can tell whether a rebuild has happened since. Content digests
/// of blocked memories are kept separately and are never compacted away; they
/// guard the write path against verbatim re-insertion.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Blocklist {
    entries: HashMap<NodeId, u64>,
    digests: HashSet<Digest>,
    generation: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BlocklistEntry {
    Id { id: NodeId, index_generation: u64 },
    Digest { digest: Digest },
}

impl Blocklist {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn is_blocked(&self, id: NodeId) -> bool {
        self.entries.contains_key(&id)
    }

    /// Union with `targets`. Returns the new size.
    pub fn insert_all(&mut self, targets: impl IntoIterator<Item = NodeId>, index_generation: u64) -> usize {
        for t in targets {
            self.entries.entry(t).or_insert(index_generation);
        }
        self.entries.len()
    }

    pub fn forbid_digest(&mut self, digest: Digest) {
        self.digests.insert(digest);
    }

    pub fn is_forbidden(&self, digest: &Digest) -> bool {
        self.digests.contains(digest)
    }

    /// Drops ids for which `purged` holds and whose block predates
    /// `index_generation`. Bumps the blocklist generation and returns the
    /// dropped ids in ascending order.
    pub fn compact(&mut self, index_generation: u64, purged: impl Fn(NodeId) -> bool) -> Vec<NodeId> {
        let mut dropped: Vec<NodeId> = self
            .entries
            .iter()
            .filter(|(&id, &gen)| gen < index_generation && purged(id))
            .map(|(&id, _)| id)
            .collect();
        dropped.sort();
        for id in &dropped {
            self.entries.remove(id);
        }
        self.generation += 1;
        dropped
    }

    /// Entries in a stable order for persistence.
    pub fn entries(&self) -> Vec<BlocklistEntry> {
        let mut out: Vec<BlocklistEntry> = self
            .entries
            .iter()
            .map(|(&id, &index_generation)| BlocklistEntry::Id { id, index_generation })
            .chain(self.digests.iter().map(|&digest| BlocklistEntry::Digest { digest }))
            .collect();
        out.sort();
        out
    }

    pub fn from_entries(generation: u64, entries: impl IntoIterator<Item = BlocklistEntry>) -> Self {
        let mut b = Blocklist { generation, ..Default::default() };
        for e in entries {
            match e {
                BlocklistEntry::Id { id, index_generation } => {
                    b.entries.insert(id, index_generation);
                }
                BlocklistEntry::Digest { digest } => {
                    b.digests.insert(digest);
                }
            }
        }
        b
    }
}
