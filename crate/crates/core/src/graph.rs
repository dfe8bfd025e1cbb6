//! Layered agent memory held as a derivation DAG with reference counting.
//!
//! Episodic memories are sources. Summaries, reflections and knowledge-graph
//! entities are derived from one or more parents, and each node's `ref_count`
//! is the number of live derivation edges reaching it from Active parents.
//! Deleting episodic memories walks the dependency closure: reflections are
//! tombstoned as Outdated, shared artifacts lose one count per lost parent,
//! and artifacts left without support are removed.
//!
//! Ids are assigned in creation order and parents must exist before their
//! children, so ascending id order is a topological order and the graph is
//! acyclic by construction.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u64);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layer {
    Episodic,
    Semantic,
    Reflection,
    KgEntity,
    Procedural,
    External,
}

impl Layer {
    /// Layers that may appear as the child of a derivation edge.
    pub fn is_derived(self) -> bool {
        matches!(self, Layer::Semantic | Layer::Reflection | Layer::KgEntity)
    }

    /// Layers that may appear as the parent of a derivation edge.
    pub fn can_derive(self) -> bool {
        matches!(self, Layer::Episodic | Layer::Semantic | Layer::Reflection | Layer::KgEntity)
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeStatus {
    Active,
    Outdated,
    Deleted,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryNode {
    pub id: NodeId,
    pub layer: Layer,
    pub content: String,
    /// Live derivation edges reaching this node from Active parents.
    pub ref_count: u32,
    /// Active children derived from this node.
    pub dependents: u32,
    pub status: NodeStatus,
    pub created_seq: u64,
}

impl MemoryNode {
    pub fn is_active(&self) -> bool {
        self.status == NodeStatus::Active
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct DependencyEdge {
    pub parent: NodeId,
    pub child: NodeId,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForgetRequest {
    pub request_id: String,
    pub targets: BTreeSet<NodeId>,
    #[serde(default)]
    pub issued_seq: u64,
}

impl ForgetRequest {
    pub fn new(request_id: impl Into<String>, targets: impl IntoIterator<Item = NodeId>) -> Self {
        Self { request_id: request_id.into(), targets: targets.into_iter().collect(), issued_seq: 0 }
    }
}

#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PruneReport {
    pub targets_deleted: usize,
    pub reflections_outdated: usize,
    pub shared_decremented: usize,
    pub zero_ref_removed: usize,
}

/// Status transitions computed from the current graph, before anything is
/// mutated. Applying a plan cannot fail.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PrunePlan {
    pub transitions: BTreeMap<NodeId, NodeStatus>,
    pub report: PruneReport,
}

impl PrunePlan {
    /// Nodes that leave the Active state when the plan is applied.
    pub fn deactivated(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.transitions.keys().copied()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MemoryGraph {
    nodes: BTreeMap<NodeId, MemoryNode>,
    children: BTreeMap<NodeId, BTreeSet<NodeId>>,
    parents: BTreeMap<NodeId, BTreeSet<NodeId>>,
    next_id: u64,
}

impl MemoryGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn next_id(&self) -> NodeId {
        NodeId(self.next_id)
    }

    pub fn get(&self, id: NodeId) -> Option<&MemoryNode> {
        self.nodes.get(&id)
    }

    pub fn nodes(&self) -> impl Iterator<Item = &MemoryNode> {
        self.nodes.values()
    }

    pub fn edges(&self) -> impl Iterator<Item = DependencyEdge> + '_ {
        self.children
            .iter()
            .flat_map(|(&parent, cs)| cs.iter().map(move |&child| DependencyEdge { parent, child }))
    }

    pub fn parents_of(&self, id: NodeId) -> impl Iterator<Item = NodeId> + '_ {
        self.parents.get(&id).into_iter().flatten().copied()
    }

    pub fn children_of(&self, id: NodeId) -> impl Iterator<Item = NodeId> + '_ {
        self.children.get(&id).into_iter().flatten().copied()
    }

    /// An id is known if it was ever issued, even if the node has since been
    /// physically purged.
    pub fn is_known(&self, id: NodeId) -> bool {
        id.0 < self.next_id
    }

    pub fn is_active(&self, id: NodeId) -> bool {
        self.nodes.get(&id).is_some_and(MemoryNode::is_active)
    }

    /// Validates a write without performing it, returning the deduplicated
    /// parent set.
    pub fn check_add(&self, layer: Layer, parents: &[NodeId]) -> Result<BTreeSet<NodeId>> {
        let parents: BTreeSet<NodeId> = parents.iter().copied().collect();
        if layer.is_derived() && parents.is_empty() {
            return Err(Error::MissingParents(layer));
        }
        for &p in &parents {
            if p.0 >= self.next_id {
                // a parent id not yet issued could only be the new node itself
                // or a later one
                return Err(if p.0 == self.next_id {
                    Error::Cycle { parent: p, child: p }
                } else {
                    Error::UnknownNode(p)
                });
            }
            let parent = self.nodes.get(&p).ok_or(Error::InactiveParent(p))?;
            if !parent.is_active() {
                return Err(Error::InactiveParent(p));
            }
            if !parent.layer.can_derive() || !layer.is_derived() {
                return Err(Error::InvalidEdge { parent_layer: parent.layer, child_layer: layer });
            }
        }
        Ok(parents)
    }

    pub fn add_memory(&mut self, layer: Layer, content: impl Into<String>, parents: &[NodeId]) -> Result<NodeId> {
        let parents = self.check_add(layer, parents)?;
        let id = NodeId(self.next_id);
        self.next_id += 1;
        for &p in &parents {
            self.children.entry(p).or_default().insert(id);
            if let Some(n) = self.nodes.get_mut(&p) {
                n.dependents += 1;
            }
        }
        let node = MemoryNode {
            id,
            layer,
            content: content.into(),
            ref_count: parents.len() as u32,
            dependents: 0,
            status: NodeStatus::Active,
            created_seq: id.0,
        };
        if !parents.is_empty() {
            self.parents.insert(id, parents);
        }
        self.nodes.insert(id, node);
        Ok(id)
    }

    /// Advances the id counter past an id that was issued but never
    /// materialized (a write whose audit record survived a crash).
    pub(crate) fn burn_id(&mut self, id: NodeId) {
        self.next_id = self.next_id.max(id.0 + 1);
    }

    /// Derived artifacts reachable from any target over live derivation
    /// edges, excluding the targets themselves.
    pub fn dependency_closure(&self, targets: &BTreeSet<NodeId>) -> Result<BTreeSet<NodeId>> {
        if let Some(&bad) = targets.iter().find(|t| !self.is_known(**t)) {
            return Err(Error::UnknownNode(bad));
        }
        let mut seen = BTreeSet::new();
        let mut queue: VecDeque<NodeId> = targets.iter().copied().collect();
        while let Some(v) = queue.pop_front() {
            for c in self.children_of(v) {
                if seen.insert(c) {
                    queue.push_back(c);
                }
            }
        }
        seen.retain(|v| !targets.contains(v) && self.nodes.get(v).is_some_and(|n| n.layer.is_derived()));
        Ok(seen)
    }

    /// Computes the status transitions for deleting `targets` given their
    /// closure. Targets that were already purged or deleted are skipped, so
    /// planning the same request twice yields an empty second plan.
    pub fn plan_prune(&self, targets: &BTreeSet<NodeId>, closure: &BTreeSet<NodeId>) -> Result<PrunePlan> {
        let mut plan = PrunePlan::default();
        for &t in targets {
            if !self.is_known(t) {
                return Err(Error::UnknownNode(t));
            }
            let Some(node) = self.nodes.get(&t) else { continue };
            if node.layer != Layer::Episodic {
                return Err(Error::NotEpisodic(t));
            }
            if node.status != NodeStatus::Deleted {
                plan.transitions.insert(t, NodeStatus::Deleted);
                plan.report.targets_deleted += 1;
            }
        }
        for &v in closure {
            let Some(node) = self.nodes.get(&v) else { continue };
            if !node.is_active() || targets.contains(&v) {
                continue;
            }
            let lost = self.parents_of(v).filter(|p| plan.transitions.contains_key(p)).count() as u32;
            if node.layer == Layer::Reflection {
                plan.transitions.insert(v, NodeStatus::Outdated);
                plan.report.reflections_outdated += 1;
            } else if lost == 0 {
                continue;
            } else if node.ref_count <= lost {
                plan.transitions.insert(v, NodeStatus::Deleted);
                plan.report.zero_ref_removed += 1;
            } else {
                plan.report.shared_decremented += 1;
            }
        }
        Ok(plan)
    }

    pub fn apply_prune(&mut self, plan: &PrunePlan) {
        let mut touched = BTreeSet::new();
        for (&v, &status) in &plan.transitions {
            for c in self.children.remove(&v).unwrap_or_default() {
                if let Some(ps) = self.parents.get_mut(&c) {
                    ps.remove(&v);
                }
                touched.insert(c);
            }
            touched.extend(self.parents_of(v));
            touched.insert(v);
            if let Some(n) = self.nodes.get_mut(&v) {
                n.status = status;
                if status == NodeStatus::Deleted {
                    n.content.clear();
                }
            }
        }
        for v in touched {
            self.recount(v);
        }
    }

    /// Plans and applies a prune in one step. The caller is responsible for
    /// having blocked the targets; see `MemoryStore::prune` for the checked
    /// variant.
    pub fn prune(&mut self, request: &ForgetRequest, closure: &BTreeSet<NodeId>) -> Result<PruneReport> {
        let plan = self.plan_prune(&request.targets, closure)?;
        self.apply_prune(&plan);
        Ok(plan.report)
    }

    /// Ascending ids of Active nodes.
    pub fn active_view(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.nodes.values().filter(|n| n.is_active()).map(|n| n.id)
    }

    /// All ancestors of `id` over live edges.
    pub fn ancestors(&self, id: NodeId) -> BTreeSet<NodeId> {
        let mut seen = BTreeSet::new();
        let mut stack: Vec<NodeId> = self.parents_of(id).collect();
        while let Some(v) = stack.pop() {
            if seen.insert(v) {
                stack.extend(self.parents_of(v));
            }
        }
        seen
    }

    /// Physically removes Deleted and Outdated nodes with all their edges.
    /// Returns the purged ids.
    pub fn compact(&mut self) -> Vec<NodeId> {
        let purged: Vec<NodeId> = self.nodes.values().filter(|n| !n.is_active()).map(|n| n.id).collect();
        let mut touched = BTreeSet::new();
        for &v in &purged {
            self.nodes.remove(&v);
            for p in self.parents.remove(&v).unwrap_or_default() {
                if let Some(cs) = self.children.get_mut(&p) {
                    cs.remove(&v);
                    if cs.is_empty() {
                        self.children.remove(&p);
                    }
                }
                touched.insert(p);
            }
            for c in self.children.remove(&v).unwrap_or_default() {
                if let Some(ps) = self.parents.get_mut(&c) {
                    ps.remove(&v);
                }
                touched.insert(c);
            }
        }
        for v in touched {
            self.recount(v);
        }
        purged
    }

    /// Active derived nodes without an Active episodic ancestor. Empty when
    /// the graph is dependency-consistent.
    pub fn unsupported_nodes(&self) -> Vec<NodeId> {
        self.nodes
            .values()
            .filter(|n| n.is_active() && n.layer.is_derived())
            .filter(|n| {
                !self.ancestors(n.id).iter().any(|a| {
                    self.nodes.get(a).is_some_and(|an| an.is_active() && an.layer == Layer::Episodic)
                })
            })
            .map(|n| n.id)
            .collect()
    }

    fn recount(&mut self, id: NodeId) {
        let ref_count = self.parents_of(id).filter(|p| self.is_active(*p)).count() as u32;
        let dependents = self.children_of(id).filter(|c| self.is_active(*c)).count() as u32;
        if let Some(n) = self.nodes.get_mut(&id) {
            n.ref_count = ref_count;
            n.dependents = dependents;
        }
        if self.parents.get(&id).is_some_and(BTreeSet::is_empty) {
            self.parents.remove(&id);
        }
    }

    /// Rebuilds a graph from persisted parts, validating edge direction and
    /// that the stored counters match the edge set.
    pub fn from_parts(
        nodes: Vec<MemoryNode>,
        edges: Vec<DependencyEdge>,
        next_id: NodeId,
    ) -> std::result::Result<Self, String> {
        let mut g = MemoryGraph { next_id: next_id.0, ..Default::default() };
        for n in nodes {
            if n.id >= next_id {
                return Err(format!("node {} not below next_id {}", n.id, next_id));
            }
            if g.nodes.insert(n.id, n).is_some() {
                return Err("duplicate node id".into());
            }
        }
        for e in edges {
            if e.parent >= e.child {
                return Err(format!("edge {} -> {} points backwards", e.parent, e.child));
            }
            let (Some(p), Some(c)) = (g.nodes.get(&e.parent), g.nodes.get(&e.child)) else {
                return Err(format!("edge {} -> {} references a missing node", e.parent, e.child));
            };
            if !p.is_active() || !p.layer.can_derive() || !c.layer.is_derived() {
                return Err(format!("edge {} -> {} is not a live derivation edge", e.parent, e.child));
            }
            g.children.entry(e.parent).or_default().insert(e.child);
            g.parents.entry(e.child).or_default().insert(e.parent);
        }
        let expected: Vec<(u32, u32)> = g.nodes.values().map(|n| (n.ref_count, n.dependents)).collect();
        let ids: Vec<NodeId> = g.nodes.keys().copied().collect();
        for &id in &ids {
            g.recount(id);
        }
        for (n, (rc, dep)) in g.nodes.values().zip(expected) {
            if (n.ref_count, n.dependents) != (rc, dep) {
                return Err(format!("counters of node {} do not match edges", n.id));
            }
        }
        Ok(g)
    }
}
