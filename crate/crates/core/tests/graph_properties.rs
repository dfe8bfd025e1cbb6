use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;
use sbu_core::config::RetrievalConfig;
use sbu_core::graph::{ForgetRequest, Layer, MemoryGraph, NodeId, NodeStatus};
use sbu_core::retrieval::HybridQuery;
use sbu_core::store::MemoryStore;

const LAYERS: [Layer; 4] = [Layer::Episodic, Layer::Semantic, Layer::Reflection, Layer::KgEntity];

/// A node to add: a layer choice and up to three parent picks, each an index
/// into the ids created so far.
fn node_specs(max: usize) -> impl Strategy<Value = Vec<(usize, Vec<usize>)>> {
    prop::collection::vec((0..4usize, prop::collection::vec(any::<usize>(), 1..4)), 1..max)
}

fn build(specs: &[(usize, Vec<usize>)]) -> MemoryGraph {
    let mut g = MemoryGraph::new();
    let mut ids: Vec<NodeId> = Vec::new();
    for (i, (layer, picks)) in specs.iter().enumerate() {
        let layer = LAYERS[*layer];
        let parents: Vec<NodeId> = if layer == Layer::Episodic || ids.is_empty() {
            Vec::new()
        } else {
            picks.iter().map(|p| ids[p % ids.len()]).collect()
        };
        let layer = if parents.is_empty() { Layer::Episodic } else { layer };
        if let Ok(id) = g.add_memory(layer, format!("n{i}"), &parents) {
            ids.push(id);
        }
    }
    g
}

/// Transitive reachability over an explicit edge list.
fn reachable(edges: &[(NodeId, NodeId)], from: &BTreeSet<NodeId>) -> BTreeSet<NodeId> {
    let mut adj: BTreeMap<NodeId, Vec<NodeId>> = BTreeMap::new();
    for &(p, c) in edges {
        adj.entry(p).or_default().push(c);
    }
    let mut seen = BTreeSet::new();
    let mut stack: Vec<NodeId> = from.iter().copied().collect();
    while let Some(v) = stack.pop() {
        for &c in adj.get(&v).map(Vec::as_slice).unwrap_or(&[]) {
            if seen.insert(c) {
                stack.push(c);
            }
        }
    }
    seen
}

fn edge_list(g: &MemoryGraph) -> Vec<(NodeId, NodeId)> {
    g.edges().map(|e| (e.parent, e.child)).collect()
}

fn episodic_ids(g: &MemoryGraph) -> Vec<NodeId> {
    g.nodes().filter(|n| n.layer == Layer::Episodic && n.is_active()).map(|n| n.id).collect()
}

/// Active derived nodes lacking an Active episodic ancestor, computed from
/// the edge list alone.
fn unsupported_oracle(g: &MemoryGraph) -> Vec<NodeId> {
    let edges = edge_list(g);
    let mut parents: BTreeMap<NodeId, Vec<NodeId>> = BTreeMap::new();
    for &(p, c) in &edges {
        parents.entry(c).or_default().push(p);
    }
    g.nodes()
        .filter(|n| n.is_active() && n.layer != Layer::Episodic)
        .filter(|n| {
            let mut seen = BTreeSet::new();
            let mut stack = vec![n.id];
            while let Some(v) = stack.pop() {
                for &p in parents.get(&v).map(Vec::as_slice).unwrap_or(&[]) {
                    if seen.insert(p) {
                        stack.push(p);
                    }
                }
            }
            !seen.iter().any(|a| g.get(*a).is_some_and(|an| an.is_active() && an.layer == Layer::Episodic))
        })
        .map(|n| n.id)
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn closure_matches_brute_force(specs in node_specs(200), picks in prop::collection::vec(any::<usize>(), 1..6)) {
        let g = build(&specs);
        let eps = episodic_ids(&g);
        let targets: BTreeSet<NodeId> = picks.iter().map(|p| eps[p % eps.len()]).collect();
        let expected: BTreeSet<NodeId> = reachable(&edge_list(&g), &targets)
            .into_iter()
            .filter(|v| !targets.contains(v) && g.get(*v).unwrap().layer != Layer::Episodic)
            .collect();
        prop_assert_eq!(g.dependency_closure(&targets).unwrap(), expected);
    }

    #[test]
    fn prunes_keep_derived_nodes_supported(
        specs in node_specs(200),
        rounds in prop::collection::vec(prop::collection::vec(any::<usize>(), 1..5), 1..5),
    ) {
        let mut g = build(&specs);
        for (r, picks) in rounds.iter().enumerate() {
            let eps = episodic_ids(&g);
            if eps.is_empty() {
                break;
            }
            let targets: BTreeSet<NodeId> = picks.iter().map(|p| eps[p % eps.len()]).collect();
            let closure = g.dependency_closure(&targets).unwrap();
            let before = g.clone();
            let report = g.prune(&ForgetRequest::new(format!("r{r}"), targets.clone()), &closure).unwrap();
            prop_assert!(unsupported_oracle(&g).is_empty());
            prop_assert_eq!(report.targets_deleted, targets.len());
            for t in &targets {
                prop_assert_eq!(g.get(*t).unwrap().status, NodeStatus::Deleted);
            }
            // nothing outside targets and closure changes status
            for n in before.nodes() {
                if !targets.contains(&n.id) && !closure.contains(&n.id) {
                    prop_assert_eq!(g.get(n.id).unwrap().status, n.status);
                }
            }
            // ref_count is the number of Active parents, dependents the number of Active children
            for n in g.nodes() {
                let edges = edge_list(&g);
                let rc = edges.iter().filter(|(p, c)| *c == n.id && g.is_active(*p)).count() as u32;
                let dep = edges.iter().filter(|(p, c)| *p == n.id && g.is_active(*c)).count() as u32;
                prop_assert_eq!((n.ref_count, n.dependents), (rc, dep), "node {}", n.id);
            }
            let again = g.clone();
            g.prune(&ForgetRequest::new("repeat", targets.clone()), &closure).unwrap();
            prop_assert_eq!(&g, &again);
        }
        g.compact();
        prop_assert!(g.nodes().all(|n| n.is_active()));
        prop_assert!(unsupported_oracle(&g).is_empty());
    }

    #[test]
    fn search_never_returns_blocked_ids(
        docs in prop::collection::vec(prop::collection::vec(0..12usize, 1..5), 5..30),
        ops in prop::collection::vec((0..3u8, any::<usize>(), prop::collection::vec(0..12usize, 1..4)), 1..20),
    ) {
        const WORDS: [&str; 12] = ["apple", "river", "stone", "cloud", "ember", "frost", "grove", "harbor", "ivory", "jade", "kelp", "lumen"];
        let text = |ws: &[usize]| ws.iter().map(|w| WORDS[*w]).collect::<Vec<_>>().join(" ");
        let mut store = MemoryStore::new(RetrievalConfig { tau: 3, embed_dim: 64, ..Default::default() }).unwrap();
        let mut ids = Vec::new();
        for (i, d) in docs.iter().enumerate() {
            if let Ok(id) = store.add_memory(Layer::Episodic, &format!("{} {i}", text(d)), &[]) {
                ids.push(id);
            }
        }
        let mut blocked = BTreeSet::new();
        for (kind, pick, words) in ops {
            let id = ids[pick % ids.len()];
            match kind {
                0 => {
                    store.block(&[id].into()).unwrap();
                    blocked.insert(id);
                }
                1 if blocked.contains(&id) => {
                    let req = ForgetRequest::new("p", [id]);
                    let closure = store.dependency_closure(&req.targets).unwrap();
                    store.prune(&req, &closure).unwrap();
                    store.maybe_rebuild().unwrap();
                }
                _ => {}
            }
            for k in [1, 3, 10] {
                let hits = store.search(&HybridQuery::new(text(&words)).with_top_k(k)).unwrap();
                prop_assert!(hits.len() <= k);
                for h in hits {
                    prop_assert!(!store.is_blocked(h.id));
                    // ids dropped from the blocklist by compaction are gone from the graph too
                    prop_assert!(!blocked.contains(&h.id));
                }
            }
        }
    }
}

#[test]
fn diamond_shared_summary() {
    let mut g = MemoryGraph::new();
    let m1 = g.add_memory(Layer::Episodic, "m1", &[]).unwrap();
    let m2 = g.add_memory(Layer::Episodic, "m2", &[]).unwrap();
    let s1 = g.add_memory(Layer::Semantic, "s1", &[m1, m2]).unwrap();
    assert_eq!(g.get(s1).unwrap().ref_count, 2);

    let mut one = g.clone();
    let t: BTreeSet<NodeId> = [m1].into();
    let closure = one.dependency_closure(&t).unwrap();
    assert_eq!(closure, [s1].into());
    let r = one.prune(&ForgetRequest::new("a", t), &closure).unwrap();
    assert_eq!((r.shared_decremented, r.zero_ref_removed), (1, 0));
    assert!(one.is_active(s1));
    assert_eq!(one.get(s1).unwrap().ref_count, 1);

    let mut both = g.clone();
    let t: BTreeSet<NodeId> = [m1, m2].into();
    let closure = both.dependency_closure(&t).unwrap();
    let r = both.prune(&ForgetRequest::new("b", t), &closure).unwrap();
    assert_eq!(r.zero_ref_removed, 1);
    assert_eq!(both.get(s1).unwrap().status, NodeStatus::Deleted);
}
