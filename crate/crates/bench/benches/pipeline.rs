use std::collections::BTreeSet;

use criterion::{black_box, criterion_group, criterion_main, BatchSize, Criterion};
use serde_json::json;

use sbu_core::audit::{verify_bytes, AuditLog, AuditOp};
use sbu_core::config::{Config, RetrievalConfig};
use sbu_core::corpus::{populate, Corpus, Split};
use sbu_core::graph::{ForgetRequest, NodeId};
use sbu_core::protocol::memory_phase;
use sbu_core::store::MemoryStore;
use sbu_core::unlearn::{encode, loss_and_grad, Example, Mlp, ModelState};

fn populated() -> (MemoryStore, Corpus) {
    let cfg = Config::default();
    let corpus = Corpus::generate(&cfg.corpus, cfg.model.n_classes, 1).unwrap();
    let mut store = MemoryStore::new(RetrievalConfig::default()).unwrap();
    populate(&mut store, corpus.items.iter().filter(|i| i.split != Split::Test)).unwrap();
    (store, corpus)
}

fn retrieval(c: &mut Criterion) {
    let (store, corpus) = populated();
    let questions: Vec<String> = corpus.items.iter().take(32).map(|i| i.question()).collect();
    c.bench_function("hybrid_search_900_nodes", |b| {
        let mut i = 0;
        b.iter(|| {
            i = (i + 1) % questions.len();
            black_box(store.retrieve(&questions[i]).unwrap())
        })
    });
}

fn forgetting(c: &mut Criterion) {
    let (store, corpus) = populated();
    let targets: BTreeSet<NodeId> = store
        .graph()
        .nodes()
        .filter(|n| n.content.starts_with("user: "))
        .take(corpus.split(Split::Forget).count())
        .map(|n| n.id)
        .collect();
    c.bench_function("dependency_closure_60_targets", |b| {
        b.iter(|| black_box(store.dependency_closure(&targets).unwrap()))
    });
    c.bench_function("memory_phase_60_targets", |b| {
        b.iter_batched(
            || store.clone(),
            |mut s| black_box(memory_phase(&mut s, &ForgetRequest::new("bench", targets.iter().copied())).unwrap()),
            BatchSize::LargeInput,
        )
    });
}

fn gradient(c: &mut Criterion) {
    let cfg = Config::default();
    let m = &cfg.model;
    let state = ModelState {
        student: Mlp::gaussian(m.feature_dim, m.hidden, m.n_classes, 0.1, 1).unwrap(),
        reference: Mlp::gaussian(m.feature_dim, m.hidden, m.n_classes, 0.1, 2).unwrap(),
    };
    let corpus = Corpus::generate(&cfg.corpus, m.n_classes, 1).unwrap();
    let batch: Vec<Example> = corpus
        .items
        .iter()
        .take(32)
        .enumerate()
        .map(|(k, i)| {
            let x = encode(&i.question(), m.feature_dim);
            if k % 2 == 0 { Example::retain(x, i.answer) } else { Example::forget(x, None) }
        })
        .collect();
    c.bench_function("loss_and_grad_batch_32", |b| b.iter(|| black_box(loss_and_grad(&batch, &state, &cfg.unlearn).unwrap())));
}

fn audit(c: &mut Criterion) {
    let mut log = AuditLog::new();
    for i in 0..1000u64 {
        log.append(AuditOp::Block, json!({ "ids": [i, i + 1] })).unwrap();
    }
    let bytes = log.to_bytes();
    c.bench_function("audit_verify_1000_records", |b| b.iter(|| black_box(verify_bytes(&bytes))));
}

criterion_group!(benches, retrieval, forgetting, gradient, audit);
criterion_main!(benches);
