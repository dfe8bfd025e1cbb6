//! Metrics, the desk-scale experiment, memory baselines and the staged
//! agent loop.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::config::{Config, UnlearnConfig};
use crate::corpus::{consolidate, populate, Corpus, Manifest, QaItem, Split};
use crate::error::{Error, Result};
use crate::graph::{ForgetRequest, Layer, NodeId};
use crate::protocol::{initial_model, memory_phase, run_sbu, Agent, AnswerMode, SbuMode};
use crate::store::MemoryStore;
use crate::unlearn::{item_losses, Mlp, TrainReport};

#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiaResult {
    pub auc: f64,
    pub score: f64,
}

/// Loss-threshold membership inference. Members are the positive class and
/// a lower loss counts as more member-like; ties earn half credit.
pub fn mia(member_losses: &[f64], nonmember_losses: &[f64]) -> Result<MiaResult> {
    if member_losses.is_empty() || nonmember_losses.is_empty() {
        return Err(Error::Empty("loss list"));
    }
    let mut wins = 0.0;
    for &m in member_losses {
        for &n in nonmember_losses {
            if m < n {
                wins += 1.0;
            } else if m == n {
                wins += 0.5;
            }
        }
    }
    let auc = wins / (member_losses.len() as f64 * nonmember_losses.len() as f64);
    Ok(MiaResult { auc, score: 1.0 - 2.0 * (auc - 0.5).abs() })
}

/// Exact-match accuracy; a missing prediction counts as wrong.
pub fn accuracy(predictions: &[Option<usize>], truth: &[usize]) -> Result<f64> {
    if truth.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    if predictions.len() != truth.len() {
        return Err(Error::Config("prediction and label counts differ".into()));
    }
    let hits = predictions.iter().zip(truth).filter(|(p, t)| **p == Some(**t)).count();
    Ok(hits as f64 / truth.len() as f64)
}

pub fn agent_accuracy<'a>(agent: &Agent, items: impl IntoIterator<Item = &'a QaItem>, mode: AnswerMode) -> Result<f64> {
    let mut preds = Vec::new();
    let mut truth = Vec::new();
    for item in items {
        preds.push(agent.answer(&item.question(), mode)?.label());
        truth.push(item.answer);
    }
    accuracy(&preds, &truth)
}

#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryAccuracy {
    pub forget_acc: f64,
    pub retain_acc: f64,
}

/// Retrieval-grounded accuracy: a relevant memory answers, otherwise the
/// model does.
pub fn memory_accuracy(agent: &Agent, corpus: &Corpus) -> Result<MemoryAccuracy> {
    Ok(MemoryAccuracy {
        forget_acc: agent_accuracy(agent, corpus.split(Split::Forget), AnswerMode::MemoryThenParametric)?,
        retain_acc: agent_accuracy(agent, corpus.split(Split::Retain), AnswerMode::MemoryThenParametric)?,
    })
}

/// One row of a comparison table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub method: String,
    pub forget_acc: f64,
    pub retain_acc: f64,
    pub test_acc: f64,
    pub mia_auc: f64,
    pub mia_score: f64,
}

/// Parametric metrics of `model`: accuracy per split, and MIA with forget
/// items as members and test items as non-members.
pub fn model_row(method: &str, model: &Mlp, corpus: &Corpus) -> Result<EvalRow> {
    let dim = model.dim;
    let forget = corpus.examples(Split::Forget, dim);
    let retain = corpus.examples(Split::Retain, dim);
    let test = corpus.examples(Split::Test, dim);
    let acc = |set: &[crate::unlearn::Example]| -> Result<f64> {
        if set.is_empty() {
            return Err(Error::Empty("dataset"));
        }
        Ok(crate::unlearn::accuracy(model, set))
    };
    let m = mia(&item_losses(model, &forget), &item_losses(model, &test))?;
    Ok(EvalRow {
        method: method.into(),
        forget_acc: acc(&forget)?,
        retain_acc: acc(&retain)?,
        test_acc: acc(&test)?,
        mia_auc: m.auc,
        mia_score: m.score,
    })
}

/// A freshly generated corpus, a store holding its retain and forget items,
/// and a model pretrained on both.
#[derive(Clone, Debug)]
pub struct Setup {
    pub corpus: Corpus,
    pub manifest: Manifest,
    pub agent: Agent,
}

impl Setup {
    pub fn new(cfg: &Config) -> Result<Self> {
        cfg.validate()?;
        let corpus = Corpus::generate(&cfg.corpus, cfg.model.n_classes, cfg.seed)?;
        Self::from_corpus(cfg, corpus)
    }

    pub fn from_corpus(cfg: &Config, corpus: Corpus) -> Result<Self> {
        let mut store = MemoryStore::new(cfg.retrieval.clone())?;
        let manifest = populate(&mut store, corpus.items.iter().filter(|i| i.split != Split::Test))?;
        let dim = cfg.model.feature_dim;
        let mut train = corpus.examples(Split::Retain, dim);
        train.extend(corpus.examples(Split::Forget, dim));
        let model = initial_model(&cfg.model, cfg.seed, &train)?;
        Ok(Setup { agent: Agent::new(store, model, cfg), corpus, manifest })
    }

    /// A request covering the episodic record of every forget item.
    pub fn forget_request(&self) -> ForgetRequest {
        let targets = self.corpus.split(Split::Forget).filter_map(|i| self.manifest.episodic_of(i.id));
        ForgetRequest::new("forget-split", targets)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DeskReport {
    pub original: EvalRow,
    pub control: EvalRow,
    pub sbu: EvalRow,
    pub memory_before: MemoryAccuracy,
    pub memory_after: MemoryAccuracy,
    pub control_training: TrainReport,
    pub sbu_training: TrainReport,
}

impl DeskReport {
    pub fn rows(&self) -> [&EvalRow; 3] {
        [&self.original, &self.control, &self.sbu]
    }
}

/// Runs the same schedule twice from one setup: once as configured and
/// once with `lambda_f = 0` as the no-unlearning control.
pub fn desk_experiment(cfg: &Config) -> Result<DeskReport> {
    desk_experiment_from(cfg, &Setup::new(cfg)?)
}

pub fn desk_experiment_from(cfg: &Config, setup: &Setup) -> Result<DeskReport> {
    let request = setup.forget_request();
    let retain = setup.corpus.examples(Split::Retain, cfg.model.feature_dim);
    let original = model_row("original", &setup.agent.model.student, &setup.corpus)?;
    let memory_before = memory_accuracy(&setup.agent, &setup.corpus)?;

    let mut control = setup.agent.clone();
    let control_cfg = UnlearnConfig { lambda_f: 0.0, ..cfg.unlearn.clone() };
    let c = run_sbu(&mut control, &request, &retain, &control_cfg, SbuMode::Full)?;

    let mut sbu = setup.agent.clone();
    let s = run_sbu(&mut sbu, &request, &retain, &cfg.unlearn, SbuMode::Full)?;

    Ok(DeskReport {
        original,
        control: model_row("control", &control.model.student, &setup.corpus)?,
        sbu: model_row("sbu", &sbu.model.student, &setup.corpus)?,
        memory_before,
        memory_after: memory_accuracy(&sbu, &setup.corpus)?,
        control_training: c.training.expect("full mode trains"),
        sbu_training: s.training.expect("full mode trains"),
    })
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    NaiveDeletion,
    ReIndexing,
    RetrainingOracle,
    Ours,
}

impl Baseline {
    pub const ALL: [Baseline; 4] =
        [Baseline::NaiveDeletion, Baseline::ReIndexing, Baseline::RetrainingOracle, Baseline::Ours];

    pub fn name(self) -> &'static str {
        match self {
            Baseline::NaiveDeletion => "naive_deletion",
            Baseline::ReIndexing => "re_indexing",
            Baseline::RetrainingOracle => "retraining_oracle",
            Baseline::Ours => "ours",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BaselineRow {
    #[serde(flatten)]
    pub row: EvalRow,
    /// Active derived nodes with no Active episodic ancestor.
    pub unsupported: usize,
    /// Summaries and reflections of forget items that are still Active.
    pub forget_artifacts_active: usize,
}

/// Retrieval-side membership loss: one minus the best combined score, or
/// one when nothing is retrieved.
pub fn retrieval_loss(store: &MemoryStore, question: &str) -> Result<f64> {
    Ok(1.0 - store.retrieve(question)?.first().map_or(0.0, |h| h.combined))
}

/// Memory-side comparison on the setup's store. Each method starts from a
/// clone of the populated store and answers from memory alone.
pub fn memory_baselines(cfg: &Config, setup: &Setup) -> Result<Vec<BaselineRow>> {
    let request = setup.forget_request();
    let mut rows = Vec::new();
    for method in Baseline::ALL {
        let mut agent = setup.agent.clone();
        let mut manifest = setup.manifest.clone();
        match method {
            Baseline::NaiveDeletion => {
                agent.store.remove_entries(&request.targets)?;
            }
            Baseline::ReIndexing => {
                agent.store.remove_entries(&request.targets)?;
                agent.store.force_rebuild()?;
            }
            Baseline::RetrainingOracle => {
                let mut store = MemoryStore::new(cfg.retrieval.clone())?;
                manifest = populate(&mut store, setup.corpus.split(Split::Retain))?;
                agent.store = store;
            }
            Baseline::Ours => {
                memory_phase(&mut agent.store, &request)?;
            }
        }
        let forget_items: Vec<&QaItem> = setup.corpus.split(Split::Forget).collect();
        let losses = |items: &mut dyn Iterator<Item = &QaItem>| -> Result<Vec<f64>> {
            items.map(|i| retrieval_loss(&agent.store, &i.question())).collect()
        };
        let m = mia(
            &losses(&mut forget_items.iter().copied())?,
            &losses(&mut setup.corpus.split(Split::Test))?,
        )?;
        let graph = agent.store.graph();
        let forget_artifacts_active = forget_items
            .iter()
            .filter_map(|i| manifest.items.get(&i.id))
            .flat_map(|n| [n.summary, n.reflection])
            .filter(|id| graph.is_active(*id))
            .count();
        rows.push(BaselineRow {
            row: EvalRow {
                method: method.name().into(),
                forget_acc: agent_accuracy(&agent, forget_items.iter().copied(), AnswerMode::MemoryOnly)?,
                retain_acc: agent_accuracy(&agent, setup.corpus.split(Split::Retain), AnswerMode::MemoryOnly)?,
                test_acc: agent_accuracy(&agent, setup.corpus.split(Split::Test), AnswerMode::MemoryOnly)?,
                mia_auc: m.auc,
                mia_score: m.score,
            },
            unsupported: graph.unsupported_nodes().len(),
            forget_artifacts_active,
        });
    }
    Ok(rows)
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageKind {
    Store,
    Query,
    Delete,
    Probe,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoopStage {
    pub stage: usize,
    pub kind: StageKind,
    pub forget_hit_rate: f64,
    pub retain_hit_rate: f64,
    /// Derived nodes created, or touched by pruning, in this stage.
    pub summary_updates: usize,
    /// Share of the deletion closure that was removed or outdated.
    pub cleanup_ratio: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoopTimeline {
    pub stages: Vec<LoopStage>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoopScenario {
    pub forget: Vec<QaItem>,
    pub retain: Vec<QaItem>,
    /// Whether stage 4 deletes the forget items or does nothing.
    pub delete: bool,
}

impl LoopScenario {
    /// Up to `n` forget items and the same number of retain items, each
    /// retain item sharing a topic with a forget item where possible so the
    /// deletion closure contains shared knowledge nodes.
    pub fn from_corpus(corpus: &Corpus, n: usize) -> Self {
        let forget: Vec<QaItem> = corpus.split(Split::Forget).take(n).cloned().collect();
        let mut retain: Vec<QaItem> = Vec::new();
        for f in &forget {
            let pick = corpus
                .split(Split::Retain)
                .find(|r| r.topic == f.topic && !retain.contains(r))
                .or_else(|| corpus.split(Split::Retain).find(|r| !retain.contains(r)));
            retain.extend(pick.cloned());
        }
        LoopScenario { forget, retain, delete: true }
    }

    fn validate(&self) -> Result<()> {
        if self.forget.is_empty() || self.retain.is_empty() {
            return Err(Error::Config("loop scenario needs forget and retain items".into()));
        }
        let ids: BTreeSet<usize> = self.forget.iter().chain(&self.retain).map(|i| i.id).collect();
        if ids.len() != self.forget.len() + self.retain.len() {
            return Err(Error::Config("loop scenario items must be distinct".into()));
        }
        Ok(())
    }
}

/// Whether any top-k hit for `query` is `episodic` or descends from it.
fn traced_hit(store: &MemoryStore, query: &str, episodic: NodeId) -> Result<bool> {
    Ok(store
        .retrieve(query)?
        .iter()
        .any(|h| h.id == episodic || store.graph().ancestors(h.id).contains(&episodic)))
}

fn hit_rate(store: &MemoryStore, items: &[(QaItem, NodeId)], paraphrase: bool) -> Result<f64> {
    let mut hits = 0;
    for (item, episodic) in items {
        let q = if paraphrase { item.paraphrase() } else { item.question() };
        hits += usize::from(traced_hit(store, &q, *episodic)?);
    }
    Ok(hits as f64 / items.len() as f64)
}

/// Six stages: store the raw turns, consolidate them, query, delete the
/// forget items, probe with the original questions, probe with paraphrases.
pub fn run_agent_loop(scenario: &LoopScenario, cfg: &Config) -> Result<LoopTimeline> {
    scenario.validate()?;
    let mut store = MemoryStore::new(cfg.retrieval.clone())?;
    let all: Vec<&QaItem> = scenario.forget.iter().chain(&scenario.retain).collect();
    let mut episodic = Vec::new();
    for item in &all {
        episodic.push(store.add_memory(Layer::Episodic, &item.episodic_text(), &[])?);
    }
    let forget: Vec<(QaItem, NodeId)> = scenario.forget.iter().cloned().zip(episodic.iter().copied()).collect();
    let retain: Vec<(QaItem, NodeId)> =
        scenario.retain.iter().cloned().zip(episodic[scenario.forget.len()..].iter().copied()).collect();

    let mut stages = Vec::new();
    let mut record = |store: &MemoryStore, kind, updates, ratio, paraphrase| -> Result<()> {
        stages.push(LoopStage {
            stage: stages.len() + 1,
            kind,
            forget_hit_rate: hit_rate(store, &forget, paraphrase)?,
            retain_hit_rate: hit_rate(store, &retain, paraphrase)?,
            summary_updates: updates,
            cleanup_ratio: ratio,
        });
        Ok(())
    };

    record(&store, StageKind::Store, 0, None, false)?;
    let before = store.graph().len();
    consolidate(&mut store, &all, &episodic)?;
    let created = store.graph().len() - before;
    record(&store, StageKind::Store, created, None, false)?;
    record(&store, StageKind::Query, 0, None, false)?;

    let targets: Vec<NodeId> = if scenario.delete { forget.iter().map(|(_, e)| *e).collect() } else { Vec::new() };
    let phase = memory_phase(&mut store, &ForgetRequest::new("loop", targets))?;
    let p = phase.prune;
    let cleaned = p.zero_ref_removed + p.reflections_outdated;
    let ratio = (!phase.closure.is_empty()).then(|| cleaned as f64 / phase.closure.len() as f64);
    record(&store, StageKind::Delete, cleaned + p.shared_decremented, ratio, false)?;
    record(&store, StageKind::Probe, 0, None, false)?;
    record(&store, StageKind::Probe, 0, None, true)?;
    Ok(LoopTimeline { stages })
}
