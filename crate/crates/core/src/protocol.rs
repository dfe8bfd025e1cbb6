//! The agent and the forgetting protocol: memory first, then parameters.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::audit::{AuditOp, Digest};
use crate::config::{AgentConfig, Config, ModelConfig, UnlearnConfig};
use crate::corpus::{parse_answer, parse_question, regenerated_text, QaItem};
use crate::error::{Error, Result};
use crate::graph::{ForgetRequest, Layer, MemoryNode, NodeId, PruneReport};
use crate::retrieval::ScoredHit;
use crate::store::{MemoryStore, RebuildOutcome};
use crate::unlearn::{encode, predict, train_unlearn, Example, Mlp, ModelState, TrainReport};

/// How the agent is allowed to answer.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerMode {
    /// A relevant memory if there is one, else the model.
    MemoryThenParametric,
    /// Memory only; no relevant memory means no answer.
    MemoryOnly,
    ParametricOnly,
}

#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum Answer {
    Memory { label: usize, node: NodeId },
    Parametric { label: usize, confidence: f64 },
    None,
}

impl Answer {
    pub fn label(&self) -> Option<usize> {
        match *self {
            Answer::Memory { label, .. } | Answer::Parametric { label, .. } => Some(label),
            Answer::None => None,
        }
    }
}

/// Policy (classifier plus retrieval) over a memory store. All reads go
/// through the store's blocklist-filtered search and all writes through
/// its audited write path.
#[derive(Clone, Debug)]
pub struct Agent {
    pub store: MemoryStore,
    pub model: ModelState,
    pub model_cfg: ModelConfig,
    pub agent_cfg: AgentConfig,
}

impl Agent {
    pub fn new(store: MemoryStore, model: ModelState, cfg: &Config) -> Self {
        Agent { store, model, model_cfg: cfg.model.clone(), agent_cfg: cfg.agent.clone() }
    }

    pub fn features(&self, text: &str) -> crate::unlearn::Features {
        encode(text, self.model_cfg.feature_dim)
    }

    pub fn retrieve(&self, text: &str) -> Result<Vec<ScoredHit>> {
        self.store.retrieve(text)
    }

    pub fn write(&mut self, layer: Layer, content: &str, parents: &[NodeId]) -> Result<NodeId> {
        self.store.add_memory(layer, content, parents)
    }

    /// Retrieved hits scoring at least `min_relevance` whose content states
    /// an answer, best first.
    pub fn relevant_answers(&self, question: &str) -> Result<Vec<(ScoredHit, usize)>> {
        let n = self.model_cfg.n_classes;
        Ok(self
            .retrieve(question)?
            .into_iter()
            .filter(|h| h.combined >= self.agent_cfg.min_relevance)
            .filter_map(|h| {
                let content = &self.store.graph().get(h.id)?.content;
                parse_answer(content, n).map(|label| (h, label))
            })
            .collect())
    }

    pub fn answer(&self, question: &str, mode: AnswerMode) -> Result<Answer> {
        if mode != AnswerMode::ParametricOnly {
            if let Some((hit, label)) = self.relevant_answers(question)?.into_iter().next() {
                return Ok(Answer::Memory { label, node: hit.id });
            }
            if mode == AnswerMode::MemoryOnly {
                return Ok(Answer::None);
            }
        }
        let (label, p) = predict(&self.model.student, &self.features(question));
        Ok(Answer::Parametric { label, confidence: p[label] })
    }
}

/// Initial model state: a pretrained student and a frozen random reference.
pub fn initial_model(cfg: &ModelConfig, seed: u64, train: &[Example]) -> Result<ModelState> {
    let mut student = Mlp::from_config(cfg, cfg.init_std, seed)?;
    crate::unlearn::pretrain(&mut student, train, cfg.pretrain_epochs, cfg.pretrain_lr)?;
    let reference = Mlp::from_config(cfg, cfg.ref_init_std, cfg.ref_seed)?;
    Ok(ModelState { student, reference })
}

/// Labeled QA pairs from the Active, unblocked episodic records of the
/// store, leaving out `exclude`.
pub fn retain_from_memory(
    store: &MemoryStore,
    exclude: &BTreeSet<NodeId>,
    dim: usize,
    n_classes: usize,
) -> Vec<Example> {
    store
        .graph()
        .nodes()
        .filter(|n| n.is_active() && n.layer == Layer::Episodic && !store.is_blocked(n.id))
        .filter(|n| !exclude.contains(&n.id))
        .filter_map(|n| qa_example(n, dim, n_classes))
        .collect()
}

fn qa_example(node: &MemoryNode, dim: usize, n_classes: usize) -> Option<Example> {
    let q = parse_question(&node.content)?;
    let y = parse_answer(&node.content, n_classes)?;
    Some(Example::retain(encode(q, dim), y))
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SbuMode {
    Full,
    /// Memory pathway only: the ablation that leaves parametric residue.
    MemoryOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProtocolReport {
    pub request_id: String,
    pub blocked: usize,
    pub closure: BTreeSet<NodeId>,
    pub prune: PruneReport,
    pub rebuild: RebuildOutcome,
    pub forget_queries: usize,
    pub training: Option<TrainReport>,
    pub audit_head: Digest,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MemoryPhase {
    pub blocked: usize,
    pub closure: BTreeSet<NodeId>,
    pub prune: PruneReport,
    pub rebuild: RebuildOutcome,
}

/// Memory side of a forget request: block, closure, prune, vector deletion,
/// conditional rebuild, archive record. Targets that were already purged
/// are skipped, so repeating a request changes nothing.
pub fn memory_phase(store: &mut MemoryStore, request: &ForgetRequest) -> Result<MemoryPhase> {
    if let Some(&t) = request.targets.iter().find(|t| !store.graph().is_known(**t)) {
        return Err(Error::UnknownNode(t));
    }
    let present: BTreeSet<NodeId> =
        request.targets.iter().copied().filter(|t| store.graph().get(*t).is_some()).collect();
    let mut out = MemoryPhase {
        blocked: store.blocklist().len(),
        closure: BTreeSet::new(),
        prune: PruneReport::default(),
        rebuild: RebuildOutcome { rebuilt: false, generation: store.index().generation(), purged: 0, unblocked: 0 },
    };
    if present.is_empty() {
        return Ok(out);
    }
    out.blocked = store.block(&present)?;
    out.closure = store.dependency_closure(&present)?;
    let live_request = ForgetRequest { targets: present.clone(), ..request.clone() };
    out.prune = store.prune(&live_request, &out.closure)?;
    store.delete_vectors(&present)?;
    out.rebuild = store.maybe_rebuild()?;
    store.append_note(
        AuditOp::Archive,
        json!({ "request": request.request_id, "targets": present, "closure": out.closure, "report": out.prune }),
    )?;
    Ok(out)
}

/// Processes one forget request: block, closure, prune and vector
/// deletion, conditional rebuild and an archive record, all before any
/// parameter update. The parameter phase trains on `retain` plus the
/// questions of the targeted records, captured before they are deleted.
///
/// A failure in the memory phase returns before any training. A failure
/// in the parameter phase returns the error with memory effects kept.
pub fn run_sbu(
    agent: &mut Agent,
    request: &ForgetRequest,
    retain: &[Example],
    cfg: &UnlearnConfig,
    mode: SbuMode,
) -> Result<ProtocolReport> {
    let graph = agent.store.graph();
    if let Some(&t) = request.targets.iter().find(|t| !graph.is_known(**t)) {
        return Err(Error::UnknownNode(t));
    }
    if let Some(&t) = request.targets.iter().find(|t| graph.get(**t).is_some_and(|n| n.layer != Layer::Episodic)) {
        return Err(Error::NotEpisodic(t));
    }
    cfg.validate(agent.model_cfg.n_classes)?;

    // ephemeral: lives only for this call and is never logged
    let mut forget: Vec<Example> = request
        .targets
        .iter()
        .filter_map(|t| graph.get(*t))
        .filter_map(|n| qa_example(n, agent.model_cfg.feature_dim, agent.model_cfg.n_classes))
        .map(|e| Example::forget(e.x, e.y))
        .collect();

    let memory = memory_phase(&mut agent.store, request)?;
    let mut report = ProtocolReport {
        request_id: request.request_id.clone(),
        blocked: memory.blocked,
        closure: memory.closure,
        prune: memory.prune,
        rebuild: memory.rebuild,
        forget_queries: forget.len(),
        training: None,
        audit_head: agent.store.audit().head(),
    };

    if mode == SbuMode::Full {
        let training = train_unlearn(&mut agent.model, retain, &forget, cfg);
        forget.clear();
        let training = training?;
        agent.store.append_note(
            AuditOp::Train,
            json!({
                "request": request.request_id,
                "steps": training.steps,
                "epochs": training.epochs.len() - 1,
                "fallbacks": training.fallbacks,
                "student": agent.model.student.fingerprint(),
                "reference": agent.model.reference.fingerprint(),
            }),
        )?;
        report.training = Some(training);
    }
    report.audit_head = agent.store.audit().head();
    Ok(report)
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Channel {
    /// A memory that was already in the store surfaced the fact.
    Memory,
    /// The model regenerated the fact and the write-back surfaced it.
    Parameter,
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeOutcome {
    pub reexposed: bool,
    pub channel: Channel,
    pub parametric_confidence: f64,
    pub written_back: Option<NodeId>,
}

/// Scripted follow-up interaction about a forgotten fact. If no relevant
/// memory answers the question and the model is confident, the model's
/// answer is written back to memory, as an agent summarizing its own turn
/// would. The question is then retrieved again and the fact counts as
/// re-exposed if a relevant memory states the true answer.
///
/// `target` is the episodic record the fact was stored as; a fact that was
/// never stored cannot be re-exposed.
pub fn backflow_probe(agent: &mut Agent, target: NodeId, fact: &QaItem) -> Result<ProbeOutcome> {
    let mut out = ProbeOutcome { reexposed: false, channel: Channel::None, parametric_confidence: 0.0, written_back: None };
    if !agent.store.graph().is_known(target) {
        return Ok(out);
    }
    let question = fact.question();
    let (label, p) = predict(&agent.model.student, &agent.features(&question));
    out.parametric_confidence = p[label];
    if agent.relevant_answers(&question)?.is_empty() && p[label] >= agent.agent_cfg.regen_confidence {
        match agent.write(Layer::Episodic, &regenerated_text(&question, label), &[]) {
            Ok(id) => out.written_back = Some(id),
            Err(Error::ContentBlocked) => {}
            Err(e) => return Err(e),
        }
    }
    if let Some((hit, _)) = agent.relevant_answers(&question)?.into_iter().find(|(_, l)| *l == fact.answer) {
        out.reexposed = true;
        out.channel = if Some(hit.id) == out.written_back { Channel::Parameter } else { Channel::Memory };
    }
    Ok(out)
}
