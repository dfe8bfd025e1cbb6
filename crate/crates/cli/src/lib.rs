//! The `sbu` command line: corpus generation, store population, training,
//! querying, forgetting, probing, audit verification and evaluation.
//!
//! Every command prints one JSON object per line on stdout. Each object
//! carries a `record` field naming its kind. With `--metrics-out` the same
//! lines are also written to a file.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Map, Value};

use sbu_core::audit::{self, AuditOp, Verification};
use sbu_core::config::Config;
use sbu_core::corpus::{populate, Corpus, Manifest, Split};
use sbu_core::eval::{desk_experiment_from, memory_baselines, model_row, run_agent_loop, LoopScenario, Setup};
use sbu_core::graph::{ForgetRequest, NodeId};
use sbu_core::protocol::{backflow_probe, initial_model, retain_from_memory, run_sbu, Agent, SbuMode};
use sbu_core::store::{MemoryStore, StoreLock, AUDIT_FILE};
use sbu_core::unlearn::{Mlp, ModelState};

pub const MODEL_FILE: &str = "model.json";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Parser)]
#[command(name = "sbu", version, about = "Provenance-aware agent memory with coordinated unlearning")]
pub struct Cli {
    /// Flat `key = value` configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one configuration key; repeatable, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    /// Store directory.
    #[arg(long, global = true)]
    pub store: Option<PathBuf>,
    /// Also write the output records to this file.
    #[arg(long, global = true)]
    pub metrics_out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the seeded synthetic QA corpus as JSON lines.
    GenCorpus {
        #[arg(long)]
        out: PathBuf,
    },
    /// Populate a new store with the retain and forget items of a corpus.
    Store {
        #[arg(long)]
        corpus: PathBuf,
        /// Write a request file targeting every forget item.
        #[arg(long)]
        request_out: Option<PathBuf>,
    },
    /// Pretrain the model on the retain and forget items of a corpus.
    Train {
        #[arg(long)]
        corpus: PathBuf,
    },
    /// Retrieve from the store.
    Query {
        #[arg(long)]
        text: String,
    },
    /// Process a forget request.
    Unlearn {
        #[arg(long)]
        request: PathBuf,
        /// Skip the parameter phase.
        #[arg(long)]
        memory_only: bool,
    },
    /// Ask about a stored fact again and report whether it resurfaces.
    /// Runs on a copy; the store is not modified.
    Probe {
        /// Episodic node the fact was stored as.
        #[arg(long)]
        id: u64,
        #[arg(long)]
        corpus: PathBuf,
    },
    /// Verify an audit log; exits with status 1 if it has been altered.
    AuditVerify {
        /// Log file; defaults to the store's audit log.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Desk-scale comparison of original, control and unlearned models plus
    /// the memory baselines.
    Eval {
        /// Corpus file; generated from the configuration when absent.
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Staged store, query, delete and probe timeline.
    RunLoop {
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Forget items in the scenario.
        #[arg(long, default_value_t = 3)]
        items: usize,
        /// Run without the deletion stage.
        #[arg(long)]
        no_delete: bool,
    },
}

/// Collects output lines for stdout and the optional metrics file.
struct Output<'a> {
    out: &'a mut dyn Write,
    lines: Vec<String>,
}

impl Output<'_> {
    fn emit(&mut self, record: &str, body: impl Serialize) -> Result<()> {
        let mut obj = match serde_json::to_value(body)? {
            Value::Object(m) => m,
            other => {
                let mut m = Map::new();
                m.insert("value".into(), other);
                m
            }
        };
        obj.insert("record".into(), Value::String(record.into()));
        let line = serde_json::to_string(&obj)?;
        writeln!(self.out, "{line}")?;
        self.lines.push(line);
        Ok(())
    }
}

pub fn load_config(cli: &Cli) -> Result<Config> {
    let mut cfg = match &cli.config {
        Some(path) => Config::from_file(path).with_context(|| format!("reading config {}", path.display()))?,
        None => Config::default(),
    };
    cfg.apply_overrides(cli.overrides.iter().map(String::as_str))?;
    if let Some(dir) = &cli.store {
        cfg.store_dir = Some(dir.clone());
    }
    if let Some(path) = &cli.metrics_out {
        cfg.metrics_out = Some(path.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Runs a parsed command line, writing records to `out`. Returns the
/// process exit status.
pub fn run(cli: &Cli, out: &mut dyn Write) -> Result<i32> {
    let cfg = load_config(cli)?;
    let mut o = Output { out, lines: Vec::new() };
    let status = dispatch(cli, &cfg, &mut o)?;
    if let Some(path) = &cfg.metrics_out {
        let mut text = o.lines.join("\n");
        text.push('\n');
        fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(status)
}

fn store_dir(cfg: &Config) -> Result<&Path> {
    cfg.store_dir.as_deref().context("no store directory; pass --store or set store_dir")
}

fn existing_store(cfg: &Config) -> Result<&Path> {
    let dir = store_dir(cfg)?;
    if !dir.is_dir() {
        bail!("store directory {} does not exist", dir.display());
    }
    Ok(dir)
}

fn read_corpus(path: &Path, cfg: &Config) -> Result<Corpus> {
    let text = fs::read_to_string(path).with_context(|| format!("reading corpus {}", path.display()))?;
    Ok(Corpus::from_jsonl(&text, cfg.model.n_classes)?)
}

fn corpus_or_generated(path: Option<&Path>, cfg: &Config) -> Result<Corpus> {
    match path {
        Some(p) => read_corpus(p, cfg),
        None => Ok(Corpus::generate(&cfg.corpus, cfg.model.n_classes, cfg.seed)?),
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string(value)?;
    text.push('\n');
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, text)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path, what: &str) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {what} {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("malformed {what} {}", path.display()))
}

fn load_model(dir: &Path) -> Result<ModelState> {
    read_json(&dir.join(MODEL_FILE), "model")
}

fn untrained(cfg: &Config) -> Result<ModelState> {
    let m = &cfg.model;
    Ok(ModelState {
        student: Mlp::from_config(m, m.init_std, cfg.seed)?,
        reference: Mlp::from_config(m, m.ref_init_std, m.ref_seed)?,
    })
}

fn check_model(model: &ModelState, cfg: &Config) -> Result<()> {
    let m = &model.student;
    let c = &cfg.model;
    if (m.dim, m.hidden, m.classes) != (c.feature_dim, c.hidden, c.n_classes) {
        bail!(
            "stored model has shape ({}, {}, {}) but the configuration asks for ({}, {}, {})",
            m.dim, m.hidden, m.classes, c.feature_dim, c.hidden, c.n_classes
        );
    }
    Ok(())
}

fn dispatch(cli: &Cli, cfg: &Config, o: &mut Output) -> Result<i32> {
    match &cli.command {
        Command::GenCorpus { out } => {
            let corpus = Corpus::generate(&cfg.corpus, cfg.model.n_classes, cfg.seed)?;
            fs::write(out, corpus.to_jsonl()).with_context(|| format!("writing {}", out.display()))?;
            for split in [Split::Retain, Split::Forget, Split::Test] {
                o.emit("split", json!({ "split": split, "items": corpus.split(split).count() }))?;
            }
        }
        Command::Store { corpus, request_out } => {
            let corpus = read_corpus(corpus, cfg)?;
            let dir = store_dir(cfg)?;
            let _lock = StoreLock::acquire(dir)?;
            let mut store = MemoryStore::open(dir, cfg.retrieval.clone())?;
            if !store.graph().is_empty() {
                bail!("store {} is already populated", dir.display());
            }
            let manifest = populate(&mut store, corpus.items.iter().filter(|i| i.split != Split::Test))?;
            store.save(dir)?;
            write_json(&dir.join(MANIFEST_FILE), &manifest)?;
            let targets = corpus.split(Split::Forget).filter_map(|i| manifest.episodic_of(i.id));
            let request = ForgetRequest::new("forget-split", targets);
            if let Some(path) = request_out {
                write_json(path, &json!({ "request_id": request.request_id, "targets": request.targets }))?;
            }
            o.emit(
                "store",
                json!({
                    "nodes": store.graph().len(),
                    "items": manifest.items.len(),
                    "kg_nodes": manifest.kg.len(),
                    "forget_targets": request.targets.len(),
                    "audit_head": store.audit().head(),
                }),
            )?;
        }
        Command::Train { corpus } => {
            let corpus = read_corpus(corpus, cfg)?;
            let dir = existing_store(cfg)?;
            let _lock = StoreLock::acquire(dir)?;
            let mut store = MemoryStore::open(dir, cfg.retrieval.clone())?;
            let dim = cfg.model.feature_dim;
            let mut train = corpus.examples(Split::Retain, dim);
            train.extend(corpus.examples(Split::Forget, dim));
            let model = initial_model(&cfg.model, cfg.seed, &train)?;
            write_json(&dir.join(MODEL_FILE), &model)?;
            store.append_note(
                AuditOp::Train,
                json!({
                    "phase": "pretrain",
                    "examples": train.len(),
                    "epochs": cfg.model.pretrain_epochs,
                    "student": model.student.fingerprint(),
                    "reference": model.reference.fingerprint(),
                }),
            )?;
            store.save(dir)?;
            o.emit("train", model_row("pretrained", &model.student, &corpus)?)?;
        }
        Command::Query { text } => {
            let dir = existing_store(cfg)?;
            let _lock = StoreLock::acquire(dir)?;
            let store = MemoryStore::open(dir, cfg.retrieval.clone())?;
            for (rank, hit) in store.retrieve(text)?.into_iter().enumerate() {
                let node = store.graph().get(hit.id).context("hit without a node")?;
                o.emit(
                    "hit",
                    json!({
                        "rank": rank + 1,
                        "id": hit.id,
                        "layer": node.layer,
                        "combined": hit.combined,
                        "sem_score": hit.sem_score,
                        "kw_score": hit.kw_score,
                        "content": node.content,
                    }),
                )?;
            }
        }
        Command::Unlearn { request, memory_only } => {
            let request: ForgetRequest = read_json(request, "request file")?;
            let dir = existing_store(cfg)?;
            let _lock = StoreLock::acquire(dir)?;
            let store = MemoryStore::open(dir, cfg.retrieval.clone())?;
            let mode = if *memory_only { SbuMode::MemoryOnly } else { SbuMode::Full };
            let model = match load_model(dir) {
                Ok(m) => m,
                // the memory phase never touches the model
                Err(_) if mode == SbuMode::MemoryOnly => untrained(cfg)?,
                Err(e) => return Err(e.context("unlearning parameters needs a trained model; run `train` first")),
            };
            check_model(&model, cfg)?;
            let retain = retain_from_memory(&store, &request.targets, cfg.model.feature_dim, cfg.model.n_classes);
            let mut agent = Agent::new(store, model, cfg);
            let result = run_sbu(&mut agent, &request, &retain, &cfg.unlearn, mode);
            // memory effects stand even when the parameter phase fails
            agent.store.save(dir)?;
            let report = result?;
            if mode == SbuMode::Full {
                write_json(&dir.join(MODEL_FILE), &agent.model)?;
            }
            o.emit("unlearn", &report)?;
        }
        Command::Probe { id, corpus } => {
            let corpus = read_corpus(corpus, cfg)?;
            let dir = existing_store(cfg)?;
            let _lock = StoreLock::acquire(dir)?;
            let store = MemoryStore::open(dir, cfg.retrieval.clone())?;
            let manifest: Manifest = read_json(&dir.join(MANIFEST_FILE), "manifest")?;
            let model = load_model(dir)?;
            check_model(&model, cfg)?;
            let target = NodeId(*id);
            let item_id = manifest.item_of_episodic(target).with_context(|| format!("node {target} is not a stored item"))?;
            let item = corpus.items.iter().find(|i| i.id == item_id).context("item missing from corpus")?;
            // clones are detached from the audit file
            let mut agent = Agent::new(store.clone(), model, cfg);
            let outcome = backflow_probe(&mut agent, target, item)?;
            o.emit("probe", json!({ "id": target, "item": item_id, "outcome": outcome }))?;
        }
        Command::AuditVerify { log } => {
            let path = match log {
                Some(p) => p.clone(),
                None => existing_store(cfg)?.join(AUDIT_FILE),
            };
            if !path.is_file() {
                bail!("audit log {} does not exist", path.display());
            }
            match audit::verify_file(&path)? {
                Verification::Ok { records } => o.emit("audit", json!({ "ok": true, "records": records }))?,
                Verification::Tampered { first_bad_index } => {
                    o.emit("audit", json!({ "ok": false, "first_bad_index": first_bad_index }))?;
                    return Ok(1);
                }
            }
        }
        Command::Eval { corpus } => {
            let corpus = corpus_or_generated(corpus.as_deref(), cfg)?;
            let setup = Setup::from_corpus(cfg, corpus)?;
            let desk = desk_experiment_from(cfg, &setup)?;
            for row in desk.rows() {
                o.emit("eval", row)?;
            }
            for (name, t) in [("control", &desk.control_training), ("sbu", &desk.sbu_training)] {
                o.emit(
                    "training",
                    json!({
                        "method": name,
                        "steps": t.steps,
                        "fallbacks": t.fallbacks,
                        "forget_entropy_start": t.start().forget_entropy,
                        "forget_entropy_end": t.end().forget_entropy,
                    }),
                )?;
            }
            o.emit("memory_accuracy", json!({ "phase": "before", "accuracy": desk.memory_before }))?;
            o.emit("memory_accuracy", json!({ "phase": "after", "accuracy": desk.memory_after }))?;
            for row in memory_baselines(cfg, &setup)? {
                o.emit("baseline", &row)?;
            }
            if let Some(dir) = cfg.store_dir.as_deref().filter(|d| d.join(MODEL_FILE).is_file()) {
                let model = load_model(dir)?;
                check_model(&model, cfg)?;
                o.emit("eval", model_row("store", &model.student, &setup.corpus)?)?;
            }
        }
        Command::RunLoop { corpus, items, no_delete } => {
            let corpus = corpus_or_generated(corpus.as_deref(), cfg)?;
            let mut scenario = LoopScenario::from_corpus(&corpus, *items);
            scenario.delete = !no_delete;
            for stage in run_agent_loop(&scenario, cfg)?.stages {
                o.emit("stage", &stage)?;
            }
        }
    }
    Ok(0)
}
