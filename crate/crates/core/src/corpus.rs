//! Seeded synthetic QA corpus and the layered memory built from it.
//!
//! Each item asks about a pair of invented entities under a relation and a
//! topic. The answer is the relation's class with probability `p_rule` and
//! otherwise a random other class, so a model can only get the exceptions
//! right by memorizing the entities.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::CorpusConfig;
use crate::error::{Error, Result};
use crate::graph::{Layer, NodeId};
use crate::store::MemoryStore;
use crate::unlearn::{encode, Example};

pub const TOPICS: &[&str] = &[
    "cardiology", "nephrology", "oncology", "neurology", "dermatology", "hematology", "pulmonology", "endocrinology",
    "gastroenterology", "rheumatology", "urology", "ophthalmology",
];

pub const RELATIONS: &[&str] = &["treatment", "mechanism", "contraindication", "dosage", "symptom", "diagnosis"];

const ONSETS: &[&str] = &["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "qu", "th"];
const VOWELS: &[&str] = &["a", "e", "i", "o", "u", "ae", "io"];
const CODAS: &[&str] = &["", "n", "x", "r", "l", "s"];

#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Retain,
    Forget,
    Test,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaItem {
    pub id: usize,
    pub entities: [String; 2],
    pub topic: usize,
    pub relation: usize,
    pub answer: usize,
    pub split: Split,
}

pub fn label_name(class: usize) -> char {
    (b'a' + class as u8) as char
}

/// Answer class written as `answer=<letter>` in memory content.
pub fn parse_answer(content: &str, n_classes: usize) -> Option<usize> {
    let rest = &content[content.find("answer=")? + "answer=".len()..];
    let c = rest.chars().next()?;
    let k = (c as u32).checked_sub('a' as u32)? as usize;
    (k < n_classes).then_some(k)
}

/// The question part of an episodic record.
pub fn parse_question(content: &str) -> Option<&str> {
    let rest = content.strip_prefix("user: ")?;
    Some(&rest[..rest.find(" | agent:")?])
}

impl QaItem {
    pub fn question(&self) -> String {
        format!("{} {} {} {}", self.entities[0], self.entities[1], RELATIONS[self.relation], TOPICS[self.topic])
    }

    /// Phrased without the relation or topic.
    pub fn paraphrase(&self) -> String {
        format!("tell me about {} and {}", self.entities[0], self.entities[1])
    }

    pub fn episodic_text(&self) -> String {
        format!("user: {} | agent: answer={}", self.question(), label_name(self.answer))
    }

    pub fn summary_text(&self) -> String {
        format!("summary: {} answer={}", self.question(), label_name(self.answer))
    }

    pub fn reflection_text(&self) -> String {
        format!("reflection: the user asked about {} {}", self.entities[0], self.entities[1])
    }
}

/// What the agent writes back when its parameters still produce an answer
/// for a question it no longer finds in memory.
pub fn regenerated_text(question: &str, class: usize) -> String {
    format!("recalled: {question} answer={}", label_name(class))
}

pub fn kg_text(topic: usize) -> String {
    format!("entity: {} knowledge node", TOPICS[topic])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub n_classes: usize,
    pub items: Vec<QaItem>,
}

impl Corpus {
    pub fn generate(cfg: &CorpusConfig, n_classes: usize, seed: u64) -> Result<Self> {
        if cfg.n_topics == 0 || cfg.n_topics > TOPICS.len() {
            return Err(Error::Config(format!("n_topics must be in 1..={}", TOPICS.len())));
        }
        if !(2..=RELATIONS.len().min(26)).contains(&n_classes) {
            return Err(Error::Config(format!("n_classes must be in 2..={}", RELATIONS.len())));
        }
        if !(0.0..=1.0).contains(&cfg.p_rule) {
            return Err(Error::Config("p_rule must lie in [0, 1]".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let total = cfg.n_retain + cfg.n_forget + cfg.n_test;
        let mut seen = BTreeSet::new();
        let mut word = |rng: &mut ChaCha8Rng| loop {
            let syl = |rng: &mut ChaCha8Rng| {
                format!("{}{}", ONSETS.choose(rng).unwrap(), VOWELS.choose(rng).unwrap())
            };
            let w = format!("{}{}{}{}", syl(rng), syl(rng), syl(rng), CODAS.choose(rng).unwrap());
            if seen.insert(w.clone()) {
                break w;
            }
        };
        let mut items = Vec::with_capacity(total);
        for id in 0..total {
            let entities = [word(&mut rng), word(&mut rng)];
            let topic = rng.gen_range(0..cfg.n_topics);
            let relation = rng.gen_range(0..n_classes);
            let rule = relation;
            let answer = if rng.gen_bool(cfg.p_rule) { rule } else { (rule + rng.gen_range(1..n_classes)) % n_classes };
            let split = if id < cfg.n_retain {
                Split::Retain
            } else if id < cfg.n_retain + cfg.n_forget {
                Split::Forget
            } else {
                Split::Test
            };
            items.push(QaItem { id, entities, topic, relation, answer, split });
        }
        Ok(Corpus { n_classes, items })
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &QaItem> {
        self.items.iter().filter(move |i| i.split == split)
    }

    pub fn examples(&self, split: Split, dim: usize) -> Vec<Example> {
        self.split(split).map(|i| Example::retain(encode(&i.question(), dim), i.answer)).collect()
    }

    pub fn to_jsonl(&self) -> String {
        self.items.iter().map(|i| serde_json::to_string(i).expect("items serialize") + "\n").collect()
    }

    pub fn from_jsonl(text: &str, n_classes: usize) -> Result<Self> {
        let mut items = Vec::new();
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let item: QaItem = serde_json::from_str(line).map_err(|e| Error::Malformed {
                what: "corpus",
                line: i + 1,
                reason: e.to_string(),
            })?;
            if item.answer >= n_classes || item.topic >= TOPICS.len() || item.relation >= RELATIONS.len() {
                return Err(Error::Malformed { what: "corpus", line: i + 1, reason: "field out of range".into() });
            }
            items.push(item);
        }
        Ok(Corpus { n_classes, items })
    }
}

/// Node ids created for one corpus item.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemNodes {
    pub item: usize,
    pub episodic: NodeId,
    pub summary: NodeId,
    pub reflection: NodeId,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub items: BTreeMap<usize, ItemNodes>,
    pub kg: BTreeMap<usize, NodeId>,
}

impl Manifest {
    pub fn episodic_of(&self, item: usize) -> Option<NodeId> {
        self.items.get(&item).map(|n| n.episodic)
    }

    pub fn item_of_episodic(&self, id: NodeId) -> Option<usize> {
        self.items.values().find(|n| n.episodic == id).map(|n| n.item)
    }
}

/// Writes the episodic record of every item, then the consolidation layers:
/// a summary per item, a reflection on each summary, and one knowledge node
/// per topic derived from that topic's summaries.
pub fn populate<'a>(store: &mut MemoryStore, items: impl IntoIterator<Item = &'a QaItem>) -> Result<Manifest> {
    let items: Vec<&QaItem> = items.into_iter().collect();
    let mut episodic = Vec::with_capacity(items.len());
    for item in &items {
        episodic.push(store.add_memory(Layer::Episodic, &item.episodic_text(), &[])?);
    }
    consolidate(store, &items, &episodic)
}

pub fn consolidate(store: &mut MemoryStore, items: &[&QaItem], episodic: &[NodeId]) -> Result<Manifest> {
    let mut manifest = Manifest::default();
    let mut by_topic: BTreeMap<usize, Vec<NodeId>> = BTreeMap::new();
    for (item, &e) in items.iter().zip(episodic) {
        let summary = store.add_memory(Layer::Semantic, &item.summary_text(), &[e])?;
        let reflection = store.add_memory(Layer::Reflection, &item.reflection_text(), &[summary])?;
        by_topic.entry(item.topic).or_default().push(summary);
        manifest.items.insert(item.id, ItemNodes { item: item.id, episodic: e, summary, reflection });
    }
    for (topic, summaries) in by_topic {
        manifest.kg.insert(topic, store.add_memory(Layer::KgEntity, &kg_text(topic), &summaries)?);
    }
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RetrievalConfig;

    #[test]
    fn generation_is_seeded_and_disjoint() {
        let cfg = CorpusConfig::default();
        let a = Corpus::generate(&cfg, 4, 11).unwrap();
        let b = Corpus::generate(&cfg, 4, 11).unwrap();
        let c = Corpus::generate(&cfg, 4, 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.items.len(), cfg.n_retain + cfg.n_forget + cfg.n_test);
        let entities: BTreeSet<&String> = a.items.iter().flat_map(|i| &i.entities).collect();
        assert_eq!(entities.len(), 2 * a.items.len());
        assert_eq!(a.split(Split::Forget).count(), cfg.n_forget);
        assert_eq!(Corpus::from_jsonl(&a.to_jsonl(), 4).unwrap(), a);
    }

    #[test]
    fn rule_rate_is_close_to_configured() {
        let cfg = CorpusConfig { n_retain: 2000, n_forget: 0, n_test: 0, ..Default::default() };
        let c = Corpus::generate(&cfg, 4, 3).unwrap();
        let rule = c.items.iter().filter(|i| i.answer == i.relation).count() as f64 / 2000.0;
        assert!((rule - cfg.p_rule).abs() < 0.05, "{rule}");
    }

    #[test]
    fn content_parsers() {
        let c = Corpus::generate(&CorpusConfig::default(), 4, 1).unwrap();
        let item = &c.items[0];
        assert_eq!(parse_answer(&item.episodic_text(), 4), Some(item.answer));
        assert_eq!(parse_answer(&item.summary_text(), 4), Some(item.answer));
        assert_eq!(parse_answer(&item.reflection_text(), 4), None);
        assert_eq!(parse_question(&item.episodic_text()), Some(item.question().as_str()));
        assert_eq!(parse_answer("answer=z", 4), None);
    }

    #[test]
    fn population_shape() {
        let c = Corpus::generate(&CorpusConfig { n_retain: 20, n_forget: 5, n_test: 0, ..Default::default() }, 4, 1)
            .unwrap();
        let mut store = MemoryStore::new(RetrievalConfig::default()).unwrap();
        let m = populate(&mut store, &c.items).unwrap();
        assert_eq!(m.items.len(), 25);
        assert_eq!(store.graph().len(), 75 + m.kg.len());
        assert!(store.graph().unsupported_nodes().is_empty());
        for item in &c.items {
            let top = &store.retrieve(&item.question()).unwrap()[0];
            let n = m.items[&item.id];
            assert!(top.id == n.episodic || top.id == n.summary, "item {}", item.id);
        }
    }
}
