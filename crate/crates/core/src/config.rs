//! Flat `key = value` configuration with documented defaults.
//!
//! Lines starting with `#` are comments. Unknown keys are rejected. Values
//! set later override earlier ones, so applying the file first and command
//! line overrides second gives flags precedence over the file.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::retrieval::{HybridQuery, ProviderKind, DEFAULT_EMBED_DIM};

#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalConfig {
    pub top_k: usize,
    pub oversample_r: usize,
    pub w_sem: f64,
    pub w_kw: f64,
    pub tau: usize,
    pub embed_dim: usize,
    pub provider: ProviderKind,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        RetrievalConfig {
            top_k: 5,
            oversample_r: 3,
            w_sem: 0.7,
            w_kw: 0.3,
            tau: 100,
            embed_dim: DEFAULT_EMBED_DIM,
            provider: ProviderKind::DeterministicHash,
        }
    }
}

impl RetrievalConfig {
    pub fn query(&self, text: impl Into<String>) -> HybridQuery {
        HybridQuery::new(text)
            .with_top_k(self.top_k)
            .with_oversample(self.oversample_r)
            .with_weights(self.w_sem, self.w_kw)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct UnlearnConfig {
    pub lambda_f: f64,
    pub temperature: f64,
    pub lr: f64,
    pub epochs: usize,
    pub entropy_fallback: bool,
    /// Entropy threshold for the fallback; `None` means half of `ln |V|`.
    pub h_min: Option<f64>,
    pub batch_size: usize,
    /// Forget items drawn per retain item in a mixed batch.
    pub forget_ratio: f64,
    pub seed: u64,
}

impl Default for UnlearnConfig {
    fn default() -> Self {
        UnlearnConfig {
            lambda_f: 1.5,
            temperature: 2.0,
            lr: 0.5,
            epochs: 60,
            entropy_fallback: true,
            h_min: None,
            batch_size: 32,
            forget_ratio: 1.0,
            seed: 7,
        }
    }
}

impl UnlearnConfig {
    pub fn h_min_for(&self, n_classes: usize) -> f64 {
        self.h_min.unwrap_or(0.5 * (n_classes as f64).ln())
    }

    pub fn kl_multiplier(&self) -> f64 {
        self.lambda_f * self.temperature * self.temperature
    }

    pub fn validate(&self, n_classes: usize) -> Result<()> {
        if !(self.lambda_f >= 0.0 && self.lambda_f.is_finite()) {
            return Err(Error::Config("lambda_f must be a nonnegative number".into()));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config("temperature must be positive".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("lr must be nonnegative".into()));
        }
        let h = self.h_min_for(n_classes);
        if !(h > 0.0 && h < (n_classes as f64).ln()) {
            return Err(Error::Config(format!("h_min must lie in (0, ln {n_classes})")));
        }
        if self.batch_size == 0 || self.forget_ratio.is_nan() || self.forget_ratio < 0.0 {
            return Err(Error::Config("batch_size must be positive and forget_ratio nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub feature_dim: usize,
    /// Hidden units; 0 gives a linear softmax model.
    pub hidden: usize,
    pub n_classes: usize,
    pub init_std: f64,
    pub ref_init_std: f64,
    pub ref_seed: u64,
    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            feature_dim: 1024,
            hidden: 32,
            n_classes: 4,
            init_std: 0.1,
            ref_init_std: 0.1,
            ref_seed: 1234,
            pretrain_epochs: 1000,
            pretrain_lr: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusConfig {
    pub n_retain: usize,
    pub n_forget: usize,
    pub n_test: usize,
    pub n_topics: usize,
    /// Probability that an item's answer follows its topic rule.
    pub p_rule: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig { n_retain: 240, n_forget: 60, n_test: 120, n_topics: 8, p_rule: 0.6 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AgentConfig {
    /// Minimum combined score for a retrieved memory to ground an answer.
    pub min_relevance: f64,
    /// Confidence at which the policy regenerates an answer from parameters
    /// and writes it back to memory.
    pub regen_confidence: f64,
}

impl Default for AgentConfig {
    fn default() -> Self {
        AgentConfig { min_relevance: 0.65, regen_confidence: 0.5 }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Config {
    pub retrieval: RetrievalConfig,
    pub unlearn: UnlearnConfig,
    pub model: ModelConfig,
    pub corpus: CorpusConfig,
    pub agent: AgentConfig,
    pub seed: u64,
    pub store_dir: Option<PathBuf>,
    pub metrics_out: Option<PathBuf>,
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

impl Config {
    pub const KEYS: &'static [&'static str] = &[
        "top_k", "oversample_r", "w_sem", "w_kw", "tau", "embed_dim", "provider",
        "lambda_f", "temperature", "lr", "epochs", "entropy_fallback", "h_min", "batch_size", "forget_ratio",
        "feature_dim", "hidden", "n_classes", "init_std", "ref_init_std", "ref_seed", "pretrain_epochs", "pretrain_lr",
        "n_retain", "n_forget", "n_test", "n_topics", "p_rule",
        "min_relevance", "regen_confidence",
        "seed", "store_dir", "metrics_out",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "top_k" => self.retrieval.top_k = parse(key, v)?,
            "oversample_r" => self.retrieval.oversample_r = parse(key, v)?,
            "w_sem" => self.retrieval.w_sem = parse(key, v)?,
            "w_kw" => self.retrieval.w_kw = parse(key, v)?,
            "tau" => self.retrieval.tau = parse(key, v)?,
            "embed_dim" => self.retrieval.embed_dim = parse(key, v)?,
            "provider" => {
                self.retrieval.provider = match v {
                    "hash" | "deterministic_hash" => ProviderKind::DeterministicHash,
                    "external" | "external_service" => ProviderKind::ExternalService,
                    _ => return Err(Error::Config(format!("unknown provider {v:?}"))),
                }
            }
            "lambda_f" => self.unlearn.lambda_f = parse(key, v)?,
            "temperature" => self.unlearn.temperature = parse(key, v)?,
            "lr" => self.unlearn.lr = parse(key, v)?,
            "epochs" => self.unlearn.epochs = parse(key, v)?,
            "entropy_fallback" => self.unlearn.entropy_fallback = parse(key, v)?,
            "h_min" => self.unlearn.h_min = Some(parse(key, v)?),
            "batch_size" => self.unlearn.batch_size = parse(key, v)?,
            "forget_ratio" => self.unlearn.forget_ratio = parse(key, v)?,
            "feature_dim" => self.model.feature_dim = parse(key, v)?,
            "hidden" => self.model.hidden = parse(key, v)?,
            "n_classes" => self.model.n_classes = parse(key, v)?,
            "init_std" => self.model.init_std = parse(key, v)?,
            "ref_init_std" => self.model.ref_init_std = parse(key, v)?,
            "ref_seed" => self.model.ref_seed = parse(key, v)?,
            "pretrain_epochs" => self.model.pretrain_epochs = parse(key, v)?,
            "pretrain_lr" => self.model.pretrain_lr = parse(key, v)?,
            "n_retain" => self.corpus.n_retain = parse(key, v)?,
            "n_forget" => self.corpus.n_forget = parse(key, v)?,
            "n_test" => self.corpus.n_test = parse(key, v)?,
            "n_topics" => self.corpus.n_topics = parse(key, v)?,
            "p_rule" => self.corpus.p_rule = parse(key, v)?,
            "min_relevance" => self.agent.min_relevance = parse(key, v)?,
            "regen_confidence" => self.agent.regen_confidence = parse(key, v)?,
            "seed" => {
                self.seed = parse(key, v)?;
                self.unlearn.seed = self.seed;
            }
            "store_dir" => self.store_dir = Some(PathBuf::from(v)),
            "metrics_out" => self.metrics_out = Some(PathBuf::from(v)),
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Malformed {
                what: "config",
                line: i + 1,
                reason: "expected key = value".into(),
            })?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let mut cfg = Config::default();
        cfg.apply_text(&std::fs::read_to_string(path)?)?;
        Ok(cfg)
    }

    /// Applies `key=value` overrides.
    pub fn apply_overrides<'a>(&mut self, overrides: impl IntoIterator<Item = &'a str>) -> Result<()> {
        for o in overrides {
            let (k, v) = o.split_once('=').ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.retrieval.query("").validate()?;
        if self.retrieval.embed_dim == 0 || self.model.feature_dim == 0 || self.model.n_classes < 2 {
            return Err(Error::Config("dimensions must be positive and n_classes at least 2".into()));
        }
        self.unlearn.validate(self.model.n_classes)
    }

    /// Renders every key in canonical order; parsing the output yields an
    /// equal config.
    pub fn to_text(&self) -> String {
        let r = &self.retrieval;
        let u = &self.unlearn;
        let m = &self.model;
        let c = &self.corpus;
        let provider = match r.provider {
            ProviderKind::DeterministicHash => "hash",
            ProviderKind::ExternalService => "external",
        };
        let mut out = format!(
            "top_k = {}\noversample_r = {}\nw_sem = {}\nw_kw = {}\ntau = {}\nembed_dim = {}\nprovider = {}\n\
             lambda_f = {}\ntemperature = {}\nlr = {}\nepochs = {}\nentropy_fallback = {}\n",
            r.top_k, r.oversample_r, r.w_sem, r.w_kw, r.tau, r.embed_dim, provider,
            u.lambda_f, u.temperature, u.lr, u.epochs, u.entropy_fallback,
        );
        if let Some(h) = u.h_min {
            out += &format!("h_min = {h}\n");
        }
        out += &format!(
            "batch_size = {}\nforget_ratio = {}\nfeature_dim = {}\nhidden = {}\nn_classes = {}\ninit_std = {}\n\
             ref_init_std = {}\nref_seed = {}\npretrain_epochs = {}\npretrain_lr = {}\nn_retain = {}\nn_forget = {}\n\
             n_test = {}\nn_topics = {}\np_rule = {}\nmin_relevance = {}\nregen_confidence = {}\nseed = {}\n",
            u.batch_size, u.forget_ratio, m.feature_dim, m.hidden, m.n_classes, m.init_std,
            m.ref_init_std, m.ref_seed, m.pretrain_epochs, m.pretrain_lr, c.n_retain, c.n_forget,
            c.n_test, c.n_topics, c.p_rule, self.agent.min_relevance, self.agent.regen_confidence, self.seed,
        );
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        let cfg = Config::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.unlearn.kl_multiplier(), 6.0);
        assert!((cfg.unlearn.h_min_for(4) - 0.5 * 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut cfg = Config::default();
        assert!(matches!(cfg.set("lamda_f", "1"), Err(Error::Config(_))));
        assert!(cfg.apply_text("tau = 100\nbogus = 3\n").is_err());
        assert!(cfg.apply_text("tau 100").is_err());
    }

    #[test]
    fn flags_override_file() {
        let mut cfg = Config::default();
        cfg.apply_text("# comment\ntau = 50\nlambda_f = 2.5\n").unwrap();
        cfg.apply_overrides(["tau=7"]).unwrap();
        assert_eq!(cfg.retrieval.tau, 7);
        assert_eq!(cfg.unlearn.lambda_f, 2.5);
        assert_eq!(cfg.retrieval.top_k, 5);
    }

    #[test]
    fn text_round_trip() {
        let mut cfg = Config::default();
        cfg.apply_overrides(["h_min=0.3", "seed=99", "provider=external"]).unwrap();
        let mut back = Config::default();
        back.apply_text(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn invalid_values() {
        let mut cfg = Config::default();
        cfg.set("temperature", "0").unwrap();
        assert!(cfg.validate().is_err());
        let mut cfg = Config::default();
        cfg.set("h_min", "5").unwrap();
        assert!(cfg.validate().is_err());
        let mut cfg = Config::default();
        cfg.set("w_sem", "0.9").unwrap();
        assert!(cfg.validate().is_err());
        assert!(Config::default().set("top_k", "many").is_err());
    }
}
