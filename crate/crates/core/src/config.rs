//! Run configuration as flat `section.key=value` text.
//!
//! Every field has a default; a config file or command-line override only
//! lists what differs. The fingerprint is a sha256 over the canonical text
//! of the sections that influence trained artifacts.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Number, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::active::ActiveConfig;
use crate::data::SyntheticSpec;
use crate::eval::Variant;
use crate::fm::FmHyper;
use crate::negative::NegConfig;
use crate::policy::{QConfig, RewardTable};
use crate::session::{SessionConfig, Strategy};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: expected `section.key=value`, got {text:?}")]
    Syntax { line: usize, text: String },
    #[error("unknown config key '{0}'")]
    UnknownKey(String),
    #[error("config key '{key}': cannot parse {value:?} ({why})")]
    Value { key: String, value: String, why: String },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("reading {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub seed: u64,
    pub output_dir: String,
}

impl Default for RunSection {
    fn default() -> Self {
        Self { seed: 0, output_dir: "runs/default".into() }
    }
}

/// Dataset source. With empty paths the synthetic generator is used.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub interactions: String,
    pub triplets: String,
    pub users: usize,
    pub items: usize,
    pub attributes: usize,
    pub attrs_per_item: usize,
    pub interactions_per_user: usize,
    pub topic_size: usize,
    pub topic_purity: f64,
    pub temperature: f64,
    pub interests: usize,
    /// Sampled negatives per training positive.
    pub neg_per_pos: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            interactions: String::new(),
            triplets: String::new(),
            users: 500,
            items: 200,
            attributes: 30,
            attrs_per_item: 5,
            interactions_per_user: 20,
            topic_size: 10,
            topic_purity: 0.85,
            temperature: 0.5,
            interests: 2,
            neg_per_pos: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FmSection {
    pub dim: usize,
    pub learning_rate: f64,
    pub l2: f64,
    pub init_stdev: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for FmSection {
    fn default() -> Self {
        let h = FmHyper::default();
        Self { dim: h.dim, learning_rate: h.learning_rate, l2: h.l2, init_stdev: 0.01, epochs: 30, batch_size: 64 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ActiveSection {
    pub hidden: usize,
    pub discount: f64,
    pub learning_rate: f64,
    pub degree_scale: f64,
    pub k_ask: usize,
    pub neighborhood_only: bool,
    pub episodes: usize,
    /// Questions per pretraining episode.
    pub turns: usize,
}

impl Default for ActiveSection {
    fn default() -> Self {
        let a = ActiveConfig::default();
        Self {
            hidden: a.hidden,
            discount: a.discount,
            learning_rate: a.learning_rate,
            degree_scale: a.degree_scale,
            k_ask: a.k_ask,
            neighborhood_only: a.neighborhood_only,
            episodes: 1000,
            turns: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NegativeSection {
    pub hidden: usize,
    pub attention_hidden: usize,
    pub discount: f64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub steps: usize,
    pub normalize_reward: bool,
    pub episodes: usize,
}

impl Default for NegativeSection {
    fn default() -> Self {
        let n = NegConfig::default();
        Self {
            hidden: n.hidden,
            attention_hidden: n.attention_hidden,
            discount: n.discount,
            batch_size: n.batch_size,
            learning_rate: n.learning_rate,
            steps: n.steps,
            normalize_reward: n.normalize_reward,
            episodes: 1000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicySection {
    pub hidden: usize,
    pub discount: f64,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    pub anneal_sessions: usize,
    pub buffer_capacity: usize,
    pub batch_size: usize,
    pub target_sync: u64,
    pub learning_rate: f64,
    pub train_sessions: usize,
    /// Reward preset name; the `reward_*` keys override single entries.
    pub reward: String,
    pub reward_ask_suc: Option<f64>,
    pub reward_ask_fail: Option<f64>,
    pub reward_rec_suc: Option<f64>,
    pub reward_rec_fail: Option<f64>,
    pub reward_reach_max_turn: Option<f64>,
}

impl Default for PolicySection {
    fn default() -> Self {
        let q = QConfig::default();
        Self {
            hidden: q.hidden,
            discount: q.discount,
            epsilon_start: q.epsilon_start,
            epsilon_end: q.epsilon_end,
            anneal_sessions: q.anneal_sessions,
            buffer_capacity: q.buffer_capacity,
            batch_size: q.batch_size,
            target_sync: q.target_sync,
            learning_rate: q.learning_rate,
            train_sessions: 1500,
            reward: "cpr".into(),
            reward_ask_suc: None,
            reward_ask_fail: None,
            reward_rec_suc: None,
            reward_rec_fail: None,
            reward_reach_max_turn: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SessionSection {
    pub max_turns: usize,
    pub top_k: usize,
    pub online_learning_rate: f64,
    pub online_l2: f64,
    pub online_steps: usize,
}

impl Default for SessionSection {
    fn default() -> Self {
        let s = SessionConfig::default();
        Self {
            max_turns: s.max_turns,
            top_k: s.top_k,
            online_learning_rate: s.online.learning_rate,
            online_l2: s.online.l2,
            online_steps: s.online_steps,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub variants: Vec<String>,
    /// Seeds for a multi-seed grid; empty means just `run.seed`.
    pub seeds: Vec<u64>,
    /// Cap on evaluated sessions, 0 for the whole test split.
    pub max_sessions: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { variants: Variant::ALL.iter().map(|v| v.as_str().to_string()).collect(), seeds: Vec::new(), max_sessions: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceSection {
    pub addr: String,
    pub variant: String,
    pub timeout_secs: u64,
    /// Transcript directory; empty means `<output_dir>/transcripts`.
    pub transcripts: String,
}

impl Default for ServiceSection {
    fn default() -> Self {
        Self { addr: "127.0.0.1:8080".into(), variant: "full".into(), timeout_secs: 1800, transcripts: String::new() }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub run: RunSection,
    pub data: DataSection,
    pub fm: FmSection,
    pub active: ActiveSection,
    pub negative: NegativeSection,
    pub policy: PolicySection,
    pub session: SessionSection,
    pub eval: EvalSection,
    pub service: ServiceSection,
}

/// Keys outside the fingerprint: where things go and how they are served
/// or evaluated does not change what gets trained.
const UNFINGERPRINTED: [&str; 3] = ["run.output_dir", "eval.", "service."];

fn flatten(prefix: &str, v: &Value, out: &mut Vec<(String, String)>) {
    match v {
        Value::Object(m) => {
            for (k, child) in m {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, child, out);
            }
        }
        Value::Array(items) => {
            let parts: Vec<String> = items.iter().map(scalar_text).collect();
            out.push((prefix.to_string(), parts.join(",")));
        }
        other => out.push((prefix.to_string(), scalar_text(other))),
    }
}

fn scalar_text(v: &Value) -> String {
    match v {
        Value::Null => String::new(),
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

fn parse_scalar(key: &str, like: &Value, raw: &str) -> Result<Value, ConfigError> {
    let bad = |why: &str| ConfigError::Value { key: key.into(), value: raw.into(), why: why.into() };
    match like {
        Value::String(_) => Ok(Value::String(raw.to_string())),
        Value::Bool(_) => raw.parse::<bool>().map(Value::Bool).map_err(|_| bad("expected true or false")),
        Value::Number(n) if n.is_f64() => float(raw).ok_or_else(|| bad("expected a number")),
        Value::Number(_) => raw.parse::<u64>().map(|x| Value::Number(x.into())).map_err(|_| bad("expected a non-negative integer")),
        Value::Null if raw.is_empty() => Ok(Value::Null),
        Value::Null => float(raw).ok_or_else(|| bad("expected a number or nothing")),
        Value::Array(_) => Ok(Value::Array(
            raw.split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| s.parse::<u64>().map(|x| Value::Number(x.into())).unwrap_or_else(|_| Value::String(s.into())))
                .collect(),
        )),
        Value::Object(_) => Err(bad("a section, not a key")),
    }
}

fn float(raw: &str) -> Option<Value> {
    raw.parse::<f64>().ok().and_then(Number::from_f64).map(Value::Number)
}

impl RunConfig {
    /// Canonical `section.key=value` lines, in field order.
    pub fn to_text(&self) -> String {
        let mut lines = Vec::new();
        flatten("", &serde_json::to_value(self).expect("config serialises"), &mut lines);
        lines.into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    /// Apply one override to this config.
    pub fn set(&mut self, key: &str, raw: &str) -> Result<(), ConfigError> {
        let mut root = serde_json::to_value(&*self).expect("config serialises");
        let (section, field) = key.split_once('.').ok_or_else(|| ConfigError::UnknownKey(key.into()))?;
        let slot = root
            .get_mut(section)
            .and_then(Value::as_object_mut)
            .and_then(|m: &mut Map<String, Value>| m.get_mut(field))
            .ok_or_else(|| ConfigError::UnknownKey(key.into()))?;
        *slot = parse_scalar(key, slot, raw.trim())?;
        *self = serde_json::from_value(root).map_err(|e| ConfigError::Value { key: key.into(), value: raw.into(), why: e.to_string() })?;
        Ok(())
    }

    /// Parse config text on top of the defaults. `#` starts a comment line.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax { line: i + 1, text: line.into() })?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.into(), source })?;
        Self::parse(&text)
    }

    pub fn fingerprint(&self) -> String {
        let text: String = self
            .to_text()
            .lines()
            .filter(|l| !UNFINGERPRINTED.iter().any(|p| l.starts_with(p)))
            .map(|l| format!("{l}\n"))
            .collect();
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    pub fn output_dir(&self) -> PathBuf {
        PathBuf::from(&self.run.output_dir)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let positive = [
            ("data.users", self.data.users),
            ("data.items", self.data.items),
            ("data.attributes", self.data.attributes),
            ("data.attrs_per_item", self.data.attrs_per_item),
            ("data.interactions_per_user", self.data.interactions_per_user),
            ("data.neg_per_pos", self.data.neg_per_pos),
            ("data.interests", self.data.interests),
            ("fm.dim", self.fm.dim),
            ("fm.batch_size", self.fm.batch_size),
            ("active.hidden", self.active.hidden),
            ("active.k_ask", self.active.k_ask),
            ("active.turns", self.active.turns),
            ("negative.hidden", self.negative.hidden),
            ("negative.attention_hidden", self.negative.attention_hidden),
            ("negative.batch_size", self.negative.batch_size),
            ("negative.steps", self.negative.steps),
            ("policy.hidden", self.policy.hidden),
            ("policy.buffer_capacity", self.policy.buffer_capacity),
            ("policy.batch_size", self.policy.batch_size),
            ("session.max_turns", self.session.max_turns),
            ("session.top_k", self.session.top_k),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(ConfigError::Invalid(format!("{k} must be at least 1")));
            }
        }
        if self.policy.target_sync == 0 {
            return Err(ConfigError::Invalid("policy.target_sync must be at least 1".into()));
        }
        for (k, v) in [
            ("policy.epsilon_start", self.policy.epsilon_start),
            ("policy.epsilon_end", self.policy.epsilon_end),
            ("policy.discount", self.policy.discount),
            ("active.discount", self.active.discount),
            ("negative.discount", self.negative.discount),
            ("data.topic_purity", self.data.topic_purity),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(ConfigError::Invalid(format!("{k} must lie in [0, 1]")));
            }
        }
        if self.data.interactions.is_empty() != self.data.triplets.is_empty() {
            return Err(ConfigError::Invalid("data.interactions and data.triplets must be given together".into()));
        }
        self.rewards()?;
        self.variants()?;
        Variant::parse(&self.service.variant).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(())
    }

    pub fn rewards(&self) -> Result<RewardTable, ConfigError> {
        let mut r = RewardTable::preset(&self.policy.reward).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let p = &self.policy;
        for (slot, v) in [
            (&mut r.ask_suc, p.reward_ask_suc),
            (&mut r.ask_fail, p.reward_ask_fail),
            (&mut r.rec_suc, p.reward_rec_suc),
            (&mut r.rec_fail, p.reward_rec_fail),
            (&mut r.reach_max_turn, p.reward_reach_max_turn),
        ] {
            if let Some(v) = v {
                *slot = v;
            }
        }
        Ok(r)
    }

    pub fn variants(&self) -> Result<Vec<Variant>, ConfigError> {
        self.eval.variants.iter().map(|s| Variant::parse(s).map_err(|e| ConfigError::Invalid(e.to_string()))).collect()
    }

    /// Stage seeds are derived from `run.seed` so stages stay independent.
    pub fn stage_seed(&self, stage: u64) -> u64 {
        crate::session::session_seed(self.run.seed, stage)
    }

    pub fn synthetic_spec(&self) -> SyntheticSpec {
        let d = &self.data;
        SyntheticSpec {
            topic_size: d.topic_size,
            topic_purity: d.topic_purity,
            temperature: d.temperature,
            interests: d.interests,
            ..SyntheticSpec::new(d.users, d.items, d.attributes, d.attrs_per_item, d.interactions_per_user, self.stage_seed(1))
        }
    }

    pub fn fm_hyper(&self) -> FmHyper {
        FmHyper { dim: self.fm.dim, learning_rate: self.fm.learning_rate, l2: self.fm.l2, seed: self.stage_seed(3) }
    }

    pub fn active_config(&self) -> ActiveConfig {
        let a = &self.active;
        ActiveConfig {
            hidden: a.hidden,
            discount: a.discount,
            learning_rate: a.learning_rate,
            degree_scale: a.degree_scale,
            k_ask: a.k_ask,
            neighborhood_only: a.neighborhood_only,
            seed: self.stage_seed(4),
        }
    }

    pub fn negative_config(&self) -> NegConfig {
        let n = &self.negative;
        NegConfig {
            hidden: n.hidden,
            attention_hidden: n.attention_hidden,
            discount: n.discount,
            batch_size: n.batch_size,
            learning_rate: n.learning_rate,
            steps: n.steps,
            normalize_reward: n.normalize_reward,
            seed: self.stage_seed(5),
        }
    }

    pub fn q_config(&self) -> QConfig {
        let p = &self.policy;
        QConfig {
            hidden: p.hidden,
            discount: p.discount,
            epsilon_start: p.epsilon_start,
            epsilon_end: p.epsilon_end,
            anneal_sessions: p.anneal_sessions,
            buffer_capacity: p.buffer_capacity,
            batch_size: p.batch_size,
            target_sync: p.target_sync,
            learning_rate: p.learning_rate,
            seed: self.stage_seed(6),
        }
    }

    pub fn session_config(&self, strategy: Strategy) -> Result<SessionConfig, ConfigError> {
        let s = &self.session;
        Ok(SessionConfig {
            max_turns: s.max_turns,
            top_k: s.top_k,
            online: FmHyper { dim: self.fm.dim, learning_rate: s.online_learning_rate, l2: s.online_l2, seed: 0 },
            online_steps: s.online_steps,
            rewards: self.rewards()?,
            strategy,
        })
    }
}
