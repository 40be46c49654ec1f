//! Ask-or-recommend controller: a two-layer Q-network trained with
//! standard deep Q-learning (replay buffer, target network, ε-greedy).

use std::collections::VecDeque;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{self, Adam, Dense};

#[derive(Debug, Error, PartialEq)]
pub enum PolicyError {
    #[error("unknown reward preset `{0}`")]
    UnknownPreset(String),
    #[error("unknown event `{0}`")]
    UnknownEvent(String),
    #[error("state has dimension {found}, network expects {expected}")]
    Dimension { expected: usize, found: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Ask,
    Rec,
}

impl Action {
    pub fn index(self) -> usize {
        match self {
            Action::Ask => 0,
            Action::Rec => 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Event {
    AskSuc,
    AskFail,
    RecSuc,
    RecFail,
    ReachMaxTurn,
}

impl Event {
    pub const ALL: [Event; 5] = [Event::AskSuc, Event::AskFail, Event::RecSuc, Event::RecFail, Event::ReachMaxTurn];

    pub fn as_str(self) -> &'static str {
        match self {
            Event::AskSuc => "ask_suc",
            Event::AskFail => "ask_fail",
            Event::RecSuc => "rec_suc",
            Event::RecFail => "rec_fail",
            Event::ReachMaxTurn => "reach_max_turn",
        }
    }

    pub fn parse(s: &str) -> Result<Self, PolicyError> {
        Self::ALL.into_iter().find(|e| e.as_str() == s).ok_or_else(|| PolicyError::UnknownEvent(s.to_string()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardTable {
    pub ask_suc: f64,
    pub ask_fail: f64,
    pub rec_suc: f64,
    pub rec_fail: f64,
    pub reach_max_turn: f64,
}

impl RewardTable {
    pub const PRESETS: [&'static str; 4] = ["cpr", "ask_more", "rec_more", "ear"];

    pub const CPR: RewardTable = RewardTable { ask_suc: 0.01, ask_fail: -0.1, rec_suc: 1.0, rec_fail: -0.1, reach_max_turn: -0.3 };
    pub const ASK_MORE: RewardTable = RewardTable { ask_suc: 0.1, ask_fail: -0.1, rec_suc: 1.0, rec_fail: -1.0, reach_max_turn: -0.3 };
    pub const REC_MORE: RewardTable = RewardTable { ask_suc: 0.01, ask_fail: -0.1, rec_suc: 1.0, rec_fail: -0.01, reach_max_turn: -0.3 };
    pub const EAR: RewardTable = RewardTable {
        ask_suc: 0.01 + 0.1,
        ask_fail: 0.01 + 0.0,
        rec_suc: 0.01 + 1.0,
        rec_fail: 0.01 + 0.0,
        reach_max_turn: -0.3,
    };

    /// Look up a preset by name (`cpr`, `ask_more`, `rec_more`, `ear`).
    pub fn preset(name: &str) -> Result<Self, PolicyError> {
        match name.to_ascii_lowercase().trim_start_matches("r_") {
            "cpr" => Ok(Self::CPR),
            "ask_more" => Ok(Self::ASK_MORE),
            "rec_more" => Ok(Self::REC_MORE),
            "ear" => Ok(Self::EAR),
            _ => Err(PolicyError::UnknownPreset(name.to_string())),
        }
    }

    pub fn reward_of(&self, event: Event) -> f64 {
        match event {
            Event::AskSuc => self.ask_suc,
            Event::AskFail => self.ask_fail,
            Event::RecSuc => self.rec_suc,
            Event::RecFail => self.rec_fail,
            Event::ReachMaxTurn => self.reach_max_turn,
        }
    }
}

impl Default for RewardTable {
    fn default() -> Self {
        Self::CPR
    }
}

/// Outcome of a finished turn as seen by the state encoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TurnOutcome {
    AskAccept,
    AskReject,
    RecReject,
}

impl TurnOutcome {
    fn slot(self) -> usize {
        match self {
            TurnOutcome::AskAccept => 0,
            TurnOutcome::AskReject => 1,
            TurnOutcome::RecReject => 2,
        }
    }
}

const EMPTY_SLOT: usize = 3;

pub fn state_dim(max_turns: usize) -> usize {
    4 * max_turns + 2
}

/// Fixed-length encoding: a one-hot per history slot over {ask-accept,
/// ask-reject, rec-reject, empty}, then `t/T`, then
/// `ln(1+|candidates|)/ln(1+|I|)`. `turn` is the 1-based turn about to be
/// played.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyState(pub Vec<f64>);

pub fn encode_state(history: &[TurnOutcome], turn: usize, max_turns: usize, candidates: usize, n_items: usize) -> PolicyState {
    let mut v = vec![0.0; state_dim(max_turns)];
    for slot in 0..max_turns {
        let hot = history.get(slot).map_or(EMPTY_SLOT, |o| o.slot());
        v[4 * slot + hot] = 1.0;
    }
    v[4 * max_turns] = (turn as f64 / max_turns as f64).min(1.0);
    let denom = (1.0 + n_items as f64).ln();
    v[4 * max_turns + 1] = if denom > 0.0 { ((1.0 + candidates as f64).ln() / denom).min(1.0) } else { 0.0 };
    PolicyState(v)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QConfig {
    pub hidden: usize,
    pub discount: f64,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    /// Sessions over which ε decays linearly.
    pub anneal_sessions: usize,
    pub buffer_capacity: usize,
    pub batch_size: usize,
    pub target_sync: u64,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for QConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            discount: 0.99,
            epsilon_start: 1.0,
            epsilon_end: 0.05,
            anneal_sessions: 1000,
            buffer_capacity: 10_000,
            batch_size: 128,
            target_sync: 20,
            learning_rate: 1e-3,
            seed: 0,
        }
    }
}

impl QConfig {
    pub fn epsilon(&self, session: usize) -> f64 {
        if session >= self.anneal_sessions {
            return self.epsilon_end;
        }
        let frac = (session as f64 / self.anneal_sessions as f64).min(1.0);
        self.epsilon_start + (self.epsilon_end - self.epsilon_start) * frac
    }
}

/// `state → hidden (ReLU) → (Q_ask, Q_rec)`.
#[derive(Clone, Debug, PartialEq)]
pub struct QNet {
    l1: Dense,
    l2: Dense,
}

impl QNet {
    pub fn new(input: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self { l1: Dense::glorot(input, hidden, &mut rng), l2: Dense::glorot(hidden, 2, &mut rng) }
    }

    pub fn input_dim(&self) -> usize {
        self.l1.input
    }

    pub fn param_count(&self) -> usize {
        self.l1.param_count() + self.l2.param_count()
    }

    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        self.l1.flatten_into(&mut out);
        self.l2.flatten_into(&mut out);
        out
    }

    pub fn set_params(&mut self, flat: &[f64]) {
        let rest = self.l1.unflatten_from(flat);
        let rest = self.l2.unflatten_from(rest);
        assert!(rest.is_empty(), "parameter vector too long");
    }

    pub fn q_values(&self, state: &PolicyState) -> [f64; 2] {
        let h: Vec<f64> = self.l1.forward_row(&state.0).into_iter().map(nn::relu).collect();
        let q = self.l2.forward_row(&h);
        [q[0], q[1]]
    }

    /// Accumulate `dq · ∂Q(s,·)/∂θ` into `grad` (flat layout).
    fn backward(&self, state: &PolicyState, dq: [f64; 2], grad: &mut (Dense, Dense)) {
        let z = self.l1.forward_row(&state.0);
        let h: Vec<f64> = z.iter().map(|&v| nn::relu(v)).collect();
        let dh = self.l2.backward_row(&h, &dq, &mut grad.1);
        let dz: Vec<f64> = dh.iter().zip(&z).map(|(d, &v)| if v > 0.0 { *d } else { 0.0 }).collect();
        self.l1.backward_row(&state.0, &dz, &mut grad.0);
    }
}

/// Greedy action with ties going to ask; with probability ε a uniform action.
pub fn choose_action<R: Rng>(q: &QNet, state: &PolicyState, epsilon: f64, rng: &mut R) -> Action {
    if epsilon > 0.0 && rng.random::<f64>() < epsilon {
        return if rng.random_bool(0.5) { Action::Ask } else { Action::Rec };
    }
    greedy(q.q_values(state))
}

pub fn greedy(q: [f64; 2]) -> Action {
    if q[1] > q[0] {
        Action::Rec
    } else {
        Action::Ask
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: PolicyState,
    pub action: Action,
    pub reward: f64,
    /// `None` for terminal transitions.
    pub next: Option<PolicyState>,
}

/// Bounded FIFO replay memory.
#[derive(Clone, Debug, PartialEq)]
pub struct ReplayBuffer {
    capacity: usize,
    items: VecDeque<Transition>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        Self { capacity, items: VecDeque::with_capacity(capacity.min(1 << 16)) }
    }

    pub fn push(&mut self, t: Transition) {
        if self.capacity == 0 {
            return;
        }
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(t);
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn get(&self, i: usize) -> Option<&Transition> {
        self.items.get(i)
    }

    pub fn sample<R: Rng>(&self, n: usize, rng: &mut R) -> Vec<&Transition> {
        rand::seq::index::sample(rng, self.items.len(), n).into_iter().map(|i| &self.items[i]).collect()
    }
}

pub fn td_target(target: &QNet, t: &Transition, discount: f64) -> f64 {
    match &t.next {
        None => t.reward,
        Some(next) => {
            let q = target.q_values(next);
            t.reward + discount * q[0].max(q[1])
        }
    }
}

/// Mean squared TD error of `online` against fixed targets from `target`,
/// and its gradient w.r.t. the online parameters.
pub fn td_loss_and_grad(online: &QNet, target: &QNet, batch: &[&Transition], discount: f64) -> (f64, Vec<f64>) {
    let mut grad = (Dense::zeros(online.l1.input, online.l1.output), Dense::zeros(online.l2.input, 2));
    let mut loss = 0.0;
    let n = batch.len() as f64;
    for t in batch {
        let y = td_target(target, t, discount);
        let q = online.q_values(&t.state)[t.action.index()];
        let err = q - y;
        loss += err * err / n;
        let mut dq = [0.0; 2];
        dq[t.action.index()] = 2.0 * err / n;
        online.backward(&t.state, dq, &mut grad);
    }
    let mut flat = Vec::with_capacity(online.param_count());
    grad.0.flatten_into(&mut flat);
    grad.1.flatten_into(&mut flat);
    (loss, flat)
}

/// Online/target networks, replay memory and optimiser state.
#[derive(Clone, Debug)]
pub struct DqnAgent {
    pub config: QConfig,
    pub online: QNet,
    pub target: QNet,
    pub buffer: ReplayBuffer,
    adam: Adam,
    updates: u64,
    rng: ChaCha8Rng,
}

impl DqnAgent {
    pub fn new(config: QConfig, state_dim: usize) -> Self {
        let online = QNet::new(state_dim, config.hidden, config.seed);
        let adam = Adam::new(config.learning_rate, online.param_count());
        Self {
            target: online.clone(),
            buffer: ReplayBuffer::new(config.buffer_capacity),
            rng: ChaCha8Rng::seed_from_u64(config.seed ^ 0xd9_17),
            online,
            adam,
            updates: 0,
            config,
        }
    }

    pub fn from_net(config: QConfig, online: QNet) -> Self {
        let mut agent = Self::new(config, online.input_dim());
        agent.target = online.clone();
        agent.online = online;
        agent
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    pub fn remember(&mut self, t: Transition) {
        self.buffer.push(t);
    }

    /// One gradient step on a sampled minibatch. Returns the TD loss, or
    /// `None` while the buffer holds fewer than a batch.
    pub fn dqn_update(&mut self) -> Option<f64> {
        if self.buffer.len() < self.config.batch_size || self.config.batch_size == 0 {
            return None;
        }
        let batch = self.buffer.sample(self.config.batch_size, &mut self.rng);
        let (loss, grad) = td_loss_and_grad(&self.online, &self.target, &batch, self.config.discount);
        let mut params = self.online.params();
        self.adam.step(&mut params, &grad);
        self.online.set_params(&params);
        self.updates += 1;
        if self.config.target_sync > 0 && self.updates.is_multiple_of(self.config.target_sync) {
            self.target = self.online.clone();
        }
        Some(loss)
    }
}

pub fn qnet_to_checkpoint(q: &QNet, config: &QConfig, max_turns: usize, rewards: &RewardTable, fingerprint: &str) -> String {
    let header = [
        ("input", q.input_dim().to_string()),
        ("hidden", config.hidden.to_string()),
        ("discount", format!("{:?}", config.discount)),
        ("max_turns", max_turns.to_string()),
        ("seed", config.seed.to_string()),
        (
            "rewards",
            format!(
                "{:?},{:?},{:?},{:?},{:?}",
                rewards.ask_suc, rewards.ask_fail, rewards.rec_suc, rewards.rec_fail, rewards.reach_max_turn
            ),
        ),
    ];
    nn::params_to_text("qnet", fingerprint, &header, &[("params", q.params())])
}

/// Parsed Q-network checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct QCheckpoint {
    pub net: QNet,
    pub max_turns: usize,
    pub rewards: RewardTable,
    pub fingerprint: String,
}

pub fn qnet_from_checkpoint(text: &str) -> Result<QCheckpoint, PolicyError> {
    let bad = |m: &str| PolicyError::Checkpoint(m.to_string());
    let parsed = nn::params_from_text("qnet", text).map_err(PolicyError::Checkpoint)?;
    let num = |k: &str| -> Result<usize, PolicyError> {
        parsed.header.get(k).and_then(|v| v.parse().ok()).ok_or_else(|| PolicyError::Checkpoint(format!("bad {k}")))
    };
    let mut net = QNet::new(num("input")?, num("hidden")?, 0);
    let params = parsed.blocks.iter().find(|b| b.0 == "params").ok_or_else(|| bad("missing params"))?;
    if params.1.len() != net.param_count() {
        return Err(bad("parameter count mismatch"));
    }
    net.set_params(&params.1);
    let r: Vec<f64> = parsed
        .header
        .get("rewards")
        .ok_or_else(|| bad("missing rewards"))?
        .split(',')
        .map(|v| v.parse::<f64>().map_err(|_| bad("bad rewards")))
        .collect::<Result<_, _>>()?;
    if r.len() != 5 {
        return Err(bad("rewards need five values"));
    }
    let rewards = RewardTable { ask_suc: r[0], ask_fail: r[1], rec_suc: r[2], rec_fail: r[3], reach_max_turn: r[4] };
    Ok(QCheckpoint { net, max_turns: num("max_turns")?, rewards, fingerprint: parsed.fingerprint })
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Action::Ask => "ask",
            Action::Rec => "rec",
        })
    }
}
