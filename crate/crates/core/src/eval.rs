//! Cohort evaluation: success rate by turn, average turns, recommend
//! ratios, policy training against simulated users and the variant grid.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::InteractionRecord;
use crate::policy::{Action, DqnAgent, QNet};
use crate::session::{self, ActionStrategy, AskStrategy, Components, NegativeStrategy, SessionError, SessionOutcome, Strategy, TranscriptLine};
use crate::simulator::SimulatedUser;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("metric undefined on an empty cohort")]
    EmptyCohort,
    #[error("unknown variant '{0}'")]
    UnknownVariant(String),
    #[error(transparent)]
    Session(#[from] SessionError),
}

/// Fraction of sessions that succeeded at or before turn `t`.
pub fn success_rate_at(outcomes: &[SessionOutcome], t: usize) -> Result<f64, EvalError> {
    if outcomes.is_empty() {
        return Err(EvalError::EmptyCohort);
    }
    let hits = outcomes.iter().filter(|o| o.success_turn.is_some_and(|s| s <= t)).count();
    Ok(hits as f64 / outcomes.len() as f64)
}

/// Mean of `T_ends`, failures counted at the turn cap.
pub fn average_turns(outcomes: &[SessionOutcome]) -> Result<f64, EvalError> {
    if outcomes.is_empty() {
        return Err(EvalError::EmptyCohort);
    }
    Ok(outcomes.iter().map(|o| o.turns_to_end() as f64).sum::<f64>() / outcomes.len() as f64)
}

/// For each turn `1..=max_turns`, the fraction of sessions still running
/// at that turn which recommended. `None` where no session reached the turn.
pub fn rec_ratio_curve(outcomes: &[SessionOutcome], max_turns: usize) -> Result<Vec<Option<f64>>, EvalError> {
    if outcomes.is_empty() {
        return Err(EvalError::EmptyCohort);
    }
    Ok((0..max_turns)
        .map(|t| {
            let (mut live, mut rec) = (0usize, 0usize);
            for o in outcomes {
                if let Some(a) = o.actions.get(t) {
                    live += 1;
                    if *a == Action::Rec {
                        rec += 1;
                    }
                }
            }
            (live > 0).then(|| rec as f64 / live as f64)
        })
        .collect())
}

/// Sample standard deviation (n - 1); zero for fewer than two values.
pub fn sample_stdev(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub variant: String,
    pub seed: u64,
    pub cohort: usize,
    /// SR@t for t = 1..=T.
    pub success_rate: Vec<f64>,
    pub average_turns: f64,
    pub rec_ratio: Vec<Option<f64>>,
    pub fingerprint: String,
}

impl MetricsReport {
    pub fn from_outcomes(variant: &str, seed: u64, max_turns: usize, outcomes: &[SessionOutcome], fingerprint: &str) -> Result<Self, EvalError> {
        let success_rate = (1..=max_turns).map(|t| success_rate_at(outcomes, t)).collect::<Result<_, _>>()?;
        Ok(Self {
            variant: variant.to_string(),
            seed,
            cohort: outcomes.len(),
            success_rate,
            average_turns: average_turns(outcomes)?,
            rec_ratio: rec_ratio_curve(outcomes, max_turns)?,
            fingerprint: fingerprint.to_string(),
        })
    }

    /// SR at the final turn.
    pub fn final_success(&self) -> f64 {
        self.success_rate.last().copied().unwrap_or(0.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    NoActive,
    NoNegative,
    NoSamplers,
    AbsGreedy,
    MaxEntropy,
}

impl Variant {
    pub const ALL: [Variant; 6] =
        [Variant::Full, Variant::NoActive, Variant::NoNegative, Variant::NoSamplers, Variant::AbsGreedy, Variant::MaxEntropy];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoActive => "no_active",
            Variant::NoNegative => "no_negative",
            Variant::NoSamplers => "no_samplers",
            Variant::AbsGreedy => "abs_greedy",
            Variant::MaxEntropy => "max_entropy",
        }
    }

    pub fn parse(s: &str) -> Result<Self, EvalError> {
        Self::ALL.into_iter().find(|v| v.as_str() == s).ok_or_else(|| EvalError::UnknownVariant(s.to_string()))
    }

    pub fn strategy(self) -> Strategy {
        let (ask, negative, action) = match self {
            Variant::Full => (AskStrategy::Active, NegativeStrategy::Sampler, ActionStrategy::Learned),
            Variant::NoActive => (AskStrategy::MaxScore, NegativeStrategy::Sampler, ActionStrategy::Learned),
            Variant::NoNegative => (AskStrategy::Active, NegativeStrategy::Uniform, ActionStrategy::Learned),
            Variant::NoSamplers => (AskStrategy::MaxScore, NegativeStrategy::Uniform, ActionStrategy::Learned),
            Variant::AbsGreedy => (AskStrategy::MaxScore, NegativeStrategy::Uniform, ActionStrategy::AlwaysRec),
            Variant::MaxEntropy => (AskStrategy::MaxEntropy, NegativeStrategy::Uniform, ActionStrategy::Learned),
        };
        Strategy { ask, negative, action }
    }

    pub fn needs_policy(self) -> bool {
        self.strategy().action == ActionStrategy::Learned
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Simulated users for held-out interactions. Targets without attributes
/// or users unknown to the model are skipped.
pub fn cohort(c: &Components, records: &[InteractionRecord]) -> Vec<SimulatedUser> {
    records
        .iter()
        .filter(|r| c.fm.embedding(r.user).is_ok() && !c.graph.attributes_of(r.item).is_empty())
        .filter_map(|r| SimulatedUser::new(&c.graph, r.user, r.item).ok())
        .collect()
}

/// Run one session per simulated user in parallel. Session `i` uses the
/// seed `session_seed(seed, i)`, so results do not depend on scheduling.
pub fn run_cohort(c: &Components, q: Option<&QNet>, users: &[SimulatedUser], seed: u64) -> Result<Vec<session::Session>, EvalError> {
    users
        .par_iter()
        .enumerate()
        .map(|(i, sim)| {
            session::run_session(c, q, 0.0, sim, format!("{seed}-{i}"), session::session_seed(seed, i as u64)).map_err(EvalError::from)
        })
        .collect()
}

pub fn evaluate(c: &Components, q: Option<&QNet>, users: &[SimulatedUser], seed: u64) -> Result<Vec<SessionOutcome>, EvalError> {
    Ok(run_cohort(c, q, users, seed)?.iter().map(|s| s.outcome()).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyLog {
    pub session: usize,
    pub epsilon: f64,
    pub turns: usize,
    pub success: bool,
    #[serde(rename = "return")]
    pub total_reward: f64,
    pub td_loss: Option<f64>,
}

/// Online Q-learning against simulated users: sessions are drawn
/// round-robin from `users` in a seeded shuffled order, each played with
/// the current network and ε schedule, then one update per turn.
pub fn train_policy(c: &Components, agent: &mut DqnAgent, users: &[SimulatedUser], sessions: usize, seed: u64) -> Result<Vec<PolicyLog>, EvalError> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    if users.is_empty() {
        return Err(EvalError::EmptyCohort);
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0xd9_0000);
    let mut order: Vec<usize> = Vec::new();
    let mut logs = Vec::with_capacity(sessions);
    for n in 0..sessions {
        if order.is_empty() {
            order = (0..users.len()).collect();
            order.shuffle(&mut rng);
        }
        let sim = &users[order.pop().expect("refilled")];
        let epsilon = agent.config.epsilon(n);
        let s = session::run_session(c, Some(&agent.online), epsilon, sim, format!("train-{n}"), session::session_seed(seed, n as u64))?;
        let mut losses = Vec::new();
        for t in s.transitions() {
            agent.remember(t.clone());
            if let Some(l) = agent.dqn_update() {
                losses.push(l);
            }
        }
        logs.push(PolicyLog {
            session: n,
            epsilon,
            turns: s.turns().len(),
            success: s.status() == session::SessionStatus::Success,
            total_reward: s.turns().iter().map(|t| t.reward).sum(),
            td_loss: (!losses.is_empty()).then(|| mean(&losses)),
        });
    }
    Ok(logs)
}

/// Mean and sample standard deviation of one variant across seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub variant: String,
    pub seeds: Vec<u64>,
    pub success_mean: f64,
    pub success_stdev: f64,
    pub turns_mean: f64,
    pub turns_stdev: f64,
    pub success_curve: Vec<f64>,
    pub error: Option<String>,
}

impl GridRow {
    pub fn aggregate(variant: &str, reports: &[MetricsReport]) -> Self {
        let sr: Vec<f64> = reports.iter().map(|r| r.final_success()).collect();
        let at: Vec<f64> = reports.iter().map(|r| r.average_turns).collect();
        let len = reports.iter().map(|r| r.success_rate.len()).max().unwrap_or(0);
        let success_curve =
            (0..len).map(|t| mean(&reports.iter().filter_map(|r| r.success_rate.get(t).copied()).collect::<Vec<_>>())).collect();
        Self {
            variant: variant.to_string(),
            seeds: reports.iter().map(|r| r.seed).collect(),
            success_mean: mean(&sr),
            success_stdev: sample_stdev(&sr),
            turns_mean: mean(&at),
            turns_stdev: sample_stdev(&at),
            success_curve,
            error: None,
        }
    }

    pub fn failed(variant: &str, error: String) -> Self {
        Self {
            variant: variant.to_string(),
            seeds: Vec::new(),
            success_mean: f64::NAN,
            success_stdev: f64::NAN,
            turns_mean: f64::NAN,
            turns_stdev: f64::NAN,
            success_curve: Vec::new(),
            error: Some(error),
        }
    }
}

/// Outcomes of one exported transcript stream holding several sessions.
pub fn outcomes_from_transcripts(lines: &[TranscriptLine]) -> Result<Vec<SessionOutcome>, EvalError> {
    let mut out = Vec::new();
    let mut current: Vec<TranscriptLine> = Vec::new();
    for l in lines {
        if matches!(l, TranscriptLine::Start { .. }) && !current.is_empty() {
            out.push(SessionOutcome::from_transcript(&current)?);
            current.clear();
        }
        current.push(l.clone());
    }
    if !current.is_empty() {
        out.push(SessionOutcome::from_transcript(&current)?);
    }
    Ok(out)
}
