//! Multi-turn conversation loop.
//!
//! A [`Session`] alternates prompts and responses. Each turn it either
//! asks about one attribute or shows a top-K list, applies the answer to
//! the candidate set and preference context, and takes one online FM step
//! on a private copy of the recommender. The same state machine backs
//! simulated evaluation, policy training and the HTTP service.

use std::collections::BTreeSet;
use std::io::{BufRead, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::active::{self, ActiveError, ActivePolicy, AttributeLinks, AttributePool, SelectMode};
use crate::data::{AttrTriple, ItemTriple, UserItems};
use crate::fm::{FmError, FmHyper, FmModel, PreferenceContext};
use crate::graph::{GraphError, HeteroGraph, NodeId};
use crate::negative::{self, NegPolicy, NegativeError};
use crate::policy::{self, Action, Event, PolicyState, QNet, RewardTable, Transition, TurnOutcome};
use crate::simulator::{Response, SimulatedUser};

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("session has already finished")]
    Finished,
    #[error("no prompt is pending")]
    NoPendingPrompt,
    #[error("item {0} is not in the pending recommendation")]
    NotOffered(NodeId),
    #[error("user {0} has no embedding")]
    UnknownUser(NodeId),
    #[error("the learned action strategy needs a Q-network")]
    MissingPolicy,
    #[error(transparent)]
    Fm(#[from] FmError),
    #[error(transparent)]
    Active(#[from] ActiveError),
    #[error(transparent)]
    Negative(#[from] NegativeError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("transcript: {0}")]
    Transcript(String),
}

/// How the attribute to ask is chosen.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AskStrategy {
    /// Trained active sampler, argmax.
    Active,
    /// Highest FM attribute score.
    MaxScore,
    /// Highest entropy of the attribute's frequency among candidates.
    MaxEntropy,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeStrategy {
    /// Trained negative sampler over the anchor's two-hop pool.
    Sampler,
    /// Uniform over non-interacted items.
    Uniform,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionStrategy {
    Learned,
    AlwaysRec,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Strategy {
    pub ask: AskStrategy,
    pub negative: NegativeStrategy,
    pub action: ActionStrategy,
}

impl Default for Strategy {
    fn default() -> Self {
        Self { ask: AskStrategy::Active, negative: NegativeStrategy::Sampler, action: ActionStrategy::Learned }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionConfig {
    pub max_turns: usize,
    pub top_k: usize,
    /// Learning rate and L2 for the per-turn FM step.
    pub online: FmHyper,
    pub online_steps: usize,
    pub rewards: RewardTable,
    pub strategy: Strategy,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            max_turns: 15,
            top_k: 10,
            online: FmHyper::default(),
            online_steps: 1,
            rewards: RewardTable::CPR,
            strategy: Strategy::default(),
        }
    }
}

/// Frozen, shareable pieces every session reads.
#[derive(Clone, Debug)]
pub struct Components {
    pub graph: HeteroGraph,
    pub links: AttributeLinks,
    pub fm: FmModel,
    pub active: ActivePolicy,
    pub negative: NegPolicy,
    /// Training positives per user.
    pub positives: UserItems,
    pub config: SessionConfig,
}

impl Components {
    pub fn new(graph: HeteroGraph, fm: FmModel, active: ActivePolicy, negative: NegPolicy, positives: UserItems, config: SessionConfig) -> Self {
        let links = AttributeLinks::from_graph(&graph);
        Self { graph, links, fm, active, negative, positives, config }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Prompt {
    Ask { attribute: NodeId },
    Recommend { items: Vec<NodeId> },
}

impl Prompt {
    pub fn action(&self) -> Action {
        match self {
            Prompt::Ask { .. } => Action::Ask,
            Prompt::Recommend { .. } => Action::Rec,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionStatus {
    Active,
    Success,
    MaxTurnFail,
    Aborted,
}

impl SessionStatus {
    pub fn is_terminal(self) -> bool {
        self != SessionStatus::Active
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateSummary {
    pub item_loss: f64,
    pub item_triples: usize,
    pub attr_loss: f64,
    pub attr_triples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TurnRecord {
    pub turn: usize,
    pub prompt: Prompt,
    pub response: Response,
    pub event: Event,
    pub reward: f64,
    /// Candidate-set size after the turn.
    pub candidates: usize,
    pub negatives: Vec<NodeId>,
    pub update: UpdateSummary,
    /// Item the user picked from an accepted list, when they named one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chosen: Option<NodeId>,
}

/// One line of an exported transcript.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum TranscriptLine {
    Start {
        session: String,
        user: NodeId,
        target: Option<NodeId>,
        seed_attribute: Option<NodeId>,
        max_turns: usize,
        #[serde(default)]
        seed: u64,
        #[serde(default)]
        cold_start: bool,
    },
    Turn(TurnRecord),
    End {
        status: SessionStatus,
        turns: usize,
    },
}

#[derive(Clone, Debug, PartialEq)]
struct Pending {
    prompt: Prompt,
    state: PolicyState,
}

#[derive(Clone, Debug)]
pub struct Session {
    pub id: String,
    pub user: NodeId,
    pub target: Option<NodeId>,
    pub seed_attribute: Option<NodeId>,
    pub seed: u64,
    pub cold_start: bool,
    max_turns: usize,
    fm: FmModel,
    ctx: PreferenceContext,
    rejected_attributes: Vec<NodeId>,
    rejected_items: BTreeSet<NodeId>,
    candidates: BTreeSet<NodeId>,
    pool: AttributePool,
    consumed: BTreeSet<NodeId>,
    positives: BTreeSet<NodeId>,
    positive_attributes: BTreeSet<NodeId>,
    history: Vec<TurnOutcome>,
    turns: Vec<TurnRecord>,
    transitions: Vec<Transition>,
    pending: Option<Pending>,
    status: SessionStatus,
    diagnostic: Option<String>,
    rng: ChaCha8Rng,
}

/// Deterministic per-session seed.
pub fn session_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl Session {
    /// Start a session for a known user. `seed_attribute`, when given, is
    /// treated as already accepted.
    pub fn start(c: &Components, id: impl Into<String>, user: NodeId, seed_attribute: Option<NodeId>, seed: u64) -> Result<Self, SessionError> {
        let fm = c.fm.clone();
        if fm.embedding(user).is_err() {
            return Err(SessionError::UnknownUser(user));
        }
        Self::open(c, id.into(), user, fm, seed_attribute, seed, false)
    }

    /// Start a session for a user the model has never seen, with a fresh
    /// zero embedding on the session's private FM copy.
    pub fn start_cold(c: &Components, id: impl Into<String>, seed_attribute: Option<NodeId>, seed: u64) -> Result<Self, SessionError> {
        let mut fm = c.fm.clone();
        let user = fm.push_zero_row();
        Self::open(c, id.into(), user, fm, seed_attribute, seed, true)
    }

    fn open(
        c: &Components,
        id: String,
        user: NodeId,
        fm: FmModel,
        seed_attribute: Option<NodeId>,
        seed: u64,
        cold_start: bool,
    ) -> Result<Self, SessionError> {
        let positives = c.positives.get(&user).cloned().unwrap_or_default();
        let positive_attributes = crate::data::positive_attributes(&c.graph, &positives);
        let mut candidates: BTreeSet<NodeId> = c.graph.items().iter().copied().filter(|i| !positives.contains(i)).collect();
        let mut pool = AttributePool::new(c.graph.attributes().iter().copied());
        let mut ctx = PreferenceContext::new(user);
        if let Some(p) = seed_attribute {
            c.graph.expect_kind(p, crate::graph::NodeKind::Attribute)?;
            ctx.accept(p);
            pool.take(p);
            candidates.retain(|&i| c.graph.has_attribute(i, p));
        }
        Ok(Self {
            id,
            user,
            target: None,
            seed_attribute,
            seed,
            cold_start,
            max_turns: c.config.max_turns,
            fm,
            ctx,
            rejected_attributes: Vec::new(),
            rejected_items: BTreeSet::new(),
            candidates,
            pool,
            consumed: BTreeSet::new(),
            positives,
            positive_attributes,
            history: Vec::new(),
            turns: Vec::new(),
            transitions: Vec::new(),
            pending: None,
            status: SessionStatus::Active,
            diagnostic: None,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn status(&self) -> SessionStatus {
        self.status
    }

    pub fn diagnostic(&self) -> Option<&str> {
        self.diagnostic.as_deref()
    }

    pub fn turns(&self) -> &[TurnRecord] {
        &self.turns
    }

    pub fn transitions(&self) -> &[Transition] {
        &self.transitions
    }

    pub fn candidates(&self) -> &BTreeSet<NodeId> {
        &self.candidates
    }

    pub fn accepted(&self) -> &[NodeId] {
        self.ctx.accepted()
    }

    pub fn rejected_attributes(&self) -> &[NodeId] {
        &self.rejected_attributes
    }

    pub fn rejected_items(&self) -> &BTreeSet<NodeId> {
        &self.rejected_items
    }

    pub fn pool(&self) -> &AttributePool {
        &self.pool
    }

    pub fn fm(&self) -> &FmModel {
        &self.fm
    }

    pub fn context(&self) -> &PreferenceContext {
        &self.ctx
    }

    pub fn pending_prompt(&self) -> Option<&Prompt> {
        self.pending.as_ref().map(|p| &p.prompt)
    }

    pub fn max_turns(&self) -> usize {
        self.max_turns
    }

    /// 1-based index of the turn about to be played.
    pub fn current_turn(&self) -> usize {
        self.turns.len() + 1
    }

    pub fn encode_state(&self, c: &Components) -> PolicyState {
        policy::encode_state(&self.history, self.current_turn(), self.max_turns, self.candidates.len(), c.graph.items().len())
    }

    /// End the session early, e.g. after an inactivity timeout.
    pub fn abort(&mut self, why: &str) {
        self.status = SessionStatus::Aborted;
        self.diagnostic = Some(why.to_string());
        self.pending = None;
    }

    /// The prompt for the current turn, deciding it if necessary. Calling
    /// it again before responding returns the same prompt.
    pub fn prompt(&mut self, c: &Components, q: Option<&QNet>, epsilon: f64) -> Result<Prompt, SessionError> {
        if self.status.is_terminal() {
            return Err(SessionError::Finished);
        }
        if let Some(p) = &self.pending {
            return Ok(p.prompt.clone());
        }
        if self.candidates.is_empty() {
            self.abort("candidate set is empty");
            return Err(SessionError::Finished);
        }
        let state = self.encode_state(c);
        let mut action = if self.pool.is_empty() {
            Action::Rec
        } else {
            match c.config.strategy.action {
                ActionStrategy::AlwaysRec => Action::Rec,
                ActionStrategy::Learned => {
                    let q = q.ok_or(SessionError::MissingPolicy)?;
                    policy::choose_action(q, &state, epsilon, &mut self.rng)
                }
            }
        };
        let mut prompt = None;
        if action == Action::Ask {
            match self.choose_attribute(c)? {
                Some(p) => prompt = Some(Prompt::Ask { attribute: p }),
                None => action = Action::Rec,
            }
        }
        if action == Action::Rec {
            let items = self.fm.rank_items(&self.ctx, &self.candidates, c.config.top_k)?;
            prompt = Some(Prompt::Recommend { items });
        }
        let prompt = prompt.expect("one branch sets the prompt");
        self.pending = Some(Pending { prompt: prompt.clone(), state });
        Ok(prompt)
    }

    fn choose_attribute(&mut self, c: &Components) -> Result<Option<NodeId>, SessionError> {
        match c.config.strategy.ask {
            AskStrategy::Active => {
                match active::build_state(&c.graph, &c.links, &self.fm, &self.ctx, &self.pool, &c.active.config) {
                    Ok(state) => Ok(active::select_attributes(&c.active, &state, 1, SelectMode::Argmax, &mut self.rng).first().copied()),
                    Err(ActiveError::EmptyPool) => Ok(None),
                    Err(e) => Err(e.into()),
                }
            }
            AskStrategy::MaxScore => {
                let mut best: Option<(f64, NodeId)> = None;
                for &p in self.pool.remaining() {
                    let s = self.fm.score_attribute(&self.ctx, p)?;
                    if best.is_none_or(|(b, _)| s > b) {
                        best = Some((s, p));
                    }
                }
                Ok(best.map(|b| b.1))
            }
            AskStrategy::MaxEntropy => Ok(max_entropy_attribute(&c.graph, &self.candidates, self.pool.remaining())),
        }
    }

    /// Apply the user's answer to the pending prompt and finish the turn.
    pub fn respond(&mut self, c: &Components, response: Response) -> Result<&TurnRecord, SessionError> {
        self.finish_turn(c, response, None)
    }

    /// Accept one named item from the pending recommendation.
    pub fn accept_item(&mut self, c: &Components, item: NodeId) -> Result<&TurnRecord, SessionError> {
        match self.pending_prompt() {
            Some(Prompt::Recommend { items }) if items.contains(&item) => self.finish_turn(c, Response::Accept, Some(item)),
            Some(_) => Err(SessionError::NotOffered(item)),
            None if self.status.is_terminal() => Err(SessionError::Finished),
            None => Err(SessionError::NoPendingPrompt),
        }
    }

    fn finish_turn(&mut self, c: &Components, response: Response, chosen: Option<NodeId>) -> Result<&TurnRecord, SessionError> {
        if self.status.is_terminal() {
            return Err(SessionError::Finished);
        }
        let pending = self.pending.take().ok_or(SessionError::NoPendingPrompt)?;
        let mut rejected_now = Vec::new();
        let (event, outcome) = match (&pending.prompt, response) {
            (Prompt::Ask { attribute }, Response::Accept) => {
                self.pool.take(*attribute);
                self.ctx.accept(*attribute);
                self.candidates.retain(|&i| c.graph.has_attribute(i, *attribute));
                (Event::AskSuc, Some(TurnOutcome::AskAccept))
            }
            (Prompt::Ask { attribute }, Response::Reject) => {
                self.pool.take(*attribute);
                self.rejected_attributes.push(*attribute);
                (Event::AskFail, Some(TurnOutcome::AskReject))
            }
            (Prompt::Recommend { .. }, Response::Accept) => (Event::RecSuc, None),
            (Prompt::Recommend { items }, Response::Reject) => {
                for i in items {
                    self.candidates.remove(i);
                    self.rejected_items.insert(*i);
                }
                rejected_now = items.clone();
                (Event::RecFail, Some(TurnOutcome::RecReject))
            }
        };
        let (update, negatives) = if event == Event::RecSuc {
            self.status = SessionStatus::Success;
            (UpdateSummary::default(), Vec::new())
        } else {
            self.online_update(c, &rejected_now)?
        };
        if let Some(o) = outcome {
            self.history.push(o);
        }
        let turn = self.current_turn();
        let mut reward = c.config.rewards.reward_of(event);
        if self.status == SessionStatus::Active {
            if turn >= self.max_turns {
                self.status = SessionStatus::MaxTurnFail;
                reward = c.config.rewards.reward_of(Event::ReachMaxTurn);
            } else if self.candidates.is_empty() {
                self.status = SessionStatus::Aborted;
                self.diagnostic = Some("candidate set is empty".into());
            }
        }
        let record = TurnRecord {
            turn,
            prompt: pending.prompt.clone(),
            response,
            event,
            reward,
            candidates: self.candidates.len(),
            negatives,
            update,
            chosen,
        };
        self.turns.push(record);
        let next = (!self.status.is_terminal()).then(|| self.encode_state(c));
        self.transitions.push(Transition { state: pending.state, action: pending.prompt.action(), reward, next });
        Ok(self.turns.last().expect("just pushed"))
    }

    /// The training positive sharing the most attributes with the accepted
    /// set; ties go to the smaller id.
    pub fn anchor(&self, graph: &HeteroGraph) -> Option<NodeId> {
        let accepted: BTreeSet<NodeId> = self.ctx.accepted().iter().copied().collect();
        let mut best: Option<(usize, NodeId)> = None;
        for &i in &self.positives {
            let shared = graph.attributes_of(i).iter().filter(|a| accepted.contains(a)).count();
            if best.is_none_or(|(b, _)| shared > b) {
                best = Some((shared, i));
            }
        }
        best.map(|b| b.1)
    }

    /// One online step: item triples `(u, anchor, j)` over the negative
    /// batch, and attribute triples `P⁺ × (P⁻ ∪ sampled)` where the sampled
    /// negatives are attributes of batch items outside the user's known
    /// positive attributes.
    fn online_update(&mut self, c: &Components, rejected_now: &[NodeId]) -> Result<(UpdateSummary, Vec<NodeId>), SessionError> {
        let anchor = self.anchor(&c.graph);
        let b = c.negative.config.batch_size;
        let mut batch: Vec<NodeId> = match anchor {
            None => Vec::new(),
            Some(a) => match c.config.strategy.negative {
                NegativeStrategy::Sampler => {
                    let mut blocked = self.consumed.clone();
                    blocked.extend(self.candidates.iter().copied());
                    negative::session_batch(&c.negative, &self.fm, &c.graph, self.user, a, &self.positives, &blocked, &mut self.rng)?
                }
                NegativeStrategy::Uniform => negative::fallback_batch(&c.graph, &self.positives, b, &mut self.rng),
            },
        };
        self.consumed.extend(batch.iter().copied());
        for &i in rejected_now {
            if !batch.contains(&i) {
                batch.push(i);
            }
        }
        let accepted: BTreeSet<NodeId> = self.ctx.accepted().iter().copied().collect();
        let mut attr_negs: BTreeSet<NodeId> = self.rejected_attributes.iter().copied().collect();
        for &j in &batch {
            attr_negs.extend(
                c.graph.attributes_of(j).iter().copied().filter(|p| !accepted.contains(p) && !self.positive_attributes.contains(p)),
            );
        }
        let ctx = self.ctx.clone();
        let item_batch: Vec<(ItemTriple, &PreferenceContext)> = match anchor {
            Some(a) => batch
                .iter()
                .filter(|j| !self.positives.contains(j))
                .map(|&j| (ItemTriple { user: self.user, pos: a, neg: j }, &ctx))
                .collect(),
            None => Vec::new(),
        };
        let attr_batch: Vec<(AttrTriple, &PreferenceContext)> = accepted
            .iter()
            .flat_map(|&pp| attr_negs.iter().map(move |&pn| (pp, pn)))
            .map(|(pp, pn)| (AttrTriple { user: self.user, pos: pp, neg: pn }, &ctx))
            .collect();
        let mut summary = UpdateSummary::default();
        for step in 0..c.config.online_steps {
            let ri = self.fm.bpr_step_items(&item_batch, &c.config.online)?;
            let ra = self.fm.bpr_step_attrs(&attr_batch, &c.config.online)?;
            if step == 0 {
                summary = UpdateSummary { item_loss: ri.loss, item_triples: ri.triples, attr_loss: ra.loss, attr_triples: ra.triples };
            }
        }
        Ok((summary, batch))
    }

    pub fn transcript(&self) -> Vec<TranscriptLine> {
        let mut out = vec![TranscriptLine::Start {
            session: self.id.clone(),
            user: self.user,
            target: self.target,
            seed_attribute: self.seed_attribute,
            max_turns: self.max_turns,
            seed: self.seed,
            cold_start: self.cold_start,
        }];
        out.extend(self.turns.iter().cloned().map(TranscriptLine::Turn));
        if self.status.is_terminal() {
            out.push(TranscriptLine::End { status: self.status, turns: self.turns.len() });
        }
        out
    }

    pub fn outcome(&self) -> SessionOutcome {
        SessionOutcome::from_turns(self.status, self.max_turns, &self.turns)
    }
}

/// Attribute maximising the binary entropy of its frequency among the
/// candidates; ties go to the smaller id.
pub fn max_entropy_attribute(graph: &HeteroGraph, candidates: &BTreeSet<NodeId>, pool: &BTreeSet<NodeId>) -> Option<NodeId> {
    if candidates.is_empty() {
        return pool.first().copied();
    }
    let n = candidates.len() as f64;
    let mut best: Option<(f64, NodeId)> = None;
    for &p in pool {
        let hits = graph.items_with(p).iter().filter(|i| candidates.contains(i)).count();
        let h = active::binary_entropy(hits as f64 / n);
        if best.is_none_or(|(b, _)| h > b) {
            best = Some((h, p));
        }
    }
    best.map(|b| b.1)
}

/// Compact per-session result used by metrics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionOutcome {
    pub status: SessionStatus,
    /// Turn at which the recommendation was accepted.
    pub success_turn: Option<usize>,
    /// Turns played (`T` for failures, see [`SessionOutcome::turns_to_end`]).
    pub turns_played: usize,
    pub actions: Vec<Action>,
    pub max_turns: usize,
}

impl SessionOutcome {
    pub fn from_turns(status: SessionStatus, max_turns: usize, turns: &[TurnRecord]) -> Self {
        let success_turn = if status == SessionStatus::Success { turns.last().map(|t| t.turn) } else { None };
        Self {
            status,
            success_turn,
            turns_played: turns.len(),
            actions: turns.iter().map(|t| t.prompt.action()).collect(),
            max_turns,
        }
    }

    /// `T_ends`: the success turn, or `T` when the session failed.
    pub fn turns_to_end(&self) -> usize {
        self.success_turn.unwrap_or(self.max_turns)
    }

    /// Rebuild from transcript lines (one session).
    pub fn from_transcript(lines: &[TranscriptLine]) -> Result<Self, SessionError> {
        let mut max_turns = None;
        let mut turns = Vec::new();
        let mut status = SessionStatus::Active;
        for l in lines {
            match l {
                TranscriptLine::Start { max_turns: t, .. } => max_turns = Some(*t),
                TranscriptLine::Turn(r) => turns.push(r.clone()),
                TranscriptLine::End { status: s, .. } => status = *s,
            }
        }
        let max_turns = max_turns.ok_or_else(|| SessionError::Transcript("missing start record".into()))?;
        Ok(Self::from_turns(status, max_turns, &turns))
    }
}

/// Drive a session against a simulated user until it ends.
pub fn run_session(
    c: &Components,
    q: Option<&QNet>,
    epsilon: f64,
    sim: &SimulatedUser,
    id: impl Into<String>,
    seed: u64,
) -> Result<Session, SessionError> {
    let mut seed_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let p0 = sim.seed_attribute(&mut seed_rng);
    let mut s = Session::start(c, id, sim.user, p0, seed)?;
    s.target = Some(sim.target);
    while !s.status().is_terminal() {
        let prompt = match s.prompt(c, q, epsilon) {
            Ok(p) => p,
            Err(SessionError::Finished) => break,
            Err(e) => return Err(e),
        };
        let response = match &prompt {
            Prompt::Ask { attribute } => sim.respond_attribute(&c.graph, *attribute)?,
            Prompt::Recommend { items } => sim.respond_recommendation(items),
        };
        s.respond(c, response)?;
    }
    Ok(s)
}

pub fn write_transcript<W: Write>(mut w: W, lines: &[TranscriptLine]) -> std::io::Result<()> {
    for l in lines {
        serde_json::to_writer(&mut w, l)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_transcript<R: BufRead>(r: R) -> Result<Vec<TranscriptLine>, SessionError> {
    let mut out = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line.map_err(|e| SessionError::Transcript(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| SessionError::Transcript(format!("line {}: {e}", n + 1)))?);
    }
    Ok(out)
}
