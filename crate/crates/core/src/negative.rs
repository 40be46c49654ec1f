//! Negative sampler: mines hard negative items around a positive anchor.
//!
//! Candidates are the items two hops (item → attribute → item) from the
//! anchor that the user has not interacted with. A GCN over the
//! candidates' shared-attribute subgraph, fed with the current FM
//! embeddings, produces node representations; a two-layer attention MLP
//! scores each candidate against the user and the anchor. Training is
//! REINFORCE on the mean similarity of the chosen batch to the user and
//! the anchor.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::active::{returns_to_go, SelectMode};
use crate::data::{ItemTriple, UserItems};
use crate::fm::{dot, FmError, FmHyper, FmModel, PreferenceContext};
use crate::graph::{GraphError, HeteroGraph, NodeId, NodeKind};
use crate::nn::{self, Adam, Dense, Mat, Propagation};

#[derive(Debug, Error)]
pub enum NegativeError {
    #[error("negative pool is empty")]
    EmptyPool,
    #[error("no item triples to train on")]
    EmptyTraining,
    #[error("embedding dimension {found} does not match policy dimension {expected}")]
    Dimension { expected: usize, found: usize },
    #[error(transparent)]
    Fm(#[from] FmError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NegConfig {
    pub hidden: usize,
    pub attention_hidden: usize,
    pub discount: f64,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Item → attribute → item expansions per pretraining episode.
    pub steps: usize,
    /// Use cosine similarity instead of raw dot products in the reward.
    pub normalize_reward: bool,
    pub seed: u64,
}

impl Default for NegConfig {
    fn default() -> Self {
        Self {
            hidden: 16,
            attention_hidden: 16,
            discount: 0.95,
            batch_size: 10,
            learning_rate: 0.01,
            steps: 1,
            normalize_reward: false,
            seed: 0,
        }
    }
}

/// `two_hop(i⁺) \ I⁺(u) \ consumed`.
pub fn build_pool(
    graph: &HeteroGraph,
    positives: &BTreeSet<NodeId>,
    i_pos: NodeId,
    consumed: &BTreeSet<NodeId>,
) -> Result<BTreeSet<NodeId>, NegativeError> {
    let mut pool = graph.two_hop_items(i_pos)?;
    pool.retain(|i| !positives.contains(i) && !consumed.contains(i));
    Ok(pool)
}

/// Uniform draw of up to `b` items from `I \ I⁺(u)`, used when the pool is empty.
pub fn fallback_batch<R: Rng>(graph: &HeteroGraph, positives: &BTreeSet<NodeId>, b: usize, rng: &mut R) -> Vec<NodeId> {
    let open: Vec<NodeId> = graph.items().iter().copied().filter(|i| !positives.contains(i)).collect();
    let mut out: Vec<NodeId> = open.choose_multiple(rng, b).copied().collect();
    out.sort();
    out
}

/// Walk state of one traversal: the path so far, the accumulated pool and
/// the negatives already used.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NegTrajectory {
    pub path: Vec<NodeId>,
    pub pool: BTreeSet<NodeId>,
    pub consumed: BTreeSet<NodeId>,
}

impl NegTrajectory {
    pub fn start(user: NodeId, anchor: NodeId) -> Self {
        Self { path: vec![user, anchor], pool: BTreeSet::new(), consumed: BTreeSet::new() }
    }

    pub fn frontier(&self) -> NodeId {
        *self.path.last().expect("path starts with user and anchor")
    }

    /// Add the two-hop neighbours of the frontier to the pool.
    pub fn expand(&mut self, graph: &HeteroGraph, positives: &BTreeSet<NodeId>) -> Result<(), NegativeError> {
        let found = build_pool(graph, positives, self.frontier(), &self.consumed)?;
        self.pool.extend(found);
        Ok(())
    }

    /// Mark a batch as used; its first member becomes the next frontier.
    pub fn consume(&mut self, batch: &[NodeId]) {
        for i in batch {
            self.pool.remove(i);
            self.consumed.insert(*i);
        }
        if let Some(&next) = batch.first() {
            self.path.push(next);
        }
    }
}

/// Candidates with their local subgraph and input features.
#[derive(Clone, Debug, PartialEq)]
pub struct NegState {
    pub user: NodeId,
    pub anchor: NodeId,
    pub items: Vec<NodeId>,
    pub adjacency: Vec<Vec<usize>>,
    /// FM embedding of each candidate.
    pub features: Mat,
    pub user_embedding: Vec<f64>,
    pub anchor_embedding: Vec<f64>,
}

impl NegState {
    pub fn new(graph: &HeteroGraph, fm: &FmModel, user: NodeId, anchor: NodeId, pool: &BTreeSet<NodeId>) -> Result<Self, NegativeError> {
        if pool.is_empty() {
            return Err(NegativeError::EmptyPool);
        }
        let items: Vec<NodeId> = pool.iter().copied().collect();
        let index: BTreeMap<NodeId, usize> = items.iter().enumerate().map(|(k, &i)| (i, k)).collect();
        let adjacency = items
            .iter()
            .map(|&i| {
                let mut nbrs: BTreeSet<usize> = BTreeSet::new();
                for &a in graph.attributes_of(i) {
                    nbrs.extend(graph.items_with(a).iter().filter(|&&j| j != i).filter_map(|j| index.get(j).copied()));
                }
                nbrs.into_iter().collect()
            })
            .collect();
        let rows: Vec<Vec<f64>> = items.iter().map(|&i| fm.embedding(i).map(<[f64]>::to_vec)).collect::<Result<_, _>>()?;
        Ok(Self {
            user,
            anchor,
            items,
            adjacency,
            features: Mat::from_rows(&rows),
            user_embedding: fm.embedding(user)?.to_vec(),
            anchor_embedding: fm.embedding(anchor)?.to_vec(),
        })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

struct Forward {
    propagated: Mat,
    pre: Mat,
    att_in: Vec<Vec<f64>>,
    att_pre: Vec<Vec<f64>>,
    scores: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NegPolicy {
    pub config: NegConfig,
    pub dim: usize,
    gcn: Dense,
    att1: Dense,
    att2: Dense,
    baseline: Vec<(f64, u64)>,
}

impl NegPolicy {
    pub fn new(config: NegConfig, dim: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let gcn = Dense::glorot(dim, config.hidden, &mut rng);
        let att1 = Dense::glorot(config.hidden + 2 * dim, config.attention_hidden, &mut rng);
        let att2 = Dense::glorot(config.attention_hidden, 1, &mut rng);
        Self { config, dim, gcn, att1, att2, baseline: Vec::new() }
    }

    pub fn zeroed(config: NegConfig, dim: usize) -> Self {
        Self {
            gcn: Dense::zeros(dim, config.hidden),
            att1: Dense::zeros(config.hidden + 2 * dim, config.attention_hidden),
            att2: Dense::zeros(config.attention_hidden, 1),
            config,
            dim,
            baseline: Vec::new(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.gcn.param_count() + self.att1.param_count() + self.att2.param_count()
    }

    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        self.gcn.flatten_into(&mut out);
        self.att1.flatten_into(&mut out);
        self.att2.flatten_into(&mut out);
        out
    }

    pub fn set_params(&mut self, flat: &[f64]) {
        let rest = self.gcn.unflatten_from(flat);
        let rest = self.att1.unflatten_from(rest);
        let rest = self.att2.unflatten_from(rest);
        assert!(rest.is_empty(), "parameter vector too long");
    }

    fn check_dim(&self, state: &NegState) -> Result<(), NegativeError> {
        if state.features.cols != self.dim {
            return Err(NegativeError::Dimension { expected: self.dim, found: state.features.cols });
        }
        Ok(())
    }

    fn forward(&self, state: &NegState) -> Forward {
        let adj = Propagation::symmetric_normalized(&state.adjacency);
        let propagated = adj.apply(&state.features);
        let pre = self.gcn.forward(&propagated);
        let mut att_in = Vec::with_capacity(state.len());
        let mut att_pre = Vec::with_capacity(state.len());
        let mut scores = Vec::with_capacity(state.len());
        for r in 0..state.len() {
            let x = state.features.row(r);
            let mut input: Vec<f64> = pre.row(r).iter().map(|&z| nn::relu(z)).collect();
            input.extend(x.iter().zip(&state.user_embedding).map(|(a, b)| a * b));
            input.extend(x.iter().zip(&state.anchor_embedding).map(|(a, b)| a * b));
            let hidden = self.att1.forward_row(&input);
            let act: Vec<f64> = hidden.iter().map(|&z| nn::relu(z)).collect();
            scores.push(self.att2.forward_row(&act)[0]);
            att_in.push(input);
            att_pre.push(hidden);
        }
        Forward { propagated, pre, att_in, att_pre, scores }
    }

    fn backward(&self, fwd: &Forward, dscores: &[f64]) -> Vec<f64> {
        let mut g_gcn = Dense::zeros(self.gcn.input, self.gcn.output);
        let mut g1 = Dense::zeros(self.att1.input, self.att1.output);
        let mut g2 = Dense::zeros(self.att2.input, 1);
        for (r, &ds) in dscores.iter().enumerate() {
            if ds == 0.0 {
                continue;
            }
            let act: Vec<f64> = fwd.att_pre[r].iter().map(|&z| nn::relu(z)).collect();
            let dact = self.att2.backward_row(&act, &[ds], &mut g2);
            let dhidden: Vec<f64> = dact.iter().zip(&fwd.att_pre[r]).map(|(d, &z)| if z > 0.0 { *d } else { 0.0 }).collect();
            let dinput = self.att1.backward_row(&fwd.att_in[r], &dhidden, &mut g1);
            let z = fwd.pre.row(r);
            let dz: Vec<f64> = dinput[..self.config.hidden].iter().zip(z).map(|(d, &v)| if v > 0.0 { *d } else { 0.0 }).collect();
            self.gcn.backward_row(fwd.propagated.row(r), &dz, &mut g_gcn);
        }
        let mut out = Vec::with_capacity(self.param_count());
        g_gcn.flatten_into(&mut out);
        g1.flatten_into(&mut out);
        g2.flatten_into(&mut out);
        out
    }

    pub fn scores(&self, state: &NegState) -> Result<Vec<f64>, NegativeError> {
        self.check_dim(state)?;
        Ok(self.forward(state).scores)
    }

    /// Attention weights over the candidates (softmax, sums to 1).
    pub fn weights(&self, state: &NegState) -> Result<Vec<f64>, NegativeError> {
        Ok(nn::softmax(&self.scores(state)?))
    }

    pub fn log_prob_grad(&self, state: &NegState, chosen: &[usize]) -> (f64, Vec<f64>) {
        let fwd = self.forward(state);
        let (logp, dscores) = nn::sequential_log_prob(&fwd.scores, &vec![true; state.len()], chosen);
        (logp, self.backward(&fwd, &dscores))
    }

    pub fn reinforce_gradient(&self, trajectory: &NegEpisode, baselines: Option<&[f64]>) -> Vec<f64> {
        let psi = returns_to_go(&trajectory.rewards, self.config.discount);
        let mut grad = vec![0.0; self.param_count()];
        for (t, step) in trajectory.steps.iter().enumerate() {
            let adv = psi[t] - baselines.and_then(|b| b.get(t)).copied().unwrap_or(0.0);
            if adv == 0.0 {
                continue;
            }
            let (_, g) = self.log_prob_grad(&step.state, &step.chosen);
            for (a, b) in grad.iter_mut().zip(&g) {
                *a += adv * b;
            }
        }
        grad
    }

    pub fn to_checkpoint(&self, fingerprint: &str) -> String {
        let c = &self.config;
        let header = [
            ("dim", self.dim.to_string()),
            ("hidden", c.hidden.to_string()),
            ("attention_hidden", c.attention_hidden.to_string()),
            ("discount", format!("{:?}", c.discount)),
            ("batch_size", c.batch_size.to_string()),
            ("learning_rate", format!("{:?}", c.learning_rate)),
            ("steps", c.steps.to_string()),
            ("normalize_reward", c.normalize_reward.to_string()),
            ("seed", c.seed.to_string()),
        ];
        let blocks = [
            ("params", self.params()),
            ("baseline.sum", self.baseline.iter().map(|b| b.0).collect()),
            ("baseline.count", self.baseline.iter().map(|b| b.1 as f64).collect()),
        ];
        nn::params_to_text("negative-policy", fingerprint, &header, &blocks)
    }

    pub fn from_checkpoint(text: &str) -> Result<(Self, String), NegativeError> {
        let parsed = nn::params_from_text("negative-policy", text).map_err(NegativeError::Checkpoint)?;
        let get = |k: &str| parsed.header.get(k).cloned().ok_or_else(|| NegativeError::Checkpoint(format!("missing {k}")));
        let num = |k: &str| -> Result<f64, NegativeError> { get(k)?.parse().map_err(|_| NegativeError::Checkpoint(format!("bad {k}"))) };
        let config = NegConfig {
            hidden: num("hidden")? as usize,
            attention_hidden: num("attention_hidden")? as usize,
            discount: num("discount")?,
            batch_size: num("batch_size")? as usize,
            learning_rate: num("learning_rate")?,
            steps: num("steps")? as usize,
            normalize_reward: get("normalize_reward")? == "true",
            seed: get("seed")?.parse().map_err(|_| NegativeError::Checkpoint("bad seed".into()))?,
        };
        let mut policy = Self::zeroed(config, num("dim")? as usize);
        let block = |name: &str| {
            parsed
                .blocks
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, v)| v.clone())
                .ok_or_else(|| NegativeError::Checkpoint(format!("missing block {name}")))
        };
        let params = block("params")?;
        if params.len() != policy.param_count() {
            return Err(NegativeError::Checkpoint("parameter count mismatch".into()));
        }
        policy.set_params(&params);
        policy.baseline = block("baseline.sum")?.into_iter().zip(block("baseline.count")?).map(|(s, c)| (s, c as u64)).collect();
        Ok((policy, parsed.fingerprint))
    }
}

/// Weights per pool member, in ascending item order.
pub fn score_pool(
    policy: &NegPolicy,
    fm: &FmModel,
    graph: &HeteroGraph,
    user: NodeId,
    i_pos: NodeId,
    pool: &BTreeSet<NodeId>,
) -> Result<Vec<(NodeId, f64)>, NegativeError> {
    let state = NegState::new(graph, fm, user, i_pos, pool)?;
    let w = policy.weights(&state)?;
    Ok(state.items.into_iter().zip(w).collect())
}

/// Up to `b` items: top-`b` by weight (ties to the smaller id) or weighted
/// sampling without replacement.
pub fn select_batch<R: Rng>(scored: &[(NodeId, f64)], b: usize, mode: SelectMode, rng: &mut R) -> Vec<NodeId> {
    let ids: Vec<NodeId> = scored.iter().map(|s| s.0).collect();
    let logits: Vec<f64> = scored.iter().map(|s| s.1.max(f64::MIN_POSITIVE).ln()).collect();
    let allowed = vec![true; scored.len()];
    let idx = match mode {
        SelectMode::Argmax => nn::top_k(&logits, &allowed, &ids, b),
        SelectMode::Sample => nn::sample_without_replacement(&logits, &allowed, b, rng),
    };
    idx.into_iter().map(|i| ids[i]).collect()
}

fn select_indices<R: Rng>(policy: &NegPolicy, state: &NegState, b: usize, mode: SelectMode, rng: &mut R) -> Vec<usize> {
    let scores = policy.forward(state).scores;
    let allowed = vec![true; state.len()];
    match mode {
        SelectMode::Argmax => nn::top_k(&scores, &allowed, &state.items, b),
        SelectMode::Sample => nn::sample_without_replacement(&scores, &allowed, b, rng),
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot(a, b) / (na * nb)
    }
}

/// Mean over the batch of `e_j·e_u + e_j·e_{i⁺}` (cosines when `normalize`).
pub fn compute_reward(fm: &FmModel, user: NodeId, i_pos: NodeId, batch: &[NodeId], normalize: bool) -> Result<f64, NegativeError> {
    if batch.is_empty() {
        log::warn!("negative reward requested for an empty batch");
        return Ok(0.0);
    }
    let eu = fm.embedding(user)?;
    let ei = fm.embedding(i_pos)?;
    let mut total = 0.0;
    for &j in batch {
        let ej = fm.embedding(j)?;
        total += if normalize { cosine(ej, eu) + cosine(ej, ei) } else { dot(ej, eu) + dot(ej, ei) };
    }
    Ok(total / batch.len() as f64)
}

/// Mean cosine similarity of `batch` to `anchor`.
pub fn mean_cosine_to(fm: &FmModel, anchor: NodeId, batch: &[NodeId]) -> Result<f64, NegativeError> {
    if batch.is_empty() {
        return Ok(0.0);
    }
    let ea = fm.embedding(anchor)?;
    let mut total = 0.0;
    for &j in batch {
        total += cosine(fm.embedding(j)?, ea);
    }
    Ok(total / batch.len() as f64)
}

/// Choose a negative batch for a live session: policy top-B over
/// `two_hop(anchor) \ I⁺(u) \ blocked`, or a uniform draw when that pool is
/// empty (from `I \ I⁺(u) \ blocked`, else `I \ I⁺(u)`).
#[allow(clippy::too_many_arguments)]
pub fn session_batch<R: Rng>(
    policy: &NegPolicy,
    fm: &FmModel,
    graph: &HeteroGraph,
    user: NodeId,
    anchor: NodeId,
    positives: &BTreeSet<NodeId>,
    blocked: &BTreeSet<NodeId>,
    rng: &mut R,
) -> Result<Vec<NodeId>, NegativeError> {
    let pool = build_pool(graph, positives, anchor, blocked)?;
    if pool.is_empty() {
        let mut excluded = positives.clone();
        excluded.extend(blocked.iter().copied());
        let batch = fallback_batch(graph, &excluded, policy.config.batch_size, rng);
        if !batch.is_empty() {
            return Ok(batch);
        }
        return Ok(fallback_batch(graph, positives, policy.config.batch_size, rng));
    }
    let state = NegState::new(graph, fm, user, anchor, &pool)?;
    policy.check_dim(&state)?;
    let idx = select_indices(policy, &state, policy.config.batch_size, SelectMode::Argmax, rng);
    Ok(idx.into_iter().map(|i| state.items[i]).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct NegStep {
    pub state: NegState,
    pub chosen: Vec<usize>,
    /// True when the pool was empty and the batch came from the fallback.
    pub fallback: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NegEpisode {
    pub steps: Vec<NegStep>,
    pub rewards: Vec<f64>,
    pub walk: NegTrajectory,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NegEpisodeLog {
    pub episode: usize,
    pub user: NodeId,
    #[serde(rename = "return")]
    pub discounted_return: f64,
    pub mean_reward: f64,
}

pub struct NegEnv<'a> {
    pub graph: &'a HeteroGraph,
    pub positives: &'a UserItems,
    pub hyper: &'a FmHyper,
}

impl NegEnv<'_> {
    /// Traverse from the anchor for `config.steps` expansions, choosing a
    /// batch each step and updating `fm` with it. Steps whose pool is empty
    /// end the episode.
    pub fn run_episode(
        &self,
        policy: &NegPolicy,
        fm: &mut FmModel,
        triple: &ItemTriple,
        mut choose: impl FnMut(&NegState) -> Vec<usize>,
    ) -> Result<NegEpisode, NegativeError> {
        let empty = BTreeSet::new();
        let positives = self.positives.get(&triple.user).unwrap_or(&empty);
        let mut walk = NegTrajectory::start(triple.user, triple.pos);
        let mut steps = Vec::new();
        let mut rewards = Vec::new();
        let ctx = PreferenceContext::new(triple.user);
        for _ in 0..policy.config.steps {
            walk.expand(self.graph, positives)?;
            if walk.pool.is_empty() {
                break;
            }
            let state = NegState::new(self.graph, fm, triple.user, triple.pos, &walk.pool)?;
            policy.check_dim(&state)?;
            let chosen = choose(&state);
            let batch: Vec<NodeId> = chosen.iter().map(|&i| state.items[i]).collect();
            rewards.push(compute_reward(fm, triple.user, triple.pos, &batch, policy.config.normalize_reward)?);
            let triples: Vec<_> = batch.iter().map(|&j| (ItemTriple { user: triple.user, pos: triple.pos, neg: j }, &ctx)).collect();
            fm.bpr_step_items(&triples, self.hyper)?;
            walk.consume(&batch);
            steps.push(NegStep { state, chosen, fallback: false });
        }
        Ok(NegEpisode { steps, rewards, walk })
    }
}

pub fn pretrain(
    policy: &mut NegPolicy,
    triples: &[ItemTriple],
    fm: &FmModel,
    env: &NegEnv<'_>,
    episodes: usize,
) -> Result<Vec<NegEpisodeLog>, NegativeError> {
    if triples.is_empty() {
        return Err(NegativeError::EmptyTraining);
    }
    if fm.dim() != policy.dim {
        return Err(NegativeError::Dimension { expected: policy.dim, found: fm.dim() });
    }
    for t in triples {
        env.graph.expect_kind(t.pos, NodeKind::Item)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(policy.config.seed ^ 0x4e9a_7100);
    let mut order: Vec<usize> = Vec::new();
    let mut adam = Adam::new(policy.config.learning_rate, policy.param_count());
    let mut logs = Vec::with_capacity(episodes);
    for episode in 0..episodes {
        if order.is_empty() {
            order = (0..triples.len()).collect();
            order.shuffle(&mut rng);
        }
        let triple = &triples[order.pop().expect("refilled")];
        let mut local = fm.clone();
        let snapshot = policy.clone();
        let b = policy.config.batch_size;
        let ep = env.run_episode(&snapshot, &mut local, triple, |s| select_indices(&snapshot, s, b, SelectMode::Sample, &mut rng))?;
        let psi = returns_to_go(&ep.rewards, policy.config.discount);
        let baselines: Vec<f64> = (0..psi.len())
            .map(|t| match policy.baseline.get(t) {
                Some(&(s, n)) if n > 0 => s / n as f64,
                _ => 0.0,
            })
            .collect();
        let grad = policy.reinforce_gradient(&ep, Some(&baselines));
        if policy.baseline.len() < psi.len() {
            policy.baseline.resize(psi.len(), (0.0, 0));
        }
        for (slot, &v) in policy.baseline.iter_mut().zip(&psi) {
            slot.0 += v;
            slot.1 += 1;
        }
        let mut params = policy.params();
        let ascent: Vec<f64> = grad.iter().map(|g| -g).collect();
        adam.step(&mut params, &ascent);
        policy.set_params(&params);
        let mean_reward = if ep.rewards.is_empty() { 0.0 } else { ep.rewards.iter().sum::<f64>() / ep.rewards.len() as f64 };
        logs.push(NegEpisodeLog { episode, user: triple.user, discounted_return: psi.first().copied().unwrap_or(0.0), mean_reward });
    }
    Ok(logs)
}
