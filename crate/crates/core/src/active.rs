//! Active sampler: picks the attribute to ask about.
//!
//! Each candidate attribute is described by four features (prediction
//! entropy, scaled degree, mean symmetric KL to its co-occurring
//! attributes, asked flag). A one-layer GCN over the co-occurrence graph
//! followed by a linear head scores the candidates; a softmax turns the
//! scores into a policy. Training is REINFORCE on the validation-AUC gain
//! of the recommender after each simulated answer.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{positive_attributes, AttrTriple, UserItems};
use crate::fm::{FmError, FmHyper, FmModel, PreferenceContext};
use crate::graph::{GraphError, HeteroGraph, NodeId};
use crate::nn::{self, Adam, Dense, Mat, Propagation};

pub const FEATURES: usize = 4;
const KL_CLAMP: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum ActiveError {
    #[error("attribute pool is empty")]
    EmptyPool,
    #[error("no attribute triples to train on")]
    EmptyTraining,
    #[error(transparent)]
    Fm(#[from] FmError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActiveConfig {
    pub hidden: usize,
    pub discount: f64,
    pub learning_rate: f64,
    /// Degree scale γ; the degree feature is `min(deg/γ, 1)`.
    pub degree_scale: f64,
    /// Attributes asked per turn.
    pub k_ask: usize,
    /// Restrict candidates to attributes co-occurring with an accepted one.
    pub neighborhood_only: bool,
    pub seed: u64,
}

impl Default for ActiveConfig {
    fn default() -> Self {
        Self { hidden: 16, discount: 0.95, learning_rate: 0.01, degree_scale: 20.0, k_ask: 1, neighborhood_only: false, seed: 0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SelectMode {
    Sample,
    Argmax,
}

pub fn binary_entropy(y: f64) -> f64 {
    let term = |p: f64| if p <= 0.0 { 0.0 } else { -p * p.ln() };
    term(y) + term(1.0 - y)
}

/// `D_KL(Bern(p) ‖ Bern(q))`.
pub fn bernoulli_kl(p: f64, q: f64) -> f64 {
    let p = p.clamp(KL_CLAMP, 1.0 - KL_CLAMP);
    let q = q.clamp(KL_CLAMP, 1.0 - KL_CLAMP);
    p * (p / q).ln() + (1.0 - p) * ((1.0 - p) / (1.0 - q)).ln()
}

pub fn scaled_degree(degree: usize, scale: f64) -> f64 {
    (degree as f64 / scale).min(1.0)
}

/// Attributes that have not been asked yet in a session.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributePool {
    remaining: BTreeSet<NodeId>,
    asked: Vec<NodeId>,
}

impl AttributePool {
    pub fn new(attributes: impl IntoIterator<Item = NodeId>) -> Self {
        Self { remaining: attributes.into_iter().collect(), asked: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.remaining.len()
    }

    pub fn is_empty(&self) -> bool {
        self.remaining.is_empty()
    }

    pub fn contains(&self, p: NodeId) -> bool {
        self.remaining.contains(&p)
    }

    pub fn remaining(&self) -> &BTreeSet<NodeId> {
        &self.remaining
    }

    pub fn asked(&self) -> &[NodeId] {
        &self.asked
    }

    /// Move `p` from the pool to the asked list. Returns false if absent.
    pub fn take(&mut self, p: NodeId) -> bool {
        if self.remaining.remove(&p) {
            self.asked.push(p);
            true
        } else {
            false
        }
    }
}

/// Attribute co-occurrence: two attributes are linked iff some item has both.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct AttributeLinks {
    links: BTreeMap<NodeId, BTreeSet<NodeId>>,
}

impl AttributeLinks {
    pub fn from_graph(graph: &HeteroGraph) -> Self {
        let mut links: BTreeMap<NodeId, BTreeSet<NodeId>> = graph.attributes().iter().map(|&a| (a, BTreeSet::new())).collect();
        for &item in graph.items() {
            let attrs = graph.attributes_of(item);
            for &a in attrs {
                let entry = links.entry(a).or_default();
                entry.extend(attrs.iter().copied().filter(|&b| b != a));
            }
        }
        Self { links }
    }

    pub fn neighbors(&self, p: NodeId) -> impl Iterator<Item = NodeId> + '_ {
        self.links.get(&p).into_iter().flatten().copied()
    }

    pub fn linked(&self, a: NodeId, b: NodeId) -> bool {
        self.links.get(&a).is_some_and(|s| s.contains(&b))
    }
}

/// Featurised candidates plus the co-occurrence subgraph among them.
#[derive(Clone, Debug, PartialEq)]
pub struct ActiveState {
    pub nodes: Vec<NodeId>,
    pub probability: Vec<f64>,
    pub entropy: Vec<f64>,
    pub degree: Vec<f64>,
    pub kl: Vec<f64>,
    pub selected: Vec<f64>,
    pub adjacency: Vec<Vec<usize>>,
}

impl ActiveState {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn features(&self) -> Mat {
        let rows: Vec<Vec<f64>> =
            (0..self.len()).map(|i| vec![self.entropy[i], self.degree[i], self.kl[i], self.selected[i]]).collect();
        Mat::from_rows(&rows)
    }

    /// Candidates that may still be chosen.
    pub fn selectable(&self) -> Vec<bool> {
        self.selected.iter().map(|&s| s == 0.0).collect()
    }

    pub fn selectable_count(&self) -> usize {
        self.selected.iter().filter(|&&s| s == 0.0).count()
    }
}

/// Featurise the pool for the current preference context.
///
/// Already-asked attributes stay in the subgraph with `selected = 1` and
/// are never offered as actions.
pub fn build_state(
    graph: &HeteroGraph,
    links: &AttributeLinks,
    fm: &FmModel,
    ctx: &PreferenceContext,
    pool: &AttributePool,
    config: &ActiveConfig,
) -> Result<ActiveState, ActiveError> {
    let mut open: Vec<NodeId> = pool.remaining().iter().copied().collect();
    if config.neighborhood_only && !ctx.accepted().is_empty() {
        let near: BTreeSet<NodeId> = ctx.accepted().iter().flat_map(|&a| links.neighbors(a)).collect();
        open.retain(|p| near.contains(p));
    }
    if open.is_empty() {
        return Err(ActiveError::EmptyPool);
    }
    let mut nodes = open.clone();
    let mut selected = vec![0.0; open.len()];
    for &p in pool.asked() {
        nodes.push(p);
        selected.push(1.0);
    }
    let index: BTreeMap<NodeId, usize> = nodes.iter().enumerate().map(|(i, &p)| (p, i)).collect();
    let adjacency: Vec<Vec<usize>> =
        nodes.iter().map(|&p| links.neighbors(p).filter_map(|q| index.get(&q).copied()).collect()).collect();
    let probability: Vec<f64> =
        nodes.iter().map(|&p| fm.attr_probability(ctx, p)).collect::<Result<_, _>>()?;
    let entropy = probability.iter().map(|&y| binary_entropy(y)).collect();
    let degree = nodes
        .iter()
        .map(|&p| graph.degree(p).map(|d| scaled_degree(d, config.degree_scale)))
        .collect::<Result<_, _>>()?;
    let kl = adjacency
        .iter()
        .enumerate()
        .map(|(i, nbrs)| {
            if nbrs.is_empty() {
                return 0.0;
            }
            let yi = probability[i];
            let total: f64 = nbrs.iter().map(|&j| bernoulli_kl(yi, probability[j]) + bernoulli_kl(probability[j], yi)).sum();
            total / nbrs.len() as f64
        })
        .collect();
    Ok(ActiveState { nodes, probability, entropy, degree, kl, selected, adjacency })
}

/// Intermediate activations kept for the backward pass.
struct Forward {
    propagated: Mat,
    pre: Mat,
    scores: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ActivePolicy {
    pub config: ActiveConfig,
    gcn: Dense,
    head: Dense,
    /// Running mean of the return-to-go at each step index.
    baseline: Vec<(f64, u64)>,
}

impl ActivePolicy {
    pub fn new(config: ActiveConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let gcn = Dense::glorot(FEATURES, config.hidden, &mut rng);
        let head = Dense::glorot(config.hidden, 1, &mut rng);
        Self { config, gcn, head, baseline: Vec::new() }
    }

    /// All-zero parameters: a uniform policy.
    pub fn zeroed(config: ActiveConfig) -> Self {
        let gcn = Dense::zeros(FEATURES, config.hidden);
        let head = Dense::zeros(config.hidden, 1);
        Self { config, gcn, head, baseline: Vec::new() }
    }

    pub fn param_count(&self) -> usize {
        self.gcn.param_count() + self.head.param_count()
    }

    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        self.gcn.flatten_into(&mut out);
        self.head.flatten_into(&mut out);
        out
    }

    pub fn set_params(&mut self, flat: &[f64]) {
        let rest = self.gcn.unflatten_from(flat);
        let rest = self.head.unflatten_from(rest);
        assert!(rest.is_empty(), "parameter vector too long");
    }

    fn forward(&self, state: &ActiveState) -> Forward {
        let adj = Propagation::symmetric_normalized(&state.adjacency);
        let propagated = adj.apply(&state.features());
        let pre = self.gcn.forward(&propagated);
        let scores = (0..pre.rows)
            .map(|r| {
                let h: Vec<f64> = pre.row(r).iter().map(|&z| nn::relu(z)).collect();
                self.head.forward_row(&h)[0]
            })
            .collect();
        Forward { propagated, pre, scores }
    }

    pub fn scores(&self, state: &ActiveState) -> Vec<f64> {
        self.forward(state).scores
    }

    /// Action distribution over `state.nodes`; asked attributes get 0.
    pub fn distribution(&self, state: &ActiveState) -> Vec<f64> {
        nn::masked_softmax(&self.scores(state), &state.selectable())
    }

    /// Gradient of `Σ dscores·scores` w.r.t. the flat parameters.
    fn backward(&self, fwd: &Forward, dscores: &[f64]) -> Vec<f64> {
        let mut g_gcn = Dense::zeros(self.gcn.input, self.gcn.output);
        let mut g_head = Dense::zeros(self.head.input, 1);
        for (r, &ds) in dscores.iter().enumerate() {
            if ds == 0.0 {
                continue;
            }
            let z = fwd.pre.row(r);
            let h: Vec<f64> = z.iter().map(|&v| nn::relu(v)).collect();
            let dh = self.head.backward_row(&h, &[ds], &mut g_head);
            let dz: Vec<f64> = dh.iter().zip(z).map(|(d, &v)| if v > 0.0 { *d } else { 0.0 }).collect();
            self.gcn.backward_row(fwd.propagated.row(r), &dz, &mut g_gcn);
        }
        let mut out = Vec::with_capacity(self.param_count());
        g_gcn.flatten_into(&mut out);
        g_head.flatten_into(&mut out);
        out
    }

    /// `log π(chosen | state)` (sequential, without replacement) and its gradient.
    pub fn log_prob_grad(&self, state: &ActiveState, chosen: &[usize]) -> (f64, Vec<f64>) {
        let fwd = self.forward(state);
        let (logp, dscores) = nn::sequential_log_prob(&fwd.scores, &state.selectable(), chosen);
        (logp, self.backward(&fwd, &dscores))
    }

    /// Policy-gradient estimate `Σ_t (ψ_t − b_t) ∇log π(a_t|s_t)` for one
    /// trajectory, with `ψ_t = Σ_{k≥t} λ^{k−1} r_k`.
    pub fn reinforce_gradient(&self, trajectory: &ActiveTrajectory, baselines: Option<&[f64]>) -> Vec<f64> {
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

    fn baseline_values(&self, len: usize) -> Vec<f64> {
        (0..len)
            .map(|t| match self.baseline.get(t) {
                Some(&(sum, n)) if n > 0 => sum / n as f64,
                _ => 0.0,
            })
            .collect()
    }

    fn record_returns(&mut self, psi: &[f64]) {
        if self.baseline.len() < psi.len() {
            self.baseline.resize(psi.len(), (0.0, 0));
        }
        for (slot, &v) in self.baseline.iter_mut().zip(psi) {
            slot.0 += v;
            slot.1 += 1;
        }
    }

    pub fn to_checkpoint(&self, fingerprint: &str) -> String {
        let c = &self.config;
        let header = [
            ("hidden", c.hidden.to_string()),
            ("discount", format!("{:?}", c.discount)),
            ("learning_rate", format!("{:?}", c.learning_rate)),
            ("degree_scale", format!("{:?}", c.degree_scale)),
            ("k_ask", c.k_ask.to_string()),
            ("neighborhood_only", c.neighborhood_only.to_string()),
            ("seed", c.seed.to_string()),
        ];
        let blocks = [
            ("gcn.w", self.gcn.w.clone()),
            ("gcn.b", self.gcn.b.clone()),
            ("head.w", self.head.w.clone()),
            ("head.b", self.head.b.clone()),
            ("baseline.sum", self.baseline.iter().map(|b| b.0).collect()),
            ("baseline.count", self.baseline.iter().map(|b| b.1 as f64).collect()),
        ];
        nn::params_to_text("active-policy", fingerprint, &header, &blocks)
    }

    pub fn from_checkpoint(text: &str) -> Result<(Self, String), ActiveError> {
        let err = ActiveError::Checkpoint;
        let parsed = nn::params_from_text("active-policy", text).map_err(err)?;
        let get = |k: &str| parsed.header.get(k).cloned().ok_or_else(|| ActiveError::Checkpoint(format!("missing {k}")));
        let num = |k: &str| -> Result<f64, ActiveError> { get(k)?.parse().map_err(|_| ActiveError::Checkpoint(format!("bad {k}"))) };
        let config = ActiveConfig {
            hidden: num("hidden")? as usize,
            discount: num("discount")?,
            learning_rate: num("learning_rate")?,
            degree_scale: num("degree_scale")?,
            k_ask: num("k_ask")? as usize,
            neighborhood_only: get("neighborhood_only")? == "true",
            seed: get("seed")?.parse().map_err(|_| ActiveError::Checkpoint("bad seed".into()))?,
        };
        let mut policy = Self::zeroed(config);
        let block = |name: &str| {
            parsed
                .blocks
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, v)| v.clone())
                .ok_or_else(|| ActiveError::Checkpoint(format!("missing block {name}")))
        };
        let mut flat = block("gcn.w")?;
        flat.extend(block("gcn.b")?);
        flat.extend(block("head.w")?);
        flat.extend(block("head.b")?);
        if flat.len() != policy.param_count() {
            return Err(ActiveError::Checkpoint("parameter count mismatch".into()));
        }
        policy.set_params(&flat);
        let sums = block("baseline.sum")?;
        let counts = block("baseline.count")?;
        policy.baseline = sums.into_iter().zip(counts).map(|(s, c)| (s, c as u64)).collect();
        Ok((policy, parsed.fingerprint))
    }
}

/// Choose up to `k` attributes. Argmax ties go to the smaller id.
pub fn select_attributes<R: Rng>(
    policy: &ActivePolicy,
    state: &ActiveState,
    k: usize,
    mode: SelectMode,
    rng: &mut R,
) -> Vec<NodeId> {
    select_indices(policy, state, k, mode, rng).into_iter().map(|i| state.nodes[i]).collect()
}

fn select_indices<R: Rng>(policy: &ActivePolicy, state: &ActiveState, k: usize, mode: SelectMode, rng: &mut R) -> Vec<usize> {
    let scores = policy.scores(state);
    let allowed = state.selectable();
    match mode {
        SelectMode::Sample => nn::sample_without_replacement(&scores, &allowed, k, rng),
        SelectMode::Argmax => nn::top_k(&scores, &allowed, &state.nodes, k),
    }
}

pub fn compute_reward(auc_before: f64, auc_after: f64) -> f64 {
    auc_after - auc_before
}

/// `ψ_t = Σ_{k≥t} λ^{k−1} r_k` (steps are 1-based in the formula).
pub fn returns_to_go(rewards: &[f64], discount: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for t in (0..rewards.len()).rev() {
        acc += discount.powi(t as i32) * rewards[t];
        out[t] = acc;
    }
    out
}

/// Everything needed to simulate one pretraining episode for a user.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeSpec {
    pub user: NodeId,
    /// Attributes the simulated user accepts.
    pub positives: BTreeSet<NodeId>,
    /// Anchor pair completing triples for accepted / rejected answers.
    pub anchor_pos: NodeId,
    pub anchor_neg: NodeId,
    pub valid_pos: Vec<NodeId>,
    pub valid_neg: Vec<NodeId>,
}

/// Build one episode spec per training attribute triple. Validation
/// pairs come from the user's held-out triples, or from the training
/// triples when the user has none on one side.
pub fn episode_specs(graph: &HeteroGraph, train_positives: &UserItems, train: &[AttrTriple], valid: &[AttrTriple]) -> Vec<EpisodeSpec> {
    type Sides = (BTreeSet<NodeId>, BTreeSet<NodeId>);
    let collect = |triples: &[AttrTriple]| {
        let mut by_user: BTreeMap<NodeId, Sides> = BTreeMap::new();
        for t in triples {
            let e = by_user.entry(t.user).or_default();
            e.0.insert(t.pos);
            e.1.insert(t.neg);
        }
        by_user
    };
    let train_sides = collect(train);
    let valid_sides = collect(valid);
    let empty = BTreeSet::new();
    // positives, valid_pos, valid_neg per user
    type UserSpec = (BTreeSet<NodeId>, Vec<NodeId>, Vec<NodeId>);
    let mut cache: BTreeMap<NodeId, UserSpec> = BTreeMap::new();
    train
        .iter()
        .map(|t| {
            let (positives, vp, vn) = cache
                .entry(t.user)
                .or_insert_with(|| {
                    let positives = positive_attributes(graph, train_positives.get(&t.user).unwrap_or(&empty));
                    let ts = &train_sides[&t.user];
                    let (vp, vn) = match valid_sides.get(&t.user) {
                        Some((p, n)) if !p.is_empty() && !n.is_empty() => (p, n),
                        _ => (&ts.0, &ts.1),
                    };
                    (positives, vp.iter().copied().collect(), vn.iter().copied().collect())
                })
                .clone();
            EpisodeSpec { user: t.user, positives, anchor_pos: t.pos, anchor_neg: t.neg, valid_pos: vp, valid_neg: vn }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ActiveStep {
    pub state: ActiveState,
    pub chosen: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ActiveTrajectory {
    pub steps: Vec<ActiveStep>,
    pub rewards: Vec<f64>,
    /// Validation AUC before the first step, then after each step.
    pub auc: Vec<f64>,
}

/// One line of the pretraining log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActiveEpisodeLog {
    pub episode: usize,
    pub user: NodeId,
    #[serde(rename = "return")]
    pub discounted_return: f64,
    pub auc: Vec<f64>,
}

/// Shared read-only environment for pretraining episodes.
pub struct ActiveEnv<'a> {
    pub graph: &'a HeteroGraph,
    pub links: &'a AttributeLinks,
    pub hyper: &'a FmHyper,
    pub turns: usize,
}

impl ActiveEnv<'_> {
    /// Roll one episode on `fm` (mutated in place). `choose` maps a state
    /// to the indices asked this turn.
    pub fn run_episode(
        &self,
        policy: &ActivePolicy,
        fm: &mut FmModel,
        spec: &EpisodeSpec,
        mut choose: impl FnMut(&ActiveState) -> Vec<usize>,
    ) -> Result<ActiveTrajectory, ActiveError> {
        let eval_ctx = PreferenceContext::new(spec.user);
        let mut ctx = PreferenceContext::new(spec.user);
        let mut pool = AttributePool::new(self.graph.attributes().iter().copied());
        let mut auc = vec![fm.attribute_auc(&eval_ctx, &spec.valid_pos, &spec.valid_neg)?];
        let mut steps = Vec::new();
        let mut rewards = Vec::new();
        for _ in 0..self.turns {
            let state = match build_state(self.graph, self.links, fm, &ctx, &pool, &policy.config) {
                Ok(s) => s,
                Err(ActiveError::EmptyPool) => break,
                Err(e) => return Err(e),
            };
            let chosen = choose(&state);
            let mut accepted = Vec::new();
            let mut triples = Vec::new();
            for &i in &chosen {
                let p = state.nodes[i];
                pool.take(p);
                if spec.positives.contains(&p) {
                    triples.push(AttrTriple { user: spec.user, pos: p, neg: spec.anchor_neg });
                    accepted.push(p);
                } else {
                    triples.push(AttrTriple { user: spec.user, pos: spec.anchor_pos, neg: p });
                }
            }
            let batch: Vec<_> = triples.into_iter().map(|t| (t, &ctx)).collect();
            fm.bpr_step_attrs(&batch, self.hyper)?;
            for p in accepted {
                ctx.accept(p);
            }
            let after = fm.attribute_auc(&eval_ctx, &spec.valid_pos, &spec.valid_neg)?;
            rewards.push(compute_reward(*auc.last().expect("nonempty"), after));
            auc.push(after);
            steps.push(ActiveStep { state, chosen });
        }
        Ok(ActiveTrajectory { steps, rewards, auc })
    }
}

/// REINFORCE pretraining. The FM is cloned per episode so `fm` itself is
/// never modified.
pub fn pretrain(
    policy: &mut ActivePolicy,
    specs: &[EpisodeSpec],
    fm: &FmModel,
    env: &ActiveEnv<'_>,
    episodes: usize,
) -> Result<Vec<ActiveEpisodeLog>, ActiveError> {
    if specs.is_empty() {
        return Err(ActiveError::EmptyTraining);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(policy.config.seed ^ 0xac71_7e00);
    let mut order: Vec<usize> = Vec::new();
    let mut adam = Adam::new(policy.config.learning_rate, policy.param_count());
    let mut logs = Vec::with_capacity(episodes);
    for episode in 0..episodes {
        if order.is_empty() {
            order = (0..specs.len()).collect();
            order.shuffle(&mut rng);
        }
        let spec = &specs[order.pop().expect("refilled")];
        let mut local = fm.clone();
        let k = policy.config.k_ask;
        let snapshot = policy.clone();
        let trajectory = env.run_episode(&snapshot, &mut local, spec, |s| {
            select_indices(&snapshot, s, k, SelectMode::Sample, &mut rng)
        })?;
        let psi = returns_to_go(&trajectory.rewards, policy.config.discount);
        let baselines = policy.baseline_values(psi.len());
        let grad = policy.reinforce_gradient(&trajectory, Some(&baselines));
        policy.record_returns(&psi);
        let mut params = policy.params();
        let ascent: Vec<f64> = grad.iter().map(|g| -g).collect();
        adam.step(&mut params, &ascent);
        policy.set_params(&params);
        logs.push(ActiveEpisodeLog {
            episode,
            user: spec.user,
            discounted_return: psi.first().copied().unwrap_or(0.0),
            auc: trajectory.auc,
        });
    }
    Ok(logs)
}
