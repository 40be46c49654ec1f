//! Factorization-machine recommender.
//!
//! Items and attributes are scored against a user and the attributes the
//! user has accepted so far:
//!
//! ```text
//! f(i | u, P) = u·i + Σ_{p∈P} i·p
//! f(p | u, P) = u·p + Σ_{q∈P} p·q
//! ```
//!
//! and trained with pairwise BPR plus an L2 penalty on the rows a batch
//! touches. Gradients are derived by hand; `tests::*_finite_differences`
//! check them.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{AttrTriple, ItemTriple};
use crate::graph::NodeId;

#[derive(Debug, Error, PartialEq)]
pub enum FmError {
    #[error("node {0} has no embedding")]
    NotFound(NodeId),
    #[error("candidate set is empty")]
    EmptyCandidates,
    #[error("auc is undefined: {0} side is empty")]
    UndefinedAuc(&'static str),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FmHyper {
    pub dim: usize,
    pub learning_rate: f64,
    pub l2: f64,
    pub seed: u64,
}

impl Default for FmHyper {
    fn default() -> Self {
        Self { dim: 64, learning_rate: 0.05, l2: 1e-4, seed: 0 }
    }
}

/// User context for scoring: the user and the accepted attributes so far.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferenceContext {
    pub user: NodeId,
    accepted: Vec<NodeId>,
}

impl PreferenceContext {
    pub fn new(user: NodeId) -> Self {
        Self { user, accepted: Vec::new() }
    }

    pub fn with_accepted(user: NodeId, accepted: impl IntoIterator<Item = NodeId>) -> Self {
        let mut ctx = Self::new(user);
        for p in accepted {
            ctx.accept(p);
        }
        ctx
    }

    /// Insert keeping first-acceptance order; duplicates are ignored.
    pub fn accept(&mut self, p: NodeId) -> bool {
        if self.accepted.contains(&p) {
            false
        } else {
            self.accepted.push(p);
            true
        }
    }

    pub fn accepted(&self) -> &[NodeId] {
        &self.accepted
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FmModel {
    dim: usize,
    rows: usize,
    weights: Vec<f64>,
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `-ln σ(x)`, stable for large |x|.
#[inline]
fn neg_log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        (-x).exp().ln_1p()
    } else {
        -x + x.exp().ln_1p()
    }
}

/// Summary of one BPR step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    /// Loss before the step, including the L2 term.
    pub loss: f64,
    pub triples: usize,
}

impl FmModel {
    /// Seeded Gaussian init, mean 0, stdev 0.01.
    pub fn new(rows: usize, hyper: &FmHyper) -> Self {
        Self::with_stdev(rows, hyper.dim, hyper.seed, 0.01)
    }

    pub fn with_stdev(rows: usize, dim: usize, seed: u64, stdev: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, stdev).expect("stdev is finite and non-negative");
        let weights = (0..rows * dim).map(|_| normal.sample(&mut rng)).collect();
        Self { dim, rows, weights }
    }

    pub fn zeros(rows: usize, dim: usize) -> Self {
        Self { dim, rows, weights: vec![0.0; rows * dim] }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    /// Append a zero row (cold-start users) and return its id.
    pub fn push_zero_row(&mut self) -> NodeId {
        self.weights.extend(std::iter::repeat_n(0.0, self.dim));
        self.rows += 1;
        NodeId(self.rows as u32 - 1)
    }

    pub fn embedding(&self, n: NodeId) -> Result<&[f64], FmError> {
        if n.index() >= self.rows {
            return Err(FmError::NotFound(n));
        }
        Ok(&self.weights[n.index() * self.dim..(n.index() + 1) * self.dim])
    }

    pub fn embedding_mut(&mut self, n: NodeId) -> Result<&mut [f64], FmError> {
        if n.index() >= self.rows {
            return Err(FmError::NotFound(n));
        }
        Ok(&mut self.weights[n.index() * self.dim..(n.index() + 1) * self.dim])
    }

    fn check(&self, ids: impl IntoIterator<Item = NodeId>) -> Result<(), FmError> {
        for n in ids {
            if n.index() >= self.rows {
                return Err(FmError::NotFound(n));
            }
        }
        Ok(())
    }

    fn row(&self, n: NodeId) -> &[f64] {
        &self.weights[n.index() * self.dim..(n.index() + 1) * self.dim]
    }

    /// `u + Σ_{p∈P} p`: the vector every target is dotted with.
    fn context_vector(&self, ctx: &PreferenceContext) -> Vec<f64> {
        let mut v = self.row(ctx.user).to_vec();
        for &p in ctx.accepted() {
            for (a, b) in v.iter_mut().zip(self.row(p)) {
                *a += b;
            }
        }
        v
    }

    /// Item and attribute scores share the same bilinear form.
    fn score_target(&self, ctx: &PreferenceContext, target: NodeId) -> Result<f64, FmError> {
        self.check(std::iter::once(ctx.user).chain(ctx.accepted().iter().copied()).chain([target]))?;
        Ok(dot(&self.context_vector(ctx), self.row(target)))
    }

    pub fn score_item(&self, ctx: &PreferenceContext, item: NodeId) -> Result<f64, FmError> {
        self.score_target(ctx, item)
    }

    /// Includes the `p·p` term when `p` is itself in the context.
    pub fn score_attribute(&self, ctx: &PreferenceContext, attribute: NodeId) -> Result<f64, FmError> {
        self.score_target(ctx, attribute)
    }

    pub fn attr_probability(&self, ctx: &PreferenceContext, attribute: NodeId) -> Result<f64, FmError> {
        self.score_attribute(ctx, attribute).map(sigmoid)
    }

    /// Scores for many targets, sharing the context vector.
    pub fn score_many(&self, ctx: &PreferenceContext, targets: &[NodeId]) -> Result<Vec<f64>, FmError> {
        self.check(std::iter::once(ctx.user).chain(ctx.accepted().iter().copied()).chain(targets.iter().copied()))?;
        let v = self.context_vector(ctx);
        Ok(targets.iter().map(|&t| dot(&v, self.row(t))).collect())
    }

    /// Top-`k` candidates by descending score, ties by ascending id.
    pub fn rank_items(&self, ctx: &PreferenceContext, candidates: &BTreeSet<NodeId>, k: usize) -> Result<Vec<NodeId>, FmError> {
        if candidates.is_empty() {
            return Err(FmError::EmptyCandidates);
        }
        let ids: Vec<NodeId> = candidates.iter().copied().collect();
        let scores = self.score_many(ctx, &ids)?;
        let mut order: Vec<(f64, NodeId)> = scores.into_iter().zip(ids).collect();
        order.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        Ok(order.into_iter().take(k).map(|(_, id)| id).collect())
    }

    /// Pairwise loss and gradient for `(ctx, pos, neg)` triples, accumulated
    /// per row. Returns the loss including `l2 * Σ‖row‖²` over touched rows.
    fn bpr_loss_and_grad<'a>(
        &self,
        batch: impl Iterator<Item = (&'a PreferenceContext, NodeId, NodeId)>,
        l2: f64,
    ) -> Result<(f64, BTreeMap<NodeId, Vec<f64>>), FmError> {
        let mut grads: BTreeMap<NodeId, Vec<f64>> = BTreeMap::new();
        let mut loss = 0.0;
        let d = self.dim;
        for (ctx, pos, neg) in batch {
            self.check(std::iter::once(ctx.user).chain(ctx.accepted().iter().copied()).chain([pos, neg]))?;
            let c = self.context_vector(ctx);
            let (ep, en) = (self.row(pos), self.row(neg));
            let gap = dot(&c, ep) - dot(&c, en);
            loss += neg_log_sigmoid(gap);
            // d/dgap of -ln σ(gap)
            let g = -sigmoid(-gap);
            let diff: Vec<f64> = ep.iter().zip(en).map(|(a, b)| a - b).collect();
            let mut add = |n: NodeId, v: &[f64], scale: f64| {
                let e = grads.entry(n).or_insert_with(|| vec![0.0; d]);
                for (a, b) in e.iter_mut().zip(v) {
                    *a += scale * b;
                }
            };
            add(ctx.user, &diff, g);
            for &p in ctx.accepted() {
                add(p, &diff, g);
            }
            add(pos, &c, g);
            add(neg, &c, -g);
        }
        for (n, g) in grads.iter_mut() {
            let row = self.row(*n);
            loss += l2 * dot(row, row);
            for (a, w) in g.iter_mut().zip(row) {
                *a += 2.0 * l2 * w;
            }
        }
        Ok((loss, grads))
    }

    fn apply(&mut self, grads: &BTreeMap<NodeId, Vec<f64>>, lr: f64) {
        for (n, g) in grads {
            let d = self.dim;
            let row = &mut self.weights[n.index() * d..(n.index() + 1) * d];
            for (w, gi) in row.iter_mut().zip(g) {
                *w -= lr * gi;
            }
        }
    }

    /// Loss of an item batch without updating.
    pub fn item_loss(&self, batch: &[(ItemTriple, &PreferenceContext)], l2: f64) -> Result<f64, FmError> {
        self.bpr_loss_and_grad(batch.iter().map(|(t, c)| (*c, t.pos, t.neg)), l2).map(|r| r.0)
    }

    pub fn attr_loss(&self, batch: &[(AttrTriple, &PreferenceContext)], l2: f64) -> Result<f64, FmError> {
        self.bpr_loss_and_grad(batch.iter().map(|(t, c)| (*c, t.pos, t.neg)), l2).map(|r| r.0)
    }

    /// One SGD step on the item BPR loss. Triple users must match their
    /// context's user.
    pub fn bpr_step_items(&mut self, batch: &[(ItemTriple, &PreferenceContext)], hyper: &FmHyper) -> Result<StepReport, FmError> {
        if batch.is_empty() {
            return Ok(StepReport::default());
        }
        debug_assert!(batch.iter().all(|(t, c)| t.user == c.user));
        let (loss, grads) = self.bpr_loss_and_grad(batch.iter().map(|(t, c)| (*c, t.pos, t.neg)), hyper.l2)?;
        self.apply(&grads, hyper.learning_rate);
        Ok(StepReport { loss, triples: batch.len() })
    }

    pub fn bpr_step_attrs(&mut self, batch: &[(AttrTriple, &PreferenceContext)], hyper: &FmHyper) -> Result<StepReport, FmError> {
        if batch.is_empty() {
            return Ok(StepReport::default());
        }
        debug_assert!(batch.iter().all(|(t, c)| t.user == c.user));
        let (loss, grads) = self.bpr_loss_and_grad(batch.iter().map(|(t, c)| (*c, t.pos, t.neg)), hyper.l2)?;
        self.apply(&grads, hyper.learning_rate);
        Ok(StepReport { loss, triples: batch.len() })
    }

    /// Text checkpoint: `key=value` header, then `node_id<TAB>floats`.
    pub fn to_checkpoint(&self, hyper: &FmHyper, fingerprint: &str) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# fm-checkpoint v1");
        let _ = writeln!(out, "fingerprint={fingerprint}");
        let _ = writeln!(
            out,
            "dim={} rows={} learning_rate={} l2={} seed={}",
            self.dim, self.rows, hyper.learning_rate, hyper.l2, hyper.seed
        );
        for n in 0..self.rows {
            let _ = write!(out, "{n}\t");
            let row = self.row(NodeId(n as u32));
            for (j, w) in row.iter().enumerate() {
                if j > 0 {
                    out.push(' ');
                }
                // shortest round-trip representation
                let _ = write!(out, "{w:?}");
            }
            out.push('\n');
        }
        out
    }

    pub fn from_checkpoint(text: &str) -> Result<(Self, FmHyper, String), FmError> {
        let bad = |m: &str| FmError::Checkpoint(m.to_string());
        let mut lines = text.lines();
        if lines.next() != Some("# fm-checkpoint v1") {
            return Err(bad("missing or unsupported version header"));
        }
        let fingerprint = lines
            .next()
            .and_then(|l| l.strip_prefix("fingerprint="))
            .ok_or_else(|| bad("missing fingerprint"))?
            .to_string();
        let header = lines.next().ok_or_else(|| bad("missing hyperparameter header"))?;
        let mut kv = BTreeMap::new();
        for part in header.split_whitespace() {
            let (k, v) = part.split_once('=').ok_or_else(|| bad("malformed header"))?;
            kv.insert(k, v);
        }
        let get = |k: &str| kv.get(k).copied().ok_or_else(|| bad(&format!("missing {k}")));
        let dim: usize = get("dim")?.parse().map_err(|_| bad("dim"))?;
        let rows: usize = get("rows")?.parse().map_err(|_| bad("rows"))?;
        let hyper = FmHyper {
            dim,
            learning_rate: get("learning_rate")?.parse().map_err(|_| bad("learning_rate"))?,
            l2: get("l2")?.parse().map_err(|_| bad("l2"))?,
            seed: get("seed")?.parse().map_err(|_| bad("seed"))?,
        };
        let mut weights = Vec::with_capacity(rows * dim);
        for (n, line) in lines.enumerate() {
            let (id, vals) = line.split_once('\t').ok_or_else(|| bad("malformed row"))?;
            if id.parse::<usize>().ok() != Some(n) {
                return Err(bad("rows out of order"));
            }
            let before = weights.len();
            for v in vals.split(' ') {
                weights.push(v.parse::<f64>().map_err(|_| bad("non-numeric weight"))?);
            }
            if weights.len() - before != dim {
                return Err(bad("row has wrong width"));
            }
        }
        if weights.len() != rows * dim {
            return Err(bad("row count mismatch"));
        }
        Ok((Self { dim, rows, weights }, hyper, fingerprint))
    }
}

/// Probability that a random positive outscores a random negative, ties
/// counted as one half. Computed from ranks in O((n+m) log(n+m)).
pub fn auc(positive_scores: &[f64], negative_scores: &[f64]) -> Result<f64, FmError> {
    if positive_scores.is_empty() {
        return Err(FmError::UndefinedAuc("positive"));
    }
    if negative_scores.is_empty() {
        return Err(FmError::UndefinedAuc("negative"));
    }
    let mut all: Vec<(f64, bool)> = positive_scores
        .iter()
        .map(|&s| (s, true))
        .chain(negative_scores.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    // midranks (1-based) over tied groups
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum_pos += mid * all[i..=j].iter().filter(|x| x.1).count() as f64;
        i = j + 1;
    }
    let n = positive_scores.len() as f64;
    let m = negative_scores.len() as f64;
    Ok((rank_sum_pos - n * (n + 1.0) / 2.0) / (n * m))
}

impl FmModel {
    /// AUC of attribute scores for one user context.
    pub fn attribute_auc(&self, ctx: &PreferenceContext, positives: &[NodeId], negatives: &[NodeId]) -> Result<f64, FmError> {
        let pos = self.score_many(ctx, positives)?;
        let neg = self.score_many(ctx, negatives)?;
        auc(&pos, &neg)
    }

    pub fn item_auc(&self, ctx: &PreferenceContext, positives: &[NodeId], negatives: &[NodeId]) -> Result<f64, FmError> {
        self.attribute_auc(ctx, positives, negatives)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn model_from(rows: &[&[f64]]) -> FmModel {
        let dim = rows[0].len();
        let mut m = FmModel::zeros(rows.len(), dim);
        for (i, r) in rows.iter().enumerate() {
            m.embedding_mut(NodeId(i as u32)).unwrap().copy_from_slice(r);
        }
        m
    }

    #[test]
    fn zero_model_scores_zero() {
        let m = FmModel::zeros(4, 3);
        let ctx = PreferenceContext::with_accepted(NodeId(0), [NodeId(2)]);
        assert_eq!(m.score_item(&ctx, NodeId(1)).unwrap(), 0.0);
        assert_eq!(m.attr_probability(&ctx, NodeId(3)).unwrap(), 0.5);
    }

    #[test]
    fn hand_computed_scores() {
        // u=(1,0), i=(2,0), p=(0,3)
        let m = model_from(&[&[1.0, 0.0], &[2.0, 0.0], &[0.0, 3.0]]);
        let ctx = PreferenceContext::with_accepted(NodeId(0), [NodeId(2)]);
        assert_eq!(m.score_item(&ctx, NodeId(1)).unwrap(), 2.0);
        // u=(1,1), p=(1,0), P={(0,2)}
        let m = model_from(&[&[1.0, 1.0], &[1.0, 0.0], &[0.0, 2.0]]);
        let ctx = PreferenceContext::with_accepted(NodeId(0), [NodeId(2)]);
        assert_eq!(m.score_attribute(&ctx, NodeId(1)).unwrap(), 1.0);
        assert_eq!(m.score_attribute(&PreferenceContext::new(NodeId(0)), NodeId(1)).unwrap(), 1.0);
        // self term: p in P contributes p·p
        let ctx = PreferenceContext::with_accepted(NodeId(0), [NodeId(1)]);
        assert_eq!(m.score_attribute(&ctx, NodeId(1)).unwrap(), 1.0 + 1.0);
    }

    #[test]
    fn orthogonal_attribute_leaves_item_score() {
        let m = model_from(&[&[1.0, 0.5], &[2.0, 0.0], &[0.0, 3.0]]);
        let base = m.score_item(&PreferenceContext::new(NodeId(0)), NodeId(1)).unwrap();
        let with = m.score_item(&PreferenceContext::with_accepted(NodeId(0), [NodeId(2)]), NodeId(1)).unwrap();
        assert_eq!(base, with);
    }

    #[test]
    fn unknown_ids() {
        let m = FmModel::zeros(2, 2);
        assert_eq!(m.score_item(&PreferenceContext::new(NodeId(0)), NodeId(5)), Err(FmError::NotFound(NodeId(5))));
        assert_eq!(m.rank_items(&PreferenceContext::new(NodeId(0)), &BTreeSet::new(), 3), Err(FmError::EmptyCandidates));
    }

    #[test]
    fn probability_matches_logistic_and_is_monotone() {
        let m = FmModel::with_stdev(10, 6, 3, 1.0);
        let ctx = PreferenceContext::with_accepted(NodeId(0), [NodeId(4), NodeId(5)]);
        for p in 1..10 {
            let s = m.score_attribute(&ctx, NodeId(p)).unwrap();
            let y = m.attr_probability(&ctx, NodeId(p)).unwrap();
            assert!((y - 1.0 / (1.0 + (-s).exp())).abs() <= 1e-12);
        }
        let mut last = 0.0;
        for k in -40..40 {
            let y = sigmoid(k as f64);
            assert!(y > last || y == 1.0);
            last = y;
        }
    }

    #[test]
    fn equal_scores_give_ln2() {
        let m = FmModel::zeros(4, 3);
        let ctx = PreferenceContext::new(NodeId(0));
        let t = ItemTriple { user: NodeId(0), pos: NodeId(1), neg: NodeId(2) };
        let loss = m.item_loss(&[(t, &ctx), (t, &ctx)], 0.0).unwrap();
        assert!((loss - 2.0 * std::f64::consts::LN_2).abs() < 1e-15);
        let a = AttrTriple { user: NodeId(0), pos: NodeId(3), neg: NodeId(2) };
        assert!((m.attr_loss(&[(a, &ctx)], 0.0).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn empty_batch_is_noop() {
        let mut m = FmModel::with_stdev(3, 2, 1, 0.1);
        let before = m.clone();
        let r = m.bpr_step_items(&[], &FmHyper::default()).unwrap();
        assert_eq!(r.loss, 0.0);
        assert_eq!(m, before);
    }

    /// Central finite differences of the total batch loss w.r.t. every
    /// touched weight, compared with the analytic step direction.
    #[allow(clippy::needless_range_loop)]
    fn check_gradients(items: bool, l2: f64, seed: u64) {
        let dim = 5;
        let mut m = FmModel::with_stdev(8, dim, seed, 0.7);
        let ctx_a = PreferenceContext::with_accepted(NodeId(0), [NodeId(5), NodeId(6)]);
        let ctx_b = PreferenceContext::with_accepted(NodeId(1), [NodeId(6)]);
        // second context scores an attribute that is also in its own context
        let triples = [(NodeId(0), NodeId(2), NodeId(3), &ctx_a), (NodeId(1), NodeId(6), NodeId(4), &ctx_b), (NodeId(0), NodeId(3), NodeId(7), &ctx_a)];
        let loss_of = |m: &FmModel| -> f64 {
            if items {
                let b: Vec<_> = triples.iter().map(|&(u, p, n, c)| (ItemTriple { user: u, pos: p, neg: n }, c)).collect();
                m.item_loss(&b, l2).unwrap()
            } else {
                let b: Vec<_> = triples.iter().map(|&(u, p, n, c)| (AttrTriple { user: u, pos: p, neg: n }, c)).collect();
                m.attr_loss(&b, l2).unwrap()
            }
        };
        let (_, grads) = m
            .bpr_loss_and_grad(triples.iter().map(|&(_, p, n, c)| (c, p, n)), l2)
            .unwrap();
        let eps = 1e-5;
        for (node, g) in &grads {
            for j in 0..dim {
                let orig = m.embedding(*node).unwrap()[j];
                m.embedding_mut(*node).unwrap()[j] = orig + eps;
                let up = loss_of(&m);
                m.embedding_mut(*node).unwrap()[j] = orig - eps;
                let down = loss_of(&m);
                m.embedding_mut(*node).unwrap()[j] = orig;
                let fd = (up - down) / (2.0 * eps);
                let rel = (fd - g[j]).abs() / fd.abs().max(g[j].abs()).max(1e-8);
                assert!(rel <= 1e-4, "node {node} dim {j}: fd {fd} analytic {}", g[j]);
            }
        }
    }

    #[test]
    fn item_gradients_match_finite_differences() {
        check_gradients(true, 0.0, 1);
        check_gradients(true, 0.05, 2);
    }

    #[test]
    fn attribute_gradients_match_finite_differences() {
        check_gradients(false, 0.0, 3);
        check_gradients(false, 0.05, 4);
    }

    #[test]
    fn repeated_steps_widen_the_gap() {
        let mut m = FmModel::with_stdev(4, 4, 9, 0.1);
        let hyper = FmHyper { dim: 4, learning_rate: 0.1, l2: 0.0, seed: 0 };
        let ctx = PreferenceContext::with_accepted(NodeId(0), [NodeId(3)]);
        let t = ItemTriple { user: NodeId(0), pos: NodeId(1), neg: NodeId(2) };
        let gap = |m: &FmModel| m.score_item(&ctx, NodeId(1)).unwrap() - m.score_item(&ctx, NodeId(2)).unwrap();
        let mut last = gap(&m);
        for _ in 0..50 {
            m.bpr_step_items(&[(t, &ctx)], &hyper).unwrap();
            let g = gap(&m);
            assert!(g > last);
            last = g;
        }
    }

    #[test]
    fn accepted_attribute_probability_rises() {
        let mut m = FmModel::with_stdev(4, 4, 10, 0.1);
        let hyper = FmHyper { dim: 4, learning_rate: 0.1, l2: 0.0, seed: 0 };
        let ctx = PreferenceContext::new(NodeId(0));
        let t = AttrTriple { user: NodeId(0), pos: NodeId(1), neg: NodeId(2) };
        let before = m.attr_probability(&ctx, NodeId(1)).unwrap();
        m.bpr_step_attrs(&[(t, &ctx)], &hyper).unwrap();
        assert!(m.attr_probability(&ctx, NodeId(1)).unwrap() > before);
    }

    #[test]
    fn rank_ties_by_id() {
        // a and b score 2, c scores 1
        let m = model_from(&[&[1.0], &[2.0], &[2.0], &[1.0]]);
        let ctx = PreferenceContext::new(NodeId(0));
        let cands = BTreeSet::from([NodeId(3), NodeId(2), NodeId(1)]);
        assert_eq!(m.rank_items(&ctx, &cands, 2).unwrap(), vec![NodeId(1), NodeId(2)]);
        assert_eq!(m.rank_items(&ctx, &BTreeSet::from([NodeId(3)]), 10).unwrap(), vec![NodeId(3)]);
    }

    #[test]
    fn rank_equals_full_sort() {
        let m = FmModel::with_stdev(101, 8, 5, 1.0);
        let ctx = PreferenceContext::with_accepted(NodeId(0), [NodeId(7)]);
        let cands: BTreeSet<NodeId> = (1..101).map(NodeId).collect();
        let ranked = m.rank_items(&ctx, &cands, 100).unwrap();
        let mut oracle: Vec<(f64, NodeId)> = cands.iter().map(|&i| (m.score_item(&ctx, i).unwrap(), i)).collect();
        oracle.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        assert_eq!(ranked, oracle.iter().map(|x| x.1).collect::<Vec<_>>());
        assert_eq!(m.rank_items(&ctx, &cands, 10).unwrap(), ranked[..10]);
    }

    fn brute_auc(pos: &[f64], neg: &[f64]) -> f64 {
        let mut wins = 0.0;
        for p in pos {
            for n in neg {
                if p > n {
                    wins += 1.0;
                } else if p == n {
                    wins += 0.5;
                }
            }
        }
        wins / (pos.len() * neg.len()) as f64
    }

    #[test]
    fn auc_edge_cases() {
        assert_eq!(auc(&[3.0, 4.0], &[1.0, 2.0]).unwrap(), 1.0);
        assert_eq!(auc(&[1.0, 1.0], &[1.0, 1.0, 1.0]).unwrap(), 0.5);
        assert_eq!(auc(&[], &[1.0]), Err(FmError::UndefinedAuc("positive")));
        assert_eq!(auc(&[1.0], &[]), Err(FmError::UndefinedAuc("negative")));
    }

    #[test]
    fn auc_equals_pairwise_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..50 {
            let n = rng.random_range(1..=50);
            let m = rng.random_range(1..=50);
            // coarse values force ties
            let pos: Vec<f64> = (0..n).map(|_| rng.random_range(0..10) as f64).collect();
            let neg: Vec<f64> = (0..m).map(|_| rng.random_range(0..10) as f64).collect();
            assert_eq!(auc(&pos, &neg).unwrap(), brute_auc(&pos, &neg));
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = FmModel::with_stdev(7, 3, 1, 0.3);
        let hyper = FmHyper { dim: 3, learning_rate: 0.01, l2: 1e-3, seed: 4 };
        let text = m.to_checkpoint(&hyper, "abc123");
        let (back, h, fp) = FmModel::from_checkpoint(&text).unwrap();
        assert_eq!(back, m);
        assert_eq!(h, hyper);
        assert_eq!(fp, "abc123");
        assert!(FmModel::from_checkpoint("garbage").is_err());
    }

    #[test]
    fn scoring_is_pure() {
        let m = FmModel::with_stdev(5, 3, 2, 0.5);
        let before = m.clone();
        let ctx = PreferenceContext::with_accepted(NodeId(0), [NodeId(3)]);
        let _ = m.rank_items(&ctx, &BTreeSet::from([NodeId(1), NodeId(2)]), 1).unwrap();
        let _ = m.attr_probability(&ctx, NodeId(4)).unwrap();
        assert_eq!(m, before);
    }

    proptest! {
        #[test]
        fn auc_invariant_under_monotone_transform(
            pos in proptest::collection::vec(-5.0f64..5.0, 1..30),
            neg in proptest::collection::vec(-5.0f64..5.0, 1..30),
        ) {
            let a = auc(&pos, &neg).unwrap();
            let t = |v: &[f64]| v.iter().map(|x| 2.0 * x + 1.0).collect::<Vec<_>>();
            let b = auc(&t(&pos), &t(&neg)).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&a));
        }
    }
}
