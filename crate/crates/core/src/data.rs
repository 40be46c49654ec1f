//! Dataset ingestion, splitting, pairwise training sets and the synthetic
//! generator.
//!
//! File formats (UTF-8, newline terminated, `#` lines ignored):
//!
//! * interactions: `user_id<TAB>item_id`
//! * triplets:     `head_id<TAB>relation_label<TAB>tail_id`
//! * id map:       `external_id<TAB>internal_int<TAB>kind`
//!
//! The `has_attribute` relation declares an item/attribute pair. Every other
//! relation is an external edge; its tail becomes an entity unless it is
//! already known, and its head must be a node declared somewhere else in
//! the dataset.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gumbel};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{EdgeDescriptor, EdgeKind, HeteroGraph, NodeDescriptor, NodeId, NodeKind};

pub const HAS_ATTRIBUTE: &str = "has_attribute";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{file}:{line}: {message}")]
    Malformed { file: String, line: usize, message: String },
    #[error("{file}:{line}: unknown id `{id}`")]
    UnknownId { file: String, line: usize, id: String },
    #[error("{file}:{line}: `{id}` is a {existing:?} but is used as a {requested:?}")]
    KindConflict {
        file: String,
        line: usize,
        id: String,
        existing: NodeKind,
        requested: NodeKind,
    },
    #[error("invalid parameters: {0}")]
    Parameter(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io { path: path.display().to_string(), source }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct InteractionRecord {
    pub user: NodeId,
    pub item: NodeId,
}

/// Bidirectional mapping between external string ids and dense node ids.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct IdMap {
    external: Vec<(String, NodeKind)>,
    index: HashMap<String, NodeId>,
}

impl IdMap {
    pub fn len(&self) -> usize {
        self.external.len()
    }

    pub fn is_empty(&self) -> bool {
        self.external.is_empty()
    }

    pub fn get(&self, external: &str) -> Option<NodeId> {
        self.index.get(external).copied()
    }

    pub fn external(&self, id: NodeId) -> Option<&str> {
        self.external.get(id.index()).map(|(s, _)| s.as_str())
    }

    pub fn kind(&self, id: NodeId) -> Option<NodeKind> {
        self.external.get(id.index()).map(|(_, k)| *k)
    }

    pub fn nodes(&self) -> impl Iterator<Item = NodeDescriptor> + '_ {
        self.external
            .iter()
            .enumerate()
            .map(|(i, (_, kind))| NodeDescriptor { id: NodeId(i as u32), kind: *kind })
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("# external_id\tinternal\tkind\n");
        for (i, (ext, kind)) in self.external.iter().enumerate() {
            let _ = writeln!(out, "{ext}\t{i}\t{}", kind.as_str());
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, DataError> {
        let mut map = IdMap::default();
        for (line, raw) in content_lines(text) {
            let cols: Vec<&str> = raw.split('\t').collect();
            let malformed = |message: &str| DataError::Malformed {
                file: "id-map".into(),
                line,
                message: message.into(),
            };
            if cols.len() != 3 {
                return Err(malformed("expected 3 tab-separated columns"));
            }
            let internal: usize = cols[1].parse().map_err(|_| malformed("internal id is not an integer"))?;
            let kind = NodeKind::parse(cols[2]).ok_or_else(|| malformed("unknown node kind"))?;
            if internal != map.len() {
                return Err(malformed("internal ids must be dense and in order"));
            }
            if map.index.insert(cols[0].to_string(), NodeId(internal as u32)).is_some() {
                return Err(malformed("duplicate external id"));
            }
            map.external.push((cols[0].to_string(), kind));
        }
        Ok(map)
    }
}

/// Parsed interactions and knowledge-graph triplets.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub id_map: IdMap,
    pub records: Vec<InteractionRecord>,
    /// Item/attribute and external edges from the triplet file.
    pub kg_edges: Vec<EdgeDescriptor>,
    pub warnings: Vec<String>,
}

impl Dataset {
    pub fn nodes(&self) -> Vec<NodeDescriptor> {
        self.id_map.nodes().collect()
    }

    /// Edge descriptors for the knowledge graph plus the given interactions.
    pub fn edges_with(&self, interactions: &[InteractionRecord]) -> Vec<EdgeDescriptor> {
        interactions
            .iter()
            .map(|r| EdgeDescriptor { head: r.user, tail: r.item, kind: EdgeKind::Interact, label: None })
            .chain(self.kg_edges.iter().cloned())
            .collect()
    }

    /// Graph over every node, all triplets and the given interactions.
    pub fn graph_with(&self, interactions: &[InteractionRecord]) -> HeteroGraph {
        HeteroGraph::load(self.nodes(), self.edges_with(interactions)).expect("dataset descriptors are consistent by construction")
    }
}

/// Non-empty, non-comment lines with 1-based line numbers.
fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r')))
        .filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'))
}

#[derive(Default)]
struct Declarations {
    order: Vec<(String, NodeKind)>,
    kinds: HashMap<String, NodeKind>,
}

impl Declarations {
    fn declare(&mut self, file: &str, line: usize, id: &str, kind: NodeKind) -> Result<(), DataError> {
        match self.kinds.get(id) {
            Some(&existing) if existing != kind => Err(DataError::KindConflict {
                file: file.into(),
                line,
                id: id.into(),
                existing,
                requested: kind,
            }),
            Some(_) => Ok(()),
            None => {
                self.kinds.insert(id.to_string(), kind);
                self.order.push((id.to_string(), kind));
                Ok(())
            }
        }
    }

    /// Kind-blocked dense ids: users, items, attributes, entities, each in
    /// order of first appearance.
    fn into_id_map(self) -> IdMap {
        let mut map = IdMap::default();
        for kind in [NodeKind::User, NodeKind::Item, NodeKind::Attribute, NodeKind::Entity] {
            for (ext, k) in self.order.iter().filter(|(_, k)| *k == kind) {
                map.index.insert(ext.clone(), NodeId(map.external.len() as u32));
                map.external.push((ext.clone(), *k));
            }
        }
        map
    }
}

/// Parse interaction and triplet tables that are already in memory.
pub fn parse_dataset(interactions: &str, triplets: &str) -> Result<Dataset, DataError> {
    const INTERACTIONS: &str = "interactions";
    const TRIPLETS: &str = "triplets";
    let mut decl = Declarations::default();
    let mut raw_records = Vec::new();
    for (line, raw) in content_lines(interactions) {
        let cols: Vec<&str> = raw.split('\t').collect();
        if cols.len() != 2 || cols.iter().any(|c| c.is_empty()) {
            return Err(DataError::Malformed {
                file: INTERACTIONS.into(),
                line,
                message: format!("expected `user<TAB>item`, got {raw:?}"),
            });
        }
        decl.declare(INTERACTIONS, line, cols[0], NodeKind::User)?;
        decl.declare(INTERACTIONS, line, cols[1], NodeKind::Item)?;
        raw_records.push((line, cols[0], cols[1]));
    }

    let mut raw_triplets = Vec::new();
    for (line, raw) in content_lines(triplets) {
        let cols: Vec<&str> = raw.split('\t').collect();
        if cols.len() != 3 || cols.iter().any(|c| c.is_empty()) {
            return Err(DataError::Malformed {
                file: TRIPLETS.into(),
                line,
                message: format!("expected `head<TAB>relation<TAB>tail`, got {raw:?}"),
            });
        }
        if cols[1] == HAS_ATTRIBUTE {
            decl.declare(TRIPLETS, line, cols[0], NodeKind::Item)?;
            decl.declare(TRIPLETS, line, cols[2], NodeKind::Attribute)?;
        }
        raw_triplets.push((line, cols[0], cols[1], cols[2]));
    }
    // external tails introduce entities
    for &(line, _, rel, tail) in &raw_triplets {
        if rel != HAS_ATTRIBUTE && !decl.kinds.contains_key(tail) {
            decl.declare(TRIPLETS, line, tail, NodeKind::Entity)?;
        }
    }
    for &(line, head, rel, _) in &raw_triplets {
        if rel != HAS_ATTRIBUTE && !decl.kinds.contains_key(head) {
            return Err(DataError::UnknownId { file: TRIPLETS.into(), line, id: head.into() });
        }
    }

    let id_map = decl.into_id_map();
    let id = |s: &str| id_map.get(s).expect("declared above");
    let mut warnings = Vec::new();
    let mut seen = BTreeSet::new();
    let mut records = Vec::with_capacity(raw_records.len());
    for (line, u, i) in raw_records {
        let rec = InteractionRecord { user: id(u), item: id(i) };
        if seen.insert(rec) {
            records.push(rec);
        } else {
            let msg = format!("{INTERACTIONS}:{line}: duplicate interaction {u}\t{i} dropped");
            log::warn!("{msg}");
            warnings.push(msg);
        }
    }
    let kg_edges = raw_triplets
        .into_iter()
        .map(|(_, head, rel, tail)| {
            if rel == HAS_ATTRIBUTE {
                EdgeDescriptor { head: id(head), tail: id(tail), kind: EdgeKind::HasAttribute, label: None }
            } else {
                EdgeDescriptor { head: id(head), tail: id(tail), kind: EdgeKind::External, label: Some(rel.to_string()) }
            }
        })
        .collect();
    Ok(Dataset { id_map, records, kg_edges, warnings })
}

pub fn load_dataset(interactions: &Path, triplets: &Path) -> Result<Dataset, DataError> {
    let inter = std::fs::read_to_string(interactions).map_err(io_err(interactions))?;
    let trip = std::fs::read_to_string(triplets).map_err(io_err(triplets))?;
    parse_dataset(&inter, &trip)
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<InteractionRecord>,
    pub valid: Vec<InteractionRecord>,
    pub test: Vec<InteractionRecord>,
}

/// Per-user 7:1:2 split. Users with fewer than three records keep
/// everything in train.
pub fn split_dataset(records: &[InteractionRecord], seed: u64) -> DatasetSplit {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut split = DatasetSplit::default();
    for (_, mut items) in group_by_user(records) {
        let n = items.len();
        if n < 3 {
            split.train.extend(items);
            continue;
        }
        items.shuffle(&mut rng);
        let n_test = (n as f64 * 0.2).round() as usize;
        let n_valid = (n as f64 * 0.1).round() as usize;
        let n_train = n - n_test - n_valid;
        split.train.extend_from_slice(&items[..n_train]);
        split.valid.extend_from_slice(&items[n_train..n_train + n_valid]);
        split.test.extend_from_slice(&items[n_train + n_valid..]);
    }
    split
}

fn group_by_user(records: &[InteractionRecord]) -> BTreeMap<NodeId, Vec<InteractionRecord>> {
    let mut by_user: BTreeMap<NodeId, Vec<InteractionRecord>> = BTreeMap::new();
    for r in records {
        by_user.entry(r.user).or_default().push(*r);
    }
    by_user
}

/// Positive item sets per user.
pub type UserItems = BTreeMap<NodeId, BTreeSet<NodeId>>;

pub fn positives_by_user<'a>(records: impl IntoIterator<Item = &'a InteractionRecord>) -> UserItems {
    let mut out = UserItems::new();
    for r in records {
        out.entry(r.user).or_default().insert(r.item);
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemTriple {
    pub user: NodeId,
    pub pos: NodeId,
    pub neg: NodeId,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttrTriple {
    pub user: NodeId,
    pub pos: NodeId,
    pub neg: NodeId,
}

#[derive(Clone, Debug, Default)]
pub struct PairwiseSets {
    pub items: Vec<ItemTriple>,
    pub attrs: Vec<AttrTriple>,
    pub warnings: Vec<String>,
}

/// Attributes of a user's positive items.
pub fn positive_attributes(graph: &HeteroGraph, positives: &BTreeSet<NodeId>) -> BTreeSet<NodeId> {
    positives.iter().flat_map(|&i| graph.attributes_of(i).iter().copied()).collect()
}

/// Offline pairwise sets over the training split: every training positive
/// is paired with `neg_per_pos` uniformly drawn non-positive items, and each
/// item triple yields one attribute triple.
pub fn build_pairwise_sets(split: &DatasetSplit, graph: &HeteroGraph, neg_per_pos: usize, seed: u64) -> PairwiseSets {
    let positives = positives_by_user(&split.train);
    pairwise_from_records(&split.train, &positives, graph, neg_per_pos, seed)
}

/// Held-out pairwise sets over the validation split; negatives avoid both
/// training and validation positives.
pub fn build_validation_sets(split: &DatasetSplit, graph: &HeteroGraph, neg_per_pos: usize, seed: u64) -> PairwiseSets {
    let positives = positives_by_user(split.train.iter().chain(&split.valid));
    pairwise_from_records(&split.valid, &positives, graph, neg_per_pos, seed ^ 0x05ee_d0f7_a11d)
}

pub fn pairwise_from_records(
    records: &[InteractionRecord],
    positives: &UserItems,
    graph: &HeteroGraph,
    neg_per_pos: usize,
    seed: u64,
) -> PairwiseSets {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = PairwiseSets::default();
    let all_attrs = graph.attributes();
    let empty = BTreeSet::new();
    let mut skipped = BTreeSet::new();
    for r in records {
        let pos_items = positives.get(&r.user).unwrap_or(&empty);
        let negatives: Vec<NodeId> = graph.items().iter().copied().filter(|i| !pos_items.contains(i)).collect();
        if negatives.is_empty() {
            if skipped.insert(r.user) {
                let msg = format!("user {} has interacted with every item; no negatives possible", r.user);
                log::warn!("{msg}");
                out.warnings.push(msg);
            }
            continue;
        }
        let pos_attrs = positive_attributes(graph, pos_items);
        for _ in 0..neg_per_pos {
            let neg = *negatives.choose(&mut rng).expect("non-empty");
            out.items.push(ItemTriple { user: r.user, pos: r.item, neg });

            let Some(&p_pos) = graph.attributes_of(r.item).choose(&mut rng) else {
                continue;
            };
            let from_neg: Vec<NodeId> = graph.attributes_of(neg).iter().copied().filter(|a| !pos_attrs.contains(a)).collect();
            let p_neg = if from_neg.is_empty() {
                let rest: Vec<NodeId> = all_attrs.iter().copied().filter(|a| !pos_attrs.contains(a)).collect();
                rest.choose(&mut rng).copied()
            } else {
                from_neg.choose(&mut rng).copied()
            };
            if let Some(p_neg) = p_neg {
                out.attrs.push(AttrTriple { user: r.user, pos: p_pos, neg: p_neg });
            }
        }
    }
    out
}

/// Parameters of the synthetic topic-structured dataset.
///
/// Attributes are grouped into topics of `topic_size`; the first attribute
/// of a topic is broad (carried by every item of that topic) and the rest
/// are specific. Each user prefers one topic and a few of its specific
/// attributes, and interacts with items sampled by preference affinity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_users: usize,
    pub n_items: usize,
    pub n_attrs: usize,
    pub attrs_per_item: usize,
    pub interactions_per_user: usize,
    pub seed: u64,
    pub topic_size: usize,
    /// Probability that a non-broad attribute slot is drawn from the
    /// item's own topic.
    pub topic_purity: f64,
    /// Softmax temperature for sampling a user's items from affinities.
    pub temperature: f64,
    /// Topics each user likes, with random relative weights.
    pub interests: usize,
}

impl SyntheticSpec {
    pub fn new(n_users: usize, n_items: usize, n_attrs: usize, attrs_per_item: usize, interactions_per_user: usize, seed: u64) -> Self {
        Self {
            n_users,
            n_items,
            n_attrs,
            attrs_per_item,
            interactions_per_user,
            seed,
            topic_size: 10,
            topic_purity: 0.85,
            temperature: 0.5,
            interests: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SyntheticFiles {
    pub interactions: String,
    pub triplets: String,
}

impl SyntheticFiles {
    pub fn write_to(&self, dir: &Path) -> Result<(), DataError> {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        let inter = dir.join("interactions.tsv");
        std::fs::write(&inter, &self.interactions).map_err(io_err(&inter))?;
        let trip = dir.join("triplets.tsv");
        std::fs::write(&trip, &self.triplets).map_err(io_err(&trip))?;
        Ok(())
    }
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticFiles, DataError> {
    let SyntheticSpec { n_users, n_items, n_attrs, attrs_per_item, interactions_per_user, seed, .. } = *spec;
    if n_users == 0 || n_items == 0 || n_attrs == 0 || attrs_per_item == 0 || interactions_per_user == 0 {
        return Err(DataError::Parameter("all counts must be at least 1".into()));
    }
    if attrs_per_item > n_attrs {
        return Err(DataError::Parameter(format!("attrs_per_item {attrs_per_item} exceeds n_attrs {n_attrs}")));
    }
    if interactions_per_user > n_items {
        return Err(DataError::Parameter(format!(
            "interactions_per_user {interactions_per_user} exceeds n_items {n_items}"
        )));
    }
    if n_items * attrs_per_item < n_attrs {
        return Err(DataError::Parameter("not enough attribute slots to cover every attribute".into()));
    }
    if spec.topic_size == 0 || !(0.0..=1.0).contains(&spec.topic_purity) || spec.temperature <= 0.0 || spec.interests == 0 {
        return Err(DataError::Parameter("topic_size >= 1, topic_purity in [0,1], temperature > 0, interests >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let topic_size = spec.topic_size.min(n_attrs);
    let n_topics = n_attrs.div_ceil(topic_size);
    let topic_of = |a: usize| a / topic_size;
    let topic_members = |t: usize| (t * topic_size)..((t + 1) * topic_size).min(n_attrs);

    // items
    let mut item_topic = Vec::with_capacity(n_items);
    let mut item_attrs: Vec<BTreeSet<usize>> = Vec::with_capacity(n_items);
    for _ in 0..n_items {
        let t = rng.random_range(0..n_topics);
        let members = topic_members(t);
        let mut attrs = BTreeSet::new();
        attrs.insert(members.start);
        let specifics: Vec<usize> = members.clone().skip(1).collect();
        while attrs.len() < attrs_per_item {
            let remaining: Vec<usize> = specifics.iter().copied().filter(|a| !attrs.contains(a)).collect();
            let a = if !remaining.is_empty() && rng.random_bool(spec.topic_purity) {
                *remaining.choose(&mut rng).unwrap()
            } else {
                rng.random_range(0..n_attrs)
            };
            attrs.insert(a);
        }
        item_topic.push(t);
        item_attrs.push(attrs);
    }
    // every attribute must be carried by at least one item
    let mut counts = vec![0usize; n_attrs];
    for attrs in &item_attrs {
        for &a in attrs {
            counts[a] += 1;
        }
    }
    for a in 0..n_attrs {
        if counts[a] > 0 {
            continue;
        }
        let mut candidates: Vec<usize> = (0..n_items).filter(|&j| item_topic[j] == topic_of(a)).collect();
        candidates.extend((0..n_items).filter(|&j| item_topic[j] != topic_of(a)));
        'find: for j in candidates {
            let donor = item_attrs[j].iter().copied().filter(|&b| counts[b] >= 2).max();
            if let Some(b) = donor {
                item_attrs[j].remove(&b);
                item_attrs[j].insert(a);
                counts[b] -= 1;
                counts[a] += 1;
                break 'find;
            }
        }
    }

    // users
    let gumbel = Gumbel::new(0.0, 1.0).expect("valid gumbel");
    let mut interactions = format!(
        "# synthetic users={n_users} items={n_items} attributes={n_attrs} attrs_per_item={attrs_per_item} seed={seed}\n"
    );
    let topics: Vec<usize> = (0..n_topics).collect();
    for u in 0..n_users {
        let liked: Vec<usize> = topics.choose_multiple(&mut rng, spec.interests.min(n_topics)).copied().collect();
        let mut topic_weight = vec![0.0f64; n_topics];
        for (k, &t) in liked.iter().enumerate() {
            // the first interest dominates, later ones are weaker
            topic_weight[t] = if k == 0 { 1.0 } else { 0.3 + 0.7 * rng.random::<f64>() };
        }
        let mut weight = vec![0.0f64; n_attrs];
        for (a, w) in weight.iter_mut().enumerate() {
            let tw = topic_weight[topic_of(a)];
            *w = if tw > 0.0 {
                if a == topic_members(topic_of(a)).start {
                    tw
                } else {
                    // peaked preferences over the topic's specific attributes
                    let x: f64 = rng.random();
                    tw * 2.0 * x * x * x
                }
            } else {
                0.1 * rng.random::<f64>()
            };
        }
        let mut keyed: Vec<(f64, usize)> = (0..n_items)
            .map(|j| {
                let affinity: f64 = item_attrs[j].iter().map(|&a| weight[a]).sum();
                (affinity / spec.temperature + gumbel.sample(&mut rng), j)
            })
            .collect();
        keyed.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        for &(_, j) in keyed.iter().take(interactions_per_user) {
            let _ = writeln!(interactions, "u{u}\ti{j}");
        }
    }
    let mut triplets = format!("# synthetic item-attribute triplets, topics={n_topics}\n");
    for (j, attrs) in item_attrs.iter().enumerate() {
        for a in attrs {
            let _ = writeln!(triplets, "i{j}\t{HAS_ATTRIBUTE}\ta{a}");
        }
    }
    Ok(SyntheticFiles { interactions, triplets })
}
