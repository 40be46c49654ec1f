//! Heterogeneous knowledge graph: users, items, attributes and external
//! entities joined by typed edges.
//!
//! The graph is built once from descriptor streams and is read-only
//! afterwards. Traversal treats every edge as undirected and neighbour
//! lists are kept sorted by ascending id so that anything iterating them
//! (samplers, training loops) is reproducible.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Dense node identifier, `0..node_count()`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u32);

impl NodeId {
    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    User,
    Item,
    Attribute,
    Entity,
}

impl NodeKind {
    pub fn as_str(self) -> &'static str {
        match self {
            NodeKind::User => "user",
            NodeKind::Item => "item",
            NodeKind::Attribute => "attribute",
            NodeKind::Entity => "entity",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "user" => Some(NodeKind::User),
            "item" => Some(NodeKind::Item),
            "attribute" => Some(NodeKind::Attribute),
            "entity" => Some(NodeKind::Entity),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeKind {
    /// user <-> item
    Interact,
    /// item <-> attribute
    HasAttribute,
    /// labelled relation towards an entity or attribute
    External,
}

impl EdgeKind {
    fn slot(self) -> usize {
        match self {
            EdgeKind::Interact => 0,
            EdgeKind::HasAttribute => 1,
            EdgeKind::External => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NodeDescriptor {
    pub id: NodeId,
    pub kind: NodeKind,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EdgeDescriptor {
    pub head: NodeId,
    pub tail: NodeId,
    pub kind: EdgeKind,
    /// Relation label for [`EdgeKind::External`] edges.
    pub label: Option<String>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum GraphError {
    #[error("node {id} declared twice")]
    DuplicateNode { id: NodeId },
    #[error("node ids are not dense: {count} nodes declared but id {id} is out of range")]
    SparseIds { id: NodeId, count: usize },
    #[error("edge #{index} ({head} -> {tail}) references an undeclared node")]
    DanglingEdge { index: usize, head: NodeId, tail: NodeId },
    #[error("edge #{index}: {kind:?} cannot join {head_kind:?} and {tail_kind:?}")]
    KindViolation {
        index: usize,
        kind: EdgeKind,
        head_kind: NodeKind,
        tail_kind: NodeKind,
    },
    #[error("node {0} not found")]
    NotFound(NodeId),
    #[error("node {id} is a {actual:?}, expected {expected:?}")]
    WrongKind {
        id: NodeId,
        expected: NodeKind,
        actual: NodeKind,
    },
}

/// External relation kept as payload on the edge list.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelledEdge {
    pub head: NodeId,
    pub tail: NodeId,
    pub label: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HeteroGraph {
    kinds: Vec<NodeKind>,
    /// `adjacency[slot][node]`, one table per edge kind.
    adjacency: [Vec<Vec<NodeId>>; 3],
    merged: Vec<Vec<NodeId>>,
    external: Vec<LabelledEdge>,
    users: Vec<NodeId>,
    items: Vec<NodeId>,
    attributes: Vec<NodeId>,
    entities: Vec<NodeId>,
}

fn edge_allowed(kind: EdgeKind, a: NodeKind, b: NodeKind) -> bool {
    use NodeKind::*;
    match kind {
        EdgeKind::Interact => matches!((a, b), (User, Item) | (Item, User)),
        EdgeKind::HasAttribute => matches!((a, b), (Item, Attribute) | (Attribute, Item)),
        EdgeKind::External => matches!(b, Entity | Attribute) || matches!(a, Entity | Attribute),
    }
}

impl HeteroGraph {
    pub fn empty() -> Self {
        Self::load(std::iter::empty(), std::iter::empty()).expect("empty graph is valid")
    }

    /// Build and seal a graph from descriptor streams.
    pub fn load<N, E>(nodes: N, edges: E) -> Result<Self, GraphError>
    where
        N: IntoIterator<Item = NodeDescriptor>,
        E: IntoIterator<Item = EdgeDescriptor>,
    {
        let nodes: Vec<NodeDescriptor> = nodes.into_iter().collect();
        let count = nodes.len();
        let mut kinds: Vec<Option<NodeKind>> = vec![None; count];
        for d in &nodes {
            let slot = kinds
                .get_mut(d.id.index())
                .ok_or(GraphError::SparseIds { id: d.id, count })?;
            if slot.is_some() {
                return Err(GraphError::DuplicateNode { id: d.id });
            }
            *slot = Some(d.kind);
        }
        // every slot is filled: `count` distinct ids all below `count`
        let kinds: Vec<NodeKind> = kinds.into_iter().map(|k| k.unwrap()).collect();

        let mut sets: [Vec<BTreeSet<NodeId>>; 3] = [
            vec![BTreeSet::new(); count],
            vec![BTreeSet::new(); count],
            vec![BTreeSet::new(); count],
        ];
        let mut external = Vec::new();
        for (index, e) in edges.into_iter().enumerate() {
            let (Some(&hk), Some(&tk)) = (kinds.get(e.head.index()), kinds.get(e.tail.index())) else {
                return Err(GraphError::DanglingEdge { index, head: e.head, tail: e.tail });
            };
            if !edge_allowed(e.kind, hk, tk) {
                return Err(GraphError::KindViolation {
                    index,
                    kind: e.kind,
                    head_kind: hk,
                    tail_kind: tk,
                });
            }
            let slot = e.kind.slot();
            sets[slot][e.head.index()].insert(e.tail);
            sets[slot][e.tail.index()].insert(e.head);
            if e.kind == EdgeKind::External {
                external.push(LabelledEdge {
                    head: e.head,
                    tail: e.tail,
                    label: e.label.unwrap_or_default(),
                });
            }
        }

        let merged = (0..count)
            .map(|n| {
                let mut all: BTreeSet<NodeId> = BTreeSet::new();
                for s in &sets {
                    all.extend(s[n].iter().copied());
                }
                all.into_iter().collect()
            })
            .collect();
        let adjacency = sets.map(|per_node| {
            per_node
                .into_iter()
                .map(|s| s.into_iter().collect::<Vec<_>>())
                .collect::<Vec<_>>()
        });

        let by_kind = |k: NodeKind| -> Vec<NodeId> {
            kinds
                .iter()
                .enumerate()
                .filter(|(_, &kind)| kind == k)
                .map(|(i, _)| NodeId(i as u32))
                .collect()
        };
        Ok(Self {
            users: by_kind(NodeKind::User),
            items: by_kind(NodeKind::Item),
            attributes: by_kind(NodeKind::Attribute),
            entities: by_kind(NodeKind::Entity),
            kinds,
            adjacency,
            merged,
            external,
        })
    }

    pub fn node_count(&self) -> usize {
        self.kinds.len()
    }

    pub fn edge_count(&self) -> usize {
        self.adjacency
            .iter()
            .map(|t| t.iter().map(Vec::len).sum::<usize>())
            .sum::<usize>()
            / 2
    }

    pub fn kind(&self, n: NodeId) -> Result<NodeKind, GraphError> {
        self.kinds.get(n.index()).copied().ok_or(GraphError::NotFound(n))
    }

    pub fn expect_kind(&self, n: NodeId, expected: NodeKind) -> Result<(), GraphError> {
        let actual = self.kind(n)?;
        if actual == expected {
            Ok(())
        } else {
            Err(GraphError::WrongKind { id: n, expected, actual })
        }
    }

    pub fn users(&self) -> &[NodeId] {
        &self.users
    }

    pub fn items(&self) -> &[NodeId] {
        &self.items
    }

    pub fn attributes(&self) -> &[NodeId] {
        &self.attributes
    }

    pub fn entities(&self) -> &[NodeId] {
        &self.entities
    }

    pub fn external_edges(&self) -> &[LabelledEdge] {
        &self.external
    }

    /// Neighbours in ascending id order, optionally restricted to one edge kind.
    pub fn neighbors(&self, n: NodeId, kind: Option<EdgeKind>) -> Result<&[NodeId], GraphError> {
        if n.index() >= self.kinds.len() {
            return Err(GraphError::NotFound(n));
        }
        Ok(match kind {
            Some(k) => &self.adjacency[k.slot()][n.index()],
            None => &self.merged[n.index()],
        })
    }

    pub fn degree(&self, n: NodeId) -> Result<usize, GraphError> {
        self.neighbors(n, None).map(<[NodeId]>::len)
    }

    /// Attribute set of an item (empty for other kinds).
    pub fn attributes_of(&self, item: NodeId) -> &[NodeId] {
        self.adjacency[EdgeKind::HasAttribute.slot()]
            .get(item.index())
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    /// Items carrying an attribute.
    pub fn items_with(&self, attribute: NodeId) -> &[NodeId] {
        self.attributes_of(attribute)
    }

    pub fn has_attribute(&self, item: NodeId, attribute: NodeId) -> bool {
        self.attributes_of(item).binary_search(&attribute).is_ok()
    }

    /// Items reachable from `item` through exactly one shared attribute,
    /// excluding `item` itself.
    pub fn two_hop_items(&self, item: NodeId) -> Result<BTreeSet<NodeId>, GraphError> {
        self.expect_kind(item, NodeKind::Item)?;
        let mut out = BTreeSet::new();
        for &p in self.attributes_of(item) {
            out.extend(self.items_with(p).iter().copied().filter(|&j| j != item));
        }
        Ok(out)
    }
}
