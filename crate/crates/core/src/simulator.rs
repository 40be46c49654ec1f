//! Rule-based simulated user built from a held-out interaction.

use std::collections::BTreeSet;

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::graph::{GraphError, HeteroGraph, NodeId, NodeKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Response {
    Accept,
    Reject,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SimulatedUser {
    pub user: NodeId,
    pub target: NodeId,
    /// Attributes of the target item.
    pub attributes: BTreeSet<NodeId>,
    attribute_ids: Vec<NodeId>,
}

impl SimulatedUser {
    pub fn new(graph: &HeteroGraph, user: NodeId, target: NodeId) -> Result<Self, GraphError> {
        graph.expect_kind(target, NodeKind::Item)?;
        let attribute_ids = graph.attributes_of(target).to_vec();
        Ok(Self { user, target, attributes: attribute_ids.iter().copied().collect(), attribute_ids })
    }

    /// Accept iff the attribute belongs to the target item.
    pub fn respond_attribute(&self, graph: &HeteroGraph, p: NodeId) -> Result<Response, GraphError> {
        graph.expect_kind(p, NodeKind::Attribute)?;
        Ok(if self.attributes.contains(&p) { Response::Accept } else { Response::Reject })
    }

    /// Accept iff the target item is in the list.
    pub fn respond_recommendation(&self, items: &[NodeId]) -> Response {
        if items.contains(&self.target) {
            Response::Accept
        } else {
            Response::Reject
        }
    }

    /// The attribute the user volunteers at the start: uniform over the
    /// target's attributes, `None` if it has none.
    pub fn seed_attribute<R: Rng>(&self, rng: &mut R) -> Option<NodeId> {
        self.attribute_ids.choose(rng).copied()
    }
}
