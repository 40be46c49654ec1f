//! Conversational recommendation on a heterogeneous knowledge graph.

pub mod config;
pub mod data;
pub mod eval;
pub mod fm;
pub mod graph;
pub mod nn;
pub mod active;
pub mod negative;
pub mod pipeline;
pub mod policy;
pub mod session;
pub mod simulator;

pub use graph::{EdgeKind, HeteroGraph, NodeId, NodeKind};
