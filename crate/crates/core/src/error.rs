use std::path::PathBuf;

use crate::graph::{Layer, NodeId};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("unknown node id {0}")]
    UnknownNode(NodeId),

    #[error("parent {0} is not active")]
    InactiveParent(NodeId),

    #[error("edge {parent} -> {child} would create a cycle")]
    Cycle { parent: NodeId, child: NodeId },

    #[error("edge from {parent_layer:?} into {child_layer:?} is not a derivation edge")]
    InvalidEdge { parent_layer: Layer, child_layer: Layer },

    #[error("{0:?} nodes must be derived from at least one parent")]
    MissingParents(Layer),

    #[error("target {0} is not an episodic memory")]
    NotEpisodic(NodeId),

    #[error("target {0} must be blocked before it is pruned")]
    NotBlocked(NodeId),

    #[error("content matches a forgotten memory and cannot be written")]
    ContentBlocked,

    #[error("index has no entry for node {0}")]
    NotIndexed(NodeId),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("empty {0}")]
    Empty(&'static str),

    #[error("non-finite loss at step {step}")]
    NonFinite { step: usize },

    #[error("malformed {what} at line {line}: {reason}")]
    Malformed { what: &'static str, line: usize, reason: String },

    #[error("store directory {0} is locked by another process")]
    Locked(PathBuf),

    #[error("injected fault after audit append")]
    InjectedFault,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
