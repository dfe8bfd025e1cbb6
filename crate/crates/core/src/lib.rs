//! Provenance-aware agent memory with dependency-consistent deletion, a
//! hash-chained audit log, hybrid retrieval with a blocklist enforced at the
//! search boundary, and a small parameter-unlearning stage that runs after
//! the memory side has been cleaned.
//!
//! The [`store::MemoryStore`] is the entry point for the memory side and
//! [`protocol`] ties both sides together.

pub mod audit;
pub mod blocklist;
pub mod config;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod graph;
pub mod protocol;
pub mod retrieval;
pub mod store;
pub mod text;
pub mod unlearn;

pub use audit::{AuditLog, AuditOp, AuditRecord, Digest, Verification};
pub use blocklist::Blocklist;
pub use config::Config;
pub use error::{Error, Result};
pub use graph::{DependencyEdge, ForgetRequest, Layer, MemoryGraph, MemoryNode, NodeId, NodeStatus, PruneReport};
pub use retrieval::{EmbeddingProvider, HashEmbedder, HybridQuery, ScoredHit, VectorIndex};
pub use protocol::{run_sbu, Agent, SbuMode};
pub use store::{MemoryStore, StoreLock};
