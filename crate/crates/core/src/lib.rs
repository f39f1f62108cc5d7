//! Entity alignment between two knowledge graphs from noisy pseudo-labels.
//!
//! The crate implements an iterative alignment loop: score source entities by
//! uncertainty and pick the most informative ones under a query budget
//! ([`select`]), ask an annotator backend for their counterparts
//! ([`annotate`]), refine the accumulated noisy labels by probabilistic
//! reasoning over the graph structure ([`refine`] on top of [`reasoning`]),
//! train an embedding matcher on the refined labels ([`matcher`]), and feed
//! the matcher's confident pairs back into the reasoning state for the next
//! round ([`pipeline`]).
//!
//! Graph loading, indexing, and relation functionality live in [`kg`].

pub mod annotate;
pub mod kg;
pub mod matcher;
pub mod pipeline;
pub mod reasoning;
pub mod refine;
pub mod select;

// Re-exported because public interfaces (score dumps, reports) speak its
// error type.
pub use csv;

pub use kg::{EntityId, KgPair, KnowledgeGraph, RelationId, Triple};
pub use reasoning::{AlignmentState, ReasoningConfig};
pub use refine::{Provenance, PseudoLabel, PseudoLabelSet, RefinerConfig};
