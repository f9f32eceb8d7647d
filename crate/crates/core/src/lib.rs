//! Natural-logic inference over the seven-relation calculus.
//!
//! The crate has two faces that share one algebra:
//!
//! - an **exact symbolic prover**: relation join and projection tables,
//!   polarity marking under a controlled grammar, and left-to-right
//!   aggregation of projected lexical relations into a sentence-level
//!   relation and a three-way NLI label;
//! - a **differentiable relaxation** of the same pipeline: a recurrent
//!   encoder with cross-sentence attention, a bilinear local-relation
//!   scorer with symmetric parameter sharing and hard constraints, soft
//!   projection of relation distributions, and memory-gated module-network
//!   aggregation, trained end-to-end with a built-in reverse-mode tape.
//!
//! Around the pipeline sit a controlled-grammar dataset generator with
//! gold per-step aggregation labels (1-hop and 2-hop), aggregation-path
//! precision/recall/F1 metrics, an upward-to-downward transfer harness,
//! and checkpointing.

pub mod aggregate;
pub mod dataset;
pub mod encoder;
mod error;
pub mod local;
pub mod metrics;
pub mod polarity;
pub mod prover;
pub mod relations;
pub mod tape;
pub mod train;

pub use error::{NatlogError, Result};
pub use relations::{NliLabel, Projectivity, Relation, RelationDistribution};
