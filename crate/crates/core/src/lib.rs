//! Self-evolving search over ML pipeline candidates.
//!
//! An [`engine::Evolution`] grows an [`model::EvolutionGraph`] one node at a
//! time. Each node is produced by LLM operators ([`operators`]), checked and
//! run in a [`sandbox`], and recorded in an append-only [`journal`] from which
//! the whole run can be replayed or resumed. [`strategy`] decides which node
//! to expand next; [`report`] renders the tree and the token ledger.

pub mod cli;
pub mod clock;
pub mod config;
pub mod engine;
pub mod fixtures;
pub mod gateway;
pub mod journal;
pub mod model;
pub mod operators;
pub mod report;
pub mod sandbox;
pub mod strategy;

pub use engine::{EngineConfig, EngineError, Evolution, ExpansionPolicy, RunBudget, TaskSpec, TriggerEvent};
pub use journal::{Journal, JournalEvent, RunOutcome, StopReason};
pub use model::{EvolutionGraph, MetricSpecs, Node, NodeId, NodeStatus, TokenUsage};
pub use operators::{CompletionBackend, Operators};
pub use sandbox::Sandbox;
pub use strategy::{Expansion, StrategyConfig};
