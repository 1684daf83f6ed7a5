//! Research-quality scoring harness for chat-completion LLMs.
//!
//! The crate covers the whole batch pipeline: article ingestion and gold
//! standards ([`corpus`]), prompt construction ([`promptgen`]), endpoint
//! execution with caching ([`gateway`]), report parsing ([`extract`]), rank
//! statistics ([`stats`]), score fusion ([`fusion`]), two-corpus term
//! comparison ([`wata`]), violin summaries ([`violin`]) and the orchestrator
//! that ties them together ([`pipeline`]). [`demo`] writes a synthetic
//! dataset for offline runs.

pub mod corpus;
pub mod demo;
pub mod extract;
pub mod fusion;
pub mod gateway;
pub mod io;
pub mod pipeline;
pub mod promptgen;
pub mod report;
pub mod seed;
pub mod stats;
pub mod violin;
pub mod wata;

pub use corpus::{Article, ArticleSet, FewShotPool, GoldKind, GoldStandard};
pub use extract::{Flag, ParsedScore, ScoreRecord};
pub use gateway::{CompletionTask, ModelConfig, RawRecord, Strategy, TaskKey};
pub use stats::{ColumnId, CorrelationResult, ScoreMatrix};
