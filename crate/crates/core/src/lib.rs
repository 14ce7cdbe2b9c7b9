//! Two-tier long-term memory for conversational agents.
//!
//! Dialogue is stored twice: as short key-sentence summaries (cheap to
//! search) and as raw event passages (complete detail). Queries are answered
//! from summaries first; when the light generator reports the summaries are
//! not enough, the engine runs LLM self-retrieval over a wider candidate set
//! and answers from the linked raw passages. A reflection step may rewrite
//! the question and loop.

pub mod cli;
pub mod config;
pub mod embedding;
pub mod engine;
pub mod error;
pub mod eval;
mod http;
pub mod index;
pub mod ingest;
pub mod ledger;
pub mod llm;
pub mod model;
pub mod prompts;
pub mod store;
pub mod trace;

pub use config::Config;
pub use embedding::{Embedder, FallbackEmbedder, RemoteEmbedder};
pub use engine::{Answer, Engine, EngineParams, SessionError};
pub use error::{Error, Result};
pub use http::RetryPolicy;
pub use index::{Hit, VectorIndex};
pub use ledger::{ModuleTag, TokenLedger, Usage};
pub use llm::{LlmClient, ScriptedPlaybook};
pub use store::MemoryStore;
