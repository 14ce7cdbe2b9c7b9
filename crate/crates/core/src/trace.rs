//! Per-session observability: what each iteration retrieved, which path it
//! took, and every chat exchange it made.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::llm::ChatExchange;
use crate::model::{AnswerStatus, EventId, SummaryId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PathTaken {
    #[serde(rename = "LIGHT")]
    Light,
    #[serde(rename = "LIGHT->DEEP")]
    LightThenDeep,
}

/// Degradations and fallbacks, recorded instead of failing the session.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TraceNote {
    /// Nothing indexed; the light path escalated without calling the model.
    EmptyIndex,
    /// Light generator output unusable twice; treated as an escalation.
    LightProtocolFailure { raw: String },
    /// Retriever output for a batch unusable twice; batch selected nothing.
    FilterProtocolFailure { batch: usize, raw: String },
    /// Retriever named ids that were not in its batch.
    FilterDroppedIds { batch: usize, ids: Vec<i64> },
    /// No batch selected anything; context came from the coarse top-k.
    DeepFallback { summary_ids: Vec<SummaryId> },
    /// Reflection output unusable twice; treated as done.
    ReflectProtocolFailure { raw: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReflectionRecord {
    pub done: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub new_question: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub index: usize,
    /// Query used for retrieval in this iteration.
    pub query: String,
    pub path: PathTaken,
    pub light_status: AnswerStatus,
    /// Light-path top-k, in similarity order.
    pub retrieved_summary_ids: Vec<SummaryId>,
    /// Deep-path coarse top-N, in similarity order.
    #[serde(default)]
    pub coarse_summary_ids: Vec<SummaryId>,
    #[serde(default)]
    pub selected_summary_ids: Vec<SummaryId>,
    #[serde(default)]
    pub backtracked_event_ids: Vec<EventId>,
    pub answer: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reflection: Option<ReflectionRecord>,
    #[serde(default)]
    pub notes: Vec<TraceNote>,
    #[serde(default)]
    pub exchanges: Vec<ChatExchange>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TraceFlag {
    MaxIterations,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SessionTrace {
    pub question: String,
    pub iterations: Vec<IterationRecord>,
    #[serde(default)]
    pub flags: Vec<TraceFlag>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub final_answer: Option<String>,
    /// Set when the session aborted; iterations hold what completed.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl SessionTrace {
    pub fn new(question: impl Into<String>) -> Self {
        Self {
            question: question.into(),
            ..Default::default()
        }
    }

    pub fn has_deep(&self) -> bool {
        self.iterations
            .iter()
            .any(|it| it.path == PathTaken::LightThenDeep)
    }

    pub fn paths(&self) -> Vec<PathTaken> {
        self.iterations.iter().map(|it| it.path).collect()
    }

    pub fn hit_max_iterations(&self) -> bool {
        self.flags.contains(&TraceFlag::MaxIterations)
    }

    pub fn exchanges(&self) -> impl Iterator<Item = &ChatExchange> {
        self.iterations.iter().flat_map(|it| it.exchanges.iter())
    }

    /// JSON form. Unless `full`, exchanges keep only their tag and usage so
    /// output stays small and diff-able.
    pub fn to_json(&self, full: bool) -> Value {
        let mut v = serde_json::to_value(self).expect("trace serializes");
        if !full {
            for it in v["iterations"].as_array_mut().into_iter().flatten() {
                for ex in it["exchanges"].as_array_mut().into_iter().flatten() {
                    let tag = ex["request"]["tag"].take();
                    let usage = ex["usage"].take();
                    let estimated = ex["estimated_usage"].take();
                    *ex = serde_json::json!({
                        "tag": tag,
                        "usage": usage,
                        "estimated_usage": estimated,
                    });
                }
            }
        }
        v
    }
}
