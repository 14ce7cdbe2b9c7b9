//! Shared memory units and the per-session memory pool.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type EventId = u64;
pub type SummaryId = u64;

/// Inclusive range of turn indices within a source dialogue.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TurnRange {
    pub start: usize,
    pub end: usize,
}

impl TurnRange {
    pub fn new(start: usize, end: usize) -> Result<Self> {
        if start > end {
            return Err(Error::contract(format!(
                "turn range start {start} exceeds end {end}"
            )));
        }
        Ok(Self { start, end })
    }

    #[allow(clippy::len_without_is_empty)]
    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn contains(&self, turn: usize) -> bool {
        (self.start..=self.end).contains(&turn)
    }
}

/// Level-2 memory: the verbatim passage of one dialogue event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventUnit {
    pub event_id: EventId,
    pub dialogue_id: String,
    pub passage: String,
    pub time_label: String,
    pub turn_range: TurnRange,
}

/// Level-1 memory: one key sentence distilled from an event, with its
/// embedding. Many summaries may point at the same event.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryUnit {
    pub summary_id: SummaryId,
    pub event_id: EventId,
    pub text: String,
    pub embedding: Vec<f32>,
}

const TIME_PREFIX: &str = "dialogue time: ";

/// Stored form of a key sentence: the event's time label is prefixed so the
/// sentence carries its own temporal anchor into any prompt.
pub fn stamp_key_sentence(time_label: &str, sentence: &str) -> String {
    format!("{TIME_PREFIX}{time_label}, {sentence}")
}

/// Inverse of [`stamp_key_sentence`]; returns `text` unchanged when it does
/// not carry the given time stamp.
pub fn unstamp_key_sentence<'a>(time_label: &str, text: &'a str) -> &'a str {
    text.strip_prefix(TIME_PREFIX)
        .and_then(|rest| rest.strip_prefix(time_label))
        .and_then(|rest| rest.strip_prefix(", "))
        .unwrap_or(text)
}

/// Outcome code of the light generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum AnswerStatus {
    Answered,
    Escalate,
}

impl AnswerStatus {
    /// Maps the generator's `finished` code. Only 0 and 2 are defined.
    pub fn from_finished(code: i64) -> Option<Self> {
        match code {
            0 => Some(AnswerStatus::Answered),
            2 => Some(AnswerStatus::Escalate),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolEntry {
    pub iteration: usize,
    pub query: String,
    pub answer: String,
}

/// Intermediate answers accumulated across reflection iterations.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryPool {
    entries: Vec<PoolEntry>,
}

impl MemoryPool {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[PoolEntry] {
        &self.entries
    }

    /// Appends the answer of iteration `iteration`, which must be the next
    /// index in sequence.
    pub fn append(
        &mut self,
        iteration: usize,
        query: impl Into<String>,
        answer: impl Into<String>,
    ) -> Result<()> {
        if iteration != self.entries.len() {
            return Err(Error::contract(format!(
                "pool append for iteration {iteration} but pool holds {} entries",
                self.entries.len()
            )));
        }
        self.entries.push(PoolEntry {
            iteration,
            query: query.into(),
            answer: answer.into(),
        });
        Ok(())
    }

    /// One line per entry, in insertion order. Empty pool renders as "".
    pub fn render(&self) -> String {
        self.entries
            .iter()
            .map(|e| {
                format!(
                    "Previous finding {}: Q: {} A: {}",
                    e.iteration, e.query, e.answer
                )
            })
            .collect::<Vec<_>>()
            .join("\n")
    }
}
