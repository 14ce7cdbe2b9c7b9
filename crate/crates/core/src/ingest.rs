//! Storage pipeline: dialogue → overlapping events → key sentences →
//! embedded, linked summaries.
//!
//! Work is split in two phases. [`prepare_dialogue`] makes every model and
//! embedding call without touching the store; [`commit`] writes the staged
//! records. A dialogue therefore lands in the store completely or not at all.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::embedding::Embedder;
use crate::error::{Error, Result};
use crate::ledger::{ModuleTag, TokenLedger};
use crate::llm::{extract_json, ChatRequest, LlmClient};
use crate::model::{stamp_key_sentence, EventId, TurnRange};
use crate::prompts;
use crate::store::{MemoryStore, NewEvent};

pub const DEFAULT_WINDOW: usize = 20;
pub const DEFAULT_OVERLAP: usize = 2;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub index: usize,
    pub speaker: String,
    pub time_label: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawDialogue {
    pub dialogue_id: String,
    pub turns: Vec<Turn>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CorpusTurn {
    speaker: String,
    #[serde(default)]
    time: String,
    text: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CorpusLine {
    dialogue_id: String,
    turns: Vec<CorpusTurn>,
}

impl RawDialogue {
    /// Builds a dialogue from (speaker, time, text) triples, numbering turns
    /// from 0.
    pub fn new<S: Into<String>>(
        dialogue_id: impl Into<String>,
        turns: impl IntoIterator<Item = (S, S, S)>,
    ) -> Result<Self> {
        let dialogue = RawDialogue {
            dialogue_id: dialogue_id.into(),
            turns: turns
                .into_iter()
                .enumerate()
                .map(|(index, (speaker, time, text))| Turn {
                    index,
                    speaker: speaker.into(),
                    time_label: time.into(),
                    text: text.into(),
                })
                .collect(),
        };
        dialogue.validate()?;
        Ok(dialogue)
    }

    /// Parses one corpus line: `{"dialogue_id": .., "turns": [{"speaker", "time", "text"}]}`.
    pub fn from_json_line(line: &str) -> Result<Self> {
        let parsed: CorpusLine = serde_json::from_str(line).map_err(|e| Error::InvalidDialogue {
            dialogue_id: "?".into(),
            reason: e.to_string(),
        })?;
        Self::new(
            parsed.dialogue_id,
            parsed.turns.into_iter().map(|t| (t.speaker, t.time, t.text)),
        )
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |reason: String| Error::InvalidDialogue {
            dialogue_id: self.dialogue_id.clone(),
            reason,
        };
        if self.dialogue_id.is_empty() {
            return Err(fail("empty dialogue id".into()));
        }
        for (i, t) in self.turns.iter().enumerate() {
            if t.index != i {
                return Err(fail(format!("turn {i} carries index {}", t.index)));
            }
            if t.speaker.trim().is_empty() {
                return Err(fail(format!("turn {i} has no speaker")));
            }
            if t.text.trim().is_empty() {
                return Err(fail(format!("turn {i} has no text")));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.turns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.turns.is_empty()
    }

    /// Speaker-labeled verbatim text of the turns in `range`.
    pub fn passage(&self, range: TurnRange) -> String {
        self.turns[range.start..=range.end]
            .iter()
            .map(|t| format!("{}: {}", t.speaker, t.text))
            .collect::<Vec<_>>()
            .join("\n")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SegmentMode {
    Window,
    Llm,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentationPlan {
    pub segments: Vec<TurnRange>,
    pub overlap_turns: usize,
    /// Why LLM boundaries were discarded in favor of sliding windows.
    pub fallback_reason: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SegmentOptions {
    pub mode: SegmentMode,
    pub window: usize,
    pub overlap_turns: usize,
}

impl Default for SegmentOptions {
    fn default() -> Self {
        Self {
            mode: SegmentMode::Window,
            window: DEFAULT_WINDOW,
            overlap_turns: DEFAULT_OVERLAP,
        }
    }
}

impl SegmentOptions {
    fn validate(&self) -> Result<()> {
        if self.window < 2 {
            return Err(Error::contract(format!("window {} is below 2", self.window)));
        }
        if self.overlap_turns >= self.window {
            return Err(Error::contract(format!(
                "overlap {} must be smaller than window {}",
                self.overlap_turns, self.window
            )));
        }
        Ok(())
    }
}

/// Sliding windows of `window` turns advancing by `window - overlap`. The
/// last window is cut short at the end of the dialogue.
pub fn window_segments(turns: usize, window: usize, overlap: usize) -> Vec<TurnRange> {
    let step = window - overlap;
    let mut out = Vec::new();
    if turns == 0 {
        return out;
    }
    let mut start = 0;
    loop {
        let end = (start + window - 1).min(turns - 1);
        out.push(TurnRange { start, end });
        if end == turns - 1 {
            break;
        }
        start += step;
    }
    out
}

/// Turns topic-start indices into segments, prepending `overlap` trailing
/// turns of each segment to the one after it.
pub fn boundary_segments(turns: usize, boundaries: &[usize], overlap: usize) -> Vec<TurnRange> {
    let mut starts = vec![0];
    starts.extend_from_slice(boundaries);
    starts
        .iter()
        .enumerate()
        .map(|(i, &s)| {
            let end = starts.get(i + 1).map_or(turns - 1, |next| next - 1);
            let start = if i == 0 { 0 } else { s.saturating_sub(overlap) };
            TurnRange { start, end }
        })
        .collect()
}

fn parse_boundaries(raw: &str, turns: usize) -> std::result::Result<Vec<usize>, String> {
    let value = extract_json(raw).map_err(|_| "no JSON in boundary response".to_string())?;
    let list = match &value {
        Value::Array(items) => items,
        Value::Object(obj) => obj
            .get("boundaries")
            .and_then(Value::as_array)
            .ok_or("boundary object lacks a boundaries array")?,
        _ => return Err("boundary response is neither a list nor an object".into()),
    };
    let mut out = Vec::with_capacity(list.len());
    for item in list {
        let b = item
            .as_u64()
            .ok_or_else(|| format!("boundary {item} is not a non-negative integer"))? as usize;
        if b == 0 || b >= turns {
            return Err(format!("boundary {b} outside 1..{turns}"));
        }
        if out.last().is_some_and(|prev| *prev >= b) {
            return Err(format!("boundary {b} does not increase"));
        }
        out.push(b);
    }
    Ok(out)
}

pub fn segment_dialogue(
    dialogue: &RawDialogue,
    options: SegmentOptions,
    client: Option<&LlmClient>,
    ledger: &mut TokenLedger,
) -> Result<SegmentationPlan> {
    options.validate()?;
    if dialogue.is_empty() {
        return Err(Error::EmptyInput("dialogue has no turns"));
    }
    let n = dialogue.len();
    let windowed = |reason: Option<String>| SegmentationPlan {
        segments: window_segments(n, options.window, options.overlap_turns),
        overlap_turns: options.overlap_turns,
        fallback_reason: reason,
    };
    if options.mode == SegmentMode::Window {
        return Ok(windowed(None));
    }
    let Some(client) = client else {
        return Ok(windowed(Some("no chat backend for LLM segmentation".into())));
    };
    let listing = dialogue
        .turns
        .iter()
        .map(|t| format!("[{}] {}: {}", t.index, t.speaker, t.text))
        .collect::<Vec<_>>()
        .join("\n");
    let request = ChatRequest::new(
        ModuleTag::Summarize,
        prompts::SEGMENT.system,
        prompts::SEGMENT.render_user(&[("context", &listing)]),
    );
    let raw = match client.chat(request, ledger) {
        Ok(ex) => ex.raw_response,
        Err(e) => return Ok(windowed(Some(format!("segmentation call failed: {e}")))),
    };
    match parse_boundaries(&raw, n) {
        Ok(b) => Ok(SegmentationPlan {
            segments: boundary_segments(n, &b, options.overlap_turns),
            overlap_turns: options.overlap_turns,
            fallback_reason: None,
        }),
        Err(reason) => Ok(windowed(Some(reason))),
    }
}

fn parse_keywords(raw: &str) -> Option<Vec<String>> {
    let value = extract_json(raw).ok()?;
    let items = value.get("keywords")?.as_array()?;
    let mut out = Vec::with_capacity(items.len());
    for item in items {
        let s = item.as_str()?.trim();
        if !s.is_empty() {
            out.push(s.to_string());
        }
    }
    Some(out)
}

/// Key sentences for one event passage. Re-asks once when the response does
/// not have the `{"keywords": [...]}` shape.
pub fn summarize_event(passage: &str, client: &LlmClient, ledger: &mut TokenLedger) -> Result<Vec<String>> {
    if passage.is_empty() {
        return Err(Error::EmptyInput("event passage"));
    }
    let user = prompts::SUMMARY.render_user(&[("context", passage)]);
    let mut raw = String::new();
    for _ in 0..2 {
        let ex = client.chat(
            ChatRequest::new(ModuleTag::Summarize, prompts::SUMMARY.system, user.clone()),
            ledger,
        )?;
        if let Some(keywords) = parse_keywords(&ex.raw_response) {
            return Ok(keywords);
        }
        raw = ex.raw_response;
    }
    Err(Error::SummaryProtocol { raw })
}

#[derive(Debug, Clone)]
pub struct StagedEvent {
    pub event: NewEvent,
    /// Stored form of each key sentence, time-stamped.
    pub texts: Vec<String>,
    pub embeddings: Vec<Vec<f32>>,
}

#[derive(Debug, Clone)]
pub struct StagedDialogue {
    pub dialogue_id: String,
    pub events: Vec<StagedEvent>,
    pub ledger: TokenLedger,
    pub segmentation_fallback: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestReport {
    pub dialogue_id: String,
    pub events_created: usize,
    pub summaries_created: usize,
    pub tokens: u64,
    pub event_ids: Vec<EventId>,
    /// Events stored with no key sentences; reachable only through ids.
    pub events_without_summaries: Vec<EventId>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub segmentation_fallback: Option<String>,
}

pub fn prepare_dialogue(
    dialogue: &RawDialogue,
    options: SegmentOptions,
    client: &LlmClient,
    embedder: &dyn Embedder,
) -> Result<StagedDialogue> {
    dialogue.validate()?;
    let mut ledger = TokenLedger::new();
    let plan = segment_dialogue(dialogue, options, Some(client), &mut ledger)?;
    let mut events = Vec::with_capacity(plan.segments.len());
    for range in &plan.segments {
        let passage = dialogue.passage(*range);
        let time_label = dialogue.turns[range.start].time_label.clone();
        let sentences = summarize_event(&passage, client, &mut ledger)?;
        let texts: Vec<String> = sentences
            .iter()
            .map(|s| stamp_key_sentence(&time_label, s))
            .collect();
        let embeddings = if texts.is_empty() {
            Vec::new()
        } else {
            let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
            embedder.embed_batch(&refs)?
        };
        events.push(StagedEvent {
            event: NewEvent {
                dialogue_id: dialogue.dialogue_id.clone(),
                passage,
                time_label,
                turn_range: *range,
            },
            texts,
            embeddings,
        });
    }
    Ok(StagedDialogue {
        dialogue_id: dialogue.dialogue_id.clone(),
        events,
        ledger,
        segmentation_fallback: plan.fallback_reason,
    })
}

/// Writes a staged dialogue; on any failure the store is rolled back to its
/// prior contents.
pub fn commit(store: &mut MemoryStore, staged: StagedDialogue) -> Result<IngestReport> {
    let cp = store.checkpoint();
    let mut report = IngestReport {
        dialogue_id: staged.dialogue_id,
        events_created: 0,
        summaries_created: 0,
        tokens: staged.ledger.total(),
        event_ids: Vec::new(),
        events_without_summaries: Vec::new(),
        segmentation_fallback: staged.segmentation_fallback,
    };
    let result = (|| {
        for staged_event in staged.events {
            let event_id = store.put_event(staged_event.event)?;
            let ids = store.put_summaries(event_id, &staged_event.texts, &staged_event.embeddings)?;
            report.events_created += 1;
            report.summaries_created += ids.len();
            report.event_ids.push(event_id);
            if ids.is_empty() {
                report.events_without_summaries.push(event_id);
            }
        }
        Ok(())
    })();
    match result {
        Ok(()) => Ok(report),
        Err(e) => {
            store.rollback(cp);
            Err(e)
        }
    }
}

pub fn ingest_dialogue(
    dialogue: &RawDialogue,
    options: SegmentOptions,
    store: &mut MemoryStore,
    client: &LlmClient,
    embedder: &dyn Embedder,
) -> Result<IngestReport> {
    let staged = prepare_dialogue(dialogue, options, client, embedder)?;
    commit(store, staged)
}
