//! Query answering: light path, on-demand deep path, reflection loop.
//!
//! Retrieval always uses the current (possibly rewritten) query q_i, while
//! both generators and the reflector see the original question q_0.

use std::collections::HashSet;
use std::fmt;

use serde_json::Value;

use crate::config::Config;
use crate::embedding::Embedder;
use crate::error::{Error, Result};
use crate::index::Hit;
use crate::ledger::{ModuleTag, TokenLedger};
use crate::llm::{extract_json, fan_out, int_field, str_field, ChatExchange, ChatRequest, LlmClient};
use crate::model::{unstamp_key_sentence, AnswerStatus, EventId, MemoryPool, SummaryId};
use crate::prompts::{self, PromptTemplate};
use crate::store::MemoryStore;
use crate::trace::{IterationRecord, PathTaken, ReflectionRecord, SessionTrace, TraceFlag, TraceNote};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EngineParams {
    pub k: usize,
    pub n: usize,
    pub d: usize,
    pub t: usize,
}

impl Default for EngineParams {
    fn default() -> Self {
        Self::from(&Config::default())
    }
}

impl From<&Config> for EngineParams {
    fn from(c: &Config) -> Self {
        Self {
            k: c.k,
            n: c.n,
            d: c.d,
            t: c.t,
        }
    }
}

impl EngineParams {
    pub fn validate(&self) -> Result<()> {
        if self.k < 1 || self.n < self.k || self.d < 1 || self.t < 1 {
            return Err(Error::contract(format!(
                "need k >= 1, N >= k, d >= 1, T >= 1; got {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LightOutcome {
    pub status: AnswerStatus,
    /// Present iff `status` is `Answered`.
    pub answer: Option<String>,
    pub retrieved: Vec<SummaryId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeepOutcome {
    pub coarse: Vec<SummaryId>,
    pub selected_summary_ids: Vec<SummaryId>,
    pub backtracked_event_ids: Vec<EventId>,
    pub answer: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReflectionVerdict {
    pub done: bool,
    /// Present iff not done.
    pub new_question: Option<String>,
}

/// Side output of one step: the ledger it charges plus exchanges and notes
/// destined for the trace.
#[derive(Debug, Default)]
pub struct StepLog {
    pub ledger: TokenLedger,
    pub exchanges: Vec<ChatExchange>,
    pub notes: Vec<TraceNote>,
}

impl StepLog {
    pub fn new() -> Self {
        Self::default()
    }

    fn absorb(&mut self, other: StepLog) {
        self.ledger.absorb(other.ledger);
        self.exchanges.extend(other.exchanges);
        self.notes.extend(other.notes);
    }

    fn take_iteration(&mut self) -> (Vec<ChatExchange>, Vec<TraceNote>) {
        (std::mem::take(&mut self.exchanges), std::mem::take(&mut self.notes))
    }
}

/// A finished session.
#[derive(Debug, Clone)]
pub struct Answer {
    pub answer: String,
    pub trace: SessionTrace,
    pub ledger: TokenLedger,
}

/// A session that aborted; holds whatever completed before the failure.
#[derive(Debug)]
pub struct SessionError {
    pub error: Error,
    pub trace: SessionTrace,
    pub ledger: TokenLedger,
}

impl fmt::Display for SessionError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} (after {} iterations)", self.error, self.trace.iterations.len())
    }
}

impl std::error::Error for SessionError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

/// Splits `candidates` into consecutive batches of `d`; the last batch holds
/// the remainder when `d` does not divide the length.
pub fn partition_batches<T: Clone>(candidates: &[T], d: usize) -> Result<Vec<Vec<T>>> {
    if d == 0 {
        return Err(Error::contract("batch size d must be at least 1"));
    }
    Ok(candidates.chunks(d).map(<[T]>::to_vec).collect())
}

/// One retriever candidate: id, stored summary text, and its event's time.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Candidate {
    pub summary_id: SummaryId,
    pub text: String,
    pub time_label: String,
}

pub fn render_indices(batch: &[Candidate]) -> String {
    batch
        .iter()
        .map(|c| {
            format!(
                "id:{}, dialogue time:{}, {}",
                c.summary_id,
                c.time_label,
                unstamp_key_sentence(&c.time_label, &c.text)
            )
        })
        .collect::<Vec<_>>()
        .join("\n\n")
}

fn parse_light(raw: &str) -> Option<(AnswerStatus, Option<String>)> {
    let v = extract_json(raw).ok()?;
    match AnswerStatus::from_finished(int_field(&v, "finished")?)? {
        AnswerStatus::Escalate => Some((AnswerStatus::Escalate, None)),
        AnswerStatus::Answered => {
            let answer = str_field(&v, "answer").filter(|a| !a.trim().is_empty())?;
            Some((AnswerStatus::Answered, Some(answer.to_string())))
        }
    }
}

fn parse_selection(raw: &str) -> Option<Vec<i64>> {
    let v = extract_json(raw).ok()?;
    let list = match &v {
        Value::Object(_) => v.get("keywords_list")?.as_array()?,
        _ => return None,
    };
    list.iter()
        .map(|x| match x {
            Value::Number(n) => n.as_i64().or_else(|| n.as_f64().filter(|f| f.fract() == 0.0).map(|f| f as i64)),
            Value::String(s) => s.trim().parse().ok(),
            _ => None,
        })
        .collect()
}

fn parse_deep(raw: &str) -> Option<String> {
    let v = extract_json(raw).ok()?;
    str_field(&v, "answer")
        .filter(|a| !a.trim().is_empty())
        .map(str::to_string)
}

fn parse_reflection(raw: &str) -> Option<ReflectionVerdict> {
    let v = extract_json(raw).ok()?;
    match int_field(&v, "finished")? {
        1 => Some(ReflectionVerdict {
            done: true,
            new_question: None,
        }),
        0 => {
            let q = str_field(&v, "new_question").filter(|q| !q.trim().is_empty())?;
            Some(ReflectionVerdict {
                done: false,
                new_question: Some(q.to_string()),
            })
        }
        _ => None,
    }
}

/// Answers questions against a read-only store. Cheap to build; sessions
/// over the same engine may run concurrently.
pub struct Engine<'a> {
    store: &'a MemoryStore,
    embedder: &'a dyn Embedder,
    client: &'a LlmClient,
    params: EngineParams,
    scope: Option<String>,
}

impl<'a> Engine<'a> {
    pub fn new(
        store: &'a MemoryStore,
        embedder: &'a dyn Embedder,
        client: &'a LlmClient,
        params: EngineParams,
    ) -> Result<Self> {
        params.validate()?;
        if embedder.dimension() != store.embedding_dim() {
            return Err(Error::contract(format!(
                "embedder dimension {} does not match store dimension {}",
                embedder.dimension(),
                store.embedding_dim()
            )));
        }
        Ok(Self {
            store,
            embedder,
            client,
            params,
            scope: None,
        })
    }

    /// Restricts retrieval to summaries of one dialogue.
    pub fn scoped_to(mut self, dialogue_id: Option<String>) -> Self {
        self.scope = dialogue_id;
        self
    }

    pub fn params(&self) -> EngineParams {
        self.params
    }

    pub fn store(&self) -> &MemoryStore {
        self.store
    }

    pub fn search(&self, query: &str, k: usize) -> Result<Vec<Hit>> {
        if self.store.index().is_empty() {
            return Ok(Vec::new());
        }
        let q = self.embedder.embed(query)?;
        match &self.scope {
            None => self.store.index().topk_search(&q, k),
            Some(scope) => self.store.index().topk_search_where(&q, k, |id| {
                self.store.dialogue_of_summary(id) == Some(scope.as_str())
            }),
        }
    }

    fn call(&self, log: &mut StepLog, template: PromptTemplate, tag: ModuleTag, user: String) -> Result<ChatExchange> {
        let ex = self
            .client
            .chat(ChatRequest::new(tag, template.system, user), &mut log.ledger)?;
        log.exchanges.push(ex.clone());
        Ok(ex)
    }

    /// Calls once, re-asks once if `parse` rejects the output. Returns the
    /// parsed value or the last raw response.
    fn call_parsed<T>(
        &self,
        log: &mut StepLog,
        template: PromptTemplate,
        tag: ModuleTag,
        user: String,
        parse: impl Fn(&str) -> Option<T>,
    ) -> Result<std::result::Result<T, String>> {
        let mut raw = String::new();
        for _ in 0..2 {
            let ex = self.call(log, template, tag, user.clone())?;
            if let Some(v) = parse(&ex.raw_response) {
                return Ok(Ok(v));
            }
            raw = ex.raw_response;
        }
        Ok(Err(raw))
    }

    pub fn light_step(&self, q_i: &str, q_0: &str, pool: &MemoryPool, log: &mut StepLog) -> Result<LightOutcome> {
        let hits = self.search(q_i, self.params.k)?;
        let retrieved: Vec<SummaryId> = hits.iter().map(|h| h.summary_id).collect();
        if hits.is_empty() {
            log.notes.push(TraceNote::EmptyIndex);
            return Ok(LightOutcome {
                status: AnswerStatus::Escalate,
                answer: None,
                retrieved,
            });
        }
        let context = retrieved
            .iter()
            .map(|id| format!("id:{id}, {}", self.store.summary_text(*id).unwrap_or_default()))
            .collect::<Vec<_>>()
            .join("\n");
        let user = prompts::LIGHT_GENERATOR.render_user(&[
            ("question", q_0),
            ("context", &context),
            ("pool", &pool.render()),
        ]);
        let parsed = self.call_parsed(log, prompts::LIGHT_GENERATOR, ModuleTag::Light, user, parse_light)?;
        let (status, answer) = match parsed {
            Ok(v) => v,
            Err(raw) => {
                log.notes.push(TraceNote::LightProtocolFailure { raw });
                (AnswerStatus::Escalate, None)
            }
        };
        Ok(LightOutcome {
            status,
            answer,
            retrieved,
        })
    }

    /// Self-retrieval over one batch. Never fails on bad model output: after
    /// one re-ask the batch selects nothing.
    pub fn llm_filter(&self, q_i: &str, batch_no: usize, batch: &[Candidate], log: &mut StepLog) -> Result<Vec<SummaryId>> {
        if batch.is_empty() {
            return Err(Error::contract("llm_filter needs a non-empty batch"));
        }
        let user = prompts::RETRIEVER.render_user(&[("question", q_i), ("indices", &render_indices(batch))]);
        let picked = match self.call_parsed(log, prompts::RETRIEVER, ModuleTag::DeepRetrieve, user, parse_selection)? {
            Ok(ids) => ids,
            Err(raw) => {
                log.notes.push(TraceNote::FilterProtocolFailure { batch: batch_no, raw });
                return Ok(Vec::new());
            }
        };
        let members: HashSet<SummaryId> = batch.iter().map(|c| c.summary_id).collect();
        let mut seen = HashSet::new();
        let mut kept = Vec::new();
        let mut dropped = Vec::new();
        for id in picked {
            match u64::try_from(id).ok().filter(|u| members.contains(u)) {
                Some(u) => {
                    if seen.insert(u) {
                        kept.push(u);
                    }
                }
                None => dropped.push(id),
            }
        }
        if !dropped.is_empty() {
            log.notes.push(TraceNote::FilterDroppedIds { batch: batch_no, ids: dropped });
        }
        Ok(kept)
    }

    fn candidate(&self, summary_id: SummaryId) -> Result<Candidate> {
        let text = self
            .store
            .summary_text(summary_id)
            .ok_or_else(|| Error::LinkIntegrity(format!("summary {summary_id} does not exist")))?;
        let event = self
            .store
            .summary_event(summary_id)
            .and_then(|e| self.store.event(e))
            .ok_or_else(|| Error::LinkIntegrity(format!("summary {summary_id} has no event")))?;
        Ok(Candidate {
            summary_id,
            text: text.to_string(),
            time_label: event.time_label.clone(),
        })
    }

    pub fn deep_step(&self, q_i: &str, q_0: &str, pool: &MemoryPool, log: &mut StepLog) -> Result<DeepOutcome> {
        let coarse: Vec<SummaryId> = self
            .search(q_i, self.params.n)?
            .iter()
            .map(|h| h.summary_id)
            .collect();
        let candidates = coarse
            .iter()
            .map(|id| self.candidate(*id))
            .collect::<Result<Vec<_>>>()?;
        let batches = partition_batches(&candidates, self.params.d)?;
        let results = fan_out(batches, self.client.max_in_flight(), |i, batch| {
            let mut local = StepLog::new();
            let r = self.llm_filter(q_i, i, &batch, &mut local);
            (r, local)
        });
        let mut selected = Vec::new();
        for (r, local) in results {
            log.absorb(local);
            selected.extend(r?);
        }
        if selected.is_empty() {
            selected = coarse.iter().take(self.params.k).copied().collect();
            log.notes.push(TraceNote::DeepFallback {
                summary_ids: selected.clone(),
            });
        }
        let events = self.store.backtrack(&selected)?;
        let backtracked_event_ids = events.iter().map(|e| e.event_id).collect();
        let context = events
            .iter()
            .map(|e| format!("dialogue time: {}\n{}", e.time_label, e.passage))
            .collect::<Vec<_>>()
            .join("\n\n");
        let user = prompts::DEEP_GENERATOR.render_user(&[
            ("question", q_0),
            ("context", &context),
            ("pool", &pool.render()),
        ]);
        match self.call_parsed(log, prompts::DEEP_GENERATOR, ModuleTag::DeepGenerate, user, parse_deep)? {
            Ok(answer) => Ok(DeepOutcome {
                coarse,
                selected_summary_ids: selected,
                backtracked_event_ids,
                answer,
            }),
            Err(raw) => Err(Error::DeepProtocol { raw }),
        }
    }

    pub fn reflect(&self, answer: &str, q_0: &str, log: &mut StepLog) -> Result<ReflectionVerdict> {
        if answer.is_empty() {
            return Err(Error::EmptyInput("answer to reflect on"));
        }
        let user = prompts::REFLECT.render_user(&[("question", q_0), ("answer", answer)]);
        match self.call_parsed(log, prompts::REFLECT, ModuleTag::Reflect, user, parse_reflection)? {
            Ok(v) => Ok(v),
            Err(raw) => {
                log.notes.push(TraceNote::ReflectProtocolFailure { raw });
                Ok(ReflectionVerdict {
                    done: true,
                    new_question: None,
                })
            }
        }
    }

    /// Runs the full loop for `q_0`: at most T iterations of light step,
    /// escalation when asked for, and reflection.
    pub fn answer_query(&self, q_0: &str) -> std::result::Result<Answer, Box<SessionError>> {
        let mut trace = SessionTrace::new(q_0);
        let mut log = StepLog::new();
        match self.run_loop(q_0, &mut trace, &mut log) {
            Ok(answer) => {
                trace.final_answer = Some(answer.clone());
                Ok(Answer {
                    answer,
                    trace,
                    ledger: log.ledger,
                })
            }
            Err(error) => {
                trace.error = Some(error.to_string());
                Err(Box::new(SessionError {
                    error,
                    trace,
                    ledger: log.ledger,
                }))
            }
        }
    }

    fn run_loop(&self, q_0: &str, trace: &mut SessionTrace, log: &mut StepLog) -> Result<String> {
        if q_0.trim().is_empty() {
            return Err(Error::EmptyInput("question"));
        }
        let mut pool = MemoryPool::new();
        let mut q_i = q_0.to_string();
        for i in 0..self.params.t {
            let light = self.light_step(&q_i, q_0, &pool, log)?;
            let mut record = IterationRecord {
                index: i,
                query: q_i.clone(),
                path: PathTaken::Light,
                light_status: light.status,
                retrieved_summary_ids: light.retrieved,
                coarse_summary_ids: Vec::new(),
                selected_summary_ids: Vec::new(),
                backtracked_event_ids: Vec::new(),
                answer: String::new(),
                reflection: None,
                notes: Vec::new(),
                exchanges: Vec::new(),
            };
            let answer = match light.answer {
                Some(a) => a,
                None => {
                    record.path = PathTaken::LightThenDeep;
                    match self.deep_step(&q_i, q_0, &pool, log) {
                        Ok(deep) => {
                            record.coarse_summary_ids = deep.coarse;
                            record.selected_summary_ids = deep.selected_summary_ids;
                            record.backtracked_event_ids = deep.backtracked_event_ids;
                            deep.answer
                        }
                        Err(e) => {
                            (record.exchanges, record.notes) = log.take_iteration();
                            trace.iterations.push(record);
                            return Err(e);
                        }
                    }
                }
            };
            pool.append(i, q_i.clone(), answer.clone())?;
            let verdict = self.reflect(&answer, q_0, log)?;
            record.answer = answer.clone();
            record.reflection = Some(ReflectionRecord {
                done: verdict.done,
                new_question: verdict.new_question.clone(),
            });
            (record.exchanges, record.notes) = log.take_iteration();
            trace.iterations.push(record);
            match verdict.new_question {
                Some(next) if !verdict.done => q_i = next,
                _ => return Ok(answer),
            }
        }
        trace.flags.push(TraceFlag::MaxIterations);
        Ok(trace
            .iterations
            .last()
            .map(|it| it.answer.clone())
            .expect("T >= 1 iterations ran"))
    }
}
