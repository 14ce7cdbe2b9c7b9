//! Evaluation: run question sets through the engine or the naive-RAG
//! baseline, grade with an LLM judge, aggregate accuracy and cost.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::embedding::Embedder;
use crate::engine::{Engine, EngineParams};
use crate::error::{Error, Result};
use crate::ledger::{ModuleTag, TokenLedger};
use crate::llm::{extract_json, fan_out, str_field, ChatRequest, LlmClient};
use crate::prompts;
use crate::store::MemoryStore;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    SingleHop,
    MultiHop,
    OpenDomain,
    Temporal,
    Other,
}

impl Category {
    pub const ALL: [Category; 5] = [
        Category::SingleHop,
        Category::MultiHop,
        Category::OpenDomain,
        Category::Temporal,
        Category::Other,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Category::SingleHop => "single_hop",
            Category::MultiHop => "multi_hop",
            Category::OpenDomain => "open_domain",
            Category::Temporal => "temporal",
            Category::Other => "other",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalCase {
    pub question: String,
    #[serde(rename = "answer")]
    pub gold_answer: String,
    pub category: Category,
    pub dialogue_id: String,
}

impl EvalCase {
    pub fn validate(&self) -> Result<()> {
        if self.question.trim().is_empty() {
            return Err(Error::EmptyInput("case question"));
        }
        if self.gold_answer.trim().is_empty() {
            return Err(Error::EmptyInput("case gold answer"));
        }
        Ok(())
    }

    /// Parses a case file: one `{"question","answer","category","dialogue_id"}` per line.
    pub fn parse_jsonl(text: &str) -> Result<Vec<EvalCase>> {
        let mut out = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let case: EvalCase = serde_json::from_str(line)
                .map_err(|e| Error::Config(format!("case line {}: {e}", i + 1)))?;
            case.validate()
                .map_err(|e| Error::Config(format!("case line {}: {e}", i + 1)))?;
            out.push(case);
        }
        Ok(out)
    }

    pub fn load(path: &Path) -> Result<Vec<EvalCase>> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read cases {}: {e}", path.display())))?;
        Self::parse_jsonl(&text)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Verdict {
    Correct,
    Wrong,
}

fn parse_label(raw: &str) -> Option<Verdict> {
    let v = extract_json(raw).ok()?;
    match str_field(&v, "label")?.trim().to_ascii_uppercase().as_str() {
        "CORRECT" => Some(Verdict::Correct),
        "WRONG" => Some(Verdict::Wrong),
        _ => None,
    }
}

/// Grades `generated` against `gold`; re-asks once on an unusable label.
pub fn judge(
    question: &str,
    gold: &str,
    generated: &str,
    client: &LlmClient,
    ledger: &mut TokenLedger,
) -> Result<Verdict> {
    if question.is_empty() || gold.is_empty() || generated.is_empty() {
        return Err(Error::EmptyInput("judge input"));
    }
    let user = prompts::JUDGE.render_user(&[
        ("question", question),
        ("gold_answer", gold),
        ("generated_answer", generated),
    ]);
    let mut raw = String::new();
    for _ in 0..2 {
        let ex = client.chat(
            ChatRequest::new(ModuleTag::Judge, prompts::JUDGE.system, user.clone()),
            ledger,
        )?;
        if let Some(v) = parse_label(&ex.raw_response) {
            return Ok(v);
        }
        raw = ex.raw_response;
    }
    Err(Error::JudgeProtocol { raw })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum CaseLabel {
    Correct,
    Wrong,
    /// Judge output unusable; excluded from accuracy.
    Unscored,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseRecord {
    pub question: String,
    pub gold_answer: String,
    pub category: Category,
    pub dialogue_id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub answer: Option<String>,
    pub label: CaseLabel,
    /// Tokens spent answering; judge calls are not included.
    pub tokens: u64,
    pub judge_tokens: u64,
    pub deep: bool,
    pub iterations: usize,
    pub ledger: TokenLedger,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CategoryStats {
    pub scored: usize,
    pub correct: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub label: String,
    pub cases: usize,
    pub scored: usize,
    pub correct: usize,
    pub unscored: usize,
    pub errored: usize,
    /// Percent correct over scored cases.
    pub overall: f64,
    pub per_category: BTreeMap<Category, CategoryStats>,
    pub avg_tokens: f64,
    pub deep_ratio: f64,
    pub records: Vec<CaseRecord>,
}

fn percent(correct: usize, scored: usize) -> f64 {
    if scored == 0 {
        0.0
    } else {
        100.0 * correct as f64 / scored as f64
    }
}

impl EvalReport {
    pub fn from_records(label: impl Into<String>, records: Vec<CaseRecord>) -> Self {
        let mut per_category: BTreeMap<Category, CategoryStats> = BTreeMap::new();
        let (mut scored, mut correct, mut unscored, mut errored, mut deep, mut tokens) = (0, 0, 0, 0, 0, 0u64);
        for r in &records {
            tokens += r.tokens;
            deep += usize::from(r.deep);
            errored += usize::from(r.error.is_some());
            if r.label == CaseLabel::Unscored {
                unscored += 1;
                continue;
            }
            let stats = per_category.entry(r.category).or_insert(CategoryStats {
                scored: 0,
                correct: 0,
                accuracy: 0.0,
            });
            stats.scored += 1;
            scored += 1;
            if r.label == CaseLabel::Correct {
                stats.correct += 1;
                correct += 1;
            }
        }
        for stats in per_category.values_mut() {
            stats.accuracy = percent(stats.correct, stats.scored);
        }
        let n = records.len();
        Self {
            label: label.into(),
            cases: n,
            scored,
            correct,
            unscored,
            errored,
            overall: percent(correct, scored),
            per_category,
            avg_tokens: if n == 0 { 0.0 } else { tokens as f64 / n as f64 },
            deep_ratio: if n == 0 { 0.0 } else { deep as f64 / n as f64 },
            records,
        }
    }

    pub fn render_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{}", self.label);
        let _ = writeln!(out, "{:<12} {:>7} {:>8} {:>9}", "category", "scored", "correct", "accuracy");
        for (cat, s) in &self.per_category {
            let _ = writeln!(out, "{:<12} {:>7} {:>8} {:>8.2}%", cat.as_str(), s.scored, s.correct, s.accuracy);
        }
        let _ = writeln!(out, "{:<12} {:>7} {:>8} {:>8.2}%", "overall", self.scored, self.correct, self.overall);
        let _ = writeln!(out, "avg tokens   {:.1}", self.avg_tokens);
        let _ = writeln!(out, "deep ratio   {:.3}", self.deep_ratio);
        if self.unscored > 0 {
            let _ = writeln!(
                out,
                "* {} case(s) unscored: judge output unusable; excluded from accuracy",
                self.unscored
            );
        }
        if self.errored > 0 {
            let _ = writeln!(out, "* {} case(s) hit engine errors and count as WRONG", self.errored);
        }
        out
    }
}

/// Everything a harness run reads. The judge may use a different backend
/// from the one answering.
pub struct EvalContext<'a> {
    pub store: &'a MemoryStore,
    pub embedder: &'a dyn Embedder,
    pub client: &'a LlmClient,
    pub judge: &'a LlmClient,
    /// Cases evaluated concurrently.
    pub jobs: usize,
    /// Restrict retrieval to each case's own dialogue.
    pub scope_to_dialogue: bool,
}

struct Answered {
    answer: std::result::Result<String, String>,
    ledger: TokenLedger,
    deep: bool,
    iterations: usize,
}

impl EvalContext<'_> {
    fn scope(&self, case: &EvalCase) -> Option<String> {
        self.scope_to_dialogue.then(|| case.dialogue_id.clone())
    }

    fn grade(&self, case: &EvalCase, a: Answered) -> CaseRecord {
        let mut judge_ledger = TokenLedger::new();
        let (label, error) = match &a.answer {
            Err(e) => (CaseLabel::Wrong, Some(e.clone())),
            Ok(text) => match judge(&case.question, &case.gold_answer, text, self.judge, &mut judge_ledger) {
                Ok(Verdict::Correct) => (CaseLabel::Correct, None),
                Ok(Verdict::Wrong) => (CaseLabel::Wrong, None),
                Err(Error::JudgeProtocol { .. }) => (CaseLabel::Unscored, None),
                Err(e) => (CaseLabel::Unscored, Some(format!("judge: {e}"))),
            },
        };
        CaseRecord {
            question: case.question.clone(),
            gold_answer: case.gold_answer.clone(),
            category: case.category,
            dialogue_id: case.dialogue_id.clone(),
            answer: a.answer.ok(),
            label,
            tokens: a.ledger.total(),
            judge_tokens: judge_ledger.total(),
            deep: a.deep,
            iterations: a.iterations,
            ledger: a.ledger,
            error,
        }
    }

    fn run_cases(&self, label: String, cases: &[EvalCase], answer: impl Fn(&EvalCase) -> Answered + Sync) -> EvalReport {
        let records = fan_out(cases.iter().collect(), self.jobs, |_, case| {
            let a = answer(case);
            self.grade(case, a)
        });
        EvalReport::from_records(label, records)
    }

    pub fn run_eval(&self, cases: &[EvalCase], params: EngineParams) -> Result<EvalReport> {
        params.validate()?;
        Engine::new(self.store, self.embedder, self.client, params)?;
        Ok(self.run_cases("HYMEM".into(), cases, |case| {
            let engine = Engine::new(self.store, self.embedder, self.client, params)
                .expect("validated above")
                .scoped_to(self.scope(case));
            match engine.answer_query(&case.question) {
                Ok(ans) => Answered {
                    deep: ans.trace.has_deep(),
                    iterations: ans.trace.iterations.len(),
                    answer: Ok(ans.answer),
                    ledger: ans.ledger,
                },
                Err(fail) => Answered {
                    deep: fail.trace.has_deep(),
                    iterations: fail.trace.iterations.len(),
                    answer: Err(fail.error.to_string()),
                    ledger: fail.ledger,
                },
            }
        }))
    }

    /// Baseline: top-k summaries expanded to all their passages, one
    /// generation, no escalation or reflection.
    pub fn run_naive_rag(&self, cases: &[EvalCase], k: usize) -> Result<EvalReport> {
        if k == 0 {
            return Err(Error::contract("naive RAG needs k >= 1"));
        }
        let params = EngineParams { k, n: k, d: 1, t: 1 };
        Engine::new(self.store, self.embedder, self.client, params)?;
        Ok(self.run_cases(naive_label(k), cases, |case| {
            let engine = Engine::new(self.store, self.embedder, self.client, params)
                .expect("validated above")
                .scoped_to(self.scope(case));
            let mut ledger = TokenLedger::new();
            let answer = naive_answer(&engine, &case.question, self.client, &mut ledger).map_err(|e| e.to_string());
            Answered {
                answer,
                ledger,
                deep: false,
                iterations: 1,
            }
        }))
    }

    /// One full evaluation per k, in input order.
    pub fn sweep_k(&self, cases: &[EvalCase], params: EngineParams, k_values: &[usize]) -> Result<Vec<(SweepRow, EvalReport)>> {
        if k_values.is_empty() {
            return Err(Error::contract("sweep needs at least one k"));
        }
        if k_values.contains(&0) {
            return Err(Error::contract("every k must be at least 1"));
        }
        k_values
            .iter()
            .map(|&k| {
                let p = EngineParams { k, n: params.n.max(k), ..params };
                let report = self.run_eval(cases, p)?;
                Ok((
                    SweepRow {
                        k,
                        overall: report.overall,
                        avg_tokens: report.avg_tokens,
                        deep_ratio: report.deep_ratio,
                    },
                    report,
                ))
            })
            .collect()
    }
}

pub fn naive_label(k: usize) -> String {
    format!("NAIVE_RAG(k={k})")
}

fn naive_answer(engine: &Engine, question: &str, client: &LlmClient, ledger: &mut TokenLedger) -> Result<String> {
    let hits = engine.search(question, engine.params().k)?;
    let ids: Vec<_> = hits.iter().map(|h| h.summary_id).collect();
    let events = engine.store().backtrack(&ids)?;
    let context = events
        .iter()
        .map(|e| format!("dialogue time: {}\n{}", e.time_label, e.passage))
        .collect::<Vec<_>>()
        .join("\n\n");
    let user = prompts::DEEP_GENERATOR.render_user(&[("question", question), ("context", &context), ("pool", "")]);
    let mut raw = String::new();
    for _ in 0..2 {
        let ex = client.chat(
            ChatRequest::new(ModuleTag::Light, prompts::DEEP_GENERATOR.system, user.clone()),
            ledger,
        )?;
        let parsed = extract_json(&ex.raw_response)
            .ok()
            .and_then(|v| str_field(&v, "answer").filter(|a| !a.trim().is_empty()).map(str::to_string));
        if let Some(a) = parsed {
            return Ok(a);
        }
        raw = ex.raw_response;
    }
    Err(Error::DeepProtocol { raw })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub k: usize,
    pub overall: f64,
    pub avg_tokens: f64,
    pub deep_ratio: f64,
}

pub fn render_sweep(rows: &[SweepRow]) -> String {
    let mut out = format!("{:>4} {:>9} {:>11} {:>10}\n", "k", "overall", "avg_tokens", "deep_ratio");
    for r in rows {
        let _ = writeln!(out, "{:>4} {:>8.2}% {:>11.1} {:>10.3}", r.k, r.overall, r.avg_tokens, r.deep_ratio);
    }
    out
}
