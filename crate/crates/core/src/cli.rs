//! Command-line front end.
//!
//! Exit codes: 0 success, 1 runtime or partial failure, 2 usage or config
//! error.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use crate::config::Config;
use crate::embedding::{self, Embedder};
use crate::engine::{Engine, EngineParams};
use crate::error::Error;
use crate::eval::{render_sweep, EvalCase, EvalContext, EvalReport};
use crate::ingest::{commit, prepare_dialogue, RawDialogue, SegmentMode, SegmentOptions, DEFAULT_OVERLAP, DEFAULT_WINDOW};
use crate::llm::{fan_out, LlmClient};
use crate::store::MemoryStore;

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "hymem", version, about = "Two-tier conversational memory: ingest, query, evaluate")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Segment, summarize, and index a JSONL dialogue corpus.
    Ingest(IngestArgs),
    /// Answer one question against a store.
    Query(QueryArgs),
    /// Evaluate a case file and print an accuracy/cost report.
    Eval(EvalArgs),
    /// Evaluate once per k and print a sweep table.
    Sweep(SweepArgs),
    /// Print store statistics or one event.
    Inspect(InspectArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModeArg {
    Window,
    Llm,
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub store: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "window")]
    pub mode: ModeArg,
    #[arg(long, default_value_t = DEFAULT_WINDOW)]
    pub window: usize,
    #[arg(long, default_value_t = DEFAULT_OVERLAP)]
    pub overlap: usize,
    /// Dialogues prepared concurrently; also caps calls in flight.
    #[arg(long)]
    pub jobs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct QueryArgs {
    #[arg(long)]
    pub store: PathBuf,
    #[arg(long)]
    pub question: String,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Print the session trace as JSON instead of the bare answer.
    #[arg(long)]
    pub trace: bool,
    /// Like --trace, with full prompts and raw responses.
    #[arg(long)]
    pub trace_full: bool,
    /// Restrict retrieval to one dialogue.
    #[arg(long)]
    pub dialogue: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Baseline {
    Hymem,
    Naive(usize),
}

fn parse_baseline(s: &str) -> Result<Baseline, String> {
    if s == "hymem" {
        return Ok(Baseline::Hymem);
    }
    match s.strip_prefix("naive:").map(str::parse::<usize>) {
        Some(Ok(k)) if k >= 1 => Ok(Baseline::Naive(k)),
        _ => Err(format!("expected hymem or naive:<k> with k >= 1, got {s:?}")),
    }
}

#[derive(Debug, Args)]
pub struct EvalCommon {
    #[arg(long)]
    pub cases: PathBuf,
    #[arg(long)]
    pub store: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Write the full JSON report here.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Print JSON on stdout instead of the table.
    #[arg(long)]
    pub json: bool,
    /// Cases evaluated concurrently; also caps calls in flight.
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Search all dialogues instead of each case's own.
    #[arg(long)]
    pub unscoped: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: EvalCommon,
    #[arg(long, default_value = "hymem", value_parser = parse_baseline)]
    pub baseline: Baseline,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub common: EvalCommon,
    #[arg(long, value_delimiter = ',', required = true, value_parser = clap::value_parser!(usize))]
    pub k_values: Vec<usize>,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub store: PathBuf,
    /// Show one event with its summaries.
    #[arg(long)]
    pub event: Option<u64>,
}

/// A failure plus the exit code it maps to.
struct Failure {
    code: i32,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }

    fn runtime(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_RUNTIME,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => Failure::usage(e.to_string()),
            _ => Failure::runtime(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::runtime(e.to_string())
    }
}

type CmdResult = Result<i32, Failure>;

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            if e.use_stderr() {
                let _ = write!(err, "{e}");
                return EXIT_USAGE;
            }
            let _ = write!(out, "{e}");
            return EXIT_OK;
        }
    };
    let result = match cli.command {
        Command::Ingest(a) => cmd_ingest(a, out, err),
        Command::Query(a) => cmd_query(a, out),
        Command::Eval(a) => cmd_eval(a, out),
        Command::Sweep(a) => cmd_sweep(a, out),
        Command::Inspect(a) => cmd_inspect(a, out),
    };
    match result {
        Ok(code) => code,
        Err(f) => {
            let _ = writeln!(err, "error: {}", f.message);
            f.code
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<Config, Failure> {
    Ok(match path {
        Some(p) => Config::load(p)?,
        None => {
            let mut c = Config::default();
            c.apply_env();
            c
        }
    })
}

fn open_store(path: &Path) -> Result<MemoryStore, Failure> {
    if !MemoryStore::exists(path) {
        return Err(Failure::usage(format!("no store at {}", path.display())));
    }
    Ok(MemoryStore::load(path)?)
}

fn backends(config: &Config) -> Result<(LlmClient, Box<dyn Embedder>), Failure> {
    let client = LlmClient::from_config(config).map_err(|e| Failure::usage(e.to_string()))?;
    let embedder = embedding::from_config(config).map_err(|e| Failure::usage(e.to_string()))?;
    Ok((client, embedder))
}

fn check_dims(store: &MemoryStore, embedder: &dyn Embedder) -> Result<(), Failure> {
    if store.embedding_dim() != embedder.dimension() {
        return Err(Failure::usage(format!(
            "store holds {}-dimensional embeddings but the configured embedder produces {}",
            store.embedding_dim(),
            embedder.dimension()
        )));
    }
    Ok(())
}

fn cmd_ingest(a: IngestArgs, out: &mut dyn Write, err: &mut dyn Write) -> CmdResult {
    let text = std::fs::read_to_string(&a.corpus)
        .map_err(|e| Failure::usage(format!("cannot read corpus {}: {e}", a.corpus.display())))?;
    let mut config = load_config(a.config.as_deref())?;
    if let Some(j) = a.jobs {
        config.max_in_flight = j.max(1);
    }
    let options = SegmentOptions {
        mode: match a.mode {
            ModeArg::Window => SegmentMode::Window,
            ModeArg::Llm => SegmentMode::Llm,
        },
        window: a.window,
        overlap_turns: a.overlap,
    };
    if a.window < 2 || a.overlap >= a.window {
        return Err(Failure::usage("need --window >= 2 and --overlap < --window"));
    }
    let (client, embedder) = backends(&config)?;
    let mut store = if MemoryStore::exists(&a.store) {
        MemoryStore::load(&a.store)?
    } else {
        MemoryStore::new(embedder.dimension())
    };
    check_dims(&store, embedder.as_ref())?;

    let mut failed = 0;
    let mut dialogues = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match RawDialogue::from_json_line(line) {
            Ok(d) => dialogues.push(d),
            Err(e) => {
                failed += 1;
                let _ = writeln!(err, "corpus line {}: skipped: {e}", i + 1);
            }
        }
    }
    let staged = fan_out(dialogues, config.max_in_flight, |_, d| {
        let r = prepare_dialogue(&d, options, &client, embedder.as_ref());
        (d.dialogue_id, r)
    });
    for (dialogue_id, r) in staged {
        match r.and_then(|s| commit(&mut store, s)) {
            Ok(report) => {
                writeln!(out, "{}", serde_json::to_string(&report).expect("report serializes"))?;
            }
            Err(e) => {
                failed += 1;
                let _ = writeln!(err, "dialogue {dialogue_id}: failed: {e}");
            }
        }
    }
    store.save(&a.store)?;
    Ok(if failed == 0 { EXIT_OK } else { EXIT_RUNTIME })
}

fn cmd_query(a: QueryArgs, out: &mut dyn Write) -> CmdResult {
    let store = open_store(&a.store)?;
    let config = load_config(a.config.as_deref())?;
    let (client, embedder) = backends(&config)?;
    check_dims(&store, embedder.as_ref())?;
    let engine = Engine::new(&store, embedder.as_ref(), &client, EngineParams::from(&config))?
        .scoped_to(a.dialogue);
    let traced = a.trace || a.trace_full;
    let emit = |out: &mut dyn Write, trace: &crate::trace::SessionTrace, ledger: &crate::ledger::TokenLedger| {
        let mut v = trace.to_json(a.trace_full);
        v["tokens"] = json!({ "total": ledger.total(), "by_module": ledger.subtotals() });
        writeln!(out, "{}", serde_json::to_string_pretty(&v).expect("trace serializes"))
    };
    match engine.answer_query(&a.question) {
        Ok(ans) => {
            if traced {
                emit(out, &ans.trace, &ans.ledger)?;
            } else {
                writeln!(out, "{}", ans.answer)?;
            }
            Ok(EXIT_OK)
        }
        Err(fail) => {
            if traced {
                emit(out, &fail.trace, &fail.ledger)?;
            }
            Err(Failure::runtime(fail.to_string()))
        }
    }
}

struct EvalSetup {
    config: Config,
    store: MemoryStore,
    cases: Vec<EvalCase>,
    client: LlmClient,
    embedder: Box<dyn Embedder>,
}

fn eval_setup(c: &EvalCommon) -> Result<EvalSetup, Failure> {
    let store = open_store(&c.store)?;
    let cases = EvalCase::load(&c.cases).map_err(|e| Failure::usage(e.to_string()))?;
    let mut config = load_config(c.config.as_deref())?;
    if let Some(j) = c.jobs {
        config.max_in_flight = j.max(1);
    }
    let (client, embedder) = backends(&config)?;
    check_dims(&store, embedder.as_ref())?;
    Ok(EvalSetup {
        config,
        store,
        cases,
        client,
        embedder,
    })
}

impl EvalSetup {
    fn context<'a>(&'a self, c: &EvalCommon) -> EvalContext<'a> {
        EvalContext {
            store: &self.store,
            embedder: self.embedder.as_ref(),
            client: &self.client,
            judge: &self.client,
            jobs: self.config.max_in_flight,
            scope_to_dialogue: !c.unscoped,
        }
    }
}

fn write_out(path: Option<&Path>, value: &serde_json::Value) -> Result<(), Failure> {
    if let Some(p) = path {
        std::fs::write(p, serde_json::to_string_pretty(value).expect("report serializes") + "\n")
            .map_err(|e| Failure::runtime(format!("cannot write {}: {e}", p.display())))?;
    }
    Ok(())
}

fn cmd_eval(a: EvalArgs, out: &mut dyn Write) -> CmdResult {
    let setup = eval_setup(&a.common)?;
    let ctx = setup.context(&a.common);
    let report: EvalReport = match a.baseline {
        Baseline::Hymem => ctx.run_eval(&setup.cases, EngineParams::from(&setup.config))?,
        Baseline::Naive(k) => ctx.run_naive_rag(&setup.cases, k)?,
    };
    let value = serde_json::to_value(&report).expect("report serializes");
    write_out(a.common.out.as_deref(), &value)?;
    if a.common.json {
        writeln!(out, "{}", serde_json::to_string_pretty(&value).expect("report serializes"))?;
    } else {
        write!(out, "{}", report.render_table())?;
    }
    Ok(if report.errored == 0 { EXIT_OK } else { EXIT_RUNTIME })
}

fn cmd_sweep(a: SweepArgs, out: &mut dyn Write) -> CmdResult {
    if a.k_values.contains(&0) {
        return Err(Failure::usage("every --k-values entry must be at least 1"));
    }
    let setup = eval_setup(&a.common)?;
    let ctx = setup.context(&a.common);
    let results = ctx.sweep_k(&setup.cases, EngineParams::from(&setup.config), &a.k_values)?;
    let rows: Vec<_> = results.iter().map(|(r, _)| *r).collect();
    let errored: usize = results.iter().map(|(_, rep)| rep.errored).sum();
    let value = json!({
        "rows": rows,
        "reports": results.iter().map(|(_, rep)| rep).collect::<Vec<_>>(),
    });
    write_out(a.common.out.as_deref(), &value)?;
    if a.common.json {
        writeln!(out, "{}", serde_json::to_string_pretty(&json!({ "rows": rows })).expect("rows serialize"))?;
    } else {
        write!(out, "{}", render_sweep(&rows))?;
    }
    Ok(if errored == 0 { EXIT_OK } else { EXIT_RUNTIME })
}

fn cmd_inspect(a: InspectArgs, out: &mut dyn Write) -> CmdResult {
    let store = open_store(&a.store)?;
    let value = match a.event {
        Some(id) => {
            let event = store
                .event(id)
                .ok_or_else(|| Failure::usage(format!("no event {id}")))?;
            let summaries: Vec<_> = store
                .summaries_of_event(id)
                .into_iter()
                .map(|sid| json!({ "summary_id": sid, "text": store.summary_text(sid) }))
                .collect();
            json!({ "event": event, "summaries": summaries })
        }
        None => {
            let mut dialogues = std::collections::BTreeMap::<&str, (usize, usize)>::new();
            for e in store.events() {
                let entry = dialogues.entry(e.dialogue_id.as_str()).or_default();
                entry.0 += 1;
                entry.1 += store.summaries_of_event(e.event_id).len();
            }
            let integrity = match store.verify_integrity() {
                Ok(()) => "ok".to_string(),
                Err(e) => e.to_string(),
            };
            json!({
                "embedding_dim": store.embedding_dim(),
                "events": store.event_count(),
                "summaries": store.summary_count(),
                "dialogues": dialogues
                    .iter()
                    .map(|(id, (ev, su))| json!({ "dialogue_id": id, "events": ev, "summaries": su }))
                    .collect::<Vec<_>>(),
                "integrity": integrity,
            })
        }
    };
    writeln!(out, "{}", serde_json::to_string_pretty(&value).expect("inspect output serializes"))?;
    Ok(EXIT_OK)
}
