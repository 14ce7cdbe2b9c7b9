//! Chat interface shared by every LLM touchpoint.
//!
//! [`LlmClient`] wraps a [`ChatBackend`], bounds the number of calls in
//! flight, and records one ledger entry per completed call. Protocol-level
//! retries (re-asking when the JSON shape is wrong) belong to callers.

mod json;
mod remote;
mod scripted;

use std::sync::{Arc, Condvar, Mutex};

use serde::{Deserialize, Serialize};

pub use json::{extract_json, int_field, str_field};
pub use remote::RemoteChat;
pub use scripted::{ScriptedBackend, ScriptedPlaybook, ScriptedReply, ScriptedRule};

use crate::config::{ChatBackendSpec, Config};
use crate::error::{Error, Result};
use crate::http::RetryPolicy;
use crate::ledger::{ModuleTag, TokenLedger, Usage};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub system_prompt: String,
    pub user_prompt: String,
    pub temperature: f64,
    pub tag: ModuleTag,
}

impl ChatRequest {
    pub fn new(tag: ModuleTag, system_prompt: impl Into<String>, user_prompt: impl Into<String>) -> Self {
        Self {
            system_prompt: system_prompt.into(),
            user_prompt: user_prompt.into(),
            temperature: 0.0,
            tag,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.system_prompt.is_empty() || self.user_prompt.is_empty() {
            return Err(Error::contract("chat prompts must be non-empty"));
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(Error::contract(format!(
                "temperature {} outside [0, 2]",
                self.temperature
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Remote,
    Scripted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatExchange {
    pub request: ChatRequest,
    pub raw_response: String,
    pub usage: Usage,
    /// Usage was approximated from character counts.
    pub estimated_usage: bool,
    pub backend: BackendKind,
}

pub trait ChatBackend: Send + Sync {
    fn complete(&self, request: &ChatRequest) -> Result<ChatExchange>;
}

/// Counting semaphore bounding concurrent backend calls.
struct Gate {
    free: Mutex<usize>,
    cv: Condvar,
}

impl Gate {
    fn new(permits: usize) -> Self {
        Self {
            free: Mutex::new(permits.max(1)),
            cv: Condvar::new(),
        }
    }

    fn enter(&self) -> GateGuard<'_> {
        let mut free = self.free.lock().unwrap_or_else(|p| p.into_inner());
        while *free == 0 {
            free = self.cv.wait(free).unwrap_or_else(|p| p.into_inner());
        }
        *free -= 1;
        GateGuard(self)
    }
}

struct GateGuard<'a>(&'a Gate);

impl Drop for GateGuard<'_> {
    fn drop(&mut self) {
        let mut free = self.0.free.lock().unwrap_or_else(|p| p.into_inner());
        *free += 1;
        self.0.cv.notify_one();
    }
}

#[derive(Clone)]
pub struct LlmClient {
    backend: Arc<dyn ChatBackend>,
    gate: Arc<Gate>,
    max_in_flight: usize,
}

impl LlmClient {
    pub fn new(backend: Arc<dyn ChatBackend>, max_in_flight: usize) -> Self {
        Self {
            backend,
            gate: Arc::new(Gate::new(max_in_flight)),
            max_in_flight: max_in_flight.max(1),
        }
    }

    pub fn scripted(playbook: ScriptedPlaybook) -> Self {
        Self::new(Arc::new(ScriptedBackend::new(playbook)), 4)
    }

    pub fn from_config(config: &Config) -> Result<Self> {
        let backend: Arc<dyn ChatBackend> = match config.chat_backend_spec()? {
            ChatBackendSpec::Scripted { playbook } => {
                Arc::new(ScriptedBackend::new(ScriptedPlaybook::load(&playbook)?))
            }
            ChatBackendSpec::Remote { model, base_url } => Arc::new(RemoteChat::new(
                model,
                &base_url,
                config.api_key.clone(),
                RetryPolicy::default(),
            )),
        };
        Ok(Self::new(backend, config.max_in_flight))
    }

    pub fn max_in_flight(&self) -> usize {
        self.max_in_flight
    }

    /// Sends one request and records its usage in `ledger` under the
    /// request's tag.
    pub fn chat(&self, request: ChatRequest, ledger: &mut TokenLedger) -> Result<ChatExchange> {
        request.validate()?;
        let exchange = {
            let _permit = self.gate.enter();
            self.backend.complete(&request)?
        };
        ledger.record(request.tag, exchange.usage, exchange.estimated_usage);
        Ok(exchange)
    }
}

/// Runs `work` over `items` on at most `workers` threads and returns the
/// results in input order, whatever order they finish in.
pub fn fan_out<T, R, F>(items: Vec<T>, workers: usize, work: F) -> Vec<R>
where
    T: Send,
    R: Send,
    F: Fn(usize, T) -> R + Sync,
{
    let n = items.len();
    if n == 0 {
        return Vec::new();
    }
    let workers = workers.clamp(1, n);
    if workers == 1 {
        return items.into_iter().enumerate().map(|(i, t)| work(i, t)).collect();
    }
    let queue = Mutex::new(items.into_iter().enumerate());
    let results: Mutex<Vec<Option<R>>> = Mutex::new((0..n).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let next = queue.lock().unwrap_or_else(|p| p.into_inner()).next();
                let Some((i, item)) = next else { break };
                let r = work(i, item);
                results.lock().unwrap_or_else(|p| p.into_inner())[i] = Some(r);
            });
        }
    });
    results
        .into_inner()
        .unwrap_or_else(|p| p.into_inner())
        .into_iter()
        .map(|r| r.expect("every item processed"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::time::Duration;

    #[test]
    fn chat_records_one_entry_per_call() {
        let playbook = ScriptedPlaybook::new("fallback")
            .rule("Where is Alice", r#"{"keywords_list": [4,5]}"#, Usage::new(100, 10));
        let client = LlmClient::scripted(playbook);
        let mut ledger = TokenLedger::new();
        let ex = client
            .chat(
                ChatRequest::new(ModuleTag::DeepRetrieve, "sys", "Question: Where is Alice's home?"),
                &mut ledger,
            )
            .unwrap();
        assert_eq!(ex.raw_response, r#"{"keywords_list": [4,5]}"#);
        assert_eq!(ex.usage, Usage::new(100, 10));
        assert_eq!(ex.backend, BackendKind::Scripted);
        assert_eq!(ledger.entries().len(), 1);
        assert_eq!(ledger.entries()[0].tag, ModuleTag::DeepRetrieve);
        assert_eq!(ledger.total(), 110);
    }

    #[test]
    fn request_validation() {
        let client = LlmClient::scripted(ScriptedPlaybook::new("x"));
        let mut ledger = TokenLedger::new();
        let empty = ChatRequest::new(ModuleTag::Light, "sys", "");
        assert!(client.chat(empty, &mut ledger).is_err());
        let mut hot = ChatRequest::new(ModuleTag::Light, "sys", "u");
        hot.temperature = 2.5;
        assert!(client.chat(hot, &mut ledger).is_err());
        assert!(ledger.entries().is_empty());
    }

    #[test]
    fn fan_out_preserves_order() {
        let items: Vec<u64> = (0..20).collect();
        let out = fan_out(items, 4, |i, x| {
            // later items finish first
            std::thread::sleep(Duration::from_millis(20 - x));
            (i, x * 2)
        });
        assert_eq!(out, (0..20).map(|x| (x as usize, x * 2)).collect::<Vec<_>>());
        assert!(fan_out(Vec::<u8>::new(), 3, |_, x| x).is_empty());
    }

    struct Slow {
        live: AtomicUsize,
        peak: AtomicUsize,
    }

    impl ChatBackend for Slow {
        fn complete(&self, request: &ChatRequest) -> Result<ChatExchange> {
            let now = self.live.fetch_add(1, Ordering::SeqCst) + 1;
            self.peak.fetch_max(now, Ordering::SeqCst);
            std::thread::sleep(Duration::from_millis(15));
            self.live.fetch_sub(1, Ordering::SeqCst);
            Ok(ChatExchange {
                request: request.clone(),
                raw_response: "{}".into(),
                usage: Usage::new(1, 1),
                estimated_usage: false,
                backend: BackendKind::Scripted,
            })
        }
    }

    #[test]
    fn in_flight_calls_are_bounded() {
        let backend = Arc::new(Slow {
            live: AtomicUsize::new(0),
            peak: AtomicUsize::new(0),
        });
        let client = LlmClient::new(backend.clone(), 2);
        let ledgers = fan_out((0..12).collect::<Vec<_>>(), 8, |_, _| {
            let mut l = TokenLedger::new();
            client
                .chat(ChatRequest::new(ModuleTag::Judge, "s", "u"), &mut l)
                .unwrap();
            l
        });
        assert_eq!(ledgers.len(), 12);
        assert!(backend.peak.load(Ordering::SeqCst) <= 2);
    }
}
