//! Chat-completions-compatible HTTP backend.

use std::time::Duration;

use serde_json::{json, Value};

use super::scripted::estimate;
use super::{BackendKind, ChatBackend, ChatExchange, ChatRequest};
use crate::error::{Error, Result};
use crate::http::{JsonPoster, RetryPolicy};
use crate::ledger::Usage;

pub struct RemoteChat {
    model: String,
    url: String,
    poster: JsonPoster,
}

impl RemoteChat {
    pub fn new(model: impl Into<String>, base_url: &str, api_key: Option<String>, retry: RetryPolicy) -> Self {
        Self {
            model: model.into(),
            url: format!("{}/chat/completions", base_url.trim_end_matches('/')),
            poster: JsonPoster::new(api_key, retry, Duration::from_secs(180)),
        }
    }

    pub(crate) fn body(&self, request: &ChatRequest) -> Value {
        json!({
            "model": self.model,
            "messages": [
                {"role": "system", "content": request.system_prompt},
                {"role": "user", "content": request.user_prompt},
            ],
            "temperature": request.temperature,
        })
    }
}

impl ChatBackend for RemoteChat {
    fn complete(&self, request: &ChatRequest) -> Result<ChatExchange> {
        let resp = self
            .poster
            .post(&self.url, &self.body(request))
            .map_err(|f| Error::ChatBackend {
                status: f.status,
                message: f.message,
            })?;
        parse_completion(request, &resp)
    }
}

pub(crate) fn parse_completion(request: &ChatRequest, resp: &Value) -> Result<ChatExchange> {
    let text = resp
        .pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .ok_or_else(|| Error::ChatBackend {
            status: None,
            message: "response lacks choices[0].message.content".into(),
        })?
        .to_string();
    let reported = resp.get("usage").and_then(|u| {
        Some(Usage::new(
            u.get("prompt_tokens")?.as_u64()?,
            u.get("completion_tokens")?.as_u64()?,
        ))
    });
    let (usage, estimated_usage) = match reported {
        Some(u) => (u, false),
        None => (estimate(request, &text), true),
    };
    Ok(ChatExchange {
        request: request.clone(),
        raw_response: text,
        usage,
        estimated_usage,
        backend: BackendKind::Remote,
    })
}
