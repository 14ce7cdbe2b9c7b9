//! Blocking JSON-over-HTTP POST with bounded exponential backoff, shared by
//! the remote chat and embedding providers.

use std::time::Duration;

use serde_json::Value;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    /// Total attempts, including the first.
    pub attempts: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            attempts: 3,
            base_delay: Duration::from_millis(250),
        }
    }
}

impl RetryPolicy {
    fn delay_before(&self, attempt: u32) -> Duration {
        self.base_delay * 2u32.saturating_pow(attempt.saturating_sub(1))
    }
}

#[derive(Debug)]
pub(crate) struct HttpFailure {
    pub status: Option<u16>,
    pub message: String,
}

fn retryable(status: u16) -> bool {
    status == 408 || status == 429 || status >= 500
}

pub(crate) struct JsonPoster {
    agent: ureq::Agent,
    api_key: Option<String>,
    retry: RetryPolicy,
}

impl JsonPoster {
    pub fn new(api_key: Option<String>, retry: RetryPolicy, timeout: Duration) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            agent,
            api_key,
            retry,
        }
    }

    pub fn post(&self, url: &str, body: &Value) -> Result<Value, HttpFailure> {
        let mut last = HttpFailure {
            status: None,
            message: "no attempt made".into(),
        };
        for attempt in 0..self.retry.attempts.max(1) {
            if attempt > 0 {
                std::thread::sleep(self.retry.delay_before(attempt));
            }
            match self.post_once(url, body) {
                Ok(v) => return Ok(v),
                Err(failure) => {
                    let again = failure.status.is_none_or(retryable);
                    last = failure;
                    if !again {
                        break;
                    }
                }
            }
        }
        Err(last)
    }

    fn post_once(&self, url: &str, body: &Value) -> Result<Value, HttpFailure> {
        let mut req = self.agent.post(url);
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req.send_json(body).map_err(|e| HttpFailure {
            status: None,
            message: e.to_string(),
        })?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| HttpFailure {
                status: Some(status),
                message: e.to_string(),
            })?;
        if !(200..300).contains(&status) {
            return Err(HttpFailure {
                status: Some(status),
                message: truncate(&text, 300),
            });
        }
        serde_json::from_str(&text).map_err(|e| HttpFailure {
            status: Some(status),
            message: format!("response is not JSON: {e}"),
        })
    }
}

fn truncate(s: &str, max: usize) -> String {
    match s.char_indices().nth(max) {
        Some((i, _)) => format!("{}...", &s[..i]),
        None => s.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backoff_doubles() {
        let p = RetryPolicy::default();
        assert_eq!(p.delay_before(1), Duration::from_millis(250));
        assert_eq!(p.delay_before(2), Duration::from_millis(500));
        assert_eq!(p.delay_before(3), Duration::from_millis(1000));
    }

    #[test]
    fn retry_classes() {
        assert!(retryable(500));
        assert!(retryable(503));
        assert!(retryable(429));
        assert!(!retryable(400));
        assert!(!retryable(401));
    }
}
