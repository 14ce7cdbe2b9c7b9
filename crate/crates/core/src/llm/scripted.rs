//! Deterministic offline chat backend driven by a playbook.
//!
//! A playbook is an ordered list of rules. Each rule fires when its matcher
//! appears as a substring of the user prompt; the first match wins. Calls
//! that match nothing get the default reply. Rules without explicit token
//! counts get the ceil(chars/4) estimate, flagged as estimated.
//!
//! On disk a playbook is JSONL:
//!
//! ```text
//! {"match": "Where is Alice", "response": "{\"keywords_list\": [4,5]}", "prompt_tokens": 100, "completion_tokens": 10}
//! {"default": "{}"}
//! ```

use std::path::Path;

use serde::Deserialize;

use super::{BackendKind, ChatBackend, ChatExchange, ChatRequest};
use crate::error::{Error, Result};
use crate::ledger::{approx_tokens, Usage};

#[derive(Debug, Clone, PartialEq)]
pub struct ScriptedReply {
    pub response: String,
    pub usage: Option<Usage>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScriptedRule {
    pub matcher: String,
    pub reply: ScriptedReply,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScriptedPlaybook {
    rules: Vec<ScriptedRule>,
    default: ScriptedReply,
}

impl ScriptedPlaybook {
    pub fn new(default_response: impl Into<String>) -> Self {
        Self {
            rules: Vec::new(),
            default: ScriptedReply {
                response: default_response.into(),
                usage: None,
            },
        }
    }

    pub fn with_default_usage(mut self, usage: Usage) -> Self {
        self.default.usage = Some(usage);
        self
    }

    pub fn rule(mut self, matcher: impl Into<String>, response: impl Into<String>, usage: Usage) -> Self {
        self.push(matcher, response, Some(usage));
        self
    }

    /// Adds a rule whose token usage is estimated from text length.
    pub fn rule_estimated(mut self, matcher: impl Into<String>, response: impl Into<String>) -> Self {
        self.push(matcher, response, None);
        self
    }

    pub fn push(&mut self, matcher: impl Into<String>, response: impl Into<String>, usage: Option<Usage>) {
        self.rules.push(ScriptedRule {
            matcher: matcher.into(),
            reply: ScriptedReply {
                response: response.into(),
                usage,
            },
        });
    }

    pub fn rules(&self) -> &[ScriptedRule] {
        &self.rules
    }

    pub fn lookup(&self, user_prompt: &str) -> &ScriptedReply {
        self.rules
            .iter()
            .find(|r| user_prompt.contains(&r.matcher))
            .map_or(&self.default, |r| &r.reply)
    }

    pub fn parse_jsonl(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Line {
            #[serde(rename = "match")]
            matcher: Option<String>,
            response: Option<String>,
            default: Option<String>,
            prompt_tokens: Option<u64>,
            completion_tokens: Option<u64>,
        }

        let mut playbook = ScriptedPlaybook::new("");
        let mut saw_default = false;
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            if raw.trim().is_empty() {
                continue;
            }
            let fail = |m: &str| Error::Config(format!("playbook line {line_no}: {m}"));
            if saw_default {
                return Err(fail("the default entry must be the last line"));
            }
            let line: Line = serde_json::from_str(raw).map_err(|e| fail(&e.to_string()))?;
            let usage = match (line.prompt_tokens, line.completion_tokens) {
                (None, None) => None,
                (p, c) => Some(Usage::new(p.unwrap_or(0), c.unwrap_or(0))),
            };
            match (line.matcher, line.response, line.default) {
                (Some(m), Some(r), None) => playbook.push(m, r, usage),
                (None, None, Some(d)) => {
                    playbook.default = ScriptedReply { response: d, usage };
                    saw_default = true;
                }
                _ => return Err(fail("expected {match, response} or {default}")),
            }
        }
        Ok(playbook)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read playbook {}: {e}", path.display())))?;
        Self::parse_jsonl(&text)
    }

    pub fn to_jsonl(&self) -> String {
        let usage_fields = |u: &Option<Usage>, obj: &mut serde_json::Map<String, serde_json::Value>| {
            if let Some(u) = u {
                obj.insert("prompt_tokens".into(), u.prompt_tokens.into());
                obj.insert("completion_tokens".into(), u.completion_tokens.into());
            }
        };
        let mut out = String::new();
        for rule in &self.rules {
            let mut obj = serde_json::Map::new();
            obj.insert("match".into(), rule.matcher.clone().into());
            obj.insert("response".into(), rule.reply.response.clone().into());
            usage_fields(&rule.reply.usage, &mut obj);
            out.push_str(&serde_json::Value::Object(obj).to_string());
            out.push('\n');
        }
        let mut obj = serde_json::Map::new();
        obj.insert("default".into(), self.default.response.clone().into());
        usage_fields(&self.default.usage, &mut obj);
        out.push_str(&serde_json::Value::Object(obj).to_string());
        out.push('\n');
        out
    }
}

#[derive(Debug, Clone)]
pub struct ScriptedBackend {
    playbook: ScriptedPlaybook,
}

impl ScriptedBackend {
    pub fn new(playbook: ScriptedPlaybook) -> Self {
        Self { playbook }
    }
}

impl ChatBackend for ScriptedBackend {
    fn complete(&self, request: &ChatRequest) -> Result<ChatExchange> {
        let reply = self.playbook.lookup(&request.user_prompt);
        let (usage, estimated) = match reply.usage {
            Some(u) => (u, false),
            None => (estimate(request, &reply.response), true),
        };
        Ok(ChatExchange {
            request: request.clone(),
            raw_response: reply.response.clone(),
            usage,
            estimated_usage: estimated,
            backend: BackendKind::Scripted,
        })
    }
}

/// ceil(chars/4) over the full prompt (system + user) and the response.
pub(crate) fn estimate(request: &ChatRequest, response: &str) -> Usage {
    let prompt_chars = request.system_prompt.chars().count() + request.user_prompt.chars().count();
    Usage::new((prompt_chars as u64).div_ceil(4), approx_tokens(response))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ledger::ModuleTag;

    fn req(user: &str) -> ChatRequest {
        ChatRequest::new(ModuleTag::Light, "system", user)
    }

    #[test]
    fn first_match_wins() {
        let pb = ScriptedPlaybook::new("nothing")
            .rule("Alice", "first", Usage::new(1, 1))
            .rule("Alice home", "second", Usage::new(2, 2));
        let backend = ScriptedBackend::new(pb);
        assert_eq!(backend.complete(&req("Where is Alice home")).unwrap().raw_response, "first");
    }

    #[test]
    fn default_when_unmatched() {
        let pb = ScriptedPlaybook::new("fallback").with_default_usage(Usage::new(3, 4));
        let ex = ScriptedBackend::new(pb).complete(&req("anything")).unwrap();
        assert_eq!(ex.raw_response, "fallback");
        assert_eq!(ex.usage, Usage::new(3, 4));
        assert!(!ex.estimated_usage);
    }

    #[test]
    fn estimated_usage() {
        let pb = ScriptedPlaybook::new("").rule_estimated("x", "12345");
        let ex = ScriptedBackend::new(pb).complete(&req("x")).unwrap();
        // "system" + "x" = 7 chars -> 2; "12345" -> 2
        assert_eq!(ex.usage, Usage::new(2, 2));
        assert!(ex.estimated_usage);
    }

    #[test]
    fn pure_function_of_request() {
        let pb = ScriptedPlaybook::new("d").rule("q", "r", Usage::new(5, 6));
        let b = ScriptedBackend::new(pb);
        assert_eq!(b.complete(&req("q?")).unwrap(), b.complete(&req("q?")).unwrap());
    }

    #[test]
    fn jsonl_roundtrip() {
        let text = concat!(
            r#"{"match": "Where is Alice", "response": "{\"keywords_list\": [4,5]}", "prompt_tokens": 100, "completion_tokens": 10}"#,
            "\n",
            r#"{"match": "estimated", "response": "ok"}"#,
            "\n\n",
            r#"{"default": "{}", "prompt_tokens": 1}"#,
            "\n"
        );
        let pb = ScriptedPlaybook::parse_jsonl(text).unwrap();
        assert_eq!(pb.rules().len(), 2);
        assert_eq!(pb.rules()[0].reply.usage, Some(Usage::new(100, 10)));
        assert_eq!(pb.rules()[1].reply.usage, None);
        assert_eq!(pb.lookup("zzz").usage, Some(Usage::new(1, 0)));
        assert_eq!(ScriptedPlaybook::parse_jsonl(&pb.to_jsonl()).unwrap(), pb);
    }

    #[test]
    fn jsonl_errors() {
        assert!(ScriptedPlaybook::parse_jsonl("{\"match\": \"x\"}").is_err());
        assert!(ScriptedPlaybook::parse_jsonl("{\"default\": \"a\"}\n{\"match\":\"x\",\"response\":\"y\"}").is_err());
        assert!(ScriptedPlaybook::parse_jsonl("not json").is_err());
    }
}
