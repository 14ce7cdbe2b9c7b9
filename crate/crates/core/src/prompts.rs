//! Prompt templates.
//!
//! Each template is a fixed system prompt plus a user template with `{slot}`
//! placeholders. The text lives under `prompts/v1/` and is byte-stable:
//! scripted playbooks match on it.

use std::collections::HashMap;

pub const PROMPT_VERSION: &str = "v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PromptTemplate {
    pub name: &'static str,
    pub system: &'static str,
    pub user: &'static str,
}

macro_rules! template {
    ($name:literal) => {
        PromptTemplate {
            name: $name,
            system: include_str!(concat!("../prompts/v1/", $name, ".system.txt")),
            user: include_str!(concat!("../prompts/v1/", $name, ".user.txt")),
        }
    };
}

/// Distills an event passage into key sentences. Slot: `context`.
pub const SUMMARY: PromptTemplate = template!("summary");
/// Proposes topic boundaries for a dialogue. Slot: `context`.
pub const SEGMENT: PromptTemplate = template!("segment");
/// Light-path generator. Slots: `question`, `context`, `pool`.
pub const LIGHT_GENERATOR: PromptTemplate = template!("light_generator");
/// LLM self-retrieval over summary indices. Slots: `question`, `indices`.
pub const RETRIEVER: PromptTemplate = template!("retriever");
/// Deep-path generator over raw passages. Slots: `question`, `context`, `pool`.
pub const DEEP_GENERATOR: PromptTemplate = template!("deep_generator");
/// Completeness check and query rewrite. Slots: `question`, `answer`.
pub const REFLECT: PromptTemplate = template!("reflect");
/// Answer grading. Slots: `question`, `gold_answer`, `generated_answer`.
pub const JUDGE: PromptTemplate = template!("judge");

pub const ALL: [PromptTemplate; 7] = [
    SUMMARY,
    SEGMENT,
    LIGHT_GENERATOR,
    RETRIEVER,
    DEEP_GENERATOR,
    REFLECT,
    JUDGE,
];

impl PromptTemplate {
    /// Fills the user template in a single pass, so slot-like text inside
    /// substituted values is left alone. Unknown slots render verbatim.
    pub fn render_user(&self, slots: &[(&str, &str)]) -> String {
        render(self.user, slots)
    }

    pub fn slots(&self) -> Vec<&'static str> {
        let mut out = Vec::new();
        let mut rest = self.user;
        while let Some(open) = rest.find('{') {
            let after = &rest[open + 1..];
            match after.find('}') {
                Some(close) if is_slot_name(&after[..close]) => {
                    out.push(&after[..close]);
                    rest = &after[close + 1..];
                }
                _ => rest = after,
            }
        }
        out
    }
}

fn is_slot_name(s: &str) -> bool {
    !s.is_empty() && s.chars().all(|c| c.is_ascii_lowercase() || c == '_')
}

pub fn render(template: &str, slots: &[(&str, &str)]) -> String {
    let lookup: HashMap<&str, &str> = slots.iter().copied().collect();
    let mut out = String::with_capacity(template.len() + slots.iter().map(|(_, v)| v.len()).sum::<usize>());
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        match after.find('}') {
            Some(close) if is_slot_name(&after[..close]) && lookup.contains_key(&after[..close]) => {
                out.push_str(lookup[&after[..close]]);
                rest = &after[close + 1..];
            }
            _ => {
                out.push('{');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    out
}
