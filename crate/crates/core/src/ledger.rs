//! Token accounting per LLM touchpoint.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

/// Which pipeline stage spent the tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ModuleTag {
    Light,
    DeepRetrieve,
    DeepGenerate,
    Reflect,
    Summarize,
    Judge,
}

impl ModuleTag {
    pub const ALL: [ModuleTag; 6] = [
        ModuleTag::Light,
        ModuleTag::DeepRetrieve,
        ModuleTag::DeepGenerate,
        ModuleTag::Reflect,
        ModuleTag::Summarize,
        ModuleTag::Judge,
    ];

    pub fn is_deep(self) -> bool {
        matches!(self, ModuleTag::DeepRetrieve | ModuleTag::DeepGenerate)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

impl Usage {
    pub fn new(prompt_tokens: u64, completion_tokens: u64) -> Self {
        Self {
            prompt_tokens,
            completion_tokens,
        }
    }

    pub fn total(&self) -> u64 {
        self.prompt_tokens + self.completion_tokens
    }

    /// Rough count used when a backend reports no usage: one token per four
    /// characters, rounded up.
    pub fn estimate(prompt: &str, completion: &str) -> Self {
        Self {
            prompt_tokens: approx_tokens(prompt),
            completion_tokens: approx_tokens(completion),
        }
    }
}

pub fn approx_tokens(text: &str) -> u64 {
    (text.chars().count() as u64).div_ceil(4)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub tag: ModuleTag,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    /// True when the counts were estimated rather than reported.
    #[serde(default)]
    pub estimated: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenLedger {
    entries: Vec<LedgerEntry>,
}

impl TokenLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, tag: ModuleTag, usage: Usage, estimated: bool) {
        self.entries.push(LedgerEntry {
            tag,
            prompt_tokens: usage.prompt_tokens,
            completion_tokens: usage.completion_tokens,
            estimated,
        });
    }

    pub fn entries(&self) -> &[LedgerEntry] {
        &self.entries
    }

    pub fn total(&self) -> u64 {
        self.entries
            .iter()
            .map(|e| e.prompt_tokens + e.completion_tokens)
            .sum()
    }

    pub fn subtotal(&self, tag: ModuleTag) -> u64 {
        self.entries
            .iter()
            .filter(|e| e.tag == tag)
            .map(|e| e.prompt_tokens + e.completion_tokens)
            .sum()
    }

    pub fn subtotals(&self) -> BTreeMap<ModuleTag, u64> {
        let mut out = BTreeMap::new();
        for e in &self.entries {
            *out.entry(e.tag).or_insert(0) += e.prompt_tokens + e.completion_tokens;
        }
        out
    }

    pub fn calls(&self, tag: ModuleTag) -> usize {
        self.entries.iter().filter(|e| e.tag == tag).count()
    }

    pub fn has_deep(&self) -> bool {
        self.entries.iter().any(|e| e.tag.is_deep())
    }

    pub fn any_estimated(&self) -> bool {
        self.entries.iter().any(|e| e.estimated)
    }

    /// Moves all entries of `other` to the end of this ledger, keeping order.
    pub fn absorb(&mut self, other: TokenLedger) {
        self.entries.extend(other.entries);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn estimate_rounds_up() {
        assert_eq!(approx_tokens(""), 0);
        assert_eq!(approx_tokens("abc"), 1);
        assert_eq!(approx_tokens("abcd"), 1);
        assert_eq!(approx_tokens("abcde"), 2);
        // counts characters, not bytes
        assert_eq!(approx_tokens("ééééé"), 2);
    }

    fn tag_strategy() -> impl Strategy<Value = ModuleTag> {
        (0usize..6).prop_map(|i| ModuleTag::ALL[i])
    }

    proptest! {
        #[test]
        fn subtotals_partition_total(
            entries in proptest::collection::vec((tag_strategy(), 0u64..10_000, 0u64..10_000), 0..40)
        ) {
            let mut ledger = TokenLedger::new();
            for (tag, p, c) in &entries {
                ledger.record(*tag, Usage::new(*p, *c), false);
            }
            let expected: u64 = entries.iter().map(|(_, p, c)| p + c).sum();
            prop_assert_eq!(ledger.total(), expected);
            prop_assert_eq!(ledger.subtotals().values().sum::<u64>(), expected);
            let by_tag: u64 = ModuleTag::ALL.iter().map(|t| ledger.subtotal(*t)).sum();
            prop_assert_eq!(by_tag, expected);
        }
    }
}
