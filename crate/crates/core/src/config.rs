//! Engine configuration.
//!
//! The on-disk form is a flat TOML document:
//!
//! ```toml
//! k = 10
//! N = 30
//! d = 10
//! T = 3
//! embedding_dim = 256
//! max_in_flight = 4
//! chat_backend = "remote:gpt-4.1-mini@https://api.openai.com/v1"
//! embedding_backend = "fallback"
//! ```
//!
//! Backend descriptors:
//! - chat: `scripted:<playbook.jsonl>` or `remote:<model>@<base_url>`
//! - embedding: `fallback` or `remote:<model>@<base_url>`
//!
//! `HYMEM_API_KEY` in the environment overrides any `api_key` in the file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const API_KEY_ENV: &str = "HYMEM_API_KEY";

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ChatBackendSpec {
    Scripted { playbook: PathBuf },
    Remote { model: String, base_url: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum EmbeddingBackendSpec {
    #[default]
    Fallback,
    Remote { model: String, base_url: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    /// Light-path retrieval count.
    pub k: usize,
    /// Deep-path coarse recall count.
    #[serde(rename = "N")]
    pub n: usize,
    /// Batch size for LLM self-retrieval.
    pub d: usize,
    /// Maximum reflection iterations.
    #[serde(rename = "T")]
    pub t: usize,
    pub embedding_dim: usize,
    pub max_in_flight: usize,
    pub chat_backend: Option<String>,
    pub embedding_backend: String,
    pub api_key: Option<String>,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            k: 10,
            n: 30,
            d: 10,
            t: 3,
            embedding_dim: 256,
            max_in_flight: 4,
            chat_backend: None,
            embedding_backend: "fallback".into(),
            api_key: None,
        }
    }
}

impl Config {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.k < 1 {
            return fail("k must be at least 1".into());
        }
        if self.n < self.k {
            return fail(format!("N ({}) must be at least k ({})", self.n, self.k));
        }
        if self.d < 1 {
            return fail("d must be at least 1".into());
        }
        if self.t < 1 {
            return fail("T must be at least 1".into());
        }
        if self.embedding_dim < 1 {
            return fail("embedding_dim must be at least 1".into());
        }
        if self.max_in_flight < 1 {
            return fail("max_in_flight must be at least 1".into());
        }
        if let Some(chat) = &self.chat_backend {
            parse_chat_backend(chat)?;
        }
        parse_embedding_backend(&self.embedding_backend)?;
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let config: Config = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Ok(config)
    }

    /// Reads a config file, applies the API-key environment override, and
    /// validates. Relative playbook paths resolve against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut config = Self::parse(&text)?;
        if let Some(chat) = &config.chat_backend {
            if let Some(rest) = chat.strip_prefix("scripted:") {
                let p = Path::new(rest);
                if p.is_relative() {
                    let base = path.parent().unwrap_or(Path::new("."));
                    config.chat_backend = Some(format!("scripted:{}", base.join(p).display()));
                }
            }
        }
        config.apply_env();
        config.validate()?;
        Ok(config)
    }

    pub fn apply_env(&mut self) {
        if let Ok(key) = std::env::var(API_KEY_ENV) {
            if !key.is_empty() {
                self.api_key = Some(key);
            }
        }
    }

    pub fn chat_backend_spec(&self) -> Result<ChatBackendSpec> {
        match &self.chat_backend {
            Some(desc) => parse_chat_backend(desc),
            None => Err(Error::Config("no chat_backend configured".into())),
        }
    }

    pub fn embedding_backend_spec(&self) -> Result<EmbeddingBackendSpec> {
        parse_embedding_backend(&self.embedding_backend)
    }
}

fn parse_remote(rest: &str, what: &str) -> Result<(String, String)> {
    match rest.split_once('@') {
        Some((model, url)) if !model.is_empty() && !url.is_empty() => {
            Ok((model.to_string(), url.trim_end_matches('/').to_string()))
        }
        _ => Err(Error::Config(format!(
            "{what} descriptor must look like remote:<model>@<base_url>, got {rest:?}"
        ))),
    }
}

fn parse_chat_backend(desc: &str) -> Result<ChatBackendSpec> {
    if let Some(path) = desc.strip_prefix("scripted:") {
        if path.is_empty() {
            return Err(Error::Config("scripted chat backend needs a playbook path".into()));
        }
        return Ok(ChatBackendSpec::Scripted {
            playbook: PathBuf::from(path),
        });
    }
    if let Some(rest) = desc.strip_prefix("remote:") {
        let (model, base_url) = parse_remote(rest, "chat_backend")?;
        return Ok(ChatBackendSpec::Remote { model, base_url });
    }
    Err(Error::Config(format!("unknown chat_backend {desc:?}")))
}

fn parse_embedding_backend(desc: &str) -> Result<EmbeddingBackendSpec> {
    if desc == "fallback" {
        return Ok(EmbeddingBackendSpec::Fallback);
    }
    if let Some(rest) = desc.strip_prefix("remote:") {
        let (model, base_url) = parse_remote(rest, "embedding_backend")?;
        return Ok(EmbeddingBackendSpec::Remote { model, base_url });
    }
    Err(Error::Config(format!("unknown embedding_backend {desc:?}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = Config::default();
        assert_eq!((c.k, c.n, c.d, c.t), (10, 30, 10, 3));
        c.validate().unwrap();
        assert_eq!(Config::parse("").unwrap(), c);
    }

    #[test]
    fn parse_flat_document() {
        let c = Config::parse(
            "k = 5\nN = 12\nd = 3\nT = 2\nembedding_dim = 64\nmax_in_flight = 2\n\
             chat_backend = \"remote:gpt-4.1-mini@https://api.example.com/v1/\"\n\
             embedding_backend = \"remote:qwen3-embedding@http://localhost:8000\"\n",
        )
        .unwrap();
        c.validate().unwrap();
        assert_eq!((c.k, c.n, c.d, c.t), (5, 12, 3, 2));
        assert_eq!(
            c.chat_backend_spec().unwrap(),
            ChatBackendSpec::Remote {
                model: "gpt-4.1-mini".into(),
                base_url: "https://api.example.com/v1".into()
            }
        );
        assert!(matches!(
            c.embedding_backend_spec().unwrap(),
            EmbeddingBackendSpec::Remote { .. }
        ));
    }

    #[test]
    fn rejects_bad_values() {
        assert!(Config::parse("bogus = 1").is_err());
        for bad in ["k = 0", "k = 40", "d = 0", "T = 0", "max_in_flight = 0"] {
            let c = Config::parse(bad).unwrap();
            assert!(c.validate().is_err(), "{bad} should be rejected");
        }
        let c = Config::parse("chat_backend = \"carrier-pigeon\"").unwrap();
        assert!(c.validate().is_err());
        let c = Config::parse("embedding_backend = \"remote:nomodel\"").unwrap();
        assert!(c.validate().is_err());
    }

    #[test]
    fn relative_playbook_resolves_against_config_dir() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("hymem.toml");
        std::fs::write(&path, "chat_backend = \"scripted:play.jsonl\"\n").unwrap();
        let c = Config::load(&path).unwrap();
        assert_eq!(
            c.chat_backend_spec().unwrap(),
            ChatBackendSpec::Scripted {
                playbook: dir.path().join("play.jsonl")
            }
        );
    }
}
