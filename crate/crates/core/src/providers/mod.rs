//! Model service abstraction: an LLM used for entity extraction, query
//! generation, entity assignment and relevance judging, and a text embedder.
//!
//! Both come in a remote flavour (OpenAI-compatible HTTP) and a deterministic
//! offline stub. Either can be wrapped in a JSONL disk cache.

mod cache;
pub mod prompts;
mod remote;
mod stub;

use std::path::PathBuf;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use cache::{CachedEmbedder, CachedLlm, JsonlCache};
pub use remote::{RemoteEmbedder, RemoteLlm};
pub use stub::{StubEmbedder, StubLlm};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmRequest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub system: Option<String>,
    pub prompt: String,
    pub max_output_tokens: u32,
    pub temperature: f64,
}

impl LlmRequest {
    pub fn new(prompt: impl Into<String>) -> Self {
        Self {
            system: None,
            prompt: prompt.into(),
            max_output_tokens: DEFAULT_MAX_OUTPUT_TOKENS,
            temperature: DEFAULT_TEMPERATURE,
        }
    }

    pub fn with_system(mut self, system: impl Into<String>) -> Self {
        self.system = Some(system.into());
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmResponse {
    pub text: String,
    pub cache_hit: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRequest {
    pub text: String,
    pub dimensions: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    pub vector: Vec<f32>,
    pub cache_hit: bool,
}

pub const DEFAULT_TEMPERATURE: f64 = 0.0;
pub const DEFAULT_MAX_OUTPUT_TOKENS: u32 = 1024;

pub trait LlmProvider: Send + Sync {
    fn model_name(&self) -> &str;
    fn complete(&self, req: &LlmRequest) -> Result<LlmResponse>;
}

pub trait EmbeddingProvider: Send + Sync {
    fn model_name(&self) -> &str;
    fn embed(&self, req: &EmbeddingRequest) -> Result<EmbeddingVector>;
}

impl<T: LlmProvider + ?Sized> LlmProvider for Arc<T> {
    fn model_name(&self) -> &str {
        (**self).model_name()
    }
    fn complete(&self, req: &LlmRequest) -> Result<LlmResponse> {
        (**self).complete(req)
    }
}

impl<T: EmbeddingProvider + ?Sized> EmbeddingProvider for Arc<T> {
    fn model_name(&self) -> &str {
        (**self).model_name()
    }
    fn embed(&self, req: &EmbeddingRequest) -> Result<EmbeddingVector> {
        (**self).embed(req)
    }
}

pub(crate) fn validate_llm_request(req: &LlmRequest) -> Result<()> {
    if req.prompt.trim().is_empty() {
        return Err(Error::invalid("LLM prompt must be non-empty"));
    }
    Ok(())
}

pub(crate) fn validate_embedding_request(req: &EmbeddingRequest) -> Result<()> {
    if req.text.trim().is_empty() {
        return Err(Error::invalid("embedding text must be non-empty"));
    }
    if req.dimensions == 0 {
        return Err(Error::invalid("embedding dimensions must be > 0"));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderMode {
    Remote,
    Stub,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProviderConfig {
    pub mode: ProviderMode,
    #[serde(default)]
    pub base_url: String,
    /// Name of the environment variable holding the API key.
    #[serde(default)]
    pub api_key_env: String,
    #[serde(default)]
    pub model: String,
    #[serde(default)]
    pub cache_dir: Option<PathBuf>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default = "default_max_in_flight")]
    pub max_in_flight: usize,
    #[serde(default = "default_retry_attempts")]
    pub retry_attempts: u32,
    #[serde(default = "default_retry_base_ms")]
    pub retry_base_ms: u64,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
}

fn default_max_in_flight() -> usize {
    8
}
fn default_retry_attempts() -> u32 {
    3
}
fn default_retry_base_ms() -> u64 {
    1000
}
fn default_timeout_secs() -> u64 {
    120
}

impl ProviderConfig {
    pub fn stub(seed: u64) -> Self {
        Self {
            mode: ProviderMode::Stub,
            base_url: String::new(),
            api_key_env: String::new(),
            model: "stub".to_string(),
            cache_dir: None,
            seed: Some(seed),
            max_in_flight: default_max_in_flight(),
            retry_attempts: default_retry_attempts(),
            retry_base_ms: default_retry_base_ms(),
            timeout_secs: default_timeout_secs(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.mode {
            ProviderMode::Stub => {
                if self.seed.is_none() {
                    return Err(Error::invalid("stub provider requires a seed"));
                }
            }
            ProviderMode::Remote => {
                if self.base_url.is_empty() || self.model.is_empty() {
                    return Err(Error::invalid("remote provider requires base_url and model"));
                }
                self.api_key()?;
            }
        }
        if self.max_in_flight == 0 || self.retry_attempts == 0 {
            return Err(Error::invalid(
                "max_in_flight and retry_attempts must be positive",
            ));
        }
        Ok(())
    }

    fn api_key(&self) -> Result<String> {
        if self.api_key_env.is_empty() {
            return Err(Error::invalid("remote provider requires api_key_env"));
        }
        match std::env::var(&self.api_key_env) {
            Ok(k) if !k.trim().is_empty() => Ok(k),
            _ => Err(Error::invalid(format!(
                "environment variable {} is unset or empty",
                self.api_key_env
            ))),
        }
    }

    fn cache_file(&self, kind: &str) -> Option<PathBuf> {
        self.cache_dir.as_ref().map(|dir| {
            let model: String = self
                .model
                .chars()
                .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '.' { c } else { '_' })
                .collect();
            dir.join(format!("{kind}-{model}.jsonl"))
        })
    }
}

pub fn build_llm(cfg: &ProviderConfig) -> Result<Arc<dyn LlmProvider>> {
    cfg.validate()?;
    let inner: Arc<dyn LlmProvider> = match cfg.mode {
        ProviderMode::Stub => Arc::new(StubLlm::new(cfg.seed.unwrap_or_default())),
        ProviderMode::Remote => Arc::new(RemoteLlm::new(cfg, cfg.api_key()?)),
    };
    match cfg.cache_file("llm") {
        Some(path) => Ok(Arc::new(CachedLlm::new(inner, JsonlCache::open(path)?))),
        None => Ok(inner),
    }
}

pub fn build_embedder(cfg: &ProviderConfig) -> Result<Arc<dyn EmbeddingProvider>> {
    cfg.validate()?;
    let inner: Arc<dyn EmbeddingProvider> = match cfg.mode {
        ProviderMode::Stub => Arc::new(StubEmbedder::new(cfg.seed.unwrap_or_default())),
        ProviderMode::Remote => Arc::new(RemoteEmbedder::new(cfg, cfg.api_key()?)),
    };
    match cfg.cache_file("embed") {
        Some(path) => Ok(Arc::new(CachedEmbedder::new(inner, JsonlCache::open(path)?))),
        None => Ok(inner),
    }
}

/// L2-normalize in place; returns the original norm.
pub fn l2_normalize(v: &mut [f32]) -> f64 {
    let norm = v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in v.iter_mut() {
            *x = (*x as f64 / norm) as f32;
        }
    }
    norm
}

/// Dot product accumulated in f64.
pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}
