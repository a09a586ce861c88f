//! OpenAI-compatible HTTP providers (`/chat/completions`, `/embeddings`).

use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::Deserialize;
use serde_json::json;

use super::{
    l2_normalize, validate_embedding_request, validate_llm_request, EmbeddingProvider,
    EmbeddingRequest, EmbeddingVector, LlmProvider, LlmRequest, LlmResponse, ProviderConfig,
};
use crate::error::{Error, Result};

/// Counting semaphore bounding in-flight requests.
struct Slots {
    free: Mutex<usize>,
    cv: Condvar,
}

impl Slots {
    fn new(n: usize) -> Self {
        Self {
            free: Mutex::new(n),
            cv: Condvar::new(),
        }
    }

    fn run<T>(&self, f: impl FnOnce() -> T) -> T {
        {
            let mut free = self.free.lock().unwrap();
            while *free == 0 {
                free = self.cv.wait(free).unwrap();
            }
            *free -= 1;
        }
        let out = f();
        *self.free.lock().unwrap() += 1;
        self.cv.notify_one();
        out
    }
}

struct Client {
    agent: ureq::Agent,
    base_url: String,
    api_key: String,
    model: String,
    attempts: u32,
    backoff: Duration,
    slots: Slots,
}

impl Client {
    fn new(cfg: &ProviderConfig, api_key: String) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(cfg.timeout_secs)))
            .build()
            .into();
        Self {
            agent,
            base_url: cfg.base_url.trim_end_matches('/').to_string(),
            api_key,
            model: cfg.model.clone(),
            attempts: cfg.retry_attempts,
            backoff: Duration::from_millis(cfg.retry_base_ms),
            slots: Slots::new(cfg.max_in_flight),
        }
    }

    /// POST with bounded retries and exponential backoff.
    fn post<T: for<'de> Deserialize<'de>>(&self, path: &str, body: serde_json::Value) -> Result<T> {
        let url = format!("{}{}", self.base_url, path);
        let mut last_status = None;
        let mut last_message = String::new();
        for attempt in 0..self.attempts {
            if attempt > 0 {
                std::thread::sleep(self.backoff * 2u32.pow(attempt - 1));
            }
            let result = self.slots.run(|| {
                self.agent
                    .post(&url)
                    .header("Authorization", &format!("Bearer {}", self.api_key))
                    .send_json(&body)
                    .and_then(|mut resp| resp.body_mut().read_json::<T>())
            });
            match result {
                Ok(v) => return Ok(v),
                Err(ureq::Error::StatusCode(code)) => {
                    last_status = Some(code);
                    last_message = format!("{url} returned status {code}");
                }
                Err(e) => {
                    last_message = e.to_string();
                }
            }
            log::warn!("attempt {} of {} failed: {last_message}", attempt + 1, self.attempts);
        }
        Err(Error::Provider {
            status: last_status,
            attempts: self.attempts,
            message: last_message,
        })
    }
}

#[derive(Deserialize)]
struct ChatMessage {
    content: Option<String>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatMessage,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct EmbeddingDatum {
    embedding: Vec<f32>,
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingDatum>,
}

pub struct RemoteLlm {
    client: Client,
}

impl RemoteLlm {
    pub fn new(cfg: &ProviderConfig, api_key: String) -> Self {
        Self {
            client: Client::new(cfg, api_key),
        }
    }
}

impl LlmProvider for RemoteLlm {
    fn model_name(&self) -> &str {
        &self.client.model
    }

    fn complete(&self, req: &LlmRequest) -> Result<LlmResponse> {
        validate_llm_request(req)?;
        let mut messages = Vec::new();
        if let Some(system) = &req.system {
            messages.push(json!({"role": "system", "content": system}));
        }
        messages.push(json!({"role": "user", "content": req.prompt}));
        let body = json!({
            "model": self.client.model,
            "messages": messages,
            "temperature": req.temperature,
            "max_tokens": req.max_output_tokens,
        });
        let resp: ChatResponse = self.client.post("/chat/completions", body)?;
        let text = resp
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .unwrap_or_default();
        Ok(LlmResponse {
            text: text.trim().to_string(),
            cache_hit: false,
        })
    }
}

pub struct RemoteEmbedder {
    client: Client,
}

impl RemoteEmbedder {
    pub fn new(cfg: &ProviderConfig, api_key: String) -> Self {
        Self {
            client: Client::new(cfg, api_key),
        }
    }
}

impl EmbeddingProvider for RemoteEmbedder {
    fn model_name(&self) -> &str {
        &self.client.model
    }

    fn embed(&self, req: &EmbeddingRequest) -> Result<EmbeddingVector> {
        validate_embedding_request(req)?;
        let body = json!({
            "model": self.client.model,
            "input": req.text,
            "dimensions": req.dimensions,
        });
        let resp: EmbeddingResponse = self.client.post("/embeddings", body)?;
        let mut vector = resp
            .data
            .into_iter()
            .next()
            .map(|d| d.embedding)
            .unwrap_or_default();
        if vector.len() != req.dimensions {
            return Err(Error::Provider {
                status: None,
                attempts: 1,
                message: format!(
                    "embedding has {} dimensions, requested {}",
                    vector.len(),
                    req.dimensions
                ),
            });
        }
        l2_normalize(&mut vector);
        Ok(EmbeddingVector {
            vector,
            cache_hit: false,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::providers::ProviderMode;
    use std::io::{Read, Write};
    use std::net::TcpListener;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;

    /// Serve `n` connections with a fixed status and body, counting requests.
    fn serve(status: u16, body: &'static str, n: usize) -> (String, Arc<AtomicUsize>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let hits = Arc::new(AtomicUsize::new(0));
        let counter = hits.clone();
        std::thread::spawn(move || {
            for stream in listener.incoming().take(n) {
                let mut s = stream.unwrap();
                let mut buf = [0u8; 8192];
                let _ = s.read(&mut buf);
                counter.fetch_add(1, Ordering::SeqCst);
                let reply = format!(
                    "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                    body.len()
                );
                let _ = s.write_all(reply.as_bytes());
            }
        });
        (format!("http://{addr}"), hits)
    }

    fn cfg(base_url: String) -> ProviderConfig {
        ProviderConfig {
            mode: ProviderMode::Remote,
            base_url,
            api_key_env: String::new(),
            model: "m".into(),
            cache_dir: None,
            seed: None,
            max_in_flight: 2,
            retry_attempts: 3,
            retry_base_ms: 5,
            timeout_secs: 5,
        }
    }

    #[test]
    fn failure_surfaces_status_after_retries() {
        let (url, hits) = serve(500, "{}", 3);
        let llm = RemoteLlm::new(&cfg(url), "k".into());
        let err = llm.complete(&LlmRequest::new("hi")).unwrap_err();
        assert!(matches!(err, Error::Provider { status: Some(500), attempts: 3, .. }), "{err}");
        assert_eq!(hits.load(Ordering::SeqCst), 3);
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn parses_chat_and_embedding_responses() {
        let (url, _) = serve(200, r#"{"choices":[{"message":{"content":" 0, 2 "}}]}"#, 1);
        let llm = RemoteLlm::new(&cfg(url), "k".into());
        assert_eq!(llm.complete(&LlmRequest::new("hi")).unwrap().text, "0, 2");

        let (url, _) = serve(200, r#"{"data":[{"embedding":[3.0,4.0]}]}"#, 1);
        let emb = RemoteEmbedder::new(&cfg(url), "k".into());
        let v = emb
            .embed(&EmbeddingRequest {
                text: "x".into(),
                dimensions: 2,
            })
            .unwrap();
        assert!((v.vector[0] - 0.6).abs() < 1e-6 && (v.vector[1] - 0.8).abs() < 1e-6);
    }
}
