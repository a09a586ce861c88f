use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use super::{
    EmbeddingProvider, EmbeddingRequest, EmbeddingVector, LlmProvider, LlmRequest, LlmResponse,
};
use crate::error::{Error, Result};

#[derive(Serialize, Deserialize)]
struct Entry {
    key: String,
    value: Value,
}

/// Append-only JSONL key/value store, `{"key": hex, "value": ...}` per line.
///
/// Unparseable lines are dropped on open and the file is rewritten without
/// them. Writes are serialized through one mutex, and a key is only appended
/// if no other writer stored it first.
pub struct JsonlCache {
    path: PathBuf,
    entries: RwLock<HashMap<String, Value>>,
    writer: Mutex<()>,
    corrupt_lines: usize,
}

impl JsonlCache {
    pub fn open(path: impl Into<PathBuf>) -> Result<Self> {
        let path = path.into();
        let mut entries = HashMap::new();
        let mut corrupt = 0;
        if path.exists() {
            let f = File::open(&path).map_err(|e| Error::io(&path, e))?;
            for line in BufReader::new(f).lines() {
                let line = line.map_err(|e| Error::io(&path, e))?;
                if line.trim().is_empty() {
                    continue;
                }
                match serde_json::from_str::<Entry>(&line) {
                    Ok(e) => {
                        entries.insert(e.key, e.value);
                    }
                    Err(_) => corrupt += 1,
                }
            }
        } else if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let cache = Self {
            path,
            entries: RwLock::new(entries),
            writer: Mutex::new(()),
            corrupt_lines: corrupt,
        };
        if corrupt > 0 {
            log::warn!(
                "{}: dropped {corrupt} corrupt cache line(s), rebuilding",
                cache.path.display()
            );
            cache.rewrite()?;
        }
        Ok(cache)
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn corrupt_lines(&self) -> usize {
        self.corrupt_lines
    }

    pub fn len(&self) -> usize {
        self.entries.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn rewrite(&self) -> Result<()> {
        let _guard = self.writer.lock().unwrap();
        let entries = self.entries.read().unwrap();
        let mut keys: Vec<&String> = entries.keys().collect();
        keys.sort();
        let f = File::create(&self.path).map_err(|e| Error::io(&self.path, e))?;
        let mut w = BufWriter::new(f);
        for k in keys {
            let entry = Entry {
                key: k.clone(),
                value: entries[k].clone(),
            };
            serde_json::to_writer(&mut w, &entry)?;
            w.write_all(b"\n").map_err(|e| Error::io(&self.path, e))?;
        }
        w.flush().map_err(|e| Error::io(&self.path, e))
    }

    pub fn get(&self, key: &str) -> Option<Value> {
        self.entries.read().unwrap().get(key).cloned()
    }

    pub fn put(&self, key: &str, value: Value) -> Result<()> {
        let _guard = self.writer.lock().unwrap();
        if self.entries.read().unwrap().contains_key(key) {
            return Ok(());
        }
        let entry = Entry {
            key: key.to_string(),
            value,
        };
        let mut line = serde_json::to_string(&entry)?;
        line.push('\n');
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)
            .map_err(|e| Error::io(&self.path, e))?;
        f.write_all(line.as_bytes())
            .map_err(|e| Error::io(&self.path, e))?;
        self.entries
            .write()
            .unwrap()
            .insert(entry.key, entry.value);
        Ok(())
    }
}

/// SHA-256 over (model name, JSON request payload).
pub fn cache_key<T: Serialize>(model: &str, request: &T) -> Result<String> {
    let mut h = Sha256::new();
    h.update(model.as_bytes());
    h.update([0u8]);
    h.update(serde_json::to_vec(request)?);
    Ok(hex::encode(h.finalize()))
}

pub struct CachedLlm {
    inner: Arc<dyn LlmProvider>,
    cache: JsonlCache,
}

impl CachedLlm {
    pub fn new(inner: Arc<dyn LlmProvider>, cache: JsonlCache) -> Self {
        Self { inner, cache }
    }
}

impl LlmProvider for CachedLlm {
    fn model_name(&self) -> &str {
        self.inner.model_name()
    }

    fn complete(&self, req: &LlmRequest) -> Result<LlmResponse> {
        let key = cache_key(self.inner.model_name(), req)?;
        if let Some(Value::String(text)) = self.cache.get(&key) {
            return Ok(LlmResponse {
                text,
                cache_hit: true,
            });
        }
        let resp = self.inner.complete(req)?;
        self.cache.put(&key, Value::String(resp.text.clone()))?;
        Ok(LlmResponse {
            text: resp.text,
            cache_hit: false,
        })
    }
}

pub struct CachedEmbedder {
    inner: Arc<dyn EmbeddingProvider>,
    cache: JsonlCache,
}

impl CachedEmbedder {
    pub fn new(inner: Arc<dyn EmbeddingProvider>, cache: JsonlCache) -> Self {
        Self { inner, cache }
    }
}

impl EmbeddingProvider for CachedEmbedder {
    fn model_name(&self) -> &str {
        self.inner.model_name()
    }

    fn embed(&self, req: &EmbeddingRequest) -> Result<EmbeddingVector> {
        let key = cache_key(self.inner.model_name(), req)?;
        if let Some(value) = self.cache.get(&key) {
            if let Ok(vector) = serde_json::from_value::<Vec<f32>>(value) {
                if vector.len() == req.dimensions {
                    return Ok(EmbeddingVector {
                        vector,
                        cache_hit: true,
                    });
                }
            }
        }
        let resp = self.inner.embed(req)?;
        self.cache.put(&key, serde_json::to_value(&resp.vector)?)?;
        Ok(EmbeddingVector {
            vector: resp.vector,
            cache_hit: false,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::providers::{prompts, StubEmbedder, StubLlm};

    #[test]
    fn second_identical_request_is_a_hit() {
        let dir = tempfile::tempdir().unwrap();
        let llm = CachedLlm::new(
            Arc::new(StubLlm::new(1)),
            JsonlCache::open(dir.path().join("llm.jsonl")).unwrap(),
        );
        let req = LlmRequest::new(prompts::extraction("the cat sat quietly"));
        let a = llm.complete(&req).unwrap();
        let b = llm.complete(&req).unwrap();
        assert!(!a.cache_hit);
        assert!(b.cache_hit);
        assert_eq!(a.text, b.text);
    }

    #[test]
    fn cache_persists_and_survives_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("embed.jsonl");
        let req = EmbeddingRequest {
            text: "cat".into(),
            dimensions: 8,
        };
        let first = {
            let e = CachedEmbedder::new(Arc::new(StubEmbedder::new(2)), JsonlCache::open(&path).unwrap());
            e.embed(&req).unwrap()
        };
        let mut raw = std::fs::read_to_string(&path).unwrap();
        raw.push_str("{broken\n");
        std::fs::write(&path, raw).unwrap();
        let cache = JsonlCache::open(&path).unwrap();
        assert_eq!(cache.corrupt_lines(), 1);
        let e = CachedEmbedder::new(Arc::new(StubEmbedder::new(2)), cache);
        let second = e.embed(&req).unwrap();
        assert!(second.cache_hit);
        assert_eq!(first.vector, second.vector);
        assert!(!std::fs::read_to_string(&path).unwrap().contains("broken"));
    }

    #[test]
    fn key_depends_on_model_and_payload() {
        let r1 = LlmRequest::new("a");
        let r2 = LlmRequest::new("b");
        assert_ne!(cache_key("m", &r1).unwrap(), cache_key("m", &r2).unwrap());
        assert_ne!(cache_key("m", &r1).unwrap(), cache_key("n", &r1).unwrap());
        assert_eq!(cache_key("m", &r1).unwrap().len(), 64);
    }
}
