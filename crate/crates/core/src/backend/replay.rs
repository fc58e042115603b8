//! Append-only JSON-lines record/replay cache.
//!
//! Each line is `{key, request, response, timestamp}`. Lookups never touch
//! the file; a miss is forwarded to the fallback backend (if any) and the
//! answer appended as one complete line under a single-writer lock.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Mutex, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{
    cache_key, embedding_cache_key, Backend, BackendError, ChatMessage, ChatRequest, EmbeddingRequest, GenerationParams,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub key: String,
    pub request: Value,
    pub response: Value,
    pub timestamp: u64,
}

pub struct ReplayBackend {
    path: PathBuf,
    entries: RwLock<HashMap<String, Value>>,
    writer: Mutex<Option<File>>,
    fallback: Option<Box<dyn Backend>>,
    torn_tail: bool,
    hits: AtomicU64,
    misses: AtomicU64,
}

impl ReplayBackend {
    /// Loads every complete entry of `path` (missing file = empty cache).
    /// Unparseable lines, such as a torn final write, are skipped.
    pub fn open(path: impl AsRef<Path>, fallback: Option<Box<dyn Backend>>) -> Result<Self, BackendError> {
        let path = path.as_ref().to_path_buf();
        let cache_err = |message: String| BackendError::Cache {
            path: path.clone(),
            message,
        };
        let mut entries = HashMap::new();
        let mut torn_tail = false;
        match std::fs::read_to_string(&path) {
            Ok(text) => {
                torn_tail = !text.is_empty() && !text.ends_with('\n');
                for (i, line) in text.lines().enumerate() {
                    if line.trim().is_empty() {
                        continue;
                    }
                    match serde_json::from_str::<CacheEntry>(line) {
                        Ok(entry) => {
                            entries.entry(entry.key).or_insert(entry.response);
                        }
                        Err(e) => log::warn!("{}:{}: skipping unreadable cache entry: {e}", path.display(), i + 1),
                    }
                }
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
            Err(e) => return Err(cache_err(e.to_string())),
        }
        Ok(Self {
            path,
            entries: RwLock::new(entries),
            writer: Mutex::new(None),
            fallback,
            torn_tail,
            hits: AtomicU64::new(0),
            misses: AtomicU64::new(0),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn len(&self) -> usize {
        self.entries.read().expect("cache lock poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn hits(&self) -> u64 {
        self.hits.load(Ordering::SeqCst)
    }

    /// Requests forwarded to the fallback backend.
    pub fn misses(&self) -> u64 {
        self.misses.load(Ordering::SeqCst)
    }

    fn lookup(&self, key: &str) -> Option<Value> {
        self.entries.read().expect("cache lock poisoned").get(key).cloned()
    }

    fn resolve(
        &self,
        key: String,
        request: impl FnOnce() -> Value,
        call: impl FnOnce(&dyn Backend) -> Result<Value, BackendError>,
    ) -> Result<Value, BackendError> {
        if let Some(v) = self.lookup(&key) {
            self.hits.fetch_add(1, Ordering::SeqCst);
            return Ok(v);
        }
        let Some(fallback) = self.fallback.as_deref() else {
            return Err(BackendError::CacheMiss { key });
        };
        self.misses.fetch_add(1, Ordering::SeqCst);
        let response = call(fallback)?;
        // First writer wins when two threads miss on the same key.
        let mut writer = self.writer.lock().expect("cache writer poisoned");
        let mut entries = self.entries.write().expect("cache lock poisoned");
        if let Some(existing) = entries.get(&key) {
            return Ok(existing.clone());
        }
        let entry = CacheEntry {
            key: key.clone(),
            request: request(),
            response: response.clone(),
            timestamp: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
        };
        self.append(&mut writer, &entry)?;
        entries.insert(key, response.clone());
        Ok(response)
    }

    fn append(&self, writer: &mut Option<File>, entry: &CacheEntry) -> Result<(), BackendError> {
        let cache_err = |e: std::io::Error| BackendError::Cache {
            path: self.path.clone(),
            message: e.to_string(),
        };
        if writer.is_none() {
            if let Some(parent) = self.path.parent().filter(|p| !p.as_os_str().is_empty()) {
                std::fs::create_dir_all(parent).map_err(cache_err)?;
            }
            let mut file = OpenOptions::new()
                .create(true)
                .append(true)
                .open(&self.path)
                .map_err(cache_err)?;
            if self.torn_tail {
                file.write_all(b"\n").map_err(cache_err)?;
            }
            *writer = Some(file);
        }
        let file = writer.as_mut().expect("opened above");
        let mut line = serde_json::to_vec(entry).expect("cache entries serialize");
        line.push(b'\n');
        file.write_all(&line).map_err(cache_err)?;
        file.flush().map_err(cache_err)
    }
}

impl Backend for ReplayBackend {
    fn chat(&self, messages: &[ChatMessage], params: &GenerationParams) -> Result<String, BackendError> {
        let key = cache_key(messages, params).to_string();
        let value = self.resolve(
            key,
            || serde_json::to_value(ChatRequest::new(messages, params)).expect("serializable"),
            |b| b.chat(messages, params).map(Value::String),
        )?;
        match value {
            Value::String(s) => Ok(s),
            other => Err(BackendError::MalformedResponse(format!(
                "cached chat response is not a string: {other}"
            ))),
        }
    }

    fn embed(&self, model: &str, texts: &[String]) -> Result<Vec<Vec<f64>>, BackendError> {
        let key = embedding_cache_key(model, texts).to_string();
        let value = self.resolve(
            key,
            || serde_json::to_value(EmbeddingRequest { model, input: texts }).expect("serializable"),
            |b| {
                let vectors = b.embed(model, texts)?;
                Ok(serde_json::to_value(vectors).expect("finite vectors serialize"))
            },
        )?;
        serde_json::from_value(value).map_err(|e| BackendError::MalformedResponse(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{CountingBackend, MockBackend, MockConfig};
    use crate::dataset::{random_cell_graph, OperatorVocabulary};
    use std::sync::Arc;

    fn mock() -> Arc<CountingBackend<MockBackend>> {
        let v = OperatorVocabulary::default_of_size(5);
        Arc::new(CountingBackend::new(
            MockBackend::new(MockConfig::new(0.5, 0.2, 1, v)).unwrap(),
        ))
    }

    fn request(i: u64) -> Vec<ChatMessage> {
        let cell = random_cell_graph(i, &OperatorVocabulary::default_of_size(5), 3).to_string();
        vec![ChatMessage::system("encode"), ChatMessage::user(cell)]
    }

    #[test]
    fn warmed_cache_needs_no_fallback() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nested/cache.jsonl");
        let p = GenerationParams::new("m", 0.0, 350);
        let inner = mock();
        let first: Vec<String> = {
            let replay = ReplayBackend::open(&path, Some(Box::new(inner.clone()))).unwrap();
            let out = (0..5).map(|i| replay.chat(&request(i), &p).unwrap()).collect();
            assert_eq!(replay.misses(), 5);
            out
        };
        assert_eq!(inner.chat_calls(), 5);
        let bytes = std::fs::read(&path).unwrap();

        let offline = ReplayBackend::open(&path, None).unwrap();
        let second: Vec<String> = (0..5).map(|i| offline.chat(&request(i), &p).unwrap()).collect();
        assert_eq!(first, second);
        assert_eq!(offline.hits(), 5);
        assert_eq!(std::fs::read(&path).unwrap(), bytes, "reads must not touch the file");
        assert!(matches!(
            offline.chat(&request(99), &p),
            Err(BackendError::CacheMiss { .. })
        ));
    }

    #[test]
    fn entries_have_expected_fields() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.jsonl");
        let replay = ReplayBackend::open(&path, Some(Box::new(mock()))).unwrap();
        let p = GenerationParams::new("m", 1.0, 350);
        replay.chat(&request(1), &p).unwrap();
        replay.embed("sts", &["abc".to_string(), "abd".to_string()]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<CacheEntry> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[0].key, cache_key(&request(1), &p).to_string());
        assert_eq!(lines[0].request["max_tokens"], 350);
        assert_eq!(lines[0].request["messages"][1]["role"], "user");
        assert!(lines[0].response.is_string());
        assert!(lines[1].response.is_array());
    }

    #[test]
    fn repeated_request_is_served_from_cache() {
        let dir = tempfile::tempdir().unwrap();
        let inner = mock();
        let replay = ReplayBackend::open(dir.path().join("c.jsonl"), Some(Box::new(inner.clone()))).unwrap();
        let p = GenerationParams::new("m", 1.0, 350);
        let a = replay.chat(&request(3), &p).unwrap();
        let b = replay.chat(&request(3), &p).unwrap();
        assert_eq!(a, b);
        assert_eq!(inner.chat_calls(), 1);
    }

    #[test]
    fn torn_lines_are_skipped() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        {
            let replay = ReplayBackend::open(&path, Some(Box::new(mock()))).unwrap();
            replay.chat(&request(1), &GenerationParams::new("m", 0.0, 5)).unwrap();
        }
        let mut f = OpenOptions::new().append(true).open(&path).unwrap();
        f.write_all(b"{\"key\":\"abc\",\"req").unwrap();
        let replay = ReplayBackend::open(&path, Some(Box::new(mock()))).unwrap();
        assert_eq!(replay.len(), 1);
        replay.chat(&request(2), &GenerationParams::new("m", 0.0, 5)).unwrap();
        drop(replay);
        assert_eq!(ReplayBackend::open(&path, None).unwrap().len(), 2);
    }
}
