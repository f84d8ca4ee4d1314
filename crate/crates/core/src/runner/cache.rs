//! Append-only response cache: one JSON object per line, sharded by the
//! first two hex characters of the key.

use std::collections::HashMap;
use std::fs::{self, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::backend::wire::canonical_json;
use crate::backend::{GenerationOptions, LoglikelihoodResult, ModelResponse};
use crate::prompt::PromptBundle;

/// The request a cache entry answers.
#[derive(Debug, Clone, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CacheRequest<'a> {
    Generate {
        bundle: &'a PromptBundle,
        options: &'a GenerationOptions,
    },
    Loglikelihood {
        context: &'a str,
        continuation: &'a str,
    },
}

/// SHA-256 hex digest of the canonical JSON form of `value`.
pub fn digest_value(value: &Value) -> String {
    hex::encode(Sha256::digest(canonical_json(value).as_bytes()))
}

pub fn cache_key(model_name: &str, request: &CacheRequest<'_>) -> String {
    digest_value(&json!({
        "model": model_name,
        "request": serde_json::to_value(request).expect("plain data"),
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CachedResponse {
    Generation(ModelResponse),
    Loglikelihood(LoglikelihoodResult),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub key: String,
    pub response: CachedResponse,
    pub created_at: DateTime<Utc>,
}

pub struct ResponseCache {
    dir: PathBuf,
    entries: Mutex<HashMap<String, CachedResponse>>,
    writer: Mutex<()>,
}

/// Make sure later appends start on a fresh line.
fn terminate_torn_line(path: &Path) -> io::Result<()> {
    let bytes = fs::read(path)?;
    if bytes.last().is_some_and(|&b| b != b'\n') {
        OpenOptions::new().append(true).open(path)?.write_all(b"\n")?;
    }
    Ok(())
}

impl ResponseCache {
    /// Open (creating if needed) a cache directory and index its shards.
    /// Unparseable lines, such as a torn final write, are skipped.
    pub fn open(dir: &Path) -> io::Result<Self> {
        fs::create_dir_all(dir)?;
        let mut entries = HashMap::new();
        let mut shards: Vec<PathBuf> = fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "jsonl"))
            .collect();
        shards.sort();
        for shard in shards {
            terminate_torn_line(&shard)?;
            for line in BufReader::new(fs::File::open(&shard)?).lines() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                match serde_json::from_str::<CacheEntry>(&line) {
                    Ok(entry) => {
                        entries.insert(entry.key, entry.response);
                    }
                    Err(e) => tracing::warn!(shard = %shard.display(), error = %e, "skipping unreadable cache line"),
                }
            }
        }
        Ok(ResponseCache {
            dir: dir.to_path_buf(),
            entries: Mutex::new(entries),
            writer: Mutex::new(()),
        })
    }

    pub fn len(&self) -> usize {
        self.entries.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, key: &str) -> Option<CachedResponse> {
        self.entries.lock().unwrap().get(key).cloned()
    }

    fn shard_path(&self, key: &str) -> PathBuf {
        let prefix = key.get(..2).unwrap_or("00");
        self.dir.join(format!("{prefix}.jsonl"))
    }

    pub fn put(&self, key: &str, response: CachedResponse) -> io::Result<()> {
        let entry = CacheEntry {
            key: key.to_string(),
            response,
            created_at: Utc::now(),
        };
        let line = serde_json::to_string(&entry).map_err(io::Error::other)?;
        let _guard = self.writer.lock().unwrap();
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(self.shard_path(key))?;
        writeln!(file, "{line}")?;
        self.entries.lock().unwrap().insert(entry.key, entry.response);
        Ok(())
    }
}
