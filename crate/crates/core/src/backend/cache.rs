//! Append-only JSONL cache of permutation scores.
//!
//! Each line is one scored permutation together with the fields of its
//! [`CacheKey`]. The whole file is loaded into memory on open; new entries
//! are appended and flushed as they arrive. A torn final line (from an
//! interrupted run) is skipped on load.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::ScoredPermutation;
use crate::types::Permutation;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CacheKey {
    pub model_tag: String,
    pub query_id: String,
    pub passage_ids: Vec<String>,
    pub include_prior: bool,
    pub length_normalize: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct CacheLine {
    #[serde(flatten)]
    key: CacheKey,
    permutation: Permutation,
    log_likelihood: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    log_prior: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct CacheStats {
    pub entries: usize,
    pub hits: usize,
    pub misses: usize,
}

impl CacheStats {
    pub fn hit_rate(&self) -> f64 {
        let lookups = self.hits + self.misses;
        if lookups == 0 {
            0.0
        } else {
            self.hits as f64 / lookups as f64
        }
    }
}

#[derive(Debug, Default)]
pub struct ScoreCache {
    path: Option<PathBuf>,
    entries: Mutex<HashMap<CacheKey, ScoredPermutation>>,
    writer: Mutex<Option<File>>,
    hits: AtomicUsize,
    misses: AtomicUsize,
}

impl ScoreCache {
    /// A cache that lives only as long as the process.
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Opens (or creates) the JSONL cache at `path`.
    pub fn open(path: impl AsRef<Path>) -> std::io::Result<Self> {
        let path = path.as_ref().to_path_buf();
        let mut entries = HashMap::new();
        if path.exists() {
            let reader = BufReader::new(File::open(&path)?);
            for (lineno, line) in reader.lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                match serde_json::from_str::<CacheLine>(&line) {
                    Ok(l) => {
                        let scored = ScoredPermutation {
                            permutation: l.permutation,
                            log_likelihood: l.log_likelihood,
                            log_prior: l.log_prior,
                            model_tag: l.key.model_tag.clone(),
                            from_cache: true,
                        };
                        entries.insert(l.key, scored);
                    }
                    Err(e) => log::warn!("{}:{}: skipping unreadable cache line: {e}", path.display(), lineno + 1),
                }
            }
        }
        let mut file = OpenOptions::new().create(true).append(true).open(&path)?;
        // terminate a torn tail so the next append starts on its own line
        let bytes = std::fs::read(&path)?;
        if bytes.last().is_some_and(|&b| b != b'\n') {
            file.write_all(b"\n")?;
        }
        Ok(Self {
            path: Some(path),
            entries: Mutex::new(entries),
            writer: Mutex::new(Some(file)),
            hits: AtomicUsize::new(0),
            misses: AtomicUsize::new(0),
        })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn get(&self, key: &CacheKey) -> Option<ScoredPermutation> {
        let found = self.entries.lock().expect("cache poisoned").get(key).cloned();
        if found.is_some() {
            self.hits.fetch_add(1, Ordering::Relaxed);
        } else {
            self.misses.fetch_add(1, Ordering::Relaxed);
        }
        found
    }

    pub fn insert(&self, key: CacheKey, scored: &ScoredPermutation) -> std::io::Result<()> {
        let line = CacheLine {
            key: key.clone(),
            permutation: scored.permutation.clone(),
            log_likelihood: scored.log_likelihood,
            log_prior: scored.log_prior,
        };
        {
            let mut writer = self.writer.lock().expect("cache writer poisoned");
            if let Some(file) = writer.as_mut() {
                let mut buf = serde_json::to_vec(&line)?;
                buf.push(b'\n');
                file.write_all(&buf)?;
                file.flush()?;
            }
        }
        self.entries.lock().expect("cache poisoned").insert(key, scored.clone());
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.lock().expect("cache poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn stats(&self) -> CacheStats {
        CacheStats {
            entries: self.len(),
            hits: self.hits.load(Ordering::Relaxed),
            misses: self.misses.load(Ordering::Relaxed),
        }
    }

    /// Drops every entry, truncating the backing file.
    pub fn clear(&self) -> std::io::Result<()> {
        self.entries.lock().expect("cache poisoned").clear();
        if let Some(path) = &self.path {
            let file = OpenOptions::new().write(true).truncate(true).open(path)?;
            drop(file);
            *self.writer.lock().expect("cache writer poisoned") =
                Some(OpenOptions::new().append(true).open(path)?);
        }
        Ok(())
    }
}
