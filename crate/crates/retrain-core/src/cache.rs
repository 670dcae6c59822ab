//! Write-once cache of conditional log-probabilities, keyed by
//! (query id, doc id, answer index) and persisted as a JSONL log so pool
//! construction and training are restartable without repeating environment
//! calls.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::RwLock;

use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
struct Key(String, String, u32);

#[derive(Debug, Serialize, Deserialize)]
struct CacheLine {
    q: String,
    d: String,
    a: u32,
    lp: f64,
}

#[derive(Debug, Default)]
pub struct ProbabilityCache {
    map: RwLock<HashMap<Key, f64>>,
}

impl ProbabilityCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, query_id: &str, doc_id: &str, answer_index: u32) -> Option<f64> {
        let map = self.map.read().unwrap();
        map.get(&Key(query_id.to_string(), doc_id.to_string(), answer_index)).copied()
    }

    /// Insert a value. Keys are write-once: a second insert with a different
    /// value is rejected and the original is kept. Returns whether the value
    /// was stored.
    pub fn put(&self, query_id: &str, doc_id: &str, answer_index: u32, logprob: f64) -> bool {
        let mut map = self.map.write().unwrap();
        let key = Key(query_id.to_string(), doc_id.to_string(), answer_index);
        match map.get(&key) {
            Some(existing) => {
                if existing.to_bits() != logprob.to_bits() {
                    log::warn!(
                        "cache: rejected duplicate put for ({query_id}, {doc_id}, {answer_index}): \
                         kept {existing}, ignored {logprob}"
                    );
                }
                false
            }
            None => {
                map.insert(key, logprob);
                true
            }
        }
    }

    pub fn len(&self) -> usize {
        self.map.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Write all entries as JSONL, sorted by key so the file is reproducible.
    /// The log only ever gains entries across persists (keys never change).
    pub fn persist(&self, path: &Path) -> Result<()> {
        let map = self.map.read().unwrap();
        let mut entries: Vec<(&Key, &f64)> = map.iter().collect();
        entries.sort_by(|a, b| a.0.cmp(b.0));
        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        for (key, lp) in entries {
            let line = CacheLine { q: key.0.clone(), d: key.1.clone(), a: key.2, lp: *lp };
            serde_json::to_writer(&mut file, &line)?;
            file.write_all(b"\n")?;
        }
        file.flush()?;
        Ok(())
    }

    /// Load a persisted log; corrupt lines are skipped with a warning.
    pub fn load(path: &Path) -> Result<Self> {
        let cache = Self::new();
        let file = std::fs::File::open(path)?;
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str::<CacheLine>(&line) {
                Ok(entry) => {
                    cache.put(&entry.q, &entry.d, entry.a, entry.lp);
                }
                Err(e) => {
                    log::warn!("cache: skipping corrupt line {} of {}: {e}", i + 1, path.display());
                }
            }
        }
        Ok(cache)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn put_then_get() {
        let cache = ProbabilityCache::new();
        assert!(cache.put("q1", "d1", 0, -1.5));
        assert_eq!(cache.get("q1", "d1", 0), Some(-1.5));
        assert_eq!(cache.get("q1", "d1", 1), None);
    }

    #[test]
    fn duplicate_put_keeps_original() {
        let cache = ProbabilityCache::new();
        assert!(cache.put("q1", "d1", 0, -1.5));
        assert!(!cache.put("q1", "d1", 0, -9.0));
        assert_eq!(cache.get("q1", "d1", 0), Some(-1.5));
    }

    #[test]
    fn persist_reload_roundtrip_and_corrupt_lines() {
        let cache = ProbabilityCache::new();
        cache.put("q1", "d1", 0, -1.5);
        cache.put("q1", "d2", 1, -0.25);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.jsonl");
        cache.persist(&path).unwrap();

        // Corrupt one line in the middle.
        let mut contents = std::fs::read_to_string(&path).unwrap();
        contents.insert_str(0, "not json\n");
        std::fs::write(&path, contents).unwrap();

        let reloaded = ProbabilityCache::load(&path).unwrap();
        assert_eq!(reloaded.len(), 2);
        assert_eq!(reloaded.get("q1", "d1", 0), Some(-1.5));
        assert_eq!(reloaded.get("q1", "d2", 1), Some(-0.25));
    }

    #[test]
    fn persist_is_byte_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a"), dir.path().join("b"));
        let cache = ProbabilityCache::new();
        cache.put("q2", "d1", 0, -2.0);
        cache.put("q1", "d9", 3, -0.125);
        cache.persist(&a).unwrap();
        cache.persist(&b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }
}
