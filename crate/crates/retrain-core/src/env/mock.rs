//! Deterministic mock environment.
//!
//! Each query has a helpful-token set `H(q)`; a document's usefulness is its
//! token overlap `s = |tokens(d) ∩ H(q)| / |H(q)|`. The conditional
//! log-probability is `ln(ε + (1-2ε)·s)` — strictly increasing in `s`, so
//! higher overlap always means higher probability of the gold answer — and
//! generation returns the gold answer exactly when `s >= gen_threshold`.
//! `H(q)` is deliberately decoupled from answer-string containment so
//! fixtures can encode documents that contain the answer yet do not help.

use std::collections::{BTreeSet, HashMap};
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::corpus::{Datastore, Query, UNK_ID};
use crate::error::{Error, Result};

use super::{EnvironmentClient, Prompt};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MockEnvSpec {
    pub epsilon: f64,
    pub gen_threshold: f64,
}

impl Default for MockEnvSpec {
    fn default() -> Self {
        Self { epsilon: 0.05, gen_threshold: 0.5 }
    }
}

/// One fixture line: `{"query_id": ..., "helpful_tokens": [...]}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MockFixtureEntry {
    pub query_id: String,
    pub helpful_tokens: Vec<String>,
}

pub struct MockEnv {
    spec: MockEnvSpec,
    helpful: HashMap<String, BTreeSet<u32>>,
    doc_tokens: HashMap<String, BTreeSet<u32>>,
    gold: HashMap<String, String>,
    calls: AtomicU64,
}

impl MockEnv {
    pub fn new(
        spec: MockEnvSpec,
        datastore: &Datastore,
        queries: &[Query],
        fixture: &[MockFixtureEntry],
    ) -> Result<Self> {
        if !(spec.epsilon > 0.0 && spec.epsilon < 0.5) {
            return Err(Error::Config(format!("mock epsilon must be in (0, 0.5), got {}", spec.epsilon)));
        }
        let mut helpful = HashMap::new();
        for entry in fixture {
            let ids: BTreeSet<u32> = entry
                .helpful_tokens
                .iter()
                .map(|t| datastore.vocabulary.id(t))
                .filter(|&id| id != UNK_ID)
                .collect();
            if ids.is_empty() {
                return Err(Error::Validation(format!(
                    "mock fixture for query {:?} has no in-vocabulary helpful tokens",
                    entry.query_id
                )));
            }
            helpful.insert(entry.query_id.clone(), ids);
        }
        let doc_tokens = datastore
            .documents
            .iter()
            .map(|d| {
                let toks: BTreeSet<u32> =
                    d.token_ids.iter().copied().filter(|&t| t != UNK_ID).collect();
                (d.id.clone(), toks)
            })
            .collect();
        let gold = queries.iter().map(|q| (q.id.clone(), q.answers[0].clone())).collect();
        Ok(Self { spec, helpful, doc_tokens, gold, calls: AtomicU64::new(0) })
    }

    pub fn load_fixture(path: &Path) -> Result<Vec<MockFixtureEntry>> {
        let file = std::fs::File::open(path)?;
        let mut out = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: MockFixtureEntry = serde_json::from_str(&line).map_err(|e| Error::Parse {
                path: path.display().to_string(),
                line: i + 1,
                msg: e.to_string(),
            })?;
            out.push(entry);
        }
        Ok(out)
    }

    /// Overlap of the prompt's documents (union of their tokens) with H(q).
    pub fn overlap(&self, prompt: &Prompt) -> Result<f64> {
        let helpful = self.helpful.get(&prompt.query_id).ok_or_else(|| {
            Error::Validation(format!("no mock fixture for query {:?}", prompt.query_id))
        })?;
        let mut hits: BTreeSet<u32> = BTreeSet::new();
        for doc_id in &prompt.doc_ids {
            let tokens = self
                .doc_tokens
                .get(doc_id)
                .ok_or_else(|| Error::Validation(format!("unknown document {doc_id:?}")))?;
            hits.extend(tokens.intersection(helpful));
        }
        Ok(hits.len() as f64 / helpful.len() as f64)
    }

    fn tick(&self) {
        self.calls.fetch_add(1, Ordering::Relaxed);
    }
}

impl EnvironmentClient for MockEnv {
    fn cond_logprob(&self, prompt: &Prompt, continuation: &str) -> Result<f64> {
        if continuation.is_empty() {
            return Err(Error::Scoring("empty continuation".into()));
        }
        self.tick();
        let s = self.overlap(prompt)?;
        let eps = self.spec.epsilon;
        Ok((eps + (1.0 - 2.0 * eps) * s).ln())
    }

    fn generate(&self, prompt: &Prompt, max_tokens: usize) -> Result<String> {
        assert!(max_tokens >= 1, "max_tokens must be >= 1");
        self.tick();
        let s = self.overlap(prompt)?;
        if s >= self.spec.gen_threshold {
            let gold = self.gold.get(&prompt.query_id).ok_or_else(|| {
                Error::Validation(format!("no gold answer for query {:?}", prompt.query_id))
            })?;
            Ok(gold.clone())
        } else {
            Ok("unknown".to_string())
        }
    }

    fn next_token_option_probs(&self, prompt: &Prompt, options: &[String]) -> Result<Vec<f64>> {
        if options.is_empty() {
            return Err(Error::Scoring("no options provided".into()));
        }
        self.tick();
        let gold = self.gold.get(&prompt.query_id).ok_or_else(|| {
            Error::Validation(format!("no gold answer for query {:?}", prompt.query_id))
        })?;
        let gold_pos = options.iter().position(|o| o.eq_ignore_ascii_case(gold)).ok_or_else(|| {
            Error::Scoring(format!("gold answer {gold:?} is not among the option labels"))
        })?;
        let s = self.overlap(prompt)?;
        let eps = self.spec.epsilon;
        let p_gold = eps + (1.0 - 2.0 * eps) * s;
        let rest = if options.len() > 1 { (1.0 - p_gold) / (options.len() - 1) as f64 } else { 0.0 };
        Ok((0..options.len()).map(|i| if i == gold_pos { p_gold } else { rest }).collect())
    }

    fn call_count(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }
}
