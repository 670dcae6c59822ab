//! On-the-fly positive/negative labeling of retrieved documents.
//!
//! Offline, each training query's top-`pool_size` retrieval is partitioned
//! by generation outcome into positive and negative pools, and conditional
//! log-probability thresholds are frozen: `t_plus` is the best score any
//! offline negative achieved, `t_minus` the worst score any offline positive
//! achieved. Online, a newly retrieved document is positive if it beats
//! every offline negative, negative if it loses to every offline positive,
//! and discarded otherwise. Closed-set tasks compare next-token option
//! probabilities instead. All probabilities go through the write-once cache.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cache::ProbabilityCache;
use crate::corpus::{Datastore, Document, Query, TaskKind};
use crate::env::{build_prompt, max_gen_tokens, score_generation, EnvironmentClient};
use crate::error::{Error, Result};
use crate::index::RetrievedSet;
use crate::parallel::map_ordered;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DocLabel {
    Positive,
    Negative,
    Discard,
}

/// Offline pools and thresholds for one query. Document ids are kept in
/// retrieval-rank order.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PoolRecord {
    pub query_id: String,
    pub positives: Vec<String>,
    pub negatives: Vec<String>,
    pub t_plus: f64,
    pub t_minus: f64,
}

/// Pool construction either yields a record or drops the query.
#[derive(Debug, Clone)]
pub enum PoolOutcome {
    Built(PoolRecord),
    Dropped { query_id: String, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Provenance {
    Online,
    FallbackOffline,
}

/// One training pair: the sampled positive and hard negative for a query.
#[derive(Debug, Clone)]
pub struct LabeledPair {
    pub query_id: String,
    pub positive: String,
    pub negative: String,
    pub positive_provenance: Provenance,
    pub negative_provenance: Provenance,
}

/// Pair-sampling strategies: (A) most-relevant negative + random positive,
/// (B) random negative + random positive, (C) most-relevant negative +
/// most-relevant positive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Strategy {
    A,
    B,
    C,
}

/// Classify an online log-probability against frozen thresholds. When the
/// pools are separated (`t_plus < t_minus`) both conditions can hold at
/// once; positive wins.
pub fn classify_online(logprob: f64, record: &PoolRecord) -> DocLabel {
    if logprob > record.t_plus {
        DocLabel::Positive
    } else if logprob < record.t_minus {
        DocLabel::Negative
    } else {
        DocLabel::Discard
    }
}

/// Closed-set rule: positive iff the gold option strictly exceeds every
/// other option's probability.
pub fn classify_closed_set(option_probs: &[f64], gold_index: usize) -> DocLabel {
    let gold = option_probs[gold_index];
    let beats_all = option_probs
        .iter()
        .enumerate()
        .all(|(i, &p)| i == gold_index || gold > p);
    if beats_all {
        DocLabel::Positive
    } else {
        DocLabel::Negative
    }
}

/// Combine per-answer labels: positive if any answer succeeded, negative if
/// all failed, discard on any mix involving a discard.
pub fn combine_multi_answer(labels: &[DocLabel]) -> DocLabel {
    if labels.iter().any(|&l| l == DocLabel::Positive) {
        DocLabel::Positive
    } else if labels.iter().all(|&l| l == DocLabel::Negative) {
        DocLabel::Negative
    } else {
        DocLabel::Discard
    }
}

/// Cache-first access to environment probabilities plus the classification
/// rules built on them.
pub struct Labeler<'a> {
    pub env: &'a dyn EnvironmentClient,
    pub cache: &'a ProbabilityCache,
    pub datastore: &'a Datastore,
}

impl<'a> Labeler<'a> {
    pub fn new(
        env: &'a dyn EnvironmentClient,
        cache: &'a ProbabilityCache,
        datastore: &'a Datastore,
    ) -> Self {
        Self { env, cache, datastore }
    }

    fn doc(&self, doc_id: &str) -> Result<&Document> {
        self.datastore
            .get(doc_id)
            .ok_or_else(|| Error::Validation(format!("unknown document {doc_id:?}")))
    }

    /// Log-probability of answer `answer_index` given (query, doc),
    /// cache-first.
    pub fn answer_logprob(&self, query: &Query, doc_id: &str, answer_index: u32) -> Result<f64> {
        if let Some(lp) = self.cache.get(&query.id, doc_id, answer_index) {
            return Ok(lp);
        }
        let doc = self.doc(doc_id)?;
        let prompt = build_prompt(query, doc)?;
        let lp = self.env.cond_logprob(&prompt, &query.answers[answer_index as usize])?;
        self.cache.put(&query.id, doc_id, answer_index, lp);
        Ok(lp)
    }

    /// Log-probabilities of every option label as the next token, cache-first
    /// under the option's index.
    pub fn option_logprobs(&self, query: &Query, doc_id: &str) -> Result<Vec<f64>> {
        let options = query.option_labels();
        let cached: Option<Vec<f64>> = options
            .iter()
            .enumerate()
            .map(|(i, _)| self.cache.get(&query.id, doc_id, i as u32))
            .collect();
        if let Some(lps) = cached {
            return Ok(lps);
        }
        let doc = self.doc(doc_id)?;
        let prompt = build_prompt(query, doc)?;
        let probs = self.env.next_token_option_probs(&prompt, &options)?;
        let lps: Vec<f64> = probs.iter().map(|p| p.ln()).collect();
        for (i, lp) in lps.iter().enumerate() {
            self.cache.put(&query.id, doc_id, i as u32, *lp);
        }
        Ok(lps)
    }

    /// The per-document score thresholds are computed on: the best answer's
    /// log-probability for open tasks, the gold option's for closed-set.
    pub fn doc_logprob(&self, query: &Query, doc_id: &str) -> Result<f64> {
        match query.task_kind {
            TaskKind::OpenQa => {
                let mut best = f64::NEG_INFINITY;
                for i in 0..query.answers.len() {
                    best = best.max(self.answer_logprob(query, doc_id, i as u32)?);
                }
                Ok(best)
            }
            TaskKind::FactCheck | TaskKind::MultiChoice => {
                let lps = self.option_logprobs(query, doc_id)?;
                let gold = self.gold_index(query)?;
                Ok(lps[gold])
            }
        }
    }

    fn gold_index(&self, query: &Query) -> Result<usize> {
        let gold = query.gold_label();
        query
            .option_labels()
            .iter()
            .position(|l| l.eq_ignore_ascii_case(&gold))
            .ok_or_else(|| {
                Error::Scoring(format!("query {}: gold label {gold:?} not among options", query.id))
            })
    }

    /// Classify one retrieved document for a query: per-answer thresholds
    /// for open tasks, next-token comparison for closed-set.
    pub fn classify(&self, query: &Query, doc_id: &str, record: &PoolRecord) -> Result<DocLabel> {
        match query.task_kind {
            TaskKind::OpenQa => {
                let mut labels = Vec::with_capacity(query.answers.len());
                for i in 0..query.answers.len() {
                    let lp = self.answer_logprob(query, doc_id, i as u32)?;
                    labels.push(classify_online(lp, record));
                }
                Ok(combine_multi_answer(&labels))
            }
            TaskKind::FactCheck | TaskKind::MultiChoice => {
                let lps = self.option_logprobs(query, doc_id)?;
                Ok(classify_closed_set(&lps, self.gold_index(query)?))
            }
        }
    }

    /// Build the offline pools for one query from its top-`pool_size`
    /// retrieval: generate with each document, partition by the binary
    /// score, and freeze the probability thresholds. Queries with an empty
    /// pool on either side are dropped.
    pub fn build_offline_pools(
        &self,
        query: &Query,
        retrieved: &RetrievedSet,
    ) -> Result<PoolOutcome> {
        let max_tokens = max_gen_tokens(query.task_kind);
        let labeled: Vec<Result<(String, bool, f64)>> =
            map_ordered(&retrieved.entries, |(doc_id, _)| {
                let doc = self.doc(doc_id)?;
                let prompt = build_prompt(query, doc)?;
                let generation = self.env.generate(&prompt, max_tokens)?;
                let passed = score_generation(&generation, &query.answers) == 1;
                let lp = self.doc_logprob(query, doc_id)?;
                Ok((doc_id.clone(), passed, lp))
            });

        let mut positives = Vec::new();
        let mut negatives = Vec::new();
        let mut t_plus = f64::NEG_INFINITY;
        let mut t_minus = f64::INFINITY;
        for item in labeled {
            let (doc_id, passed, lp) = item?;
            if passed {
                t_minus = t_minus.min(lp);
                positives.push(doc_id);
            } else {
                t_plus = t_plus.max(lp);
                negatives.push(doc_id);
            }
        }
        if positives.is_empty() || negatives.is_empty() {
            let reason = if positives.is_empty() { "empty positive pool" } else { "empty negative pool" };
            return Ok(PoolOutcome::Dropped { query_id: query.id.clone(), reason: reason.into() });
        }
        Ok(PoolOutcome::Built(PoolRecord {
            query_id: query.id.clone(),
            positives,
            negatives,
            t_plus,
            t_minus,
        }))
    }

    /// Sample a (positive, hard negative) pair from the current retrieval.
    ///
    /// Strategy A scans candidates in descending relevance, collecting
    /// online positives until the first negative, which becomes the hard
    /// negative; the positive is drawn uniformly from the collected set.
    /// Strategies B and C classify the whole set and pick randomly (B) or by
    /// relevance (C). Any empty side falls back to a uniform draw from the
    /// offline pools.
    pub fn sample_pair<R: Rng>(
        &self,
        query: &Query,
        retrieved: &RetrievedSet,
        record: &PoolRecord,
        strategy: Strategy,
        rng: &mut R,
    ) -> Result<(LabeledPair, SampleStats)> {
        let mut stats = SampleStats::default();
        let (online_pos, online_neg) = match strategy {
            Strategy::A => {
                let mut pos = Vec::new();
                let mut neg = Vec::new();
                for (doc_id, _) in &retrieved.entries {
                    match self.classify(query, doc_id, record)? {
                        DocLabel::Positive => pos.push(doc_id.clone()),
                        DocLabel::Negative => {
                            neg.push(doc_id.clone());
                            break;
                        }
                        DocLabel::Discard => {}
                    }
                }
                (pos, neg)
            }
            Strategy::B | Strategy::C => {
                let mut pos = Vec::new();
                let mut neg = Vec::new();
                for (doc_id, _) in &retrieved.entries {
                    match self.classify(query, doc_id, record)? {
                        DocLabel::Positive => pos.push(doc_id.clone()),
                        DocLabel::Negative => neg.push(doc_id.clone()),
                        DocLabel::Discard => {}
                    }
                }
                (pos, neg)
            }
        };

        // Negative side first, then the positive excludes it so the pair is
        // never degenerate.
        let (negative, negative_provenance) = if online_neg.is_empty() {
            stats.fallback_neg = true;
            (uniform_pick(&record.negatives, None, rng, &query.id)?, Provenance::FallbackOffline)
        } else {
            let pick = match strategy {
                Strategy::B => uniform_pick(&online_neg, None, rng, &query.id)?,
                _ => online_neg[0].clone(),
            };
            (pick, Provenance::Online)
        };

        let (positive, positive_provenance) = if online_pos.is_empty() {
            stats.fallback_pos = true;
            (
                uniform_pick(&record.positives, Some(&negative), rng, &query.id)?,
                Provenance::FallbackOffline,
            )
        } else {
            let pick = match strategy {
                Strategy::C => online_pos[0].clone(),
                _ => uniform_pick(&online_pos, Some(&negative), rng, &query.id)?,
            };
            (pick, Provenance::Online)
        };

        Ok((
            LabeledPair {
                query_id: query.id.clone(),
                positive,
                negative,
                positive_provenance,
                negative_provenance,
            },
            stats,
        ))
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SampleStats {
    pub fallback_pos: bool,
    pub fallback_neg: bool,
}

fn uniform_pick<R: Rng>(
    candidates: &[String],
    exclude: Option<&str>,
    rng: &mut R,
    query_id: &str,
) -> Result<String> {
    let eligible: Vec<&String> = candidates
        .iter()
        .filter(|c| exclude.map_or(true, |e| c.as_str() != e))
        .collect();
    if eligible.is_empty() {
        return Err(Error::SkipQuery(query_id.to_string()));
    }
    Ok(eligible[rng.gen_range(0..eligible.len())].clone())
}

/// Build offline pools for every query (parallel across queries): retrieve
/// the top-`pool_size` documents and partition them by generation outcome.
/// Returns records in input query order plus the ids of dropped queries.
pub fn build_all_pools(
    labeler: &Labeler<'_>,
    ctx: &crate::index::SearchContext<'_>,
    queries: &[Query],
    pool_size: usize,
) -> Result<(Vec<PoolRecord>, Vec<String>)> {
    let outcomes: Vec<Result<PoolOutcome>> = map_ordered(queries, |q| {
        let retrieved = ctx.retrieve(&q.id, &q.token_ids, pool_size)?;
        labeler.build_offline_pools(q, &retrieved)
    });
    let mut records = Vec::new();
    let mut dropped = Vec::new();
    for outcome in outcomes {
        match outcome? {
            PoolOutcome::Built(record) => records.push(record),
            PoolOutcome::Dropped { query_id, reason } => {
                log::info!("dropping query {query_id}: {reason}");
                dropped.push(query_id);
            }
        }
    }
    Ok((records, dropped))
}

/// Persist pool records as JSONL in query order.
pub fn save_pools(records: &[PoolRecord], path: &Path) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    for record in records {
        serde_json::to_writer(&mut file, record)?;
        file.write_all(b"\n")?;
    }
    file.flush()?;
    Ok(())
}

pub fn load_pools(path: &Path) -> Result<HashMap<String, PoolRecord>> {
    let file = std::fs::File::open(path)?;
    let mut out = HashMap::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: PoolRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.insert(record.query_id.clone(), record);
    }
    Ok(out)
}
