//! Evaluation and ablation drivers.
//!
//! IR accuracy asks whether the top-k retrieved documents contain an answer
//! string; RAG accuracy asks whether the environment's generation over the
//! retrieved context contains one. The ablation arms re-run training with
//! one configuration delta each and emit per-epoch evaluation reports.

use std::collections::HashMap;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::cache::ProbabilityCache;
use crate::corpus::{normalize, Datastore, Query};
use crate::encoder::EncoderParams;
use crate::env::{build_prompt_multi, max_gen_tokens, score_generation, EnvironmentClient};
use crate::error::{Error, Result};
use crate::index::{
    build_parametric_index, InvertedIndex, RetrievalMode, SearchContext,
};
use crate::labeler::PoolRecord;
use crate::parallel::map_ordered;
use crate::trainer::{train, Objective, TrainConfig, TrainOutputs};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PerQueryRecord {
    pub query_id: String,
    pub top1_doc_id: Option<String>,
    pub contains_answer: bool,
    /// None when the environment errored on this query.
    pub env_score: Option<u8>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset_id: String,
    pub ir_accuracy_at_1: f64,
    pub rag_accuracy_1shot: f64,
    pub per_query: Vec<PerQueryRecord>,
    pub errored: usize,
    pub config_hash: String,
    pub timestamp: u64,
}

impl EvalReport {
    /// Aggregates must equal recomputation from the per-query records.
    pub fn consistent(&self) -> bool {
        let n = self.per_query.len();
        if n == 0 {
            return self.ir_accuracy_at_1 == 0.0 && self.rag_accuracy_1shot == 0.0;
        }
        let ir = self.per_query.iter().filter(|r| r.contains_answer).count() as f64 / n as f64;
        let scored: Vec<u8> = self.per_query.iter().filter_map(|r| r.env_score).collect();
        let rag = if scored.is_empty() {
            0.0
        } else {
            scored.iter().map(|&s| s as f64).sum::<f64>() / scored.len() as f64
        };
        let errored = self.per_query.iter().filter(|r| r.env_score.is_none()).count();
        (self.ir_accuracy_at_1 - ir).abs() < 1e-12
            && (self.rag_accuracy_1shot - rag).abs() < 1e-12
            && errored == self.errored
    }
}

fn doc_contains_answer(datastore: &Datastore, doc_id: &str, answers: &[String]) -> bool {
    let Some(doc) = datastore.get(doc_id) else { return false };
    let haystack = normalize(&format!("{}\n{}", doc.title, doc.text));
    answers.iter().any(|a| {
        let needle = normalize(a);
        !needle.is_empty() && haystack.contains(&needle)
    })
}

/// Fraction of queries whose top-k retrieval contains at least one answer
/// string.
pub fn eval_ir(ctx: &SearchContext<'_>, queries: &[Query], k: usize) -> Result<f64> {
    if queries.is_empty() {
        return Ok(0.0);
    }
    let hits: Vec<Result<bool>> = map_ordered(queries, |q| {
        let retrieved = ctx.retrieve(&q.id, &q.token_ids, k)?;
        Ok(retrieved
            .entries
            .iter()
            .any(|(doc_id, _)| doc_contains_answer(ctx.datastore, doc_id, &q.answers)))
    });
    let hits: Vec<bool> = hits.into_iter().collect::<Result<_>>()?;
    Ok(hits.iter().filter(|&&h| h).count() as f64 / queries.len() as f64)
}

pub struct RagEval {
    pub accuracy: f64,
    pub per_query: Vec<PerQueryRecord>,
    pub errored: usize,
}

/// Retrieve `shots` documents per query, prompt the environment with them in
/// retrieval order, generate, and score. Transport failures exclude the
/// query from the denominator and are reported in `errored`.
pub fn eval_rag(
    ctx: &SearchContext<'_>,
    env: &dyn EnvironmentClient,
    queries: &[Query],
    shots: usize,
) -> Result<RagEval> {
    let records: Vec<Result<PerQueryRecord>> = map_ordered(queries, |q| {
        let retrieved = ctx.retrieve(&q.id, &q.token_ids, shots)?;
        let docs: Vec<&crate::corpus::Document> = retrieved
            .entries
            .iter()
            .filter_map(|(id, _)| ctx.datastore.get(id))
            .collect();
        if docs.is_empty() {
            return Ok(PerQueryRecord {
                query_id: q.id.clone(),
                top1_doc_id: None,
                contains_answer: false,
                env_score: Some(0),
            });
        }
        let contains_answer = doc_contains_answer(ctx.datastore, &docs[0].id, &q.answers);
        let prompt = build_prompt_multi(q, &docs)?;
        let env_score = match env.generate(&prompt, max_gen_tokens(q.task_kind)) {
            Ok(generation) => Some(score_generation(&generation, &q.answers)),
            Err(Error::Transport(e)) => {
                log::warn!("query {}: environment errored, excluding: {e}", q.id);
                None
            }
            Err(e) => return Err(e),
        };
        Ok(PerQueryRecord {
            query_id: q.id.clone(),
            top1_doc_id: Some(docs[0].id.clone()),
            contains_answer,
            env_score,
        })
    });
    let per_query: Vec<PerQueryRecord> = records.into_iter().collect::<Result<_>>()?;
    let errored = per_query.iter().filter(|r| r.env_score.is_none()).count();
    let scored: Vec<u8> = per_query.iter().filter_map(|r| r.env_score).collect();
    let accuracy = if scored.is_empty() {
        0.0
    } else {
        scored.iter().map(|&s| s as f64).sum::<f64>() / scored.len() as f64
    };
    Ok(RagEval { accuracy, per_query, errored })
}

/// Full evaluation: IR@1 plus 1-shot RAG accuracy with per-query records.
pub fn evaluate(
    ctx: &SearchContext<'_>,
    env: &dyn EnvironmentClient,
    queries: &[Query],
    dataset_id: &str,
    config_hash: &str,
) -> Result<EvalReport> {
    let rag = eval_rag(ctx, env, queries, 1)?;
    let ir = if queries.is_empty() {
        0.0
    } else {
        rag.per_query.iter().filter(|r| r.contains_answer).count() as f64 / queries.len() as f64
    };
    Ok(EvalReport {
        dataset_id: dataset_id.to_string(),
        ir_accuracy_at_1: ir,
        rag_accuracy_1shot: rag.accuracy,
        per_query: rag.per_query,
        errored: rag.errored,
        config_hash: config_hash.to_string(),
        timestamp: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
    })
}

/// Ablation arms from the analysis section plus the full method.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Arm {
    OfflineOnly,
    OnlineOnly,
    OfflineOnline,
    Kl,
    NoRerank,
    PeriodicReindex,
}

impl Arm {
    pub const ALL: [Arm; 6] = [
        Arm::OfflineOnly,
        Arm::OnlineOnly,
        Arm::OfflineOnline,
        Arm::Kl,
        Arm::NoRerank,
        Arm::PeriodicReindex,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Arm::OfflineOnly => "offline-only",
            Arm::OnlineOnly => "online-only",
            Arm::OfflineOnline => "offline+online",
            Arm::Kl => "kl",
            Arm::NoRerank => "no-rerank",
            Arm::PeriodicReindex => "periodic-reindex",
        }
    }

    pub fn parse(s: &str) -> Option<Arm> {
        Arm::ALL.iter().copied().find(|a| a.name() == s)
    }

    /// Configuration delta that defines the arm.
    pub fn apply(&self, base: &TrainConfig) -> TrainConfig {
        let mut config = base.clone();
        match self {
            Arm::OfflineOnly => config.warmup_fraction = 1.0,
            Arm::OnlineOnly => config.warmup_fraction = 0.0,
            Arm::OfflineOnline => {}
            Arm::Kl => config.objective = Objective::Kl,
            Arm::NoRerank => config.retrieval_mode = RetrievalMode::BotOnly,
            Arm::PeriodicReindex => config.retrieval_mode = RetrievalMode::PeriodicReindex,
        }
        config
    }

    /// How a model trained under this arm retrieves at evaluation time.
    fn eval_mode(&self) -> RetrievalMode {
        match self {
            Arm::NoRerank => RetrievalMode::BotOnly,
            Arm::PeriodicReindex => RetrievalMode::PeriodicReindex,
            _ => RetrievalMode::LateParametric,
        }
    }
}

/// Everything an ablation run needs, shared across arms.
pub struct ExperimentInputs<'a> {
    pub datastore: &'a Datastore,
    pub train_queries: &'a [Query],
    pub test_queries: &'a [Query],
    pub pools: &'a HashMap<String, PoolRecord>,
    pub cache: &'a ProbabilityCache,
    pub env: &'a dyn EnvironmentClient,
    pub bot_index: &'a InvertedIndex,
    pub dataset_id: &'a str,
}

pub struct AblationRun {
    pub arm: Arm,
    /// (epoch, report) at every evaluation point, final epoch included.
    pub reports: Vec<(usize, EvalReport)>,
    pub outputs: TrainOutputs,
}

impl AblationRun {
    pub fn final_report(&self) -> &EvalReport {
        &self.reports.last().expect("at least the final epoch is evaluated").1
    }
}

/// Evaluate `params` on the test split the way `arm` retrieves. For the
/// periodic-reindex arm, `in_use_index` is the (possibly stale) parametric
/// index the trainer is currently searching — accuracy is measured against
/// the retrieval the system actually performs; a fresh index is built only
/// when none is supplied (e.g. evaluating an untrained encoder).
pub fn evaluate_arm(
    arm: Arm,
    params: &EncoderParams,
    config: &TrainConfig,
    inputs: &ExperimentInputs<'_>,
    queries: &[Query],
    in_use_index: Option<&InvertedIndex>,
) -> Result<EvalReport> {
    let fresh_parametric: Option<InvertedIndex> = match arm.eval_mode() {
        RetrievalMode::PeriodicReindex if in_use_index.is_none() => {
            Some(build_parametric_index(params, inputs.datastore, config.k_sparse, 0)?)
        }
        _ => None,
    };
    let ctx = SearchContext {
        params,
        datastore: inputs.datastore,
        bot_index: inputs.bot_index,
        parametric_index: in_use_index.or(fresh_parametric.as_ref()),
        mode: arm.eval_mode(),
        m: config.m,
        k_sparse: config.k_sparse,
    };
    evaluate(&ctx, inputs.env, queries, inputs.dataset_id, &config.hash())
}

/// Train one arm and evaluate on the test split every `eval_every` epochs
/// (the final epoch always included).
pub fn run_ablation(
    arm: Arm,
    base: &TrainConfig,
    inputs: &ExperimentInputs<'_>,
    eval_every: usize,
) -> Result<AblationRun> {
    let config = arm.apply(base);
    let train_inputs = crate::trainer::TrainInputs {
        datastore: inputs.datastore,
        queries: inputs.train_queries,
        pools: inputs.pools,
        cache: inputs.cache,
        env: inputs.env,
        bot_index: inputs.bot_index,
        checkpoint_dir: None,
    };
    let mut reports: Vec<(usize, EvalReport)> = Vec::new();
    let mut eval_error: Option<Error> = None;
    let outputs = train(&config, &train_inputs, |epoch, params, in_use_index| {
        let last = epoch + 1 == config.epochs;
        if eval_error.is_none() && (last || (epoch + 1) % eval_every.max(1) == 0) {
            match evaluate_arm(arm, params, &config, inputs, inputs.test_queries, in_use_index) {
                Ok(report) => reports.push((epoch, report)),
                Err(e) => eval_error = Some(e),
            }
        }
    })?;
    if let Some(e) = eval_error {
        return Err(e);
    }
    Ok(AblationRun { arm, reports, outputs })
}

/// Render ablation reports as a text table: one row per arm per epoch.
pub fn render_table(rows: &[(String, usize, &EvalReport)]) -> String {
    let mut out = String::new();
    out.push_str(&format!("{:<18} {:>6} {:>8} {:>8} {:>8}\n", "arm", "epoch", "ir@1", "rag@1", "err"));
    for (arm, epoch, report) in rows {
        out.push_str(&format!(
            "{:<18} {:>6} {:>8.4} {:>8.4} {:>8}\n",
            arm, epoch, report.ir_accuracy_at_1, report.rag_accuracy_1shot, report.errored
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn report_consistency_check() {
        let report = EvalReport {
            dataset_id: "x".into(),
            ir_accuracy_at_1: 0.5,
            rag_accuracy_1shot: 1.0,
            per_query: vec![
                PerQueryRecord {
                    query_id: "a".into(),
                    top1_doc_id: Some("d".into()),
                    contains_answer: true,
                    env_score: Some(1),
                },
                PerQueryRecord {
                    query_id: "b".into(),
                    top1_doc_id: Some("d".into()),
                    contains_answer: false,
                    env_score: None,
                },
            ],
            errored: 1,
            config_hash: "h".into(),
            timestamp: 0,
        };
        assert!(report.consistent());
        let mut broken = report;
        broken.ir_accuracy_at_1 = 0.75;
        assert!(!broken.consistent());
    }

    #[test]
    fn arm_names_roundtrip() {
        for arm in Arm::ALL {
            assert_eq!(Arm::parse(arm.name()), Some(arm));
        }
        assert_eq!(Arm::parse("bogus"), None);
    }

    #[test]
    fn arm_deltas() {
        let base = TrainConfig::default();
        assert_eq!(Arm::OfflineOnly.apply(&base).warmup_fraction, 1.0);
        assert_eq!(Arm::OnlineOnly.apply(&base).warmup_fraction, 0.0);
        assert_eq!(Arm::Kl.apply(&base).objective, Objective::Kl);
        assert_eq!(Arm::NoRerank.apply(&base).retrieval_mode, RetrievalMode::BotOnly);
        assert_eq!(
            Arm::PeriodicReindex.apply(&base).retrieval_mode,
            RetrievalMode::PeriodicReindex
        );
    }
}
