//! The reinforced-contrastive training loop.
//!
//! Training runs in two phases: a warm-up on the frozen offline pools, then
//! an on-policy phase where every step retrieves with the live parameters,
//! labels the candidates through the environment thresholds, and samples a
//! (positive, hard negative) pair per query. The loss combines a parametric
//! channel `L(E(q), E(d))` with two half-weighted semi-parametric channels
//! `L(E(q), T(d))` and `L(T(q), E(d))`; a KL-divergence objective over the
//! retrieved candidates is available as an ablation. Updates use AdamW with
//! decoupled weight decay, and every run is bit-deterministic given its
//! seed.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cache::ProbabilityCache;
use crate::corpus::{bag_of_tokens, Datastore, Query};
use crate::encoder::{
    encode_backward, encode_with_trace, init_params, EncodeTrace, EncoderCheckpoint,
    EncoderParams, ParamGrads,
};
use crate::env::EnvironmentClient;
use crate::error::{Error, Result};
use crate::index::{
    build_parametric_index, InvertedIndex, RetrievalMode, RetrievedSet, SearchContext,
};
use crate::labeler::{Labeler, PoolRecord, Strategy};
use crate::parallel::map_ordered;
use crate::sparse::SparseVector;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    Contrastive,
    Kl,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub warmup_fraction: f64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Stage-1 candidate count for late parametric retrieval.
    pub m: usize,
    /// Documents retrieved per query during on-policy training.
    pub k: usize,
    pub k_sparse: usize,
    pub hidden: usize,
    pub strategy: Strategy,
    pub objective: Objective,
    pub retrieval_mode: RetrievalMode,
    /// Epochs between parametric rebuilds in periodic-reindex mode, counted
    /// from training start. The default scales the reference schedule
    /// (every 15 epochs of an 80-epoch run) to the configured length, which
    /// lands three rebuilds inside the on-policy phase of a half-warmup run.
    pub reindex_interval: Option<usize>,
    pub pool_size: usize,
    pub kl_temp_lm: f64,
    pub kl_temp_retrieval: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 80,
            warmup_fraction: 0.5,
            batch_size: 128,
            learning_rate: 2e-5,
            weight_decay: 0.01,
            m: 20,
            k: 20,
            k_sparse: 128,
            hidden: 64,
            strategy: Strategy::A,
            objective: Objective::Contrastive,
            retrieval_mode: RetrievalMode::LateParametric,
            reindex_interval: None,
            pool_size: 100,
            kl_temp_lm: 1.0,
            kl_temp_retrieval: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Defaults scaled down for small corpora and CPU runs.
    pub fn desk_scale() -> Self {
        Self {
            epochs: 40,
            batch_size: 16,
            learning_rate: 0.005,
            weight_decay: 0.001,
            k_sparse: 256,
            hidden: 64,
            pool_size: 200,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return Err(Error::Config(format!(
                "warmup_fraction must be in [0, 1], got {}",
                self.warmup_fraction
            )));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("epochs and batch_size must be >= 1".into()));
        }
        if self.m < self.k || self.k == 0 {
            return Err(Error::Config(format!("require m >= k >= 1, got m={} k={}", self.m, self.k)));
        }
        Ok(())
    }

    pub fn warmup_epochs(&self) -> usize {
        (self.epochs as f64 * self.warmup_fraction).round() as usize
    }

    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        format!("{digest:x}")
    }
}

/// In-batch softmax over one channel's score matrix. `scores` is N x 2N:
/// row i holds f(q_i, d_j) with the positives in columns 0..N (column i is
/// query i's own positive) and the hard negatives in columns N..2N.
///
/// Returns the mean loss over the batch (q-to-d term over all 2N candidates
/// plus d-to-q term over the N queries) and d loss / d scores.
pub fn channel_loss(scores: &[Vec<f64>]) -> (f64, Vec<Vec<f64>>) {
    let n = scores.len();
    let cols = scores[0].len();
    let mut loss = 0.0;
    let mut grad = vec![vec![0.0; cols]; n];
    let inv_n = 1.0 / n as f64;

    // q-to-d: softmax over each row.
    for i in 0..n {
        let row = &scores[i];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|s| (s - max).exp()).sum();
        loss += inv_n * (max + sum.ln() - row[i]);
        for j in 0..cols {
            let soft = (row[j] - max).exp() / sum;
            grad[i][j] += inv_n * (soft - if j == i { 1.0 } else { 0.0 });
        }
    }
    // d-to-q: softmax over the queries for each positive column.
    for j in 0..n {
        let col: Vec<f64> = (0..n).map(|i| scores[i][j]).collect();
        let max = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = col.iter().map(|s| (s - max).exp()).sum();
        loss += inv_n * (max + sum.ln() - col[j]);
        for (i, &s) in col.iter().enumerate() {
            let soft = (s - max).exp() / sum;
            grad[i][j] += inv_n * (soft - if i == j { 1.0 } else { 0.0 });
        }
    }
    (loss, grad)
}

/// One training example: token sequences for the query and its pair.
#[derive(Debug, Clone)]
pub struct BatchExample {
    pub query_id: String,
    pub query_tokens: Vec<u32>,
    pub positive_tokens: Vec<u32>,
    pub negative_tokens: Vec<u32>,
}

#[derive(Debug, Clone)]
pub struct ContrastiveBatch {
    pub examples: Vec<BatchExample>,
}

fn encode_all(
    params: &EncoderParams,
    seqs: &[&[u32]],
    k_sparse: usize,
) -> Result<Vec<(SparseVector, EncodeTrace)>> {
    let encoded: Vec<Result<(SparseVector, EncodeTrace)>> =
        map_ordered(seqs, |tokens| encode_with_trace(params, tokens, k_sparse));
    encoded.into_iter().collect()
}

fn add_scaled(dense: &mut [f64], sv: &SparseVector, w: f64) {
    if w == 0.0 {
        return;
    }
    for (i, v) in sv.iter() {
        dense[i as usize] += w * v;
    }
}

/// Restrict a dense upstream gradient to the dimensions the encoder kept;
/// everything top-k zeroed receives no gradient.
fn upstream_sparse(vector: &SparseVector, upstream: &[f64]) -> Result<SparseVector> {
    let mut idx = Vec::new();
    let mut vals = Vec::new();
    for &dim in vector.indices() {
        let v = upstream[dim as usize];
        if v != 0.0 {
            idx.push(dim);
            vals.push(v);
        }
    }
    SparseVector::new(idx, vals, vector.dim())
}

/// Two-channel semi-parametric contrastive loss and its parameter gradients.
///
/// `L_final = L(E(q), E(d)) + L(E(q), T(d))/2 + L(T(q), E(d))/2`, each `L`
/// the in-batch q-to-d + d-to-q softmax loss of [`channel_loss`], averaged
/// over the batch.
pub fn contrastive_loss(
    params: &EncoderParams,
    batch: &ContrastiveBatch,
    k_sparse: usize,
) -> Result<(f64, ParamGrads)> {
    let n = batch.examples.len();
    assert!(n >= 1, "batch must be nonempty");
    let dim = params.vocab_size;

    let q_seqs: Vec<&[u32]> = batch.examples.iter().map(|e| e.query_tokens.as_slice()).collect();
    let d_seqs: Vec<&[u32]> = batch
        .examples
        .iter()
        .map(|e| e.positive_tokens.as_slice())
        .chain(batch.examples.iter().map(|e| e.negative_tokens.as_slice()))
        .collect();

    let q_enc = encode_all(params, &q_seqs, k_sparse)?;
    let d_enc = encode_all(params, &d_seqs, k_sparse)?;
    let q_bag: Vec<SparseVector> =
        q_seqs.iter().map(|s| bag_of_tokens(s, dim)).collect::<Result<_>>()?;
    let d_bag: Vec<SparseVector> =
        d_seqs.iter().map(|s| bag_of_tokens(s, dim)).collect::<Result<_>>()?;

    let mut q_upstream = vec![vec![0.0; dim]; n];
    let mut d_upstream = vec![vec![0.0; dim]; 2 * n];

    // (query side, doc side, weight): parametric E or non-parametric bag T.
    let channels: [(bool, bool, f64); 3] = [(true, true, 1.0), (true, false, 0.5), (false, true, 0.5)];

    let mut total_loss = 0.0;
    for (q_parametric, d_parametric, weight) in channels {
        let qv = |i: usize| if q_parametric { &q_enc[i].0 } else { &q_bag[i] };
        let dv = |j: usize| if d_parametric { &d_enc[j].0 } else { &d_bag[j] };
        let scores: Vec<Vec<f64>> =
            (0..n).map(|i| (0..2 * n).map(|j| qv(i).dot(dv(j))).collect()).collect();
        let (loss, grad) = channel_loss(&scores);
        total_loss += weight * loss;

        for i in 0..n {
            for j in 0..2 * n {
                let w = weight * grad[i][j];
                if w == 0.0 {
                    continue;
                }
                if q_parametric {
                    add_scaled(&mut q_upstream[i], dv(j), w);
                }
                if d_parametric {
                    add_scaled(&mut d_upstream[j], qv(i), w);
                }
            }
        }
    }

    let mut grads = ParamGrads::zeros(dim, params.hidden);
    for ((vector, trace), upstream) in
        q_enc.iter().zip(&q_upstream).chain(d_enc.iter().zip(&d_upstream))
    {
        let upstream = upstream_sparse(vector, upstream)?;
        if upstream.is_empty() {
            continue;
        }
        grads.add_assign(&encode_backward(params, trace, &upstream)?);
    }
    if !total_loss.is_finite() {
        return Err(Error::Numerical(format!(
            "non-finite contrastive loss {total_loss} over batch of {n} (queries: {:?})",
            batch.examples.iter().map(|e| e.query_id.as_str()).collect::<Vec<_>>()
        )));
    }
    Ok((total_loss, grads))
}

/// KL objective for one query: align the retrieval-score distribution over
/// the candidates with the environment's likelihood distribution.
/// Returns `None` (skip) with fewer than two candidates.
pub fn kl_loss(
    params: &EncoderParams,
    query_tokens: &[u32],
    candidate_tokens: &[&[u32]],
    env_logprobs: &[f64],
    temp_lm: f64,
    temp_retrieval: f64,
    k_sparse: usize,
) -> Result<Option<(f64, ParamGrads)>> {
    if candidate_tokens.len() < 2 {
        log::warn!("kl_loss: skipping query with {} candidate(s)", candidate_tokens.len());
        return Ok(None);
    }
    assert_eq!(candidate_tokens.len(), env_logprobs.len());

    let q_enc = encode_all(params, &[query_tokens], k_sparse)?;
    let d_enc = encode_all(params, candidate_tokens, k_sparse)?;

    let scores: Vec<f64> = d_enc.iter().map(|(dv, _)| q_enc[0].0.dot(dv)).collect();
    let p = softmax_scaled(env_logprobs, temp_lm);
    let q_dist = softmax_scaled(&scores, temp_retrieval);
    let loss: f64 = p
        .iter()
        .zip(&q_dist)
        .map(|(&pi, &qi)| if pi > 0.0 { pi * (pi.ln() - qi.ln()) } else { 0.0 })
        .sum();

    let dim = params.vocab_size;
    let mut q_upstream = vec![0.0; dim];
    let mut d_upstream = vec![vec![0.0; dim]; d_enc.len()];
    for (j, (dv, _)) in d_enc.iter().enumerate() {
        let w = (q_dist[j] - p[j]) / temp_retrieval;
        add_scaled(&mut d_upstream[j], &q_enc[0].0, w);
        add_scaled(&mut q_upstream, dv, w);
    }

    let mut grads = ParamGrads::zeros(dim, params.hidden);
    for ((vector, trace), upstream) in q_enc
        .iter()
        .zip(std::iter::once(&q_upstream))
        .chain(d_enc.iter().zip(&d_upstream))
    {
        let upstream = upstream_sparse(vector, upstream)?;
        if upstream.is_empty() {
            continue;
        }
        grads.add_assign(&encode_backward(params, trace, &upstream)?);
    }
    Ok(Some((loss, grads)))
}

fn softmax_scaled(xs: &[f64], temp: f64) -> Vec<f64> {
    let scaled: Vec<f64> = xs.iter().map(|x| x / temp).collect();
    let max = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scaled.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// AdamW with bias correction and decoupled weight decay: the decay shrinks
/// parameters independently of the learning rate.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamW {
    pub fn new(learning_rate: f64, weight_decay: f64) -> Self {
        Self { learning_rate, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay }
    }

    pub fn step(&self, params: &mut EncoderParams, grads: &ParamGrads, state: &mut OptState) {
        state.step += 1;
        let t = state.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let update = |x: &mut f64, g: f64, m: &mut f64, v: &mut f64| {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *x -= self.learning_rate * m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * *x;
        };
        for i in 0..params.token_embeddings.len() {
            update(
                &mut params.token_embeddings[i],
                grads.token_embeddings[i],
                &mut state.m_embeddings[i],
                &mut state.v_embeddings[i],
            );
        }
        for j in 0..params.context_gate.len() {
            update(
                &mut params.context_gate[j],
                grads.context_gate[j],
                &mut state.m_gate[j],
                &mut state.v_gate[j],
            );
        }
        params.bump_version();
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptState {
    pub m_embeddings: Vec<f64>,
    pub v_embeddings: Vec<f64>,
    pub m_gate: Vec<f64>,
    pub v_gate: Vec<f64>,
    pub step: u64,
}

impl OptState {
    pub fn zeros(params: &EncoderParams) -> Self {
        Self {
            m_embeddings: vec![0.0; params.token_embeddings.len()],
            v_embeddings: vec![0.0; params.token_embeddings.len()],
            m_gate: vec![0.0; params.context_gate.len()],
            v_gate: vec![0.0; params.context_gate.len()],
            step: 0,
        }
    }
}

/// Resumable training state: encoder, optimizer moments, step counter, and
/// the hash of the config that produced it.
#[derive(Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub encoder: EncoderCheckpoint,
    pub opt_state: OptState,
    pub step: u64,
    pub config_hash: String,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        let ckpt: Checkpoint = serde_json::from_slice(&bytes)?;
        if ckpt.opt_state.m_embeddings.len() != ckpt.encoder.token_embeddings.len() {
            return Err(Error::Checkpoint("optimizer moments do not match encoder shape".into()));
        }
        Ok(ckpt)
    }
}

#[derive(Serialize)]
struct StepMetrics {
    step: u64,
    phase: &'static str,
    loss: f64,
    grad_norm: f64,
    n_fallback_pos: u32,
    n_fallback_neg: u32,
    env_calls: u64,
}

pub struct TrainInputs<'a> {
    pub datastore: &'a Datastore,
    pub queries: &'a [Query],
    pub pools: &'a HashMap<String, PoolRecord>,
    pub cache: &'a ProbabilityCache,
    pub env: &'a dyn EnvironmentClient,
    pub bot_index: &'a InvertedIndex,
    /// Where to write per-epoch checkpoints, if anywhere.
    pub checkpoint_dir: Option<&'a Path>,
}

pub struct TrainOutputs {
    pub params: EncoderParams,
    pub opt_state: OptState,
    pub steps: u64,
    pub metrics_lines: Vec<String>,
    pub config_hash: String,
    /// Global steps at which the parametric index was (re)built.
    pub index_builds: Vec<u64>,
    pub checkpoint_paths: Vec<PathBuf>,
}

/// Per-epoch observer: epoch index, current parameters, and (in
/// periodic-reindex mode) the parametric index currently being searched.
pub type EpochObserver<'f> = dyn FnMut(usize, &EncoderParams, Option<&InvertedIndex>) + 'f;

pub fn train(
    config: &TrainConfig,
    inputs: &TrainInputs<'_>,
    on_epoch: impl FnMut(usize, &EncoderParams, Option<&InvertedIndex>),
) -> Result<TrainOutputs> {
    let params = init_params(config.seed, inputs.datastore.vocabulary.size(), config.hidden);
    let opt_state = OptState::zeros(&params);
    train_from(config, inputs, params, opt_state, 0, on_epoch)
}

/// Continue training from a checkpoint. Epochs already covered by the
/// checkpoint's step counter are skipped; everything downstream of the seed
/// is reproduced exactly.
pub fn resume(
    config: &TrainConfig,
    inputs: &TrainInputs<'_>,
    checkpoint: Checkpoint,
    on_epoch: impl FnMut(usize, &EncoderParams, Option<&InvertedIndex>),
) -> Result<TrainOutputs> {
    let (params, _) = checkpoint.encoder.into_params()?;
    let steps_per_epoch = steps_per_epoch(config, inputs);
    let start_epoch = (checkpoint.step / steps_per_epoch.max(1) as u64) as usize;
    train_from(config, inputs, params, checkpoint.opt_state, start_epoch, on_epoch)
}

fn steps_per_epoch(config: &TrainConfig, inputs: &TrainInputs<'_>) -> usize {
    let kept = inputs.queries.iter().filter(|q| inputs.pools.contains_key(&q.id)).count();
    kept.div_ceil(config.batch_size)
}

fn train_from(
    config: &TrainConfig,
    inputs: &TrainInputs<'_>,
    mut params: EncoderParams,
    mut opt_state: OptState,
    start_epoch: usize,
    mut on_epoch: impl FnMut(usize, &EncoderParams, Option<&InvertedIndex>),
) -> Result<TrainOutputs> {
    config.validate()?;
    let config_hash = config.hash();
    let labeler = Labeler::new(inputs.env, inputs.cache, inputs.datastore);
    let optimizer = AdamW::new(config.learning_rate, config.weight_decay);

    // Only queries that survived pool construction participate.
    let queries: Vec<&Query> =
        inputs.queries.iter().filter(|q| inputs.pools.contains_key(&q.id)).collect();
    if queries.is_empty() {
        return Err(Error::Validation("no training queries with offline pools".into()));
    }

    let warmup_epochs = config.warmup_epochs();
    let reindex_interval =
        config.reindex_interval.unwrap_or_else(|| (config.epochs * 15 / 80).max(1));

    let mut parametric_index: Option<InvertedIndex> = None;
    let mut index_builds = Vec::new();
    let mut metrics_lines = Vec::new();
    let mut checkpoint_paths = Vec::new();
    let mut global_step: u64 = opt_state.step;

    // Prior-work setup: the parametric index exists from training start and
    // is only refreshed on the rebuild schedule, so the on-policy phase
    // initially searches embeddings as stale as the whole warm-up.
    if config.retrieval_mode == RetrievalMode::PeriodicReindex {
        parametric_index =
            Some(build_parametric_index(&params, inputs.datastore, config.k_sparse, global_step)?);
        index_builds.push(global_step);
    }

    for epoch in start_epoch..config.epochs {
        let online = epoch >= warmup_epochs;
        let phase = if online { "online" } else { "warmup" };

        if online
            && config.retrieval_mode == RetrievalMode::PeriodicReindex
            && epoch > 0
            && epoch % reindex_interval == 0
        {
            parametric_index = Some(build_parametric_index(
                &params,
                inputs.datastore,
                config.k_sparse,
                global_step,
            )?);
            index_builds.push(global_step);
        }

        let mut rng = epoch_rng(config.seed, epoch);
        let mut order: Vec<usize> = (0..queries.len()).collect();
        order.shuffle(&mut rng);

        for chunk in order.chunks(config.batch_size) {
            let env_calls_before = inputs.env.call_count();
            let mut n_fallback_pos = 0u32;
            let mut n_fallback_neg = 0u32;

            let retrievals: Option<Vec<Result<RetrievedSet>>> = if online {
                let ctx = SearchContext {
                    params: &params,
                    datastore: inputs.datastore,
                    bot_index: inputs.bot_index,
                    parametric_index: parametric_index.as_ref(),
                    mode: config.retrieval_mode,
                    m: config.m,
                    k_sparse: config.k_sparse,
                };
                Some(map_ordered(chunk, |&qi| {
                    let q = queries[qi];
                    ctx.retrieve(&q.id, &q.token_ids, config.k)
                }))
            } else if config.objective == Objective::Kl {
                // The KL objective always scores a retrieved candidate set;
                // during warm-up that set still comes from the current
                // parameters, only the cached offline probabilities differ.
                let ctx = SearchContext {
                    params: &params,
                    datastore: inputs.datastore,
                    bot_index: inputs.bot_index,
                    parametric_index: None,
                    mode: RetrievalMode::LateParametric,
                    m: config.m,
                    k_sparse: config.k_sparse,
                };
                Some(map_ordered(chunk, |&qi| {
                    let q = queries[qi];
                    ctx.retrieve(&q.id, &q.token_ids, config.k)
                }))
            } else {
                None
            };

            let (loss, grads) = match config.objective {
                Objective::Contrastive => {
                    let mut examples = Vec::with_capacity(chunk.len());
                    for (pos_in_chunk, &qi) in chunk.iter().enumerate() {
                        let query = queries[qi];
                        let record = &inputs.pools[&query.id];
                        let pair = if online {
                            let retrieved = match &retrievals.as_ref().unwrap()[pos_in_chunk] {
                                Ok(r) => r,
                                Err(e) => return Err(clone_error(e)),
                            };
                            match labeler.sample_pair(
                                query,
                                retrieved,
                                record,
                                config.strategy,
                                &mut rng,
                            ) {
                                Ok((pair, stats)) => {
                                    n_fallback_pos += stats.fallback_pos as u32;
                                    n_fallback_neg += stats.fallback_neg as u32;
                                    pair
                                }
                                Err(Error::SkipQuery(id)) => {
                                    log::warn!("skipping query {id}: no usable pair");
                                    continue;
                                }
                                Err(e) => return Err(e),
                            }
                        } else {
                            offline_pair(query, record, &mut rng)?
                        };
                        let positive = inputs.datastore.get(&pair.positive).ok_or_else(|| {
                            Error::Validation(format!("unknown document {:?}", pair.positive))
                        })?;
                        let negative = inputs.datastore.get(&pair.negative).ok_or_else(|| {
                            Error::Validation(format!("unknown document {:?}", pair.negative))
                        })?;
                        examples.push(BatchExample {
                            query_id: query.id.clone(),
                            query_tokens: query.token_ids.clone(),
                            positive_tokens: positive.token_ids.clone(),
                            negative_tokens: negative.token_ids.clone(),
                        });
                    }
                    if examples.is_empty() {
                        continue;
                    }
                    contrastive_loss(&params, &ContrastiveBatch { examples }, config.k_sparse)?
                }
                Objective::Kl => {
                    let mut total = 0.0;
                    let mut grads =
                        ParamGrads::zeros(inputs.datastore.vocabulary.size(), config.hidden);
                    let mut contributed = false;
                    for (pos_in_chunk, &qi) in chunk.iter().enumerate() {
                        let query = queries[qi];
                        let retrieved = match &retrievals.as_ref().unwrap()[pos_in_chunk] {
                            Ok(r) => r,
                            Err(e) => return Err(clone_error(e)),
                        };
                        let mut cand_tokens: Vec<&[u32]> = Vec::new();
                        let mut env_lps = Vec::new();
                        for (doc_id, _) in &retrieved.entries {
                            let doc = inputs.datastore.get(doc_id).unwrap();
                            env_lps.push(labeler.doc_logprob(query, doc_id)?);
                            cand_tokens.push(&doc.token_ids);
                        }
                        if let Some((loss, g)) = kl_loss(
                            &params,
                            &query.token_ids,
                            &cand_tokens,
                            &env_lps,
                            config.kl_temp_lm,
                            config.kl_temp_retrieval,
                            config.k_sparse,
                        )? {
                            total += loss;
                            grads.add_assign(&g);
                            contributed = true;
                        }
                    }
                    if !contributed {
                        continue;
                    }
                    (total, grads)
                }
            };

            if !grads.is_finite() || !loss.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite gradients at step {global_step} (loss {loss})"
                )));
            }
            let grad_norm = grads.l2_norm();
            optimizer.step(&mut params, &grads, &mut opt_state);
            global_step += 1;

            let metrics = StepMetrics {
                step: global_step,
                phase,
                loss,
                grad_norm,
                n_fallback_pos,
                n_fallback_neg,
                env_calls: inputs.env.call_count() - env_calls_before,
            };
            metrics_lines.push(serde_json::to_string(&metrics)?);
        }

        if let Some(dir) = inputs.checkpoint_dir {
            let path = dir.join(format!("checkpoint-{epoch:04}.json"));
            let ckpt = Checkpoint {
                encoder: EncoderCheckpoint::from_params(&params, config.k_sparse),
                opt_state: opt_state.clone(),
                step: global_step,
                config_hash: config_hash.clone(),
            };
            ckpt.save(&path)?;
            checkpoint_paths.push(path);
        }
        on_epoch(epoch, &params, parametric_index.as_ref());
    }

    Ok(TrainOutputs {
        params,
        opt_state,
        steps: global_step,
        metrics_lines,
        config_hash,
        index_builds,
        checkpoint_paths,
    })
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64 + 1).wrapping_mul(0x9E3779B97F4A7C15))
}

fn offline_pair(
    query: &Query,
    record: &PoolRecord,
    rng: &mut ChaCha8Rng,
) -> Result<crate::labeler::LabeledPair> {
    use rand::Rng;
    let positive = record.positives[rng.gen_range(0..record.positives.len())].clone();
    let negative = record.negatives[rng.gen_range(0..record.negatives.len())].clone();
    Ok(crate::labeler::LabeledPair {
        query_id: query.id.clone(),
        positive,
        negative,
        positive_provenance: crate::labeler::Provenance::FallbackOffline,
        negative_provenance: crate::labeler::Provenance::FallbackOffline,
    })
}

fn clone_error(e: &Error) -> Error {
    Error::Validation(e.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sv(pairs: &[(u32, f64)], dim: usize) -> SparseVector {
        let (idx, vals): (Vec<u32>, Vec<f64>) = pairs.iter().copied().unzip();
        SparseVector::new(idx, vals, dim).unwrap()
    }

    #[test]
    fn channel_loss_single_example_analytic() {
        // f(q, d+) = 2, f(q, d-) = 0: q-to-d = -ln(e^2 / (e^2 + 1)),
        // d-to-q is a singleton softmax and contributes 0.
        let (loss, _) = channel_loss(&[vec![2.0, 0.0]]);
        assert!((loss - 0.126928011042973).abs() < 1e-12);

        // All scores equal: q-to-d = ln 2.
        let (loss, _) = channel_loss(&[vec![0.7, 0.7]]);
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn channel_loss_is_shift_invariant() {
        let scores = vec![vec![1.0, -0.5, 0.3, 2.0], vec![0.1, 0.9, -1.0, 0.0]];
        let shifted: Vec<Vec<f64>> =
            scores.iter().map(|row| row.iter().map(|s| s + 7.5).collect()).collect();
        let (a, ga) = channel_loss(&scores);
        let (b, gb) = channel_loss(&shifted);
        assert!((a - b).abs() < 1e-9);
        for (ra, rb) in ga.iter().zip(&gb) {
            for (x, y) in ra.iter().zip(rb) {
                assert!((x - y).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn contrastive_loss_is_batch_order_invariant() {
        let params = init_params(3, 12, 3);
        let ex = |q: u32, p: u32, n: u32| BatchExample {
            query_id: format!("q{q}"),
            query_tokens: vec![q, q + 1],
            positive_tokens: vec![p],
            negative_tokens: vec![n, n + 1],
        };
        let batch = ContrastiveBatch { examples: vec![ex(1, 3, 5), ex(2, 6, 8), ex(4, 9, 1)] };
        let permuted = ContrastiveBatch {
            examples: vec![batch.examples[2].clone(), batch.examples[0].clone(), batch.examples[1].clone()],
        };
        let (a, _) = contrastive_loss(&params, &batch, 12).unwrap();
        let (b, _) = contrastive_loss(&params, &permuted, 12).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn kl_loss_identity_and_analytic_cases() {
        let params = init_params(5, 10, 3);
        // Retrieval distribution equal to the LM distribution: loss 0. Use
        // identical candidates so scores tie and both distributions are
        // uniform.
        let cands: Vec<&[u32]> = vec![&[2, 3], &[2, 3]];
        let (loss, _) =
            kl_loss(&params, &[1], &cands, &[-1.0, -1.0], 1.0, 1.0, 10).unwrap().unwrap();
        assert!(loss.abs() < 1e-12);

        // LM probs (1, 0) vs retrieval (0.5, 0.5): KL = ln 2. Temperature
        // scaling of a degenerate LM distribution keeps it degenerate only
        // in the limit, so feed extreme logprobs.
        let (loss, _) = kl_loss(&params, &[1], &cands, &[0.0, -1e9], 1.0, 1.0, 10)
            .unwrap()
            .unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-9);

        // Fewer than two candidates: skip.
        let one: Vec<&[u32]> = vec![&[2, 3]];
        assert!(kl_loss(&params, &[1], &one, &[-1.0], 1.0, 1.0, 10).unwrap().is_none());
    }

    fn fd_check_loss(
        params: &EncoderParams,
        loss_fn: &dyn Fn(&EncoderParams) -> f64,
        grads: &ParamGrads,
        tol: f64,
    ) {
        let step = 1e-5;
        let mut worst: f64 = 0.0;
        for i in 0..params.token_embeddings.len() {
            let mut plus = params.clone();
            plus.token_embeddings[i] += step;
            let mut minus = params.clone();
            minus.token_embeddings[i] -= step;
            let fd = (loss_fn(&plus) - loss_fn(&minus)) / (2.0 * step);
            let a = grads.token_embeddings[i];
            let denom = fd.abs().max(a.abs()).max(1e-6);
            worst = worst.max((fd - a).abs() / denom);
        }
        for j in 0..params.context_gate.len() {
            let mut plus = params.clone();
            plus.context_gate[j] += step;
            let mut minus = params.clone();
            minus.context_gate[j] -= step;
            let fd = (loss_fn(&plus) - loss_fn(&minus)) / (2.0 * step);
            let a = grads.context_gate[j];
            let denom = fd.abs().max(a.abs()).max(1e-6);
            worst = worst.max((fd - a).abs() / denom);
        }
        assert!(worst < tol, "worst relative error {worst}");
    }

    #[test]
    fn contrastive_gradients_match_finite_differences() {
        let vocab = 10;
        let params = init_params(21, vocab, 3);
        let batch = ContrastiveBatch {
            examples: vec![
                BatchExample {
                    query_id: "a".into(),
                    query_tokens: vec![1, 2],
                    positive_tokens: vec![3, 4],
                    negative_tokens: vec![5],
                },
                BatchExample {
                    query_id: "b".into(),
                    query_tokens: vec![6],
                    positive_tokens: vec![7, 8],
                    negative_tokens: vec![9, 1],
                },
            ],
        };
        let (_, grads) = contrastive_loss(&params, &batch, vocab).unwrap();
        fd_check_loss(
            &params,
            &|p| contrastive_loss(p, &batch, vocab).unwrap().0,
            &grads,
            1e-4,
        );
    }

    #[test]
    fn kl_gradients_match_finite_differences() {
        let vocab = 10;
        let params = init_params(33, vocab, 3);
        let cands: Vec<&[u32]> = vec![&[3, 4], &[5], &[6, 7]];
        let lps = [-0.3, -2.0, -1.1];
        let (_, grads) = kl_loss(&params, &[1, 2], &cands, &lps, 1.0, 1.0, vocab).unwrap().unwrap();
        fd_check_loss(
            &params,
            &|p| kl_loss(p, &[1, 2], &cands, &lps, 1.0, 1.0, vocab).unwrap().unwrap().0,
            &grads,
            1e-4,
        );
    }

    #[test]
    fn adamw_zero_grads_shrink_by_weight_decay_only() {
        let mut params = init_params(1, 4, 2);
        let before = params.token_embeddings.clone();
        let grads = ParamGrads::zeros(4, 2);
        let mut state = OptState::zeros(&params);
        let opt = AdamW::new(0.1, 0.01);
        opt.step(&mut params, &grads, &mut state);
        for (x, x0) in params.token_embeddings.iter().zip(&before) {
            assert!((x - x0 * 0.99).abs() < 1e-15);
        }
    }

    #[test]
    fn adamw_zero_lr_changes_params_only_by_weight_decay() {
        let mut params = init_params(1, 4, 2);
        let before = params.token_embeddings.clone();
        let mut grads = ParamGrads::zeros(4, 2);
        grads.token_embeddings.iter_mut().for_each(|g| *g = 1.0);
        let mut state = OptState::zeros(&params);
        let opt = AdamW::new(0.0, 0.01);
        opt.step(&mut params, &grads, &mut state);
        for (x, x0) in params.token_embeddings.iter().zip(&before) {
            assert!((x - x0 * 0.99).abs() < 1e-15);
        }
        assert_eq!(state.step, 1);
    }

    #[test]
    fn sparse_upstream_restriction_skips_zero_entries() {
        let vector = sv(&[(1, 2.0), (3, 1.0)], 6);
        let upstream = vec![0.0, 0.5, 9.0, 0.0, 0.0, 0.0];
        let up = upstream_sparse(&vector, &upstream).unwrap();
        assert_eq!(up.indices(), &[1]);
        assert_eq!(up.values(), &[0.5]);
    }
}
