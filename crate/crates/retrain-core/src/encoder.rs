//! Shallow tied-weight sparse encoder with analytic gradients.
//!
//! A token sequence maps to a nonnegative vocabulary-space embedding:
//! per-token vocab logits are `z_t = W (W[t] ⊙ g)` where `W` is the shared
//! token-embedding matrix, `g = sigmoid(context_gate ⊙ c̄)` gates the hidden
//! state by the mean token embedding `c̄` of the sequence, `elu1p` maps
//! logits to (0, ∞), dimensions are max-pooled over tokens, and top-k
//! sparsification keeps the largest activations. The max-pool routes
//! gradients to the argmax token (ties to the lowest position), and
//! dimensions zeroed by top-k receive zero gradient.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::UNK_ID;
use crate::error::{Error, Result};
use crate::sparse::{topk_sparsify, SparseVector};

/// `x + 1` for `x >= 0`, `exp(x)` otherwise. Continuous and differentiable
/// at 0 with slope 1; codomain (0, +inf).
#[inline]
pub fn elu1p(x: f64) -> f64 {
    if x >= 0.0 {
        x + 1.0
    } else {
        x.exp()
    }
}

#[inline]
pub fn elu1p_prime(x: f64) -> f64 {
    if x >= 0.0 {
        1.0
    } else {
        x.exp()
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// SplitMix64 with the standard constants; used so parameter initialization
/// is reproducible bit-for-bit from a documented recurrence.
///
/// state += 0x9E3779B97F4A7C15
/// z = state; z = (z ^ z>>30) * 0xBF58476D1CE4E5B9
/// z = (z ^ z>>27) * 0x94D049BB133111EB; output z ^ z>>31
#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E3779B97F4A7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
        z ^ (z >> 31)
    }

    /// Uniform in [0, 1) from the top 53 bits.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }
}

/// Encoder parameters: a `|V| x h` token-embedding matrix (row-major) and an
/// `h`-dim context gate. `version` tracks optimizer updates so a stale
/// forward trace cannot be replayed against newer parameters.
#[derive(Debug, Clone)]
pub struct EncoderParams {
    pub token_embeddings: Vec<f64>,
    pub context_gate: Vec<f64>,
    pub vocab_size: usize,
    pub hidden: usize,
    pub seed: u64,
    version: u64,
}

impl EncoderParams {
    #[inline]
    pub fn row(&self, token: u32) -> &[f64] {
        let h = self.hidden;
        let start = token as usize * h;
        &self.token_embeddings[start..start + h]
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    /// Called by the optimizer after every in-place update.
    pub fn bump_version(&mut self) {
        self.version += 1;
    }

    pub fn num_params(&self) -> usize {
        self.token_embeddings.len() + self.context_gate.len()
    }
}

/// Deterministic initialization: entries uniform in [-0.1, 0.1] from
/// SplitMix64, embedding matrix first (row-major) then the gate.
pub fn init_params(seed: u64, vocab_size: usize, hidden: usize) -> EncoderParams {
    assert!(hidden >= 1, "hidden width must be >= 1");
    let mut rng = SplitMix64::new(seed);
    let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| -0.1 + 0.2 * rng.next_f64()).collect() };
    let token_embeddings = draw(vocab_size * hidden);
    let context_gate = draw(hidden);
    EncoderParams { token_embeddings, context_gate, vocab_size, hidden, seed, version: 0 }
}

/// Gradients with the same shapes as [`EncoderParams`].
#[derive(Debug, Clone)]
pub struct ParamGrads {
    pub token_embeddings: Vec<f64>,
    pub context_gate: Vec<f64>,
    pub vocab_size: usize,
    pub hidden: usize,
}

impl ParamGrads {
    pub fn zeros(vocab_size: usize, hidden: usize) -> Self {
        Self {
            token_embeddings: vec![0.0; vocab_size * hidden],
            context_gate: vec![0.0; hidden],
            vocab_size,
            hidden,
        }
    }

    pub fn add_assign(&mut self, other: &ParamGrads) {
        for (a, b) in self.token_embeddings.iter_mut().zip(&other.token_embeddings) {
            *a += b;
        }
        for (a, b) in self.context_gate.iter_mut().zip(&other.context_gate) {
            *a += b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for x in self.token_embeddings.iter_mut().chain(self.context_gate.iter_mut()) {
            *x *= factor;
        }
    }

    pub fn l2_norm(&self) -> f64 {
        self.token_embeddings
            .iter()
            .chain(self.context_gate.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.token_embeddings.iter().chain(self.context_gate.iter()).all(|x| x.is_finite())
    }
}

#[derive(Debug, Clone, Copy)]
struct KeptDim {
    dim: u32,
    /// Position in the filtered token sequence that won the max-pool.
    pos: u32,
    /// Pre-activation logit at the argmax.
    z: f64,
}

/// Forward-pass cache needed to backpropagate through max pooling and the
/// top-k mask.
#[derive(Debug, Clone)]
pub struct EncodeTrace {
    tokens: Vec<u32>,
    cbar: Vec<f64>,
    gate: Vec<f64>,
    kept: Vec<KeptDim>,
    params_version: u64,
}

/// Encode a token sequence into a sparse vocabulary-space embedding.
pub fn encode(params: &EncoderParams, token_ids: &[u32], k_sparse: usize) -> Result<SparseVector> {
    encode_with_trace(params, token_ids, k_sparse).map(|(v, _)| v)
}

/// [`encode`] plus the forward cache consumed by [`encode_backward`].
pub fn encode_with_trace(
    params: &EncoderParams,
    token_ids: &[u32],
    k_sparse: usize,
) -> Result<(SparseVector, EncodeTrace)> {
    assert!(k_sparse >= 1, "k_sparse must be >= 1");
    let tokens: Vec<u32> = token_ids.iter().copied().filter(|&t| t != UNK_ID).collect();
    if tokens.is_empty() {
        return Err(Error::EncodeEmpty);
    }
    for &t in &tokens {
        if t as usize >= params.vocab_size {
            return Err(Error::TokenOutOfRange { id: t, dim: params.vocab_size });
        }
    }
    let h = params.hidden;
    let len = tokens.len() as f64;

    let mut cbar = vec![0.0; h];
    for &t in &tokens {
        for (c, &e) in cbar.iter_mut().zip(params.row(t)) {
            *c += e;
        }
    }
    for c in cbar.iter_mut() {
        *c /= len;
    }
    let gate: Vec<f64> =
        params.context_gate.iter().zip(&cbar).map(|(&w, &c)| sigmoid(w * c)).collect();

    // Hidden states only depend on the token id; duplicates tie exactly in
    // the max-pool and resolve to their first position.
    let mut uniq: Vec<(u32, u32)> = Vec::with_capacity(tokens.len());
    for (pos, &t) in tokens.iter().enumerate() {
        if !uniq.iter().any(|&(u, _)| u == t) {
            uniq.push((t, pos as u32));
        }
    }
    let hiddens: Vec<Vec<f64>> = uniq
        .iter()
        .map(|&(t, _)| params.row(t).iter().zip(&gate).map(|(&e, &g)| e * g).collect())
        .collect();

    let vocab = params.vocab_size;
    let mut dense = vec![0.0; vocab];
    let mut pooled_z = vec![0.0; vocab];
    let mut argmax_pos = vec![0u32; vocab];
    for v in 0..vocab {
        let row = params.row(v as u32);
        let mut best = f64::NEG_INFINITY;
        let mut best_pos = 0u32;
        for (hid, &(_, pos)) in hiddens.iter().zip(&uniq) {
            let mut z = 0.0;
            for (a, b) in row.iter().zip(hid) {
                z += a * b;
            }
            if z > best {
                best = z;
                best_pos = pos;
            }
        }
        pooled_z[v] = best;
        argmax_pos[v] = best_pos;
        dense[v] = elu1p(best);
    }

    let vector = topk_sparsify(&dense, k_sparse);
    let kept = vector
        .indices()
        .iter()
        .map(|&dim| KeptDim { dim, pos: argmax_pos[dim as usize], z: pooled_z[dim as usize] })
        .collect();
    let trace = EncodeTrace { tokens, cbar, gate, kept, params_version: params.version };
    Ok((vector, trace))
}

/// Analytic gradient of the encoder output against all parameters, given an
/// upstream gradient on the output dimensions. Upstream entries on
/// dimensions zeroed by top-k are masked to zero.
pub fn encode_backward(
    params: &EncoderParams,
    trace: &EncodeTrace,
    upstream: &SparseVector,
) -> Result<ParamGrads> {
    if trace.params_version != params.version {
        return Err(Error::StaleTrace(format!(
            "trace built at params version {} but params are at {}",
            trace.params_version, params.version
        )));
    }
    if upstream.dim() != params.vocab_size {
        return Err(Error::DimMismatch { query: upstream.dim(), index: params.vocab_size });
    }
    let h = params.hidden;
    let mut grads = ParamGrads::zeros(params.vocab_size, h);
    let mut dgate = vec![0.0; h];

    for kd in &trace.kept {
        let u = upstream.get(kd.dim);
        if u == 0.0 {
            continue;
        }
        let du = u * elu1p_prime(kd.z);
        let tau = trace.tokens[kd.pos as usize];
        let row_v: Vec<f64> = params.row(kd.dim).to_vec();
        let row_t: Vec<f64> = params.row(tau).to_vec();
        {
            let gv = &mut grads.token_embeddings
                [kd.dim as usize * h..(kd.dim as usize + 1) * h];
            for j in 0..h {
                gv[j] += du * row_t[j] * trace.gate[j];
            }
        }
        {
            let gt = &mut grads.token_embeddings[tau as usize * h..(tau as usize + 1) * h];
            for j in 0..h {
                gt[j] += du * row_v[j] * trace.gate[j];
            }
        }
        for j in 0..h {
            dgate[j] += du * row_v[j] * row_t[j];
        }
    }

    // gate = sigmoid(w ⊙ c̄), c̄ = mean of token embedding rows.
    let len = trace.tokens.len() as f64;
    let mut dcbar = vec![0.0; h];
    for j in 0..h {
        let s = trace.gate[j] * (1.0 - trace.gate[j]);
        grads.context_gate[j] += dgate[j] * s * trace.cbar[j];
        dcbar[j] = dgate[j] * s * params.context_gate[j];
    }
    for &t in &trace.tokens {
        let gt = &mut grads.token_embeddings[t as usize * h..(t as usize + 1) * h];
        for j in 0..h {
            gt[j] += dcbar[j] / len;
        }
    }
    Ok(grads)
}

const CHECKPOINT_FORMAT: u32 = 1;

/// On-disk encoder state: shapes, row-major values, seed, and the top-k
/// width the parameters were trained with.
#[derive(Debug, Serialize, Deserialize)]
pub struct EncoderCheckpoint {
    pub format_version: u32,
    pub vocab_size: usize,
    pub hidden: usize,
    pub seed: u64,
    pub k_sparse: usize,
    pub token_embeddings: Vec<f64>,
    pub context_gate: Vec<f64>,
}

impl EncoderCheckpoint {
    pub fn from_params(params: &EncoderParams, k_sparse: usize) -> Self {
        Self {
            format_version: CHECKPOINT_FORMAT,
            vocab_size: params.vocab_size,
            hidden: params.hidden,
            seed: params.seed,
            k_sparse,
            token_embeddings: params.token_embeddings.clone(),
            context_gate: params.context_gate.clone(),
        }
    }

    pub fn into_params(self) -> Result<(EncoderParams, usize)> {
        if self.format_version != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint format {} (expected {CHECKPOINT_FORMAT})",
                self.format_version
            )));
        }
        if self.token_embeddings.len() != self.vocab_size * self.hidden {
            return Err(Error::Checkpoint(format!(
                "embedding shape mismatch: {} values for {}x{}",
                self.token_embeddings.len(),
                self.vocab_size,
                self.hidden
            )));
        }
        if self.context_gate.len() != self.hidden {
            return Err(Error::Checkpoint(format!(
                "gate shape mismatch: {} values for hidden {}",
                self.context_gate.len(),
                self.hidden
            )));
        }
        let params = EncoderParams {
            token_embeddings: self.token_embeddings,
            context_gate: self.context_gate,
            vocab_size: self.vocab_size,
            hidden: self.hidden,
            seed: self.seed,
            version: 0,
        };
        Ok((params, self.k_sparse))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut file = std::fs::File::create(path)?;
        let bytes = serde_json::to_vec(self)?;
        file.write_all(&bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut buf = String::new();
        std::fs::File::open(path)?.read_to_string(&mut buf)?;
        let ckpt: EncoderCheckpoint = serde_json::from_str(&buf)?;
        Ok(ckpt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn elu1p_branches() {
        assert_eq!(elu1p(0.0), 1.0);
        assert_eq!(elu1p(2.0), 3.0);
        assert!((elu1p(-1.0) - (-1.0f64).exp()).abs() < 1e-15);
        assert!((elu1p(-1.0) - 0.36788).abs() < 1e-5);
    }

    #[test]
    fn elu1p_continuous_with_unit_slope_at_zero() {
        let eps = 1e-7;
        assert!((elu1p(eps) - elu1p(-eps)).abs() < 2.1e-7);
        let slope = (elu1p(eps) - elu1p(-eps)) / (2.0 * eps);
        assert!((slope - 1.0).abs() < 1e-6);
    }

    #[test]
    fn init_is_deterministic_and_matches_reference_trace() {
        let a = init_params(0, 4, 2);
        let b = init_params(0, 4, 2);
        assert_eq!(a.token_embeddings, b.token_embeddings);
        assert_eq!(a.context_gate, b.context_gate);
        assert_ne!(init_params(1, 4, 2).token_embeddings, a.token_embeddings);

        // Frozen SplitMix64 reference trace for seed 0, |V|=4, h=2 (8
        // embedding values followed by 2 gate values).
        let expected = [
            0.07666216164272852,
            -0.013694400590298,
            -0.09471324568148046,
            0.09417639563076571,
            -0.07873066168655751,
            -0.03453484715637485,
            -0.06522642680806343,
            0.054309311266313415,
        ];
        for (got, want) in a.token_embeddings.iter().zip(expected) {
            assert_eq!(*got, want);
        }
        assert_eq!(a.context_gate, vec![-0.05086221023197373, 0.0904061382735653]);
        for x in a.token_embeddings.iter().chain(a.context_gate.iter()) {
            assert!(*x >= -0.1 && *x < 0.1);
        }
    }

    #[test]
    fn encode_full_width_keeps_every_dimension() {
        let params = init_params(3, 8, 4);
        let v = encode(&params, &[1, 2], 8).unwrap();
        assert_eq!(v.nnz(), 8);
        assert!(v.values().iter().all(|&x| x > 0.0));
    }

    #[test]
    fn encode_is_idempotent_under_token_repetition() {
        let params = init_params(5, 8, 4);
        let a = encode(&params, &[3], 8).unwrap();
        let b = encode(&params, &[3, 3], 8).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn encode_rejects_empty_effective_sequence() {
        let params = init_params(5, 8, 4);
        assert!(matches!(encode(&params, &[], 8), Err(Error::EncodeEmpty)));
        assert!(matches!(encode(&params, &[0, 0], 8), Err(Error::EncodeEmpty)));
    }

    /// Independent straight-line recomputation of the three head equations:
    /// dense logits for every vocab dimension without the pooled/uniqued
    /// shortcuts of the production path.
    fn oracle_encode(params: &EncoderParams, tokens: &[u32], k_sparse: usize) -> SparseVector {
        let h = params.hidden;
        let len = tokens.len() as f64;
        let mut cbar = vec![0.0; h];
        for &t in tokens {
            for j in 0..h {
                cbar[j] += params.row(t)[j];
            }
        }
        for c in cbar.iter_mut() {
            *c /= len;
        }
        let gate: Vec<f64> = (0..h).map(|j| sigmoid(params.context_gate[j] * cbar[j])).collect();
        let mut activations = vec![vec![0.0; params.vocab_size]; tokens.len()];
        for (p, &t) in tokens.iter().enumerate() {
            for v in 0..params.vocab_size {
                let mut z = 0.0;
                for j in 0..h {
                    z += params.row(v as u32)[j] * params.row(t)[j] * gate[j];
                }
                activations[p][v] = elu1p(z);
            }
        }
        let mut pooled = vec![0.0; params.vocab_size];
        for v in 0..params.vocab_size {
            pooled[v] = activations.iter().map(|a| a[v]).fold(f64::NEG_INFINITY, f64::max);
        }
        topk_sparsify(&pooled, k_sparse)
    }

    #[test]
    fn encode_matches_straight_line_oracle() {
        let params = init_params(7, 8, 4);
        let got = encode(&params, &[1, 2], 3).unwrap();
        let want = oracle_encode(&params, &[1, 2], 3);
        assert_eq!(got, want);
        assert_eq!(got.nnz(), 3);

        for seed in 0..20u64 {
            let params = init_params(seed, 12, 3);
            let tokens = [1 + (seed % 10) as u32, 2, 5, 2];
            let got = encode(&params, &tokens, 6).unwrap();
            let want = oracle_encode(&params, &tokens, 6);
            assert_eq!(got, want, "seed {seed}");
        }
    }

    #[test]
    fn permutation_invariant_when_gate_is_zero() {
        let mut params = init_params(11, 10, 3);
        for w in params.context_gate.iter_mut() {
            *w = 0.0;
        }
        let a = encode(&params, &[1, 4, 7], 10).unwrap();
        let b = encode(&params, &[7, 1, 4], 10).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn backward_zero_upstream_gives_zero_grads() {
        let params = init_params(2, 8, 3);
        let (_, trace) = encode_with_trace(&params, &[1, 2], 4).unwrap();
        let grads = encode_backward(&params, &trace, &SparseVector::empty(8)).unwrap();
        assert!(grads.token_embeddings.iter().all(|&g| g == 0.0));
        assert!(grads.context_gate.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn backward_rejects_stale_trace() {
        let mut params = init_params(2, 8, 3);
        let (_, trace) = encode_with_trace(&params, &[1, 2], 4).unwrap();
        params.bump_version();
        let err = encode_backward(&params, &trace, &SparseVector::empty(8)).unwrap_err();
        assert!(matches!(err, Error::StaleTrace(_)));
    }

    #[test]
    fn backward_masks_dimensions_dropped_by_topk() {
        let params = init_params(9, 8, 3);
        let (v, trace) = encode_with_trace(&params, &[1, 2], 3).unwrap();
        // Upstream gradient on a dimension the top-k dropped.
        let dropped: u32 = (0..8u32).find(|d| v.get(*d) == 0.0).unwrap();
        let upstream = SparseVector::new(vec![dropped], vec![1.0], 8).unwrap();
        let grads = encode_backward(&params, &trace, &upstream).unwrap();
        assert!(grads.token_embeddings.iter().all(|&g| g == 0.0));
        assert!(grads.context_gate.iter().all(|&g| g == 0.0));
    }

    /// Central finite differences over every parameter for the scalar loss
    /// `sum_i upstream_i * encode(params)_i`.
    #[test]
    fn backward_matches_finite_differences() {
        let vocab = 8;
        let h = 3;
        for seed in 0..10u64 {
            let params = init_params(seed + 100, vocab, h);
            let tokens = [1u32, 2 + (seed % 3) as u32];
            let k = vocab; // full width: no top-k boundary to flip under perturbation
            let (v, trace) = encode_with_trace(&params, &tokens, k).unwrap();
            let upstream = {
                let mut rng = SplitMix64::new(seed);
                let idx: Vec<u32> = v.indices().to_vec();
                let vals: Vec<f64> = idx.iter().map(|_| rng.next_f64() * 2.0 - 1.0).collect();
                let (idx, vals): (Vec<u32>, Vec<f64>) =
                    idx.into_iter().zip(vals).filter(|(_, x)| *x != 0.0).unzip();
                SparseVector::new(idx, vals, vocab).unwrap()
            };
            let grads = encode_backward(&params, &trace, &upstream).unwrap();

            let loss = |p: &EncoderParams| -> f64 {
                let out = encode(p, &tokens, k).unwrap();
                upstream.iter().map(|(i, u)| u * out.get(i)).sum()
            };
            let step = 1e-5;
            let mut check = |get: &dyn Fn(&EncoderParams) -> f64,
                             set: &dyn Fn(&mut EncoderParams, f64),
                             analytic: f64| {
                let base = get(&params);
                let mut plus = params.clone();
                set(&mut plus, base + step);
                let mut minus = params.clone();
                set(&mut minus, base - step);
                let fd = (loss(&plus) - loss(&minus)) / (2.0 * step);
                // Floor the denominator so FD roundoff on near-zero
                // gradients does not register as relative error.
                let denom = fd.abs().max(analytic.abs()).max(1e-6);
                assert!(
                    (fd - analytic).abs() / denom < 1e-4,
                    "seed {seed}: fd {fd} vs analytic {analytic}"
                );
            };
            for i in 0..vocab * h {
                check(
                    &|p: &EncoderParams| p.token_embeddings[i],
                    &|p: &mut EncoderParams, x| p.token_embeddings[i] = x,
                    grads.token_embeddings[i],
                );
            }
            for j in 0..h {
                check(
                    &|p: &EncoderParams| p.context_gate[j],
                    &|p: &mut EncoderParams, x| p.context_gate[j] = x,
                    grads.context_gate[j],
                );
            }
        }
    }

    #[test]
    fn checkpoint_roundtrip_and_shape_mismatch() {
        let params = init_params(4, 6, 3);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("encoder.json");
        EncoderCheckpoint::from_params(&params, 5).save(&path).unwrap();
        let (loaded, k) = EncoderCheckpoint::load(&path).unwrap().into_params().unwrap();
        assert_eq!(loaded.token_embeddings, params.token_embeddings);
        assert_eq!(loaded.context_gate, params.context_gate);
        assert_eq!(k, 5);

        let mut bad = EncoderCheckpoint::from_params(&params, 5);
        bad.vocab_size = 7;
        assert!(matches!(bad.into_params(), Err(Error::Checkpoint(_))));
    }
}
