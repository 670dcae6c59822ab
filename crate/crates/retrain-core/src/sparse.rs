//! Nonnegative sparse vectors in vocabulary space.
//!
//! One representation covers both the binary bag-of-tokens form and the
//! real-valued encoder output: `indices` are strictly increasing dimension
//! ids, `values` are the nonzero entries, `dim` is the vocabulary size.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseVector {
    indices: Vec<u32>,
    values: Vec<f64>,
    dim: usize,
}

impl SparseVector {
    /// Build from parallel index/value lists. Indices must be strictly
    /// increasing and below `dim`; values must be finite and nonzero.
    /// Embeddings and bag-of-tokens vectors are additionally positive, which
    /// their constructors guarantee; gradient vectors may carry any sign.
    pub fn new(indices: Vec<u32>, values: Vec<f64>, dim: usize) -> Result<Self> {
        if indices.len() != values.len() {
            return Err(Error::Validation(format!(
                "sparse vector with {} indices but {} values",
                indices.len(),
                values.len()
            )));
        }
        for w in indices.windows(2) {
            if w[0] >= w[1] {
                return Err(Error::Validation(format!(
                    "sparse indices not strictly increasing at {}..{}",
                    w[0], w[1]
                )));
            }
        }
        if let Some(&last) = indices.last() {
            if last as usize >= dim {
                return Err(Error::TokenOutOfRange { id: last, dim });
            }
        }
        if let Some((i, v)) = values.iter().enumerate().find(|(_, v)| **v == 0.0 || !v.is_finite()) {
            return Err(Error::Validation(format!(
                "sparse value at dim {} must be finite and nonzero, got {v}",
                indices[i]
            )));
        }
        Ok(Self { indices, values, dim })
    }

    pub fn empty(dim: usize) -> Self {
        Self { indices: Vec::new(), values: Vec::new(), dim }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn indices(&self) -> &[u32] {
        &self.indices
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn iter(&self) -> impl Iterator<Item = (u32, f64)> + '_ {
        self.indices.iter().copied().zip(self.values.iter().copied())
    }

    pub fn get(&self, dim: u32) -> f64 {
        match self.indices.binary_search(&dim) {
            Ok(pos) => self.values[pos],
            Err(_) => 0.0,
        }
    }

    /// Inner product over shared nonzero dimensions, accumulated in
    /// ascending dimension order.
    pub fn dot(&self, other: &SparseVector) -> f64 {
        let mut sum = 0.0;
        let (mut i, mut j) = (0, 0);
        while i < self.indices.len() && j < other.indices.len() {
            match self.indices[i].cmp(&other.indices[j]) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    sum += self.values[i] * other.values[j];
                    i += 1;
                    j += 1;
                }
            }
        }
        sum
    }

    /// Densify into a `dim`-length vector.
    pub fn to_dense(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for (i, v) in self.iter() {
            out[i as usize] = v;
        }
        out
    }
}

/// Keep the `k` largest entries of a dense vector and zero the rest.
/// Ties are broken toward the lower index. `k >= len` keeps everything.
/// Entries must be positive to survive (the encoder guarantees this).
pub fn topk_sparsify(dense: &[f64], k: usize) -> SparseVector {
    let dim = dense.len();
    let mut order: Vec<u32> = (0..dim as u32).collect();
    // Sort by value descending, index ascending; stable ordering of equal
    // values falls out of the explicit index comparison.
    order.sort_by(|&a, &b| {
        dense[b as usize]
            .partial_cmp(&dense[a as usize])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut kept: Vec<u32> = order.into_iter().take(k).collect();
    kept.sort_unstable();
    let mut indices = Vec::with_capacity(kept.len());
    let mut values = Vec::with_capacity(kept.len());
    for i in kept {
        let v = dense[i as usize];
        if v > 0.0 {
            indices.push(i);
            values.push(v);
        }
    }
    SparseVector { indices, values, dim }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn topk_keeps_largest() {
        let v = topk_sparsify(&[0.5, 3.0, 0.1, 2.0, 1.0], 2);
        assert_eq!(v.indices(), &[1, 3]);
        assert_eq!(v.values(), &[3.0, 2.0]);
    }

    #[test]
    fn topk_identity_when_k_covers_len() {
        let v = topk_sparsify(&[0.5, 3.0, 0.1], 10);
        assert_eq!(v.nnz(), 3);
        assert_eq!(v.get(0), 0.5);
        assert_eq!(v.get(2), 0.1);
    }

    #[test]
    fn topk_tie_breaks_to_lower_index() {
        let v = topk_sparsify(&[2.0, 2.0, 1.0], 1);
        assert_eq!(v.indices(), &[0]);
        assert_eq!(v.values(), &[2.0]);
    }

    #[test]
    fn dot_merges_shared_dims() {
        let a = SparseVector::new(vec![1, 3, 5], vec![1.0, 2.0, 3.0], 8).unwrap();
        let b = SparseVector::new(vec![3, 5, 6], vec![10.0, 0.5, 4.0], 8).unwrap();
        assert_eq!(a.dot(&b), 2.0 * 10.0 + 3.0 * 0.5);
        assert_eq!(a.dot(&SparseVector::empty(8)), 0.0);
    }

    #[test]
    fn new_rejects_unsorted_and_out_of_range() {
        assert!(SparseVector::new(vec![3, 1], vec![1.0, 1.0], 8).is_err());
        assert!(SparseVector::new(vec![1, 9], vec![1.0, 1.0], 8).is_err());
        assert!(SparseVector::new(vec![1], vec![0.0], 8).is_err());
        assert!(SparseVector::new(vec![1], vec![f64::NAN], 8).is_err());
        // Gradient vectors carry signs.
        assert!(SparseVector::new(vec![1], vec![-1.0], 8).is_ok());
    }
}
