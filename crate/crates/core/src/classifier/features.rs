//! Hashed bag-of-words features.

use crate::seed::fnv1a;

/// Default feature dimension.
pub const FEATURE_DIM: usize = 1 << 18;

/// Sparse row, indices strictly increasing.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SparseVec {
    pub indices: Vec<u32>,
    pub values: Vec<f64>,
}

impl SparseVec {
    pub fn dot(&self, dense: &[f64]) -> f64 {
        self.indices
            .iter()
            .zip(&self.values)
            .map(|(&i, &v)| dense[i as usize] * v)
            .sum()
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }
}

/// Maximal runs of letters and digits.
pub fn tokens(text: &str) -> impl Iterator<Item = &str> {
    text.split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty())
}

/// Sublinear term frequency (1 + ln tf) over hashed tokens, L2-normalised.
/// An input without tokens maps to the zero vector.
pub fn featurize(text: &str, dim: usize) -> SparseVec {
    assert!(dim > 0 && dim <= u32::MAX as usize, "feature dimension out of range");
    let mut hashed: Vec<u32> = tokens(text)
        .map(|t| (fnv1a(t.as_bytes()) % dim as u64) as u32)
        .collect();
    hashed.sort_unstable();

    let mut out = SparseVec::default();
    for chunk in hashed.chunk_by(|a, b| a == b) {
        out.indices.push(chunk[0]);
        out.values.push(1.0 + (chunk.len() as f64).ln());
    }
    let norm = out.values.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        out.values.iter_mut().for_each(|v| *v /= norm);
    }
    out
}
