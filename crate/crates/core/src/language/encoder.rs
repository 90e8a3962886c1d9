//! Token features and the text-encoder contract.
//!
//! The only encoder shipped is [`HashTextEncoder`], which maps each token
//! to a fixed seeded random vector. It is deterministic and shape-correct
//! but carries no semantics; it exists so the pipeline runs offline. A real
//! sentence encoder can be dropped in behind [`TextEncoder`].

use ndarray::Array2;

use crate::nn::{normal_sample, rng_for};
use crate::util::stable_hash64;

use super::LanguageError;

/// Per-token feature matrix with a validity mask. Rows whose mask bit is
/// false are forced to zero.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenFeatures {
    matrix: Array2<f64>,
    mask: Vec<bool>,
}

impl TokenFeatures {
    pub fn new(matrix: Array2<f64>, mask: Vec<bool>) -> Result<Self, LanguageError> {
        if mask.len() != matrix.nrows() {
            return Err(LanguageError::TokenShape(format!(
                "mask has {} entries for {} rows",
                mask.len(),
                matrix.nrows()
            )));
        }
        for (i, &real) in mask.iter().enumerate() {
            if !real && matrix.row(i).iter().any(|&v| v != 0.0) {
                return Err(LanguageError::TokenShape(format!(
                    "masked row {i} is not zero"
                )));
            }
        }
        Ok(Self { matrix, mask })
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.matrix
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    /// Feature dimension D.
    pub fn dim(&self) -> usize {
        self.matrix.ncols()
    }

    /// Number of real (unmasked) tokens.
    pub fn real_len(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

pub trait TextEncoder: Send + Sync {
    fn dim(&self) -> usize;
    fn max_len(&self) -> usize;
    fn encode(&self, text: &str) -> Result<TokenFeatures, LanguageError>;
}

/// Test-only encoder: each distinct token hashes to a fixed N(0, 1/sqrt(D))
/// vector. Same text always encodes to the same matrix.
#[derive(Debug, Clone)]
pub struct HashTextEncoder {
    dim: usize,
    max_len: usize,
    seed: u64,
}

impl HashTextEncoder {
    pub fn new(dim: usize, max_len: usize, seed: u64) -> Self {
        Self { dim, max_len, seed }
    }

    /// The pipeline default: 768-dim tokens, 200-token window.
    pub fn with_defaults(seed: u64) -> Self {
        Self::new(768, 200, seed)
    }

    fn tokenize(text: &str) -> Vec<String> {
        text.to_lowercase()
            .split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty())
            .map(String::from)
            .collect()
    }
}

impl TextEncoder for HashTextEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn max_len(&self) -> usize {
        self.max_len
    }

    fn encode(&self, text: &str) -> Result<TokenFeatures, LanguageError> {
        let tokens = Self::tokenize(text);
        if tokens.is_empty() {
            return Err(LanguageError::EmptyText);
        }
        let real = tokens.len().min(self.max_len);
        let mut matrix = Array2::zeros((self.max_len, self.dim));
        let scale = 1.0 / (self.dim as f64).sqrt();
        for (row, token) in tokens.iter().take(real).enumerate() {
            let token_seed = self.seed ^ stable_hash64(token.as_bytes());
            let mut rng = rng_for(token_seed, "hash-token");
            for col in 0..self.dim {
                matrix[(row, col)] = normal_sample(&mut rng) * scale;
            }
        }
        let mask = (0..self.max_len).map(|i| i < real).collect();
        TokenFeatures::new(matrix, mask)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_text_encodes_identically() {
        let enc = HashTextEncoder::new(32, 16, 5);
        let a = enc.encode("Grip the bottle neck firmly.").unwrap();
        let b = enc.encode("Grip the bottle neck firmly.").unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn mask_counts_tokens_and_pads_with_zeros() {
        let enc = HashTextEncoder::new(8, 10, 1);
        let f = enc.encode("three token text").unwrap();
        assert_eq!(f.real_len(), 3);
        assert_eq!(f.mask().len(), 10);
        for i in 3..10 {
            assert!(f.matrix().row(i).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn long_text_truncates_to_max_len() {
        let enc = HashTextEncoder::new(4, 5, 1);
        let text = (0..40).map(|i| format!("w{i}")).collect::<Vec<_>>().join(" ");
        let f = enc.encode(&text).unwrap();
        assert_eq!(f.real_len(), 5);
    }

    #[test]
    fn empty_after_tokenization_is_an_error() {
        let enc = HashTextEncoder::new(4, 5, 1);
        assert!(matches!(enc.encode("?!  --"), Err(LanguageError::EmptyText)));
        assert!(matches!(enc.encode(""), Err(LanguageError::EmptyText)));
    }

    #[test]
    fn identical_tokens_share_rows() {
        let enc = HashTextEncoder::new(16, 8, 9);
        let f = enc.encode("grip grip").unwrap();
        assert_eq!(f.matrix().row(0).to_vec(), f.matrix().row(1).to_vec());
    }

    #[test]
    fn token_features_reject_nonzero_masked_rows() {
        let mut m = Array2::zeros((2, 3));
        m[(1, 0)] = 0.5;
        assert!(TokenFeatures::new(m, vec![true, false]).is_err());
    }
}
