//! Deterministic hashed-token text encoder.

use rand_distr::{Distribution, StandardNormal};

use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const TEXT_DIM: usize = 64;
pub const MAX_TOKENS: usize = 16;
const TABLE_SEED: u64 = 0x7e47_0001;

/// Token ids plus one L2-normalised row per token. The empty string maps to
/// the null condition: no tokens and a single zero row.
#[derive(Clone, Debug, PartialEq)]
pub struct TextEmbedding<T> {
    pub token_ids: Vec<u64>,
    pub matrix: Tensor<T>,
}

impl<T: Scalar> TextEmbedding<T> {
    pub fn null() -> Self {
        Self {
            token_ids: Vec::new(),
            matrix: Tensor::zeros(&[1, TEXT_DIM]),
        }
    }

    pub fn is_null(&self) -> bool {
        self.token_ids.is_empty()
    }

    pub fn encode(text: &str) -> Self {
        let ids: Vec<u64> = tokenize(text).iter().map(|t| token_id(t)).take(MAX_TOKENS).collect();
        if ids.is_empty() {
            return Self::null();
        }
        let mut data = Vec::with_capacity(ids.len() * TEXT_DIM);
        for &id in &ids {
            data.extend(token_vector(id).into_iter().map(T::cst));
        }
        Self {
            matrix: Tensor::new(&[ids.len(), TEXT_DIM], data).expect("text shape"),
            token_ids: ids,
        }
    }
}

pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|s| !s.is_empty())
        .map(|s| s.to_lowercase())
        .collect()
}

/// FNV-1a hash of a token.
pub fn token_id(token: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in token.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Unit vector attached to a token id.
pub fn token_vector(id: u64) -> Vec<f64> {
    let mut r = rng::stream(TABLE_SEED, &[&id.to_string()]);
    let v: Vec<f64> = (0..TEXT_DIM).map(|_| StandardNormal.sample(&mut r)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}
