//! Frozen text encoder adapter.

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use super::{EmbeddingModality, PooledEmbedding};
use crate::backbone::params::hex_digest;
use crate::error::{Error, Result};

/// A frozen sentence encoder producing `dim()`-wide caption embeddings.
pub trait TextEncoder: Send + Sync {
    fn name(&self) -> &str;
    fn version(&self) -> &str;
    fn dim(&self) -> usize;
    fn embed(&self, caption: &str) -> Result<Vec<f64>>;
    /// Digest of the encoder's parameters.
    fn checksum(&self) -> String;
}

/// Lowercased alphanumeric tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_lowercase())
        .collect()
}

pub(crate) fn seed_for(seed: u64, domain: &str, key: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(domain.as_bytes());
    h.update([0u8]);
    h.update(key.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().unwrap())
}

pub(crate) fn gaussian_vector(seed: u64, dim: usize) -> Array1<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array1::from_shape_fn(dim, |_| StandardNormal.sample(&mut rng))
}

/// Deterministic stand-in for a pretrained sentence encoder: each token maps
/// to a seeded Gaussian vector, the caption embedding is the token sum passed
/// through a fixed random mixing matrix. Equal token multisets give equal
/// embeddings.
#[derive(Debug, Clone)]
pub struct HashTextEncoder {
    dim: usize,
    seed: u64,
    mixing: Array2<f64>,
}

impl HashTextEncoder {
    pub fn new(dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed_for(seed, "mixing", ""));
        let scale = 1.0 / (dim as f64).sqrt();
        let mixing = Array2::from_shape_fn((dim, dim), |_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * scale
        });
        Self { dim, seed, mixing }
    }
}

impl TextEncoder for HashTextEncoder {
    fn name(&self) -> &str {
        "hash-text"
    }

    fn version(&self) -> &str {
        "1"
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, caption: &str) -> Result<Vec<f64>> {
        let tokens = tokenize(caption);
        if tokens.is_empty() {
            return Err(Error::Parameter(format!("caption '{caption}' has no tokens")));
        }
        let mut acc = Array1::<f64>::zeros(self.dim);
        for t in &tokens {
            acc += &gaussian_vector(seed_for(self.seed, "token", t), self.dim);
        }
        Ok(self.mixing.t().dot(&acc).to_vec())
    }

    fn checksum(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        for v in self.mixing.iter() {
            h.update(v.to_le_bytes());
        }
        hex_digest(h)
    }
}

/// Sentence-level caption embedding, L2-normalized.
pub fn text_encode(encoder: &dyn TextEncoder, caption: &str) -> Result<PooledEmbedding> {
    if caption.trim().is_empty() {
        return Err(Error::Parameter("caption is empty".into()));
    }
    let v = encoder.embed(caption)?;
    if v.len() != encoder.dim() {
        return Err(Error::adapter(
            encoder.name(),
            format!("returned {} values, declared dim {}", v.len(), encoder.dim()),
        ));
    }
    PooledEmbedding::new(Array1::from(v), EmbeddingModality::Text).normalized()
}
