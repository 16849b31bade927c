//! Pluggable sentence encoder.
//!
//! Production runs adapt a pretrained siamese sentence encoder through
//! [`FileEncoder`] (embeddings computed offline, one per exact text). Tests
//! and the synthetic pipeline use [`StubEncoder`], which is fully
//! deterministic and needs no model files: every token hashes to a fixed
//! pseudo-random direction and a sentence embeds as the normalized sum over
//! its token multiset, so texts sharing words get positive cosine.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::data::tokenize;

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("cannot encode empty text")]
    EmptyText,
    #[error("no precomputed embedding for text: {0:?}")]
    UnknownText(String),
    #[error("cannot read embedding table {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed embedding table line {0}")]
    BadTableLine(usize),
    #[error("embedding dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
}

/// Maps text to a unit vector of fixed dimension, deterministically.
pub trait SentenceEncoder: Send + Sync {
    fn dim(&self) -> usize;
    fn encode(&self, text: &str) -> Result<Vec<f32>, EncoderError>;
}

/// Dot product of two equal-length vectors.
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Cosine similarity; zero vectors compare as 0.
pub fn cosine(a: &[f32], b: &[f32]) -> f32 {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot(a, b) / (na * nb)
}

/// Scale to unit L2 norm in place. Returns false for a (near-)zero vector.
pub fn normalize(v: &mut [f32]) -> bool {
    let norm = dot(v, v).sqrt();
    if norm < 1e-12 {
        return false;
    }
    for x in v.iter_mut() {
        *x /= norm;
    }
    true
}

fn fnv1a(bytes: &[u8], seed: u64) -> u64 {
    let mut h = 0xcbf29ce484222325u64 ^ seed;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Deterministic hash-based encoder for tests and synthetic runs.
#[derive(Debug, Clone)]
pub struct StubEncoder {
    dim: usize,
    seed: u64,
}

impl StubEncoder {
    pub fn new(dim: usize, seed: u64) -> StubEncoder {
        StubEncoder { dim, seed }
    }

    /// Pseudo-random unit direction for one token.
    fn token_vector(&self, token: &str) -> Vec<f64> {
        let h = fnv1a(token.as_bytes(), self.seed);
        let mut rng = ChaCha8Rng::seed_from_u64(h);
        // Box-Muller pairs give an isotropic direction.
        let mut v = Vec::with_capacity(self.dim);
        while v.len() < self.dim {
            let u1: f64 = rng.random::<f64>().max(1e-12);
            let u2: f64 = rng.random();
            let r = (-2.0 * u1.ln()).sqrt();
            let theta = std::f64::consts::TAU * u2;
            v.push(r * theta.cos());
            if v.len() < self.dim {
                v.push(r * theta.sin());
            }
        }
        v
    }
}

impl SentenceEncoder for StubEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, text: &str) -> Result<Vec<f32>, EncoderError> {
        let tokens = tokenize(text);
        if tokens.is_empty() {
            return Err(EncoderError::EmptyText);
        }
        let mut acc = vec![0.0f64; self.dim];
        for tok in &tokens {
            for (a, t) in acc.iter_mut().zip(self.token_vector(tok)) {
                *a += t;
            }
        }
        let mut out: Vec<f32> = acc.iter().map(|&x| x as f32).collect();
        if !normalize(&mut out) {
            // Token directions summed to (numerically) zero; fall back to the
            // hash of the joined text so the result is still deterministic.
            let h = fnv1a(tokens.join(" ").as_bytes(), self.seed ^ 0x9e3779b97f4a7c15);
            let mut rng = ChaCha8Rng::seed_from_u64(h);
            for x in out.iter_mut() {
                *x = rng.random::<f32>() - 0.5;
            }
            normalize(&mut out);
        }
        Ok(out)
    }
}

/// Adapter over a table of embeddings computed offline by a real sentence
/// encoder. The table is TSV: `text<TAB>v1 v2 ... vd`, one line per text.
pub struct FileEncoder {
    dim: usize,
    table: HashMap<String, Vec<f32>>,
}

impl FileEncoder {
    pub fn load(path: &Path) -> Result<FileEncoder, EncoderError> {
        let text = fs::read_to_string(path).map_err(|source| EncoderError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut table = HashMap::new();
        let mut dim = 0usize;
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (key, rest) = line
                .split_once('\t')
                .ok_or(EncoderError::BadTableLine(lineno + 1))?;
            let values: Result<Vec<f32>, _> =
                rest.split_whitespace().map(|v| v.parse::<f32>()).collect();
            let mut values = values.map_err(|_| EncoderError::BadTableLine(lineno + 1))?;
            if values.is_empty() {
                return Err(EncoderError::BadTableLine(lineno + 1));
            }
            if dim == 0 {
                dim = values.len();
            } else if values.len() != dim {
                return Err(EncoderError::DimMismatch {
                    expected: dim,
                    got: values.len(),
                });
            }
            normalize(&mut values);
            table.insert(key.to_string(), values);
        }
        if table.is_empty() {
            return Err(EncoderError::BadTableLine(0));
        }
        Ok(FileEncoder { dim, table })
    }
}

impl SentenceEncoder for FileEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, text: &str) -> Result<Vec<f32>, EncoderError> {
        let key = text.trim();
        if key.is_empty() {
            return Err(EncoderError::EmptyText);
        }
        self.table
            .get(key)
            .cloned()
            .ok_or_else(|| EncoderError::UnknownText(key.to_string()))
    }
}
