//! Aspect pairs: extraction from review text and per-interaction selection.
//!
//! The production path ingests pairs produced by an external extraction tool
//! (inline in the record or via the aspect cache file); the built-in fallback
//! is a small pattern matcher over a closed part-of-speech lexicon, good
//! enough for synthetic corpora and tests.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{segment_sentences, tokenize};
use crate::encoder::{cosine, normalize, EncoderError, SentenceEncoder};

#[derive(Debug, Error)]
pub enum AspectError {
    #[error("no aspects available (cold start)")]
    ColdStart,
    #[error(transparent)]
    Encoder(#[from] EncoderError),
}

/// A (feature, opinion) pair mined from a review, e.g. (screen, small).
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "(String, String)", into = "(String, String)")]
pub struct AspectPair {
    pub feature: String,
    pub opinion: String,
}

impl AspectPair {
    pub fn new(feature: &str, opinion: &str) -> AspectPair {
        AspectPair {
            feature: feature.to_lowercase(),
            opinion: opinion.to_lowercase(),
        }
    }

    /// Two-word surface form used when embedding the pair.
    pub fn phrase(&self) -> String {
        format!("{} {}", self.feature, self.opinion)
    }
}

impl From<(String, String)> for AspectPair {
    fn from((feature, opinion): (String, String)) -> AspectPair {
        AspectPair::new(&feature, &opinion)
    }
}

impl From<AspectPair> for (String, String) {
    fn from(pair: AspectPair) -> (String, String) {
        (pair.feature, pair.opinion)
    }
}

/// The top aspects a user cares about for one item, highest cosine first.
#[derive(Debug, Clone)]
pub struct AspectSelection {
    pub pairs: Vec<AspectPair>,
    pub scores: Vec<f32>,
}

const NOUNS: &[&str] = &[
    "screen", "battery", "phone", "camera", "charger", "speaker", "keyboard", "case", "button",
    "room", "bed", "bathroom", "shower", "pool", "lobby", "breakfast", "view", "hotel",
    "food", "service", "staff", "price", "location", "wifi", "parking", "noise", "music",
    "environment", "quality", "size", "menu", "portion", "coffee", "dessert", "pizza",
    "burger", "table", "seat", "atmosphere", "decor", "sound", "design", "delivery",
];

const ADJECTIVES: &[&str] = &[
    "small", "big", "large", "tiny", "huge", "fast", "slow", "great", "good", "bad", "terrible",
    "excellent", "awful", "clean", "dirty", "quiet", "noisy", "loud", "comfortable", "cozy",
    "spacious", "cramped", "cheap", "expensive", "friendly", "rude", "fresh", "stale", "tasty",
    "delicious", "bland", "bright", "dark", "modern", "dated", "broken", "faulty", "reliable",
    "sturdy", "flimsy", "warm", "cold", "hot", "soft", "hard", "nice", "lovely", "poor",
    "amazing", "outstanding", "mediocre", "convenient", "helpful", "responsive",
];

const VERBS: &[&str] = &[
    "drains", "runs", "works", "loads", "charges", "lasts", "feels", "looks", "sounds",
    "smells", "tastes", "gets", "seems", "arrived", "performs",
];

const COPULAS: &[&str] = &["is", "are", "was", "were"];

const SKIP_WORDS: &[&str] = &[
    "too", "very", "really", "so", "quite", "pretty", "extremely", "super", "rather", "just",
    "a", "bit", "little", "not",
];

fn is_noun(tok: &str) -> bool {
    NOUNS.contains(&tok)
}

fn is_adjective(tok: &str) -> bool {
    ADJECTIVES.contains(&tok)
}

/// Fallback pattern extractor. Per sentence it emits, in order:
/// adjacent adjective-noun pairs, the "subject is/are adjective" pair, and
/// "noun verb adjective" pairs; duplicates within a review are dropped.
pub fn extract_aspects(text: &str) -> Vec<AspectPair> {
    let mut pairs: Vec<AspectPair> = Vec::new();
    let mut push = |pair: AspectPair| {
        if !pairs.contains(&pair) {
            pairs.push(pair);
        }
    };
    for sentence in segment_sentences(text) {
        let tokens = tokenize(&sentence);
        for w in tokens.windows(2) {
            if is_adjective(&w[0]) && is_noun(&w[1]) {
                push(AspectPair::new(&w[1], &w[0]));
            }
        }
        if let Some(cop) = tokens.iter().position(|t| COPULAS.contains(&t.as_str())) {
            let subject = tokens[..cop].iter().find(|t| is_noun(t));
            let adjective = tokens[cop + 1..]
                .iter()
                .take(4)
                .filter(|t| !SKIP_WORDS.contains(&t.as_str()))
                .find(|t| is_adjective(t));
            if let (Some(n), Some(a)) = (subject, adjective) {
                push(AspectPair::new(n, a));
            }
        }
        for w in tokens.windows(3) {
            if is_noun(&w[0]) && VERBS.contains(&w[1].as_str()) && is_adjective(&w[2]) {
                push(AspectPair::new(&w[0], &w[2]));
            }
        }
    }
    pairs
}

/// Embed one pair as the two-word phrase "feature opinion".
pub fn embed_pair(
    pair: &AspectPair,
    encoder: &dyn SentenceEncoder,
) -> Result<Vec<f32>, AspectError> {
    Ok(encoder.encode(&pair.phrase())?)
}

/// Mean of the item's aspect-pair embeddings, re-normalized. Duplicate pairs
/// count once per occurrence (mean over the multiset).
pub fn item_aspect_centroid(
    pairs: &[AspectPair],
    encoder: &dyn SentenceEncoder,
) -> Result<Vec<f32>, AspectError> {
    if pairs.is_empty() {
        return Err(AspectError::ColdStart);
    }
    let mut acc = vec![0.0f64; encoder.dim()];
    for pair in pairs {
        let v = embed_pair(pair, encoder)?;
        for (a, x) in acc.iter_mut().zip(v) {
            *a += f64::from(x);
        }
    }
    let n = pairs.len() as f64;
    let mut out: Vec<f32> = acc.iter().map(|&x| (x / n) as f32).collect();
    if !normalize(&mut out) {
        return Err(AspectError::ColdStart);
    }
    Ok(out)
}

/// Top `n` of the user's aspects by cosine against the item centroid. Ties
/// keep the earlier pair; a short list is padded by repeating the best pair.
pub fn select_user_aspects(
    user_pairs: &[AspectPair],
    item_centroid: &[f32],
    n: usize,
    encoder: &dyn SentenceEncoder,
) -> Result<AspectSelection, AspectError> {
    if user_pairs.is_empty() {
        return Err(AspectError::ColdStart);
    }
    let mut scored: Vec<(usize, f32)> = Vec::with_capacity(user_pairs.len());
    for (i, pair) in user_pairs.iter().enumerate() {
        let v = embed_pair(pair, encoder)?;
        scored.push((i, cosine(&v, item_centroid)));
    }
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    let mut pairs: Vec<AspectPair> = Vec::with_capacity(n);
    let mut scores: Vec<f32> = Vec::with_capacity(n);
    for &(i, s) in scored.iter().take(n) {
        pairs.push(user_pairs[i].clone());
        scores.push(s);
    }
    while pairs.len() < n {
        pairs.push(pairs[0].clone());
        scores.push(scores[0]);
    }
    Ok(AspectSelection { pairs, scores })
}
