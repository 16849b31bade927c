//! Review ingestion, filtering, splitting, sentence segmentation and the
//! token vocabulary.
//!
//! Raw datasets are JSON-lines files with one review object per line
//! (keys `user`, `item`, `rating`, `text` and optional `aspects`). Everything
//! downstream consumes [`ReviewRecord`]s.

pub mod synth;

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aspects::AspectPair;

/// Reserved token ids, fixed ahead of the frequency-ranked block.
pub const BOS_ID: u32 = 0;
pub const EOS_ID: u32 = 1;
pub const PAD_ID: u32 = 2;
pub const UNK_ID: u32 = 3;
/// Surface forms of the reserved ids, in id order.
pub const RESERVED_TOKENS: [&str; 4] = ["<bos>", "<eos>", "<pad>", "<unk>"];

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("need at least {need} records to split, got {got}")]
    TooFewRecords { got: usize, need: usize },
    #[error("split ratios must all be positive")]
    BadRatios,
    #[error("malformed manifest: {0}")]
    BadManifest(String),
    #[error("manifest index {0} out of range for {1} records")]
    ManifestOutOfRange(usize, usize),
}

/// One (user, item, rating, review) interaction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewRecord {
    pub user: String,
    pub item: String,
    pub rating: f64,
    pub text: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub aspects: Vec<AspectPair>,
}

impl ReviewRecord {
    /// Invariants: ids non-empty, rating within the star scale, text non-blank.
    pub fn is_valid(&self) -> bool {
        !self.user.is_empty()
            && !self.item.is_empty()
            && self.rating >= 1.0
            && self.rating <= 5.0
            && !self.text.trim().is_empty()
    }
}

/// Result of [`load_reviews`]: parsed records plus a count of skipped lines.
#[derive(Debug)]
pub struct LoadedReviews {
    pub records: Vec<ReviewRecord>,
    pub skipped: usize,
}

/// Read a JSON-lines review file. Malformed or invariant-violating lines are
/// skipped and counted; a missing file is fatal.
pub fn load_reviews(path: &Path) -> Result<LoadedReviews, DataError> {
    let file = fs::File::open(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let reader = BufReader::new(file);
    let mut records = Vec::new();
    let mut skipped = 0usize;
    for line in reader.lines() {
        let line = line.map_err(|source| DataError::Io {
            path: path.display().to_string(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<ReviewRecord>(&line) {
            Ok(rec) if rec.is_valid() => records.push(rec),
            _ => skipped += 1,
        }
    }
    Ok(LoadedReviews { records, skipped })
}

/// Write records as JSON-lines.
pub fn save_reviews(records: &[ReviewRecord], path: &Path) -> Result<(), DataError> {
    let mut out = String::new();
    for rec in records {
        out.push_str(&serde_json::to_string(rec).expect("record serialization"));
        out.push('\n');
    }
    fs::write(path, out).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Drop low-activity users (and optionally items) until the surviving set is
/// stable. `min_item` of `None` disables item-side filtering.
pub fn filter_min_activity(
    records: Vec<ReviewRecord>,
    min_user: usize,
    min_item: Option<usize>,
) -> Vec<ReviewRecord> {
    let mut current = records;
    loop {
        let mut user_counts: HashMap<String, usize> = HashMap::new();
        let mut item_counts: HashMap<String, usize> = HashMap::new();
        for rec in &current {
            *user_counts.entry(rec.user.clone()).or_default() += 1;
            *item_counts.entry(rec.item.clone()).or_default() += 1;
        }
        let keep: Vec<bool> = current
            .iter()
            .map(|rec| {
                user_counts[&rec.user] >= min_user
                    && min_item.is_none_or(|k| item_counts[&rec.item] >= k)
            })
            .collect();
        if keep.iter().all(|&k| k) {
            return current;
        }
        let mut it = keep.into_iter();
        current.retain(|_| it.next().unwrap());
        if current.is_empty() {
            return current;
        }
    }
}

/// A shuffled 8:1:1-style partition of the filtered records.
///
/// Index vectors refer to positions in the record list the split was built
/// from and are kept sorted so the manifest is diff-friendly.
#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub train: Vec<ReviewRecord>,
    pub valid: Vec<ReviewRecord>,
    pub test: Vec<ReviewRecord>,
    pub train_indices: Vec<usize>,
    pub valid_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
    pub seed: u64,
}

/// Nearest-record boundary with ties rounded down, so the remainder lands in
/// the test split.
fn split_boundary(n: usize, num: u32, den: u32) -> usize {
    let x = n as f64 * f64::from(num) / f64::from(den);
    (x - 0.5).ceil().max(0.0) as usize
}

/// Shuffle deterministically, then cut at nearest-record boundaries.
pub fn split_dataset(
    records: &[ReviewRecord],
    ratios: (u32, u32, u32),
    seed: u64,
) -> Result<DatasetSplit, DataError> {
    let n = records.len();
    if n < 10 {
        return Err(DataError::TooFewRecords { got: n, need: 10 });
    }
    let (a, b, c) = ratios;
    if a == 0 || b == 0 || c == 0 {
        return Err(DataError::BadRatios);
    }
    let total = a + b + c;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);

    let b1 = split_boundary(n, a, total);
    let b2 = split_boundary(n, a + b, total);
    let mut train_indices: Vec<usize> = order[..b1].to_vec();
    let mut valid_indices: Vec<usize> = order[b1..b2].to_vec();
    let mut test_indices: Vec<usize> = order[b2..].to_vec();
    train_indices.sort_unstable();
    valid_indices.sort_unstable();
    test_indices.sort_unstable();

    let pick = |idx: &[usize]| idx.iter().map(|&i| records[i].clone()).collect();
    Ok(DatasetSplit {
        train: pick(&train_indices),
        valid: pick(&valid_indices),
        test: pick(&test_indices),
        train_indices,
        valid_indices,
        test_indices,
        seed,
    })
}

impl DatasetSplit {
    /// Manifest text: seed line plus one sorted index list per split.
    pub fn manifest_string(&self) -> String {
        let fmt = |name: &str, idx: &[usize]| {
            let list: Vec<String> = idx.iter().map(|i| i.to_string()).collect();
            format!("{}: {}\n", name, list.join(" "))
        };
        format!(
            "seed={}\n{}{}{}",
            self.seed,
            fmt("train", &self.train_indices),
            fmt("valid", &self.valid_indices),
            fmt("test", &self.test_indices)
        )
    }

    /// Rebuild a split from a manifest and the record list it indexes.
    pub fn from_manifest(text: &str, records: &[ReviewRecord]) -> Result<DatasetSplit, DataError> {
        let mut seed = 0u64;
        let mut parts: HashMap<&str, Vec<usize>> = HashMap::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix("seed=") {
                seed = rest
                    .parse()
                    .map_err(|_| DataError::BadManifest(format!("bad seed: {rest}")))?;
            } else if let Some((name, list)) = line.split_once(':') {
                let idx: Result<Vec<usize>, _> =
                    list.split_whitespace().map(|s| s.parse::<usize>()).collect();
                let idx = idx.map_err(|_| DataError::BadManifest(line.to_string()))?;
                parts.insert(
                    match name.trim() {
                        "train" => "train",
                        "valid" => "valid",
                        "test" => "test",
                        other => return Err(DataError::BadManifest(other.to_string())),
                    },
                    idx,
                );
            } else {
                return Err(DataError::BadManifest(line.to_string()));
            }
        }
        let take = |name: &str| parts.get(name).cloned().unwrap_or_default();
        let (train_indices, valid_indices, test_indices) =
            (take("train"), take("valid"), take("test"));
        for &i in train_indices
            .iter()
            .chain(&valid_indices)
            .chain(&test_indices)
        {
            if i >= records.len() {
                return Err(DataError::ManifestOutOfRange(i, records.len()));
            }
        }
        let pick = |idx: &[usize]| idx.iter().map(|&i| records[i].clone()).collect();
        Ok(DatasetSplit {
            train: pick(&train_indices),
            valid: pick(&valid_indices),
            test: pick(&test_indices),
            train_indices,
            valid_indices,
            test_indices,
            seed,
        })
    }
}

/// Split text into sentences on terminal punctuation (`.` `!` `?`) followed by
/// whitespace or end of text. A period between digits never ends a sentence.
pub fn segment_sentences(text: &str) -> Vec<String> {
    let chars: Vec<char> = text.chars().collect();
    let mut sentences = Vec::new();
    let mut start = 0usize;
    let mut i = 0usize;
    while i < chars.len() {
        let ch = chars[i];
        if ch == '.' || ch == '!' || ch == '?' {
            let decimal = ch == '.'
                && i > 0
                && chars[i - 1].is_ascii_digit()
                && chars.get(i + 1).is_some_and(|c| c.is_ascii_digit());
            if !decimal {
                // Consume the whole run of terminal punctuation.
                let mut end = i + 1;
                while end < chars.len() && matches!(chars[end], '.' | '!' | '?') {
                    end += 1;
                }
                if end >= chars.len() || chars[end].is_whitespace() {
                    let sent: String = chars[start..end].iter().collect();
                    let sent = sent.trim();
                    if !sent.is_empty() {
                        sentences.push(sent.to_string());
                    }
                    start = end;
                    i = end;
                    continue;
                }
            }
        }
        i += 1;
    }
    let tail: String = chars[start..].iter().collect();
    let tail = tail.trim();
    if !tail.is_empty() {
        sentences.push(tail.to_string());
    }
    sentences
}

/// Lowercase and split on whitespace, peeling leading/trailing punctuation off
/// each piece as standalone tokens. Interior punctuation (don't, 3.5) stays.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    for piece in text.to_lowercase().split_whitespace() {
        let chars: Vec<char> = piece.chars().collect();
        let mut lo = 0usize;
        let mut hi = chars.len();
        while lo < hi && chars[lo].is_ascii_punctuation() {
            tokens.push(chars[lo].to_string());
            lo += 1;
        }
        let mut trailing = Vec::new();
        while hi > lo && chars[hi - 1].is_ascii_punctuation() {
            trailing.push(chars[hi - 1].to_string());
            hi -= 1;
        }
        if lo < hi {
            tokens.push(chars[lo..hi].iter().collect());
        }
        tokens.extend(trailing.into_iter().rev());
    }
    tokens
}

/// A sequence of vocabulary ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Token table with four reserved ids followed by the frequency-ranked block.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    token_to_id: HashMap<String, u32>,
    id_to_token: Vec<String>,
}

impl Vocabulary {
    /// Build from the train split only: most frequent tokens first, ties
    /// broken lexicographically, capped at `max_size` including reserved ids.
    pub fn build(train: &[ReviewRecord], max_size: usize) -> Vocabulary {
        let mut counts: HashMap<String, u64> = HashMap::new();
        for rec in train {
            for tok in tokenize(&rec.text) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        let mut ranked: Vec<(String, u64)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let budget = max_size.saturating_sub(RESERVED_TOKENS.len());
        let mut id_to_token: Vec<String> =
            RESERVED_TOKENS.iter().map(|s| s.to_string()).collect();
        id_to_token.extend(ranked.into_iter().take(budget).map(|(t, _)| t));
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocabulary {
            token_to_id,
            id_to_token,
        }
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    /// Id for a (already normalized) token; unknown tokens map to UNK.
    pub fn id(&self, token: &str) -> u32 {
        self.token_to_id.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.token_to_id.contains_key(token)
    }

    pub fn token(&self, id: u32) -> &str {
        &self.id_to_token[id as usize]
    }

    pub fn encode(&self, text: &str) -> TokenSequence {
        TokenSequence {
            ids: tokenize(text).iter().map(|t| self.id(t)).collect(),
        }
    }

    pub fn decode(&self, seq: &TokenSequence) -> String {
        let words: Vec<&str> = seq.ids.iter().map(|&id| self.token(id)).collect();
        words.join(" ")
    }

    /// Vocabulary file: one non-reserved token per line; line number = id - 4.
    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        let mut out = String::new();
        for tok in &self.id_to_token[RESERVED_TOKENS.len()..] {
            out.push_str(tok);
            out.push('\n');
        }
        fs::write(path, out).map_err(|source| DataError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Vocabulary, DataError> {
        let text = fs::read_to_string(path).map_err(|source| DataError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut id_to_token: Vec<String> =
            RESERVED_TOKENS.iter().map(|s| s.to_string()).collect();
        id_to_token.extend(text.lines().map(|l| l.to_string()));
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Ok(Vocabulary {
            token_to_id,
            id_to_token,
        })
    }
}
