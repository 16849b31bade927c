//! Sentence corpus index and retrieval fusion.
//!
//! Training-set reviews are segmented into sentences, encoded to unit
//! vectors, and stored as the retrieval corpus. Queries are averaged review
//! embeddings; results are the top-n sentences by cosine (inner product on
//! unit vectors), optionally served through a clustered inverted-list index
//! instead of the exact scan.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::data::{segment_sentences, ReviewRecord};
use crate::encoder::{dot, normalize, EncoderError, SentenceEncoder};

const EMBED_MAGIC: &[u8; 8] = b"ERRAEMB1";
// Entry count above which a fresh build without an explicit mode would want
// the approximate index; kept here for the builders' defaults.
pub const EXACT_SCAN_LIMIT: usize = 100_000;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("corpus has no sentences")]
    EmptyCorpus,
    #[error("no reviews to average (cold start)")]
    ColdStart,
    #[error("query dimension {got} does not match index dimension {expected}")]
    DimMismatch { expected: usize, got: usize },
    #[error("cannot access {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt embedding file: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
}

/// One corpus entry: a unit vector, its sentence, and the review author.
#[derive(Debug, Clone, PartialEq)]
pub struct SentenceEmbedding {
    pub vector: Vec<f32>,
    pub text: String,
    pub owner: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IndexMode {
    Exact,
    Approximate,
}

/// Clustered inverted lists over unit vectors (spherical k-means).
#[derive(Debug, Clone)]
struct IvfIndex {
    centroids: Vec<Vec<f32>>,
    lists: Vec<Vec<usize>>,
    nprobe: usize,
}

const KMEANS_SEED: u64 = 0x5eed_cafe;
const KMEANS_ITERS: usize = 10;

fn build_ivf(entries: &[SentenceEmbedding], dim: usize, nprobe: usize) -> IvfIndex {
    let n = entries.len();
    let k = ((n as f64).sqrt().ceil() as usize).clamp(1, n);
    let mut rng = ChaCha8Rng::seed_from_u64(KMEANS_SEED ^ n as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut centroids: Vec<Vec<f32>> = order[..k]
        .iter()
        .map(|&i| entries[i].vector.clone())
        .collect();
    let mut assign = vec![0usize; n];
    for _ in 0..KMEANS_ITERS {
        for (i, e) in entries.iter().enumerate() {
            let mut best = 0usize;
            let mut best_score = f32::NEG_INFINITY;
            for (c, centroid) in centroids.iter().enumerate() {
                let s = dot(&e.vector, centroid);
                if s > best_score {
                    best_score = s;
                    best = c;
                }
            }
            assign[i] = best;
        }
        let mut sums = vec![vec![0.0f64; dim]; k];
        let mut counts = vec![0usize; k];
        for (i, e) in entries.iter().enumerate() {
            counts[assign[i]] += 1;
            for (s, &x) in sums[assign[i]].iter_mut().zip(&e.vector) {
                *s += f64::from(x);
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                // Reseed an empty cluster deterministically.
                let far = (0..n)
                    .min_by(|&a, &b| {
                        let sa = dot(&entries[a].vector, &centroids[assign[a]]);
                        let sb = dot(&entries[b].vector, &centroids[assign[b]]);
                        sa.partial_cmp(&sb).unwrap().then(a.cmp(&b))
                    })
                    .unwrap();
                centroids[c] = entries[far].vector.clone();
                continue;
            }
            let mut v: Vec<f32> = sums[c].iter().map(|&x| x as f32).collect();
            if normalize(&mut v) {
                centroids[c] = v;
            }
        }
    }
    let mut lists = vec![Vec::new(); k];
    for (i, e) in entries.iter().enumerate() {
        let mut best = 0usize;
        let mut best_score = f32::NEG_INFINITY;
        for (c, centroid) in centroids.iter().enumerate() {
            let s = dot(&e.vector, centroid);
            if s > best_score {
                best_score = s;
                best = c;
            }
        }
        lists[best].push(i);
    }
    let nprobe = if nprobe == 0 {
        (k / 4).max(2).min(k)
    } else {
        nprobe.min(k)
    };
    IvfIndex {
        centroids,
        lists,
        nprobe,
    }
}

/// The encoded corpus plus its search structure.
pub struct CorpusIndex {
    dim: usize,
    mode: IndexMode,
    entries: Vec<SentenceEmbedding>,
    ivf: Option<IvfIndex>,
}

/// Top-n sentences for a query, highest score first.
#[derive(Debug, Clone)]
pub struct Retrieved {
    pub sentences: Vec<(String, f32)>,
    pub indices: Vec<usize>,
    /// True when the corpus had fewer than n entries.
    pub short: bool,
}

/// The stitched retrieval sentence and its re-encoded vector.
#[derive(Debug, Clone)]
pub struct Fused {
    pub text: String,
    pub vector: Vec<f32>,
}

impl CorpusIndex {
    /// Encode every sentence of the train split.
    pub fn build(
        train: &[ReviewRecord],
        encoder: &dyn SentenceEncoder,
        mode: IndexMode,
        nprobe: usize,
    ) -> Result<CorpusIndex, RetrievalError> {
        let mut entries = Vec::new();
        for rec in train {
            for sentence in segment_sentences(&rec.text) {
                let mut vector = encoder.encode(&sentence)?;
                normalize(&mut vector);
                entries.push(SentenceEmbedding {
                    vector,
                    text: sentence,
                    owner: rec.user.clone(),
                });
            }
        }
        Self::from_entries(entries, encoder.dim(), mode, nprobe)
    }

    pub fn from_entries(
        entries: Vec<SentenceEmbedding>,
        dim: usize,
        mode: IndexMode,
        nprobe: usize,
    ) -> Result<CorpusIndex, RetrievalError> {
        if entries.is_empty() {
            return Err(RetrievalError::EmptyCorpus);
        }
        let ivf = match mode {
            IndexMode::Exact => None,
            IndexMode::Approximate => Some(build_ivf(&entries, dim, nprobe)),
        };
        Ok(CorpusIndex {
            dim,
            mode,
            entries,
            ivf,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn mode(&self) -> IndexMode {
        self.mode
    }

    pub fn entry(&self, i: usize) -> &SentenceEmbedding {
        &self.entries[i]
    }

    /// Mean of all corpus vectors, re-normalized; the cold-start fallback.
    pub fn global_mean(&self) -> Vec<f32> {
        let mut acc = vec![0.0f64; self.dim];
        for e in &self.entries {
            for (a, &x) in acc.iter_mut().zip(&e.vector) {
                *a += f64::from(x);
            }
        }
        let n = self.entries.len() as f64;
        let mut out: Vec<f32> = acc.iter().map(|&x| (x / n) as f32).collect();
        if !normalize(&mut out) {
            out = self.entries[0].vector.clone();
        }
        out
    }

    fn rank(&self, candidates: &[usize], query: &[f32], n: usize) -> Retrieved {
        let mut scored: Vec<(usize, f32)> = candidates
            .iter()
            .map(|&i| (i, dot(&self.entries[i].vector, query)))
            .collect();
        scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        scored.truncate(n);
        Retrieved {
            sentences: scored
                .iter()
                .map(|&(i, s)| (self.entries[i].text.clone(), s))
                .collect(),
            indices: scored.iter().map(|&(i, _)| i).collect(),
            short: candidates.len() < n,
        }
    }

    /// Top-n by cosine; ties break toward the lower entry index. Queries are
    /// expected unit-norm.
    pub fn retrieve_top_n(&self, query: &[f32], n: usize) -> Result<Retrieved, RetrievalError> {
        if query.len() != self.dim {
            return Err(RetrievalError::DimMismatch {
                expected: self.dim,
                got: query.len(),
            });
        }
        match &self.ivf {
            None => {
                let all: Vec<usize> = (0..self.entries.len()).collect();
                Ok(self.rank(&all, query, n))
            }
            Some(ivf) => {
                let mut clusters: Vec<(usize, f32)> = ivf
                    .centroids
                    .iter()
                    .enumerate()
                    .map(|(c, v)| (c, dot(v, query)))
                    .collect();
                clusters.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
                let mut candidates: Vec<usize> = Vec::new();
                for &(c, _) in clusters.iter().take(ivf.nprobe) {
                    candidates.extend_from_slice(&ivf.lists[c]);
                }
                candidates.sort_unstable();
                let mut out = self.rank(&candidates, query, n);
                // `short` reflects the corpus size, not the probed subset.
                out.short = self.entries.len() < n;
                Ok(out)
            }
        }
    }

    /// Persist as a binary embedding file plus a text sidecar of sources.
    pub fn save(&self, embed_path: &Path, sources_path: &Path) -> Result<(), RetrievalError> {
        let io_err = |path: &Path, source| RetrievalError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(EMBED_MAGIC);
        buf.extend_from_slice(&(self.dim as u32).to_le_bytes());
        buf.extend_from_slice(&(self.entries.len() as u64).to_le_bytes());
        buf.push(match self.mode {
            IndexMode::Exact => 0,
            IndexMode::Approximate => 1,
        });
        buf.extend_from_slice(&match self.ivf {
            Some(ref ivf) => (ivf.nprobe as u32).to_le_bytes(),
            None => 0u32.to_le_bytes(),
        });
        for e in &self.entries {
            for &x in &e.vector {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
        fs::write(embed_path, &buf).map_err(|e| io_err(embed_path, e))?;

        let mut sidecar = fs::File::create(sources_path).map_err(|e| io_err(sources_path, e))?;
        for e in &self.entries {
            writeln!(sidecar, "{}\t{}", escape(&e.owner), escape(&e.text))
                .map_err(|er| io_err(sources_path, er))?;
        }
        Ok(())
    }

    pub fn load(embed_path: &Path, sources_path: &Path) -> Result<CorpusIndex, RetrievalError> {
        let io_err = |path: &Path, source| RetrievalError::Io {
            path: path.display().to_string(),
            source,
        };
        let buf = fs::read(embed_path).map_err(|e| io_err(embed_path, e))?;
        if buf.len() < 8 + 4 + 8 + 1 + 4 || &buf[..8] != EMBED_MAGIC {
            return Err(RetrievalError::Corrupt("bad header".into()));
        }
        let dim = u32::from_le_bytes(buf[8..12].try_into().unwrap()) as usize;
        let count = u64::from_le_bytes(buf[12..20].try_into().unwrap()) as usize;
        let mode = match buf[20] {
            0 => IndexMode::Exact,
            1 => IndexMode::Approximate,
            other => return Err(RetrievalError::Corrupt(format!("bad mode byte {other}"))),
        };
        let nprobe = u32::from_le_bytes(buf[21..25].try_into().unwrap()) as usize;
        let data = &buf[25..];
        if data.len() != count * dim * 4 {
            return Err(RetrievalError::Corrupt(format!(
                "expected {} floats, found {} bytes",
                count * dim,
                data.len()
            )));
        }
        let sources = fs::read_to_string(sources_path).map_err(|e| io_err(sources_path, e))?;
        let lines: Vec<&str> = sources.lines().collect();
        if lines.len() != count {
            return Err(RetrievalError::Corrupt(format!(
                "sidecar has {} lines for {} entries",
                lines.len(),
                count
            )));
        }
        let mut entries = Vec::with_capacity(count);
        for (i, line) in lines.iter().enumerate() {
            let (owner, text) = line
                .split_once('\t')
                .ok_or_else(|| RetrievalError::Corrupt(format!("sidecar line {}", i + 1)))?;
            let base = i * dim * 4;
            let vector: Vec<f32> = (0..dim)
                .map(|j| {
                    let off = base + j * 4;
                    f32::from_le_bytes(data[off..off + 4].try_into().unwrap())
                })
                .collect();
            entries.push(SentenceEmbedding {
                vector,
                text: unescape(text),
                owner: unescape(owner),
            });
        }
        Self::from_entries(entries, dim, mode, nprobe)
    }
}

fn escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('\t', "\\t").replace('\n', "\\n")
}

fn unescape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c == '\\' {
            match chars.next() {
                Some('t') => out.push('\t'),
                Some('n') => out.push('\n'),
                Some('\\') => out.push('\\'),
                Some(other) => out.push(other),
                None => {}
            }
        } else {
            out.push(c);
        }
    }
    out
}

/// Mean of per-review embeddings, re-normalized: the retrieval query
/// (`U_avg` for users, item-side analogue for items).
pub fn avg_query_vector(
    review_texts: &[&str],
    encoder: &dyn SentenceEncoder,
) -> Result<Vec<f32>, RetrievalError> {
    if review_texts.is_empty() {
        return Err(RetrievalError::ColdStart);
    }
    let mut acc = vec![0.0f64; encoder.dim()];
    for text in review_texts {
        let v = encoder.encode(text)?;
        for (a, x) in acc.iter_mut().zip(v) {
            *a += f64::from(x);
        }
    }
    let n = review_texts.len() as f64;
    let mut out: Vec<f32> = acc.iter().map(|&x| (x / n) as f32).collect();
    if !normalize(&mut out) {
        return Err(RetrievalError::ColdStart);
    }
    Ok(out)
}

/// Stitch retrieved sentences in score order and re-encode the concatenation.
pub fn fuse_retrieved(
    retrieved: &Retrieved,
    encoder: &dyn SentenceEncoder,
) -> Result<Fused, RetrievalError> {
    if retrieved.sentences.is_empty() {
        return Err(RetrievalError::EmptyCorpus);
    }
    let text = retrieved
        .sentences
        .iter()
        .map(|(t, _)| t.as_str())
        .collect::<Vec<_>>()
        .join(" ");
    let vector = encoder.encode(&text)?;
    Ok(Fused { text, vector })
}
