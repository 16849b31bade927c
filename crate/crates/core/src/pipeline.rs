//! The prepare → index → train → explain → eval pipeline over a workspace
//! directory.
//!
//! Workspace layout:
//! ```text
//! <workspace>/
//!   splits/records.jsonl   filtered records, canonical order
//!   splits/manifest.txt    record indices per split
//!   splits/vocab.txt       one token per line (id = line + 4)
//!   splits/aspects.jsonl   aspect cache, one record per line
//!   index/embeddings.bin   corpus vectors (binary, bit-exact reload)
//!   index/sources.txt      sentence/owner sidecar
//!   checkpoints/best.ckpt  best-validation parameters
//!   checkpoints/last.ckpt  latest state, resume point
//!   reports/explanations.jsonl, report.txt, report.kv
//!   train.log              one key=value line per epoch
//! ```

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aspects::{
    extract_aspects, item_aspect_centroid, select_user_aspects, AspectError, AspectPair,
    AspectSelection,
};
use crate::config::{Config, EncoderKind, ExtractorKind};
use crate::data::{
    self, filter_min_activity, load_reviews, save_reviews, split_dataset, DataError, DatasetSplit,
    ReviewRecord, Vocabulary,
};
use crate::encoder::{EncoderError, FileEncoder, SentenceEncoder, StubEncoder};
use crate::evaluation::{evaluate_run, EvalError, EvalInputs, EvalReport};
use crate::generation::greedy_decode;
use crate::model::{
    build_input, InputParts, InputSequence, ModelConfig, ModelError,
};
use crate::retrieval::{
    avg_query_vector, fuse_retrieved, CorpusIndex, Fused, Retrieved, RetrievalError,
};
use crate::training::{
    evaluate_loss, init_params, load_checkpoint, lr_schedule, save_checkpoint, should_stop,
    train_epoch, AdamState, Checkpoint, ScheduleOptions, TrainError, TrainState,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Aspects(#[from] AspectError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("cannot access {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("missing {what}; run `{hint}` first (expected {path})")]
    MissingArtifact {
        what: &'static str,
        hint: &'static str,
        path: PathBuf,
    },
    #[error("unknown {what} id {id:?} (use --fallback to explain unseen ids)")]
    UnknownId { what: &'static str, id: String },
    #[error("misaligned prediction file: {0}")]
    Misaligned(String),
    #[error("bad json in {path} line {line}: {message}")]
    BadJson {
        path: String,
        line: usize,
        message: String,
    },
    #[error("metric is NaN: {0}")]
    NanMetric(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Paths inside one workspace directory.
#[derive(Debug, Clone)]
pub struct Workspace {
    pub root: PathBuf,
}

impl Workspace {
    pub fn new(root: &Path) -> Workspace {
        Workspace {
            root: root.to_path_buf(),
        }
    }

    pub fn records(&self) -> PathBuf {
        self.root.join("splits/records.jsonl")
    }
    pub fn manifest(&self) -> PathBuf {
        self.root.join("splits/manifest.txt")
    }
    pub fn vocab(&self) -> PathBuf {
        self.root.join("splits/vocab.txt")
    }
    pub fn aspect_cache(&self) -> PathBuf {
        self.root.join("splits/aspects.jsonl")
    }
    pub fn embeddings(&self) -> PathBuf {
        self.root.join("index/embeddings.bin")
    }
    pub fn sources(&self) -> PathBuf {
        self.root.join("index/sources.txt")
    }
    pub fn best_checkpoint(&self) -> PathBuf {
        self.root.join("checkpoints/best.ckpt")
    }
    pub fn last_checkpoint(&self) -> PathBuf {
        self.root.join("checkpoints/last.ckpt")
    }
    pub fn explanations(&self) -> PathBuf {
        self.root.join("reports/explanations.jsonl")
    }
    pub fn report_table(&self) -> PathBuf {
        self.root.join("reports/report.txt")
    }
    pub fn report_kv(&self) -> PathBuf {
        self.root.join("reports/report.kv")
    }
    pub fn train_log(&self) -> PathBuf {
        self.root.join("train.log")
    }

    fn ensure_dirs(&self) -> Result<(), PipelineError> {
        for dir in ["splits", "index", "checkpoints", "reports"] {
            let p = self.root.join(dir);
            fs::create_dir_all(&p).map_err(io_err(&p))?;
        }
        Ok(())
    }
}

/// Instantiate the configured sentence encoder at the model dimension.
pub fn make_encoder(cfg: &Config) -> Result<Box<dyn SentenceEncoder>, PipelineError> {
    match cfg.encoder_kind {
        EncoderKind::Stub => Ok(Box::new(StubEncoder::new(cfg.d, cfg.encoder_seed))),
        EncoderKind::Pretrained => {
            let path = cfg.encoder_path.as_ref().expect("validated");
            let enc = FileEncoder::load(path)?;
            if enc.dim() != cfg.d {
                return Err(PipelineError::Encoder(EncoderError::DimMismatch {
                    expected: cfg.d,
                    got: enc.dim(),
                }));
            }
            Ok(Box::new(enc))
        }
    }
}

/// One line of the aspect cache file.
#[derive(Debug, Serialize, Deserialize)]
struct AspectCacheLine {
    record: usize,
    pairs: Vec<AspectPair>,
}

#[derive(Debug)]
pub struct PrepareSummary {
    pub raw_records: usize,
    pub skipped: usize,
    pub filtered_records: usize,
    pub train: usize,
    pub valid: usize,
    pub test: usize,
    pub vocab_size: usize,
    pub aspect_pairs: usize,
}

/// Load raw data (file or synthetic), filter, split, extract aspects, build
/// the vocabulary, and write the four split artifacts.
pub fn cmd_prepare(cfg: &Config) -> Result<PrepareSummary, PipelineError> {
    let ws = Workspace::new(&cfg.workspace);
    ws.ensure_dirs()?;
    let (raw, skipped) = match &cfg.data_path {
        Some(path) => {
            let loaded = load_reviews(path)?;
            (loaded.records, loaded.skipped)
        }
        None => (
            data::synth::generate(&data::synth::SynthConfig {
                users: cfg.synth_users,
                items: cfg.synth_items,
                reviews_per_user: cfg.synth_reviews_per_user,
                seed: cfg.seed,
                rating_noise: cfg.synth_rating_noise,
            }),
            0,
        ),
    };
    let raw_count = raw.len();
    let min_item = cfg.filter_items.then_some(cfg.min_item_reviews);
    let filtered = filter_min_activity(raw, cfg.min_user_reviews, min_item);
    let split = split_dataset(&filtered, cfg.ratios, cfg.seed)?;
    let vocab = Vocabulary::build(&split.train, cfg.max_vocab);

    // Aspect cache: inline pairs win; otherwise the configured extractor.
    let existing_cache: HashMap<usize, Vec<AspectPair>> = if ws.aspect_cache().exists() {
        read_aspect_cache(&ws.aspect_cache(), filtered.len())?
            .into_iter()
            .enumerate()
            .map(|(i, pairs)| (i, pairs))
            .collect()
    } else {
        HashMap::new()
    };
    let mut cache_lines = String::new();
    let mut total_pairs = 0usize;
    for (i, rec) in filtered.iter().enumerate() {
        let pairs = if !rec.aspects.is_empty() {
            rec.aspects.clone()
        } else {
            match cfg.aspects_extractor {
                ExtractorKind::Fallback => extract_aspects(&rec.text),
                ExtractorKind::Tool => existing_cache.get(&i).cloned().unwrap_or_default(),
            }
        };
        total_pairs += pairs.len();
        let line = AspectCacheLine { record: i, pairs };
        cache_lines.push_str(&serde_json::to_string(&line).expect("cache line"));
        cache_lines.push('\n');
    }

    save_reviews(&filtered, &ws.records())?;
    fs::write(ws.manifest(), split.manifest_string()).map_err(io_err(&ws.manifest()))?;
    vocab.save(&ws.vocab())?;
    fs::write(ws.aspect_cache(), cache_lines).map_err(io_err(&ws.aspect_cache()))?;

    Ok(PrepareSummary {
        raw_records: raw_count,
        skipped,
        filtered_records: filtered.len(),
        train: split.train.len(),
        valid: split.valid.len(),
        test: split.test.len(),
        vocab_size: vocab.len(),
        aspect_pairs: total_pairs,
    })
}

fn read_aspect_cache(path: &Path, n_records: usize) -> Result<Vec<Vec<AspectPair>>, PipelineError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut cache = vec![Vec::new(); n_records];
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parsed: AspectCacheLine =
            serde_json::from_str(line).map_err(|e| PipelineError::BadJson {
                path: path.display().to_string(),
                line: lineno + 1,
                message: e.to_string(),
            })?;
        if parsed.record < n_records {
            cache[parsed.record] = parsed.pairs;
        }
    }
    Ok(cache)
}

fn require(path: PathBuf, what: &'static str, hint: &'static str) -> Result<PathBuf, PipelineError> {
    if path.exists() {
        Ok(path)
    } else {
        Err(PipelineError::MissingArtifact { what, hint, path })
    }
}

/// The split artifacts a downstream command starts from.
pub struct Artifacts {
    pub records: Vec<ReviewRecord>,
    pub split: DatasetSplit,
    pub vocab: Vocabulary,
    pub aspect_cache: Vec<Vec<AspectPair>>,
}

pub fn load_artifacts(cfg: &Config) -> Result<Artifacts, PipelineError> {
    let ws = Workspace::new(&cfg.workspace);
    let records_path = require(ws.records(), "prepared records", "prepare")?;
    let manifest_path = require(ws.manifest(), "split manifest", "prepare")?;
    let vocab_path = require(ws.vocab(), "vocabulary", "prepare")?;
    let cache_path = require(ws.aspect_cache(), "aspect cache", "prepare")?;
    let records = load_reviews(&records_path)?.records;
    let manifest = fs::read_to_string(&manifest_path).map_err(io_err(&manifest_path))?;
    let split = DatasetSplit::from_manifest(&manifest, &records)?;
    let vocab = Vocabulary::load(&vocab_path)?;
    let aspect_cache = read_aspect_cache(&cache_path, records.len())?;
    Ok(Artifacts {
        records,
        split,
        vocab,
        aspect_cache,
    })
}

#[derive(Debug)]
pub struct IndexSummary {
    pub entries: usize,
    pub mode: crate::retrieval::IndexMode,
}

/// Encode the train-split sentences and persist the corpus index.
pub fn cmd_index(cfg: &Config) -> Result<IndexSummary, PipelineError> {
    let ws = Workspace::new(&cfg.workspace);
    ws.ensure_dirs()?;
    let artifacts = load_artifacts(cfg)?;
    let encoder = make_encoder(cfg)?;
    let index = CorpusIndex::build(
        &artifacts.split.train,
        encoder.as_ref(),
        cfg.retrieval_mode,
        cfg.retrieval_nprobe,
    )?;
    index.save(&ws.embeddings(), &ws.sources())?;
    Ok(IndexSummary {
        entries: index.len(),
        mode: index.mode(),
    })
}

fn load_index(cfg: &Config) -> Result<CorpusIndex, PipelineError> {
    let ws = Workspace::new(&cfg.workspace);
    let emb = require(ws.embeddings(), "corpus embeddings", "index")?;
    let src = require(ws.sources(), "corpus sources", "index")?;
    Ok(CorpusIndex::load(&emb, &src)?)
}

/// Precomputed per-user/per-item retrieval and aspect features.
pub struct FeatureStore {
    pub user_ids: Vec<String>,
    pub item_ids: Vec<String>,
    user_index: HashMap<String, usize>,
    item_index: HashMap<String, usize>,
    pub user_fused: Vec<Fused>,
    pub item_fused: Vec<Fused>,
    pub user_retrieved: Vec<Retrieved>,
    pub item_retrieved: Vec<Retrieved>,
    /// (source record index, pair) so selection can exclude the target
    /// record's own pairs during training (no label leakage).
    pub user_aspects: Vec<Vec<(usize, AspectPair)>>,
    pub item_centroid: Vec<Vec<f32>>,
    pub global_top_aspects: Vec<AspectPair>,
    pub global_aspect_centroid: Vec<f32>,
}

impl FeatureStore {
    pub fn build(
        artifacts: &Artifacts,
        index: &CorpusIndex,
        encoder: &dyn SentenceEncoder,
        cfg: &Config,
    ) -> Result<FeatureStore, PipelineError> {
        let mut user_ids: Vec<String> = artifacts.records.iter().map(|r| r.user.clone()).collect();
        user_ids.sort_unstable();
        user_ids.dedup();
        let mut item_ids: Vec<String> = artifacts.records.iter().map(|r| r.item.clone()).collect();
        item_ids.sort_unstable();
        item_ids.dedup();
        let user_index: HashMap<String, usize> = user_ids
            .iter()
            .enumerate()
            .map(|(i, u)| (u.clone(), i))
            .collect();
        let item_index: HashMap<String, usize> = item_ids
            .iter()
            .enumerate()
            .map(|(i, v)| (v.clone(), i))
            .collect();

        // Train-split texts and aspects per user/item, in canonical order.
        let train_idx: std::collections::HashSet<usize> =
            artifacts.split.train_indices.iter().copied().collect();
        let mut user_texts: Vec<Vec<&str>> = vec![Vec::new(); user_ids.len()];
        let mut item_texts: Vec<Vec<&str>> = vec![Vec::new(); item_ids.len()];
        let mut user_aspects: Vec<Vec<(usize, AspectPair)>> = vec![Vec::new(); user_ids.len()];
        let mut item_aspects: Vec<Vec<AspectPair>> = vec![Vec::new(); item_ids.len()];
        for (i, rec) in artifacts.records.iter().enumerate() {
            if !train_idx.contains(&i) {
                continue;
            }
            let u = user_index[&rec.user];
            let v = item_index[&rec.item];
            user_texts[u].push(&rec.text);
            item_texts[v].push(&rec.text);
            for pair in &artifacts.aspect_cache[i] {
                user_aspects[u].push((i, pair.clone()));
                item_aspects[v].push(pair.clone());
            }
        }

        let global_mean = index.global_mean();
        let n = cfg.retrieval_n;
        let fuse_for = |texts: &Vec<&str>| -> Result<(Retrieved, Fused), PipelineError> {
            let query = match avg_query_vector(texts, encoder) {
                Ok(q) => q,
                Err(RetrievalError::ColdStart) => global_mean.clone(),
                Err(e) => return Err(e.into()),
            };
            let retrieved = index.retrieve_top_n(&query, n)?;
            let fused = fuse_retrieved(&retrieved, encoder)?;
            Ok((retrieved, fused))
        };
        let mut user_fused = Vec::with_capacity(user_ids.len());
        let mut user_retrieved = Vec::with_capacity(user_ids.len());
        for texts in &user_texts {
            let (r, f) = fuse_for(texts)?;
            user_retrieved.push(r);
            user_fused.push(f);
        }
        let mut item_fused = Vec::with_capacity(item_ids.len());
        let mut item_retrieved = Vec::with_capacity(item_ids.len());
        for texts in &item_texts {
            let (r, f) = fuse_for(texts)?;
            item_retrieved.push(r);
            item_fused.push(f);
        }

        // Global aspect statistics for cold starts.
        let mut freq: HashMap<AspectPair, (usize, usize)> = HashMap::new();
        for (order, (_, pair)) in user_aspects.iter().flatten().enumerate() {
            let e = freq.entry(pair.clone()).or_insert((0, order));
            e.0 += 1;
        }
        let mut ranked: Vec<(AspectPair, (usize, usize))> = freq.into_iter().collect();
        ranked.sort_by(|a, b| b.1 .0.cmp(&a.1 .0).then(a.0.phrase().cmp(&b.0.phrase())));
        let global_top_aspects: Vec<AspectPair> = ranked
            .into_iter()
            .take(cfg.aspects_n.max(1))
            .map(|(p, _)| p)
            .collect();
        let all_aspects: Vec<AspectPair> = item_aspects.iter().flatten().cloned().collect();
        let global_aspect_centroid = if all_aspects.is_empty() {
            global_mean.clone()
        } else {
            item_aspect_centroid(&all_aspects, encoder)?
        };

        let mut item_centroid = Vec::with_capacity(item_ids.len());
        for aspects in &item_aspects {
            match item_aspect_centroid(aspects, encoder) {
                Ok(c) => item_centroid.push(c),
                Err(AspectError::ColdStart) => item_centroid.push(global_aspect_centroid.clone()),
                Err(e) => return Err(e.into()),
            }
        }

        Ok(FeatureStore {
            user_ids,
            item_ids,
            user_index,
            item_index,
            user_fused,
            item_fused,
            user_retrieved,
            item_retrieved,
            user_aspects,
            item_centroid,
            global_top_aspects,
            global_aspect_centroid,
        })
    }

    pub fn user_idx(&self, id: &str) -> Option<usize> {
        self.user_index.get(id).copied()
    }

    pub fn item_idx(&self, id: &str) -> Option<usize> {
        self.item_index.get(id).copied()
    }

    /// Aspect selection for one (user, item), with global fallback for
    /// aspect-poor users. `exclude_record` drops pairs sourced from that
    /// record so a training example never sees its own aspects.
    pub fn selection_for(
        &self,
        user: usize,
        item: usize,
        n: usize,
        exclude_record: Option<usize>,
        encoder: &dyn SentenceEncoder,
    ) -> Result<AspectSelection, PipelineError> {
        let centroid = &self.item_centroid[item];
        let candidates: Vec<AspectPair> = self.user_aspects[user]
            .iter()
            .filter(|(src, _)| Some(*src) != exclude_record)
            .map(|(_, p)| p.clone())
            .collect();
        match select_user_aspects(&candidates, centroid, n, encoder) {
            Ok(sel) => Ok(sel),
            Err(AspectError::ColdStart) => {
                if self.global_top_aspects.is_empty() {
                    // No aspects anywhere in the corpus: synthesize an empty
                    // selection carried by the global centroid direction.
                    return Ok(AspectSelection {
                        pairs: Vec::new(),
                        scores: Vec::new(),
                    });
                }
                let pairs: Vec<AspectPair> = (0..n)
                    .map(|i| self.global_top_aspects[i % self.global_top_aspects.len()].clone())
                    .collect();
                let scores = vec![0.0f32; pairs.len()];
                Ok(AspectSelection { pairs, scores })
            }
            Err(e) => Err(e.into()),
        }
    }

    /// Assemble the model input for one record. `record_idx` is the
    /// record's canonical index, used to exclude its own aspect pairs from
    /// the selection candidates.
    pub fn example(
        &self,
        rec: &ReviewRecord,
        record_idx: Option<usize>,
        vocab: &Vocabulary,
        model_cfg: &ModelConfig,
        n_aspects: usize,
        encoder: &dyn SentenceEncoder,
    ) -> Result<InputSequence, PipelineError> {
        let user = self
            .user_idx(&rec.user)
            .ok_or_else(|| PipelineError::UnknownId {
                what: "user",
                id: rec.user.clone(),
            })?;
        let item = self
            .item_idx(&rec.item)
            .ok_or_else(|| PipelineError::UnknownId {
                what: "item",
                id: rec.item.clone(),
            })?;
        let mut tokens = vocab.encode(&rec.text).ids;
        tokens.truncate(model_cfg.max_len);
        let (aspect_vec_pair, aspect_ids) =
            self.aspect_inputs(user, item, n_aspects, record_idx, vocab, encoder)?;
        let parts = InputParts {
            user,
            item,
            aspect_vecs: Some([&aspect_vec_pair.0, &aspect_vec_pair.1]),
            aspect_ids: &aspect_ids,
            s_uv: Some(&self.user_fused[user].vector),
            s_vu: Some(&self.item_fused[item].vector),
            tokens: &tokens,
            rating: rec.rating,
        };
        Ok(build_input(parts, model_cfg)?)
    }

    /// The two aspect slot vectors plus the discriminator token ids.
    fn aspect_inputs(
        &self,
        user: usize,
        item: usize,
        n: usize,
        exclude_record: Option<usize>,
        vocab: &Vocabulary,
        encoder: &dyn SentenceEncoder,
    ) -> Result<((Vec<f32>, Vec<f32>), Vec<u32>), PipelineError> {
        let sel = self.selection_for(user, item, n, exclude_record, encoder)?;
        let mut ids: Vec<u32> = Vec::new();
        let mut vecs: Vec<Vec<f32>> = Vec::new();
        for pair in &sel.pairs {
            vecs.push(encoder.encode(&pair.phrase())?);
            ids.push(vocab.id(&pair.feature));
            ids.push(vocab.id(&pair.opinion));
        }
        while vecs.len() < 2 {
            vecs.push(self.global_aspect_centroid.clone());
        }
        let a1 = vecs[0].clone();
        let a2 = vecs[1].clone();
        Ok(((a1, a2), ids))
    }
}

#[derive(Debug)]
pub struct TrainSummary {
    pub epochs_run: usize,
    pub best_val: f64,
    pub stopped_early: bool,
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed.wrapping_add((epoch as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

/// Full training protocol: Xavier init (or resume), Adam, per-epoch
/// validation, decay-on-new-minimum schedule, early stopping after three
/// stagnant epochs, best/last checkpoints and the epoch log.
pub fn cmd_train(cfg: &Config, resume: bool) -> Result<TrainSummary, PipelineError> {
    let ws = Workspace::new(&cfg.workspace);
    ws.ensure_dirs()?;
    let artifacts = load_artifacts(cfg)?;
    let index = load_index(cfg)?;
    let encoder = make_encoder(cfg)?;
    let store = FeatureStore::build(&artifacts, &index, encoder.as_ref(), cfg)?;
    let model_cfg = cfg.model_config(
        artifacts.vocab.len(),
        store.user_ids.len(),
        store.item_ids.len(),
    );
    model_cfg.validate()?;

    let build_split =
        |records: &[ReviewRecord], indices: &[usize]| -> Result<Vec<InputSequence>, PipelineError> {
            records
                .iter()
                .zip(indices)
                .map(|(r, &i)| {
                    store.example(
                        r,
                        Some(i),
                        &artifacts.vocab,
                        &model_cfg,
                        cfg.aspects_n,
                        encoder.as_ref(),
                    )
                })
                .collect()
        };
    let train_examples = build_split(&artifacts.split.train, &artifacts.split.train_indices)?;
    let valid_examples = build_split(&artifacts.split.valid, &artifacts.split.valid_indices)?;

    let (mut params, mut adam, mut state, mut log) = if resume && ws.last_checkpoint().exists() {
        let ckpt = load_checkpoint(&ws.last_checkpoint(), Some(&model_cfg))?;
        let log = fs::read_to_string(ws.train_log()).unwrap_or_default();
        (ckpt.params, ckpt.adam, ckpt.state, log)
    } else {
        (
            init_params(&model_cfg, cfg.seed),
            AdamState::new(&model_cfg),
            TrainState::new(cfg.lr, cfg.seed),
            String::new(),
        )
    };
    let opts = ScheduleOptions {
        decay_factor: 0.25,
        lr_floor: cfg.lr_floor,
        decay_on_stagnation: cfg.decay_on_stagnation,
    };

    let mut stopped_early = false;
    while state.epoch < cfg.max_epochs {
        let epoch = state.epoch;
        let stats = train_epoch(
            &mut params,
            &mut adam,
            &train_examples,
            &model_cfg,
            state.lr,
            epoch_seed(cfg.seed, epoch),
            cfg.batch_size,
            epoch,
        )?;
        let val = evaluate_loss(&params, &valid_examples, &model_cfg)?;
        let m = stats.mean;
        log.push_str(&format!(
            "epoch={} lr={} l_r={} l_c={} l_g={} l_a={} reg={} total={} val_total={}\n",
            epoch + 1,
            state.lr,
            m.l_r,
            m.l_c,
            m.l_g,
            m.l_a,
            m.reg,
            m.total,
            val.total
        ));
        let prev_best = state.best_val;
        lr_schedule(&mut state, val.total, &opts);
        state.epoch = epoch + 1;
        let improved = prev_best.is_none() || state.best_val < prev_best;
        let ckpt = Checkpoint {
            config: model_cfg.clone(),
            params: params.clone(),
            adam: adam.clone(),
            state: state.clone(),
        };
        if improved {
            save_checkpoint(&ws.best_checkpoint(), &ckpt)?;
        }
        save_checkpoint(&ws.last_checkpoint(), &ckpt)?;
        if should_stop(&state, cfg.patience) {
            stopped_early = true;
            break;
        }
    }
    fs::write(ws.train_log(), &log).map_err(io_err(&ws.train_log()))?;
    Ok(TrainSummary {
        epochs_run: state.epoch,
        best_val: state.best_val.unwrap_or(f64::NAN),
        stopped_early,
    })
}

/// One line of the explanation output file.
#[derive(Debug, Serialize, Deserialize, Clone)]
pub struct ExplanationRecord {
    pub user: String,
    pub item: String,
    pub rating_true: f64,
    pub rating_pred: f64,
    pub explanation: String,
    pub aspects: Vec<AspectPair>,
    pub retrieved: Vec<String>,
}

fn decode_one(
    rec: &ReviewRecord,
    record_idx: Option<usize>,
    store: &FeatureStore,
    vocab: &Vocabulary,
    model_cfg: &ModelConfig,
    params: &crate::model::ModelParams,
    cfg: &Config,
    encoder: &dyn SentenceEncoder,
) -> Result<ExplanationRecord, PipelineError> {
    let seq = store.example(rec, record_idx, vocab, model_cfg, cfg.aspects_n, encoder)?;
    let user = store.user_idx(&rec.user).expect("example built");
    let item = store.item_idx(&rec.item).expect("example built");

    // Rating comes from the prefix-only sequence; the masked id slots never
    // attend to text, so this matches the training-time head exactly.
    let mut prefix = seq.clone();
    prefix.tokens.clear();
    let mask = crate::model::build_mask(prefix.seq_len())?;
    let hidden = crate::model::forward(&prefix, &mask, params, model_cfg);
    let mut rating_pred =
        crate::model::forward::predict_rating(&prefix, &hidden, params, model_cfg);
    if cfg.explain_clamp {
        rating_pred = rating_pred.clamp(1.0, 5.0);
    }
    let tokens = greedy_decode(&prefix, params, model_cfg, model_cfg.max_len)?;
    let explanation = vocab.decode(&crate::data::TokenSequence { ids: tokens });
    let selection = store.selection_for(user, item, cfg.aspects_n, record_idx, encoder)?;
    Ok(ExplanationRecord {
        user: rec.user.clone(),
        item: rec.item.clone(),
        rating_true: rec.rating,
        rating_pred,
        explanation,
        aspects: selection.pairs,
        retrieved: store.user_retrieved[user]
            .sentences
            .iter()
            .map(|(t, _)| t.clone())
            .collect(),
    })
}

#[derive(Debug)]
pub enum ExplainOutcome {
    /// Whole test split decoded into reports/explanations.jsonl.
    TestSplit { count: usize, path: PathBuf },
    /// One pair decoded; record returned and written next to the reports.
    Single(Box<ExplanationRecord>),
}

/// Decode explanations. With no ids, the whole test split; with ids, one
/// (user, item) pair (unknown ids need `explain.fallback`).
pub fn cmd_explain(
    cfg: &Config,
    user: Option<&str>,
    item: Option<&str>,
) -> Result<ExplainOutcome, PipelineError> {
    let ws = Workspace::new(&cfg.workspace);
    ws.ensure_dirs()?;
    let artifacts = load_artifacts(cfg)?;
    let index = load_index(cfg)?;
    let encoder = make_encoder(cfg)?;
    let store = FeatureStore::build(&artifacts, &index, encoder.as_ref(), cfg)?;
    let ckpt_path = require(ws.best_checkpoint(), "trained checkpoint", "train")?;
    let expected = cfg.model_config(
        artifacts.vocab.len(),
        store.user_ids.len(),
        store.item_ids.len(),
    );
    let ckpt = load_checkpoint(&ckpt_path, Some(&expected))?;
    let model_cfg = ckpt.config.clone();
    let mut params = ckpt.params;

    match (user, item) {
        (Some(u), Some(v)) => {
            let mut rec = ReviewRecord {
                user: u.to_string(),
                item: v.to_string(),
                rating: f64::NAN,
                text: String::from("<query>"),
                aspects: Vec::new(),
            };
            // Unknown ids: with the fallback flag, substitute the mean
            // embedding row so the model answers as an "average" user/item.
            let known_user = store.user_idx(u).is_some();
            let known_item = store.item_idx(v).is_some();
            if !known_user || !known_item {
                if !cfg.explain_fallback {
                    let (what, id) = if known_user { ("item", v) } else { ("user", u) };
                    return Err(PipelineError::UnknownId {
                        what,
                        id: id.to_string(),
                    });
                }
                if !known_user {
                    let mean = row_mean(&params.user_emb);
                    params.user_emb.row_mut(0).copy_from_slice(&mean);
                    rec.user = store.user_ids[0].clone();
                }
                if !known_item {
                    let mean = row_mean(&params.item_emb);
                    params.item_emb.row_mut(0).copy_from_slice(&mean);
                    rec.item = store.item_ids[0].clone();
                }
            }
            rec.rating = 0.0;
            let mut out = decode_one(
                &rec, None, &store, &artifacts.vocab, &model_cfg, &params, cfg,
                encoder.as_ref(),
            )?;
            out.user = u.to_string();
            out.item = v.to_string();
            out.rating_true = f64::NAN;
            let path = ws
                .root
                .join("reports")
                .join(format!("explain_{}_{}.json", sanitize(u), sanitize(v)));
            fs::write(&path, serde_json::to_string_pretty(&out).expect("json"))
                .map_err(io_err(&path))?;
            Ok(ExplainOutcome::Single(Box::new(out)))
        }
        (None, None) => {
            let mut lines = String::new();
            let mut count = 0usize;
            for (rec, &idx) in artifacts
                .split
                .test
                .iter()
                .zip(&artifacts.split.test_indices)
            {
                let out = decode_one(
                    rec, Some(idx), &store, &artifacts.vocab, &model_cfg, &params, cfg,
                    encoder.as_ref(),
                )?;
                lines.push_str(&serde_json::to_string(&out).expect("json"));
                lines.push('\n');
                count += 1;
            }
            let path = ws.explanations();
            fs::write(&path, lines).map_err(io_err(&path))?;
            Ok(ExplainOutcome::TestSplit { count, path })
        }
        _ => Err(PipelineError::Misaligned(
            "--user and --item must be given together".into(),
        )),
    }
}

fn sanitize(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_alphanumeric() { c } else { '_' })
        .collect()
}

fn row_mean(m: &crate::model::Mat) -> Vec<f64> {
    let mut mean = vec![0.0f64; m.cols];
    for r in 0..m.rows {
        for (acc, &x) in mean.iter_mut().zip(m.row(r)) {
            *acc += x;
        }
    }
    for x in mean.iter_mut() {
        *x /= m.rows as f64;
    }
    mean
}

/// Score the decoded test split against its references.
pub fn cmd_eval(cfg: &Config) -> Result<EvalReport, PipelineError> {
    let ws = Workspace::new(&cfg.workspace);
    ws.ensure_dirs()?;
    let artifacts = load_artifacts(cfg)?;
    let expl_path = require(ws.explanations(), "explanations", "explain")?;
    let text = fs::read_to_string(&expl_path).map_err(io_err(&expl_path))?;
    let mut predictions: Vec<ExplanationRecord> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        predictions.push(
            serde_json::from_str(line).map_err(|e| PipelineError::BadJson {
                path: expl_path.display().to_string(),
                line: lineno + 1,
                message: e.to_string(),
            })?,
        );
    }
    if predictions.len() != artifacts.split.test.len() {
        return Err(PipelineError::Misaligned(format!(
            "{} predictions vs {} test records",
            predictions.len(),
            artifacts.split.test.len()
        )));
    }
    let mut inputs = EvalInputs {
        pred_ratings: Vec::new(),
        true_ratings: Vec::new(),
        candidates: Vec::new(),
        references: Vec::new(),
        candidate_texts: Vec::new(),
        reference_texts: Vec::new(),
    };
    for (pred, rec) in predictions.iter().zip(&artifacts.split.test) {
        if pred.user != rec.user || pred.item != rec.item {
            return Err(PipelineError::Misaligned(format!(
                "prediction ({}, {}) does not match test record ({}, {})",
                pred.user, pred.item, rec.user, rec.item
            )));
        }
        inputs.pred_ratings.push(pred.rating_pred);
        inputs.true_ratings.push(rec.rating);
        inputs.candidates.push(data::tokenize(&pred.explanation));
        inputs.references.push(data::tokenize(&rec.text));
        inputs.candidate_texts.push(pred.explanation.clone());
        inputs.reference_texts.push(rec.text.clone());
    }
    let encoder_box;
    let encoder_ref: Option<&dyn SentenceEncoder> = if cfg.eval_semantic {
        encoder_box = make_encoder(cfg)?;
        Some(encoder_box.as_ref())
    } else {
        None
    };
    let report = evaluate_run(&inputs, cfg.eval_sentence_bleu, encoder_ref)?;
    if report.has_nan() {
        return Err(PipelineError::NanMetric(report.to_kv()));
    }
    fs::write(ws.report_table(), report.to_table()).map_err(io_err(&ws.report_table()))?;
    fs::write(ws.report_kv(), report.to_kv()).map_err(io_err(&ws.report_kv()))?;
    Ok(report)
}

