//! Flat dotted-key configuration file.
//!
//! Format: one `key = value` per line, `#` comments, unknown keys rejected.
//! Every key has a default, so an empty file is a complete configuration.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::model::{ModelConfig, RatingSlot};
use crate::retrieval::IndexMode;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("config line {line}: expected `key = value`, got {text:?}")]
    BadLine { line: usize, text: String },
    #[error("unknown config key: {0}")]
    UnknownKey(String),
    #[error("config key {key}: cannot parse {value:?} as {expected}")]
    BadValue {
        key: String,
        value: String,
        expected: &'static str,
    },
    #[error("config key {key}: {reason}")]
    Invalid { key: String, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncoderKind {
    Stub,
    Pretrained,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExtractorKind {
    Fallback,
    Tool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ablation {
    None,
    NoRetrieval,
    NoAspects,
}

impl Ablation {
    pub fn parse(s: &str) -> Option<Ablation> {
        match s {
            "none" => Some(Ablation::None),
            "no-retrieval" => Some(Ablation::NoRetrieval),
            "no-aspects" => Some(Ablation::NoAspects),
            _ => None,
        }
    }

    fn as_str(self) -> &'static str {
        match self {
            Ablation::None => "none",
            Ablation::NoRetrieval => "no-retrieval",
            Ablation::NoAspects => "no-aspects",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub seed: u64,
    pub workspace: PathBuf,
    // data.*
    pub data_path: Option<PathBuf>,
    pub min_user_reviews: usize,
    pub filter_items: bool,
    pub min_item_reviews: usize,
    pub max_vocab: usize,
    pub ratios: (u32, u32, u32),
    // synth.*
    pub synth_users: usize,
    pub synth_items: usize,
    pub synth_reviews_per_user: usize,
    pub synth_rating_noise: f64,
    // encoder.*
    pub encoder_kind: EncoderKind,
    pub encoder_seed: u64,
    pub encoder_path: Option<PathBuf>,
    // retrieval.*
    pub retrieval_n: usize,
    pub retrieval_mode: IndexMode,
    pub retrieval_nprobe: usize,
    // aspects.*
    pub aspects_extractor: ExtractorKind,
    pub aspects_n: usize,
    // model.*
    pub d: usize,
    pub heads: usize,
    pub layers: usize,
    pub max_len: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
    pub scale_full_d: bool,
    pub rating_slot: RatingSlot,
    // loss.*
    pub pl: f64,
    pub lambda_c: f64,
    pub gl: f64,
    pub al: f64,
    pub lambda_l: f64,
    // train.*
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub lr_floor: f64,
    pub decay_on_stagnation: bool,
    pub ablation: Ablation,
    // eval.*
    pub eval_semantic: bool,
    pub eval_sentence_bleu: bool,
    // explain.*
    pub explain_fallback: bool,
    pub explain_clamp: bool,
}

impl Default for Config {
    fn default() -> Config {
        Config {
            seed: 42,
            workspace: PathBuf::from("workspace"),
            data_path: None,
            min_user_reviews: 5,
            filter_items: false,
            min_item_reviews: 5,
            max_vocab: 5000,
            ratios: (8, 1, 1),
            synth_users: 25,
            synth_items: 10,
            synth_reviews_per_user: 8,
            synth_rating_noise: 0.05,
            encoder_kind: EncoderKind::Stub,
            encoder_seed: 7,
            encoder_path: None,
            retrieval_n: 3,
            retrieval_mode: IndexMode::Exact,
            retrieval_nprobe: 0,
            aspects_extractor: ExtractorKind::Fallback,
            aspects_n: 2,
            d: 384,
            heads: 2,
            layers: 2,
            max_len: 15,
            ffn_dim: 0,
            dropout: 0.0,
            scale_full_d: false,
            rating_slot: RatingSlot::Item,
            pl: 0.2,
            lambda_c: 0.8,
            gl: 1.0,
            al: 0.05,
            lambda_l: 1e-4,
            lr: 0.1,
            batch_size: 128,
            max_epochs: 100,
            patience: 3,
            lr_floor: 1e-6,
            decay_on_stagnation: false,
            ablation: Ablation::None,
            eval_semantic: false,
            eval_sentence_bleu: false,
            explain_fallback: false,
            explain_clamp: false,
        }
    }
}

fn parse_bool(key: &str, v: &str) -> Result<bool, ConfigError> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(ConfigError::BadValue {
            key: key.into(),
            value: v.into(),
            expected: "bool (true|false)",
        }),
    }
}

fn parse_num<T: std::str::FromStr>(
    key: &str,
    v: &str,
    expected: &'static str,
) -> Result<T, ConfigError> {
    v.parse().map_err(|_| ConfigError::BadValue {
        key: key.into(),
        value: v.into(),
        expected,
    })
}

impl Config {
    pub fn apply_line(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let v = value.trim();
        match key {
            "seed" => self.seed = parse_num(key, v, "u64")?,
            "workspace" => self.workspace = PathBuf::from(v),
            "data.path" => self.data_path = (!v.is_empty()).then(|| PathBuf::from(v)),
            "data.min_user_reviews" => self.min_user_reviews = parse_num(key, v, "usize")?,
            "data.filter_items" => self.filter_items = parse_bool(key, v)?,
            "data.min_item_reviews" => self.min_item_reviews = parse_num(key, v, "usize")?,
            "data.max_vocab" => self.max_vocab = parse_num(key, v, "usize")?,
            "data.ratios" => {
                let parts: Vec<&str> = v.split(':').collect();
                if parts.len() != 3 {
                    return Err(ConfigError::BadValue {
                        key: key.into(),
                        value: v.into(),
                        expected: "a:b:c",
                    });
                }
                self.ratios = (
                    parse_num(key, parts[0], "u32")?,
                    parse_num(key, parts[1], "u32")?,
                    parse_num(key, parts[2], "u32")?,
                );
            }
            "synth.users" => self.synth_users = parse_num(key, v, "usize")?,
            "synth.items" => self.synth_items = parse_num(key, v, "usize")?,
            "synth.reviews_per_user" => {
                self.synth_reviews_per_user = parse_num(key, v, "usize")?
            }
            "synth.rating_noise" => self.synth_rating_noise = parse_num(key, v, "f64")?,
            "encoder.kind" => {
                self.encoder_kind = match v {
                    "stub" => EncoderKind::Stub,
                    "pretrained" => EncoderKind::Pretrained,
                    _ => {
                        return Err(ConfigError::BadValue {
                            key: key.into(),
                            value: v.into(),
                            expected: "stub|pretrained",
                        })
                    }
                }
            }
            "encoder.seed" => self.encoder_seed = parse_num(key, v, "u64")?,
            "encoder.path" => self.encoder_path = (!v.is_empty()).then(|| PathBuf::from(v)),
            "retrieval.n" => self.retrieval_n = parse_num(key, v, "usize")?,
            "retrieval.mode" => {
                self.retrieval_mode = match v {
                    "exact" => IndexMode::Exact,
                    "approx" => IndexMode::Approximate,
                    _ => {
                        return Err(ConfigError::BadValue {
                            key: key.into(),
                            value: v.into(),
                            expected: "exact|approx",
                        })
                    }
                }
            }
            "retrieval.nprobe" => self.retrieval_nprobe = parse_num(key, v, "usize")?,
            "aspects.extractor" => {
                self.aspects_extractor = match v {
                    "fallback" => ExtractorKind::Fallback,
                    "tool" => ExtractorKind::Tool,
                    _ => {
                        return Err(ConfigError::BadValue {
                            key: key.into(),
                            value: v.into(),
                            expected: "fallback|tool",
                        })
                    }
                }
            }
            "aspects.n" => self.aspects_n = parse_num(key, v, "usize")?,
            "model.d" => self.d = parse_num(key, v, "usize")?,
            "model.heads" => self.heads = parse_num(key, v, "usize")?,
            "model.layers" => self.layers = parse_num(key, v, "usize")?,
            "model.max_len" => self.max_len = parse_num(key, v, "usize")?,
            "model.ffn_dim" => self.ffn_dim = parse_num(key, v, "usize")?,
            "model.dropout" => self.dropout = parse_num(key, v, "f64")?,
            "model.scale_full_d" => self.scale_full_d = parse_bool(key, v)?,
            "model.rating_slot" => {
                self.rating_slot = match v {
                    "item" => RatingSlot::Item,
                    "user" => RatingSlot::User,
                    _ => {
                        return Err(ConfigError::BadValue {
                            key: key.into(),
                            value: v.into(),
                            expected: "item|user",
                        })
                    }
                }
            }
            "loss.pl" => self.pl = parse_num(key, v, "f64")?,
            "loss.lambda_c" => self.lambda_c = parse_num(key, v, "f64")?,
            "loss.gl" => self.gl = parse_num(key, v, "f64")?,
            "loss.al" => self.al = parse_num(key, v, "f64")?,
            "loss.lambda_l" => self.lambda_l = parse_num(key, v, "f64")?,
            "train.lr" => self.lr = parse_num(key, v, "f64")?,
            "train.batch_size" => self.batch_size = parse_num(key, v, "usize")?,
            "train.max_epochs" => self.max_epochs = parse_num(key, v, "usize")?,
            "train.patience" => self.patience = parse_num(key, v, "usize")?,
            "train.lr_floor" => self.lr_floor = parse_num(key, v, "f64")?,
            "train.decay_on_stagnation" => self.decay_on_stagnation = parse_bool(key, v)?,
            "train.ablation" => {
                self.ablation = Ablation::parse(v).ok_or_else(|| ConfigError::BadValue {
                    key: key.into(),
                    value: v.into(),
                    expected: "none|no-retrieval|no-aspects",
                })?
            }
            "eval.semantic" => self.eval_semantic = parse_bool(key, v)?,
            "eval.sentence_bleu" => self.eval_sentence_bleu = parse_bool(key, v)?,
            "explain.fallback" => self.explain_fallback = parse_bool(key, v)?,
            "explain.clamp" => self.explain_clamp = parse_bool(key, v)?,
            other => return Err(ConfigError::UnknownKey(other.to_string())),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |key: &str, reason: String| {
            Err(ConfigError::Invalid {
                key: key.into(),
                reason,
            })
        };
        if self.retrieval_n == 0 {
            return invalid("retrieval.n", "must be at least 1".into());
        }
        if self.aspects_n == 0 {
            return invalid("aspects.n", "must be at least 1".into());
        }
        if self.min_user_reviews == 0 {
            return invalid("data.min_user_reviews", "must be at least 1".into());
        }
        if self.max_vocab <= 4 {
            return invalid("data.max_vocab", "must exceed the 4 reserved ids".into());
        }
        if self.ratios.0 == 0 || self.ratios.1 == 0 || self.ratios.2 == 0 {
            return invalid("data.ratios", "all parts must be positive".into());
        }
        if self.d == 0 || self.heads == 0 || self.d % self.heads != 0 {
            return invalid(
                "model.d",
                format!(
                    "d={} must be positive and divisible by heads={}",
                    self.d, self.heads
                ),
            );
        }
        if !(15..=20).contains(&self.max_len) {
            return invalid("model.max_len", format!("{} outside [15, 20]", self.max_len));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return invalid("model.dropout", format!("{} outside [0, 1)", self.dropout));
        }
        for (key, w) in [
            ("loss.pl", self.pl),
            ("loss.lambda_c", self.lambda_c),
            ("loss.gl", self.gl),
            ("loss.al", self.al),
            ("loss.lambda_l", self.lambda_l),
        ] {
            if !(w >= 0.0) {
                return invalid(key, format!("weight {w} must be >= 0"));
            }
        }
        if !(self.lr > 0.0) {
            return invalid("train.lr", format!("{} must be positive", self.lr));
        }
        if self.batch_size == 0 {
            return invalid("train.batch_size", "must be at least 1".into());
        }
        if self.patience == 0 {
            return invalid("train.patience", "must be at least 1".into());
        }
        if self.encoder_kind == EncoderKind::Pretrained && self.encoder_path.is_none() {
            return invalid(
                "encoder.path",
                "required when encoder.kind = pretrained".into(),
            );
        }
        Ok(())
    }

    /// Model-side view of the configuration for a concrete corpus.
    pub fn model_config(&self, vocab_size: usize, n_users: usize, n_items: usize) -> ModelConfig {
        ModelConfig {
            d: self.d,
            heads: self.heads,
            layers: self.layers,
            vocab_size,
            n_users,
            n_items,
            max_len: self.max_len,
            ffn_dim: self.ffn_dim,
            dropout: self.dropout,
            pl: self.pl,
            lambda_c: self.lambda_c,
            gl: self.gl,
            al: self.al,
            lambda_l: self.lambda_l,
            use_retrieval: self.ablation != Ablation::NoRetrieval,
            use_aspects: self.ablation != Ablation::NoAspects,
            scale_full_d: self.scale_full_d,
            rating_slot: self.rating_slot,
        }
    }

    /// Canonical full dump: every key, fixed order, parseable back.
    pub fn dump(&self) -> String {
        let mut s = String::new();
        let path_str = |p: &Option<PathBuf>| {
            p.as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default()
        };
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "workspace = {}", self.workspace.display());
        let _ = writeln!(s, "data.path = {}", path_str(&self.data_path));
        let _ = writeln!(s, "data.min_user_reviews = {}", self.min_user_reviews);
        let _ = writeln!(s, "data.filter_items = {}", self.filter_items);
        let _ = writeln!(s, "data.min_item_reviews = {}", self.min_item_reviews);
        let _ = writeln!(s, "data.max_vocab = {}", self.max_vocab);
        let _ = writeln!(
            s,
            "data.ratios = {}:{}:{}",
            self.ratios.0, self.ratios.1, self.ratios.2
        );
        let _ = writeln!(s, "synth.users = {}", self.synth_users);
        let _ = writeln!(s, "synth.items = {}", self.synth_items);
        let _ = writeln!(s, "synth.reviews_per_user = {}", self.synth_reviews_per_user);
        let _ = writeln!(s, "synth.rating_noise = {}", self.synth_rating_noise);
        let _ = writeln!(
            s,
            "encoder.kind = {}",
            match self.encoder_kind {
                EncoderKind::Stub => "stub",
                EncoderKind::Pretrained => "pretrained",
            }
        );
        let _ = writeln!(s, "encoder.seed = {}", self.encoder_seed);
        let _ = writeln!(s, "encoder.path = {}", path_str(&self.encoder_path));
        let _ = writeln!(s, "retrieval.n = {}", self.retrieval_n);
        let _ = writeln!(
            s,
            "retrieval.mode = {}",
            match self.retrieval_mode {
                IndexMode::Exact => "exact",
                IndexMode::Approximate => "approx",
            }
        );
        let _ = writeln!(s, "retrieval.nprobe = {}", self.retrieval_nprobe);
        let _ = writeln!(
            s,
            "aspects.extractor = {}",
            match self.aspects_extractor {
                ExtractorKind::Fallback => "fallback",
                ExtractorKind::Tool => "tool",
            }
        );
        let _ = writeln!(s, "aspects.n = {}", self.aspects_n);
        let _ = writeln!(s, "model.d = {}", self.d);
        let _ = writeln!(s, "model.heads = {}", self.heads);
        let _ = writeln!(s, "model.layers = {}", self.layers);
        let _ = writeln!(s, "model.max_len = {}", self.max_len);
        let _ = writeln!(s, "model.ffn_dim = {}", self.ffn_dim);
        let _ = writeln!(s, "model.dropout = {}", self.dropout);
        let _ = writeln!(s, "model.scale_full_d = {}", self.scale_full_d);
        let _ = writeln!(
            s,
            "model.rating_slot = {}",
            match self.rating_slot {
                RatingSlot::Item => "item",
                RatingSlot::User => "user",
            }
        );
        let _ = writeln!(s, "loss.pl = {}", self.pl);
        let _ = writeln!(s, "loss.lambda_c = {}", self.lambda_c);
        let _ = writeln!(s, "loss.gl = {}", self.gl);
        let _ = writeln!(s, "loss.al = {}", self.al);
        let _ = writeln!(s, "loss.lambda_l = {}", self.lambda_l);
        let _ = writeln!(s, "train.lr = {}", self.lr);
        let _ = writeln!(s, "train.batch_size = {}", self.batch_size);
        let _ = writeln!(s, "train.max_epochs = {}", self.max_epochs);
        let _ = writeln!(s, "train.patience = {}", self.patience);
        let _ = writeln!(s, "train.lr_floor = {}", self.lr_floor);
        let _ = writeln!(s, "train.decay_on_stagnation = {}", self.decay_on_stagnation);
        let _ = writeln!(s, "train.ablation = {}", self.ablation.as_str());
        let _ = writeln!(s, "eval.semantic = {}", self.eval_semantic);
        let _ = writeln!(s, "eval.sentence_bleu = {}", self.eval_sentence_bleu);
        let _ = writeln!(s, "explain.fallback = {}", self.explain_fallback);
        let _ = writeln!(s, "explain.clamp = {}", self.explain_clamp);
        s
    }
}

/// Parse config text over the defaults; validates before returning.
pub fn parse_config(text: &str) -> Result<Config, ConfigError> {
    let mut cfg = Config::default();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::BadLine {
            line: lineno + 1,
            text: raw.to_string(),
        })?;
        cfg.apply_line(key.trim(), value)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<Config, ConfigError> {
    let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_config(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_full_defaults() {
        let cfg = parse_config("").unwrap();
        assert_eq!(cfg, Config::default());
        assert_eq!(cfg.d, 384);
        assert_eq!(cfg.retrieval_n, 3);
        assert_eq!(cfg.aspects_n, 2);
        assert_eq!(cfg.max_len, 15);
        assert_eq!(cfg.pl, 0.2);
        assert_eq!(cfg.lambda_c, 0.8);
        assert_eq!(cfg.gl, 1.0);
        assert_eq!(cfg.al, 0.05);
        assert_eq!(cfg.lr, 0.1);
        assert_eq!(cfg.patience, 3);
    }

    #[test]
    fn unknown_key_is_rejected_by_name() {
        let err = parse_config("retrieval.bogus = 1").unwrap_err();
        match err {
            ConfigError::UnknownKey(k) => assert_eq!(k, "retrieval.bogus"),
            other => panic!("unexpected: {other}"),
        }
    }

    #[test]
    fn zero_retrieval_n_fails_validation() {
        assert!(matches!(
            parse_config("retrieval.n = 0"),
            Err(ConfigError::Invalid { .. })
        ));
    }

    #[test]
    fn type_mismatch_names_the_key() {
        let err = parse_config("train.lr = fast").unwrap_err();
        match err {
            ConfigError::BadValue { key, .. } => assert_eq!(key, "train.lr"),
            other => panic!("unexpected: {other}"),
        }
    }

    #[test]
    fn comments_and_blank_lines_are_ignored() {
        let cfg = parse_config("# comment\n\nseed = 9\n").unwrap();
        assert_eq!(cfg.seed, 9);
    }

    #[test]
    fn dump_load_round_trip_is_stable() {
        let text = "seed = 5\nmodel.d = 32\nmodel.heads = 4\ntrain.ablation = no-aspects\nretrieval.mode = approx\n";
        let cfg = parse_config(text).unwrap();
        let dumped = cfg.dump();
        let reloaded = parse_config(&dumped).unwrap();
        assert_eq!(reloaded, cfg);
        // Dump is canonical: dumping again yields identical text.
        assert_eq!(reloaded.dump(), dumped);
    }

    #[test]
    fn ablation_maps_to_model_flags() {
        let cfg = parse_config("train.ablation = no-retrieval").unwrap();
        let mc = cfg.model_config(100, 10, 10);
        assert!(!mc.use_retrieval);
        assert!(mc.use_aspects);
        let cfg = parse_config("train.ablation = no-aspects").unwrap();
        let mc = cfg.model_config(100, 10, 10);
        assert!(mc.use_retrieval);
        assert!(!mc.use_aspects);
    }

    #[test]
    fn pretrained_encoder_requires_a_path() {
        assert!(parse_config("encoder.kind = pretrained").is_err());
        assert!(parse_config("encoder.kind = pretrained\nencoder.path = emb.tsv").is_ok());
    }
}
