//! `erra` — prepare / index / train / explain / eval pipeline driver.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or config error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use erra_core::config::{load_config, Ablation, Config, ConfigError, EncoderKind};
use erra_core::data::DataError;
use erra_core::pipeline::{
    cmd_eval, cmd_explain, cmd_index, cmd_prepare, cmd_train, ExplainOutcome, PipelineError,
};

#[derive(Parser)]
#[command(name = "erra", version, about = "Explainable recommendation pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Config file (flat `key = value`); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Workspace directory (falls back to $ERRA_WORKSPACE, then the config).
    #[arg(long)]
    workspace: Option<PathBuf>,
    /// Ablation variant: none | no-retrieval | no-aspects.
    #[arg(long)]
    ablation: Option<String>,
    /// Sentence encoder: stub | pretrained.
    #[arg(long)]
    encoder: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Load/generate reviews, filter, split, extract aspects, build the vocab.
    Prepare(CommonArgs),
    /// Encode train-split sentences and persist the retrieval index.
    Index(CommonArgs),
    /// Train the model with the full schedule; writes checkpoints and a log.
    Train {
        #[command(flatten)]
        common: CommonArgs,
        /// Continue from checkpoints/last.ckpt if present.
        #[arg(long)]
        resume: bool,
    },
    /// Decode explanations: whole test split, or one --user/--item pair.
    Explain {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        user: Option<String>,
        #[arg(long)]
        item: Option<String>,
        /// Allow unknown ids (answered as an average user/item).
        #[arg(long)]
        fallback: bool,
    },
    /// Score decoded explanations against the test references.
    Eval(CommonArgs),
}

fn resolve_config(common: &CommonArgs) -> Result<Config, ConfigError> {
    let mut cfg = match &common.config {
        Some(path) => load_config(path)?,
        None => Config::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(ws) = &common.workspace {
        cfg.workspace = ws.clone();
    } else if let Ok(env_ws) = std::env::var("ERRA_WORKSPACE") {
        if !env_ws.is_empty() {
            cfg.workspace = PathBuf::from(env_ws);
        }
    }
    if let Some(ab) = &common.ablation {
        cfg.ablation = Ablation::parse(ab).ok_or_else(|| ConfigError::BadValue {
            key: "--ablation".into(),
            value: ab.clone(),
            expected: "none|no-retrieval|no-aspects",
        })?;
    }
    if let Some(enc) = &common.encoder {
        cfg.encoder_kind = match enc.as_str() {
            "stub" => EncoderKind::Stub,
            "pretrained" => EncoderKind::Pretrained,
            _ => {
                return Err(ConfigError::BadValue {
                    key: "--encoder".into(),
                    value: enc.clone(),
                    expected: "stub|pretrained",
                })
            }
        };
    }
    cfg.validate()?;
    Ok(cfg)
}

fn usage_error(err: impl std::fmt::Display) -> ExitCode {
    eprintln!("error: {err}");
    ExitCode::from(2)
}

fn runtime_error(err: impl std::fmt::Display) -> ExitCode {
    eprintln!("error: {err}");
    ExitCode::from(1)
}

fn run(cli: Cli) -> ExitCode {
    match cli.command {
        Command::Prepare(common) => {
            let cfg = match resolve_config(&common) {
                Ok(c) => c,
                Err(e) => return usage_error(e),
            };
            match cmd_prepare(&cfg) {
                Ok(s) => {
                    println!(
                        "prepared {} records ({} skipped) -> train={} valid={} test={} vocab={} aspect_pairs={}",
                        s.filtered_records, s.skipped, s.train, s.valid, s.test, s.vocab_size,
                        s.aspect_pairs
                    );
                    println!(
                        "min-activity filter (k={}) kept {} of {} raw records",
                        cfg.min_user_reviews, s.filtered_records, s.raw_records
                    );
                    ExitCode::SUCCESS
                }
                // A bad dataset path is a usage problem, not a runtime one.
                Err(PipelineError::Data(DataError::Io { path, source })) => {
                    usage_error(format!("cannot read dataset {path}: {source}"))
                }
                Err(e) => runtime_error(e),
            }
        }
        Command::Index(common) => {
            let cfg = match resolve_config(&common) {
                Ok(c) => c,
                Err(e) => return usage_error(e),
            };
            match cmd_index(&cfg) {
                Ok(s) => {
                    println!("indexed {} sentences (mode {:?})", s.entries, s.mode);
                    ExitCode::SUCCESS
                }
                Err(e) => runtime_error(e),
            }
        }
        Command::Train { common, resume } => {
            let cfg = match resolve_config(&common) {
                Ok(c) => c,
                Err(e) => return usage_error(e),
            };
            match cmd_train(&cfg, resume) {
                Ok(s) => {
                    println!(
                        "trained {} epochs (ablation {:?}, best validation loss {}){}",
                        s.epochs_run,
                        cfg.ablation,
                        s.best_val,
                        if s.stopped_early { ", stopped early" } else { "" }
                    );
                    ExitCode::SUCCESS
                }
                Err(e) => runtime_error(e),
            }
        }
        Command::Explain {
            common,
            user,
            item,
            fallback,
        } => {
            let mut cfg = match resolve_config(&common) {
                Ok(c) => c,
                Err(e) => return usage_error(e),
            };
            if fallback {
                cfg.explain_fallback = true;
            }
            match cmd_explain(&cfg, user.as_deref(), item.as_deref()) {
                Ok(ExplainOutcome::TestSplit { count, path }) => {
                    println!("decoded {} test explanations -> {}", count, path.display());
                    ExitCode::SUCCESS
                }
                Ok(ExplainOutcome::Single(rec)) => {
                    println!("user: {}", rec.user);
                    println!("item: {}", rec.item);
                    println!("rating: {:.3}", rec.rating_pred);
                    println!("explanation: {}", rec.explanation);
                    let aspects: Vec<String> = rec
                        .aspects
                        .iter()
                        .map(|p| format!("({}, {})", p.feature, p.opinion))
                        .collect();
                    println!("aspects: {}", aspects.join(" "));
                    for s in &rec.retrieved {
                        println!("retrieved: {s}");
                    }
                    ExitCode::SUCCESS
                }
                Err(e) => runtime_error(e),
            }
        }
        Command::Eval(common) => {
            let cfg = match resolve_config(&common) {
                Ok(c) => c,
                Err(e) => return usage_error(e),
            };
            match cmd_eval(&cfg) {
                Ok(report) => {
                    print!("{}", report.to_table());
                    ExitCode::SUCCESS
                }
                Err(e) => runtime_error(e),
            }
        }
    }
}

fn main() -> ExitCode {
    run(Cli::parse())
}
