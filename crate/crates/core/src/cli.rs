//! Command-line entry points: prepare, train, generate, evaluate, analyze.
//!
//! Commands coordinate only through files. Logs go to standard error, data
//! to files. Exit codes: 0 success, 2 usage (clap), then one code per error
//! class — 3 missing input, 4 checkpoint version mismatch, 5 malformed
//! config or record, 6 missing checkpoint, 7 contract violation, 8
//! non-finite loss abort, 9 io failure, 10 malformed checkpoint.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::analysis::{posterior_distance_study, save_trace, write_trace_svg, LatentVariant};
use crate::config::RunConfig;
use crate::corpus;
use crate::error::{Error, Result};
use crate::infer::{self, GenRecord};
use crate::metrics::{self, EmbeddingSource};
use crate::model::{load_checkpoint, save_checkpoint, Model};
use crate::train::Trainer;

pub fn exit_code(error: &Error) -> i32 {
    match error {
        Error::MissingInput(_) => 3,
        Error::CheckpointVersion { .. } => 4,
        Error::Config(_) | Error::Json(_) => 5,
        Error::MissingCheckpoint(_) => 6,
        Error::Contract { .. } | Error::DimensionMismatch { .. } => 7,
        Error::NonFiniteLoss { .. } => 8,
        Error::Io { .. } => 9,
        Error::MalformedCheckpoint { .. } => 10,
    }
}

#[derive(Parser)]
#[command(
    name = "chvt",
    version,
    about = "Hybrid latent variable dialogue generation toolkit"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Turn raw multi-turn dialogues into deduplicated split files and a vocabulary.
    Prepare(PrepareArgs),
    /// Train a model from a config file.
    Train(TrainArgs),
    /// Generate K candidates plus selection for each context in a file.
    Generate(GenerateArgs),
    /// Compute the metric report for a split.
    Evaluate(EvaluateArgs),
    /// Run the posterior-distance study.
    Analyze(AnalyzeArgs),
}

#[derive(Args)]
pub struct PrepareArgs {
    /// Raw dialogues: JSON-array lines or tab-separated utterances.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// train,valid,test split ratios; must sum to 1.
    #[arg(long, default_value = "0.8,0.1,0.1")]
    pub ratios: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Total vocabulary budget including the 5 reserved tokens.
    #[arg(long, default_value_t = 20000)]
    pub max_vocab: usize,
}

#[derive(Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Override the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Override train.kl_mode (vanilla | relaxed).
    #[arg(long)]
    pub kl: Option<String>,
    /// Ablation: continuous latent off (z_s = 0, no KL term).
    #[arg(long)]
    pub no_clv: bool,
    /// Ablation: discrete latent off (K = 1, table frozen at zero).
    #[arg(long)]
    pub no_dlv: bool,
    /// Additional `key=value` config overrides.
    #[arg(long = "set")]
    pub overrides: Vec<String>,
    /// Step log path (default <out>/steps.jsonl).
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Checkpoint path (default <out>/model.chvt).
    #[arg(long)]
    pub checkpoint_out: Option<PathBuf>,
}

#[derive(Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Contexts: plain lines or JSONL objects with a "context" field.
    #[arg(long)]
    pub contexts: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Vocabulary file (default: vocab.txt next to the checkpoint).
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "greedy")]
    pub decode_mode: String,
    #[arg(long, default_value_t = 5)]
    pub top_k: usize,
    #[arg(long, default_value_t = 16)]
    pub max_new_tokens: usize,
}

#[derive(Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Evaluation split: `context TAB response` lines.
    #[arg(long)]
    pub pairs: PathBuf,
    /// Metric report output (JSON).
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Reuse an existing generation-record file instead of regenerating.
    #[arg(long)]
    pub gen_records: Option<PathBuf>,
    /// External word vectors for EA/Cohe (default: model token embeddings).
    #[arg(long)]
    pub vectors: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 16)]
    pub max_new_tokens: usize,
}

#[derive(Args)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// cls_token | additive_mixing | both
    #[arg(long, default_value = "both")]
    pub variant: String,
    #[arg(long = "set")]
    pub overrides: Vec<String>,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Prepare(args) => cmd_prepare(&args),
        Command::Train(args) => cmd_train(&args),
        Command::Generate(args) => cmd_generate(&args),
        Command::Evaluate(args) => cmd_evaluate(&args),
        Command::Analyze(args) => cmd_analyze(&args),
    }
}

fn require_exists(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingInput(path.to_path_buf()))
    }
}

fn parse_ratios(text: &str) -> Result<(f64, f64, f64)> {
    let parts: Vec<&str> = text.split(',').collect();
    if parts.len() != 3 {
        return Err(Error::Config(format!(
            "ratios must be three comma-separated numbers, got '{text}'"
        )));
    }
    let mut values = [0.0f64; 3];
    for (v, p) in values.iter_mut().zip(&parts) {
        *v = p
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("bad ratio '{p}'")))?;
    }
    if (values.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "ratios must sum to 1, got {}",
            values.iter().sum::<f64>()
        )));
    }
    Ok((values[0], values[1], values[2]))
}

pub fn cmd_prepare(args: &PrepareArgs) -> Result<()> {
    // Reject bad ratios before touching any data.
    let ratios = parse_ratios(&args.ratios)?;
    require_exists(&args.input)?;
    fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;

    let dialogues = corpus::load_dialogues(&args.input)?;
    let (pairs, skipped) = corpus::extract_pairs(&dialogues);
    let (train, valid, test) = corpus::dedupe_split(&pairs, ratios, args.seed)?;
    let vocab = corpus::build_vocab(&train, args.max_vocab);

    corpus::save_pairs_tsv(&train, &args.out.join("train.tsv"))?;
    corpus::save_pairs_tsv(&valid, &args.out.join("valid.tsv"))?;
    corpus::save_pairs_tsv(&test, &args.out.join("test.tsv"))?;
    vocab.save(&args.out.join("vocab.txt"))?;

    eprintln!(
        "prepared {} dialogues -> {} pairs ({} deduped away, {} short dialogues skipped)",
        dialogues.len(),
        pairs.len(),
        pairs.len() - train.len() - valid.len() - test.len(),
        skipped,
    );
    eprintln!("        vocab  train  valid  test");
    eprintln!(
        "counts  {:>5}  {:>5}  {:>5}  {:>4}",
        vocab.len(),
        train.len(),
        valid.len(),
        test.len()
    );
    Ok(())
}

fn apply_overrides(config: &mut RunConfig, overrides: &[String]) -> Result<()> {
    for entry in overrides {
        let (key, value) = entry.split_once('=').ok_or_else(|| {
            Error::Config(format!("--set expects key=value, got '{entry}'"))
        })?;
        config.set(key.trim(), value.trim())?;
    }
    Ok(())
}

fn load_vocab_for(checkpoint: &Path, explicit: &Option<PathBuf>) -> Result<corpus::Vocab> {
    let path = match explicit {
        Some(p) => p.clone(),
        None => checkpoint
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join("vocab.txt"),
    };
    require_exists(&path)?;
    corpus::Vocab::load(&path)
}

fn check_vocab_compat(model: &Model, vocab: &corpus::Vocab) -> Result<()> {
    if model.config.vocab_size != vocab.len() {
        return Err(Error::Config(format!(
            "checkpoint was trained with vocab_size {} but the vocabulary file has {} entries",
            model.config.vocab_size,
            vocab.len()
        )));
    }
    Ok(())
}

pub fn cmd_train(args: &TrainArgs) -> Result<()> {
    let mut run = RunConfig::from_file(&args.config)?;
    if let Some(seed) = args.seed {
        run.seed = seed;
    }
    if let Some(kl) = &args.kl {
        run.set("train.kl_mode", kl)?;
    }
    if args.no_clv {
        run.no_clv = true;
    }
    if args.no_dlv {
        run.no_dlv = true;
    }
    apply_overrides(&mut run, &args.overrides)?;
    if run.no_clv && run.no_dlv {
        // Rejected before any data is touched.
        return Err(Error::Config(
            "--no-clv and --no-dlv together leave no latent variable".into(),
        ));
    }

    let train_path = run
        .train_path
        .clone()
        .ok_or_else(|| Error::Config("data.train is required for training".into()))?;
    let vocab_path = run
        .vocab_path
        .clone()
        .ok_or_else(|| Error::Config("data.vocab is required for training".into()))?;
    require_exists(&train_path)?;
    require_exists(&vocab_path)?;
    if let Some(valid) = &run.valid_path {
        require_exists(valid)?;
    }

    fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    fs::write(args.out.join("resolved.config"), run.to_file_string())
        .map_err(|e| Error::io(args.out.join("resolved.config"), e))?;

    let vocab = corpus::Vocab::load(&vocab_path)?;
    let raw_pairs = corpus::load_pairs_tsv(&train_path)?;
    let (pairs, dropped) = corpus::tokenize_pairs(&raw_pairs, &vocab);
    if dropped > 0 {
        eprintln!("dropped {dropped} pairs that tokenize to nothing");
    }

    let model_config = run.model_config(vocab.len())?;
    let train_config = run.train_config()?;
    let checkpoint_path = args
        .checkpoint_out
        .clone()
        .unwrap_or_else(|| args.out.join("model.chvt"));
    let log_path = args.log.clone().unwrap_or_else(|| args.out.join("steps.jsonl"));

    // Resume from an existing checkpoint with a matching architecture;
    // otherwise start fresh. Optimizer state is not checkpointed.
    let (model, start_step) = if checkpoint_path.exists() {
        let (model, step) = load_checkpoint(&checkpoint_path)?;
        if model.config != model_config {
            return Err(Error::Config(
                "existing checkpoint does not match the requested configuration".into(),
            ));
        }
        eprintln!("resuming from {} at step {step}", checkpoint_path.display());
        (model, step)
    } else {
        (Model::new(model_config, run.seed)?, 0)
    };

    if start_step >= train_config.max_steps {
        eprintln!("nothing to do: checkpoint already at step {start_step}");
        return Ok(());
    }

    let mut trainer = Trainer::new(model, pairs, train_config)?;
    trainer.step = start_step;
    let mut log = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;

    // Copy the vocabulary next to the checkpoint so generate/evaluate can
    // find it by convention.
    let vocab_copy = checkpoint_path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join("vocab.txt");
    if vocab_copy != vocab_path {
        fs::copy(&vocab_path, &vocab_copy).map_err(|e| Error::io(&vocab_copy, e))?;
    }

    let save = |trainer: &Trainer, step: u64| -> Result<()> {
        let tmp = checkpoint_path.with_extension("tmp");
        save_checkpoint(&trainer.model, step, &tmp)?;
        fs::rename(&tmp, &checkpoint_path).map_err(|e| Error::io(&checkpoint_path, e))?;
        Ok(())
    };

    while trainer.step < trainer.config.max_steps {
        let metrics = trainer.step_once()?;
        let line = serde_json::to_string(&metrics)?;
        writeln!(log, "{line}").map_err(|e| Error::io(&log_path, e))?;
        let done = trainer.step; // step_once advanced it
        if done % run.checkpoint_every == 0 || done == trainer.config.max_steps {
            save(&trainer, done)?;
            trainer.last_checkpoint = Some(checkpoint_path.clone());
        }
        if done % 100 == 0 || done == trainer.config.max_steps {
            eprintln!(
                "step {done}/{}: j_ent {:.4} d_kl {:.4} d_rkl {:.4} lambda {:.3}",
                trainer.config.max_steps, metrics.j_ent, metrics.d_kl, metrics.d_rkl, metrics.lambda
            );
        }
    }
    eprintln!("checkpoint: {}", checkpoint_path.display());
    Ok(())
}

pub fn cmd_generate(args: &GenerateArgs) -> Result<()> {
    require_exists(&args.contexts)?;
    let (model, _) = load_checkpoint(&args.checkpoint)?;
    let vocab = load_vocab_for(&args.checkpoint, &args.vocab)?;
    check_vocab_compat(&model, &vocab)?;

    let gen = crate::infer::GenConfig {
        decode_mode: args.decode_mode.parse()?,
        top_k: args.top_k,
        max_new_tokens: args.max_new_tokens,
        seed: args.seed,
    };
    gen.validate()?;
    let contexts = infer::load_contexts(&args.contexts)?;
    let records = infer::generate_records(&model, &vocab, &contexts, &gen)?;
    infer::save_records(&records, &args.out)?;
    eprintln!("wrote {} records to {}", records.len(), args.out.display());
    Ok(())
}

pub fn cmd_evaluate(args: &EvaluateArgs) -> Result<()> {
    require_exists(&args.pairs)?;
    let (model, _) = load_checkpoint(&args.checkpoint)?;
    let vocab = load_vocab_for(&args.checkpoint, &args.vocab)?;
    check_vocab_compat(&model, &vocab)?;

    let raw_pairs = corpus::load_pairs_tsv(&args.pairs)?;
    let (pairs, dropped) = corpus::tokenize_pairs(&raw_pairs, &vocab);
    if dropped > 0 {
        eprintln!("dropped {dropped} unusable pairs");
    }
    if pairs.is_empty() {
        return Err(Error::contract("cmd_evaluate", "no evaluable pairs in split"));
    }

    let records: Vec<GenRecord> = match &args.gen_records {
        Some(path) => {
            require_exists(path)?;
            infer::load_records(path)?
        }
        None => {
            let gen = crate::infer::GenConfig {
                decode_mode: crate::infer::DecodeMode::Greedy,
                top_k: 1,
                max_new_tokens: args.max_new_tokens,
                seed: args.seed,
            };
            let contexts: Vec<String> = pairs.iter().map(|p| p.raw_context.clone()).collect();
            infer::generate_records(&model, &vocab, &contexts, &gen)?
        }
    };

    let external;
    let source = match &args.vectors {
        Some(path) => {
            require_exists(path)?;
            external = metrics::load_external_vectors(path)?;
            EmbeddingSource::ExternalVectors(&external)
        }
        None => EmbeddingSource::ModelEncoder {
            model: &model,
            vocab: &vocab,
        },
    };
    let report = metrics::report(&model, &pairs, &records, &source)?;
    let json = serde_json::to_string_pretty(&report)?;
    fs::write(&args.out, json).map_err(|e| Error::io(&args.out, e))?;
    println!("{}", report.table());
    Ok(())
}

pub fn cmd_analyze(args: &AnalyzeArgs) -> Result<()> {
    let mut run = RunConfig::from_file(&args.config)?;
    apply_overrides(&mut run, &args.overrides)?;
    let train_path = run
        .train_path
        .clone()
        .ok_or_else(|| Error::Config("data.train is required for the study".into()))?;
    let vocab_path = run
        .vocab_path
        .clone()
        .ok_or_else(|| Error::Config("data.vocab is required for the study".into()))?;
    require_exists(&train_path)?;
    require_exists(&vocab_path)?;
    fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    fs::write(args.out.join("resolved.config"), run.to_file_string())
        .map_err(|e| Error::io(args.out.join("resolved.config"), e))?;

    let vocab = corpus::Vocab::load(&vocab_path)?;
    let raw_pairs = corpus::load_pairs_tsv(&train_path)?;
    let (pairs, _) = corpus::tokenize_pairs(&raw_pairs, &vocab);

    let variants: Vec<LatentVariant> = match args.variant.as_str() {
        "both" => vec![LatentVariant::ClsToken, LatentVariant::AdditiveMixing],
        other => vec![other.parse()?],
    };
    for variant in variants {
        let name = match variant {
            LatentVariant::ClsToken => "cls_token",
            LatentVariant::AdditiveMixing => "additive_mixing",
        };
        eprintln!("running posterior-distance study: {name}");
        let study = run.study_config(vocab.len(), variant);
        let trace = posterior_distance_study(&pairs, &study)?;
        save_trace(&trace, &args.out.join(format!("trace_{name}.jsonl")))?;
        write_trace_svg(&trace, &args.out.join(format!("trace_{name}.svg")))?;
        for e in &trace.epochs {
            eprintln!(
                "  epoch {:>2}: mu_l1 {:.5}  var_l1 {:.5}",
                e.epoch, e.mu_l1, e.var_l1
            );
        }
    }
    Ok(())
}
