//! Command-line driver: `generate`, `eval` and `make-test-model`.
//!
//! Exit codes: 0 on success, 2 on usage errors (bad flags, unreadable
//! model, invalid weights or dimensions), 1 on runtime failures.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};

use steered_core::conditioning::{
    DegenerationParams, DEFAULT_ATTENTION_WEIGHT, DEFAULT_CONDITION_WEIGHT,
    DEFAULT_DEGENERATION_THRESHOLD, DEFAULT_DEGENERATION_WINDOW, DEFAULT_EARLY_STOPPING_STEPS,
    DEFAULT_EMBED_WEIGHT, DEFAULT_MAX_TOKENS, DEFAULT_TOP_K,
};
use steered_core::evaluator::{evaluate_samples, read_samples, EvalOptions};
use steered_core::{
    generate, make_test_model, make_zero_model, read_model, write_model, Condition, Error,
    GenerationConfig, Method, MetricSelection, ModelConfig, SampleRecord, Tokenizer,
};

/// Fallback for `--jobs` when the flag is absent.
pub const JOBS_ENV: &str = "STEERED_DECODER_JOBS";

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "steered-decoder",
    version,
    about = "Conditioned text generation with a small decoder-only transformer"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample conditioned passages into a JSONL file plus a run manifest.
    Generate(GenerateArgs),
    /// Compute perplexity and Dist-n over a JSONL sample file.
    Eval(EvalArgs),
    /// Write a seeded random (or all-zero) model file.
    MakeTestModel(MakeTestModelArgs),
}

#[derive(Debug, Args)]
#[command(allow_negative_numbers = true)]
pub struct GenerateArgs {
    /// Model weight file.
    #[arg(long)]
    pub model: PathBuf,
    /// Vocabulary JSON (token string to id).
    #[arg(long)]
    pub vocab: PathBuf,
    /// BPE merges text file.
    #[arg(long)]
    pub merges: PathBuf,
    #[arg(long)]
    pub prompt: String,
    /// Attribute word, optionally with a weight: `word` or `word:weight`. Repeatable.
    #[arg(long = "condition", value_name = "WORD[:WEIGHT]", value_parser = parse_condition)]
    pub conditions: Vec<ConditionArg>,
    /// prefix, embedding, attention, next-token or combined.
    #[arg(long, default_value = "combined", value_parser = parse_method)]
    pub method: Method,
    /// Candidates kept per step.
    #[arg(long = "k", default_value_t = DEFAULT_TOP_K)]
    pub top_k: usize,
    /// Tokens generated per sample.
    #[arg(long, default_value_t = DEFAULT_MAX_TOKENS)]
    pub length: usize,
    #[arg(long, default_value_t = 1)]
    pub samples: usize,
    /// Seed of sample 0; sample i uses seed + i.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output JSONL path; the manifest is written next to it.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_EMBED_WEIGHT)]
    pub embed_weight: f64,
    #[arg(long, default_value_t = DEFAULT_ATTENTION_WEIGHT)]
    pub attention_weight: f64,
    #[arg(long, default_value_t = DEFAULT_CONDITION_WEIGHT)]
    pub condition_weight: f64,
    /// Generated tokens after which the conditional prefix is dropped.
    #[arg(long, default_value_t = DEFAULT_EARLY_STOPPING_STEPS)]
    pub early_stopping: usize,
    #[arg(long, default_value_t = 1.0)]
    pub temperature: f64,
    /// Use this text as the prefix instead of the generated sentence; empty disables it.
    #[arg(long)]
    pub prefix_text: Option<String>,
    /// Keep the prefix attached for the whole passage with positions restarted at 0.
    #[arg(long)]
    pub detached_prefix: bool,
    #[arg(long, default_value_t = DEFAULT_DEGENERATION_WINDOW)]
    pub degeneration_window: usize,
    #[arg(long, default_value_t = DEFAULT_DEGENERATION_THRESHOLD)]
    pub degeneration_threshold: f64,
    /// Worker threads for independent samples (default: all cores).
    #[arg(long, env = JOBS_ENV)]
    pub jobs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// JSONL file written by `generate`.
    #[arg(long)]
    pub samples: PathBuf,
    /// Reference model for perplexity.
    #[arg(long)]
    pub ref_model: Option<PathBuf>,
    /// Comma-separated subset of `ppl,dist`.
    #[arg(long, default_value = "ppl,dist")]
    pub metrics: String,
    /// Leave degenerate samples out of the aggregate.
    #[arg(long)]
    pub exclude_degenerate: bool,
    /// Write the report here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, env = JOBS_ENV)]
    pub jobs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct MakeTestModelArgs {
    /// Vocabulary size.
    #[arg(long = "v", default_value_t = 64)]
    pub vocab_size: usize,
    /// Embedding width.
    #[arg(long = "d", default_value_t = 32)]
    pub embed_dim: usize,
    #[arg(long, default_value_t = 2)]
    pub layers: usize,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    /// Context length.
    #[arg(long, default_value_t = 128)]
    pub ctx: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Write all-zero weights (a uniform next-token model).
    #[arg(long)]
    pub zero: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConditionArg {
    pub word: String,
    pub weight: Option<f64>,
}

fn parse_condition(s: &str) -> Result<ConditionArg, String> {
    let (word, weight) = match s.rsplit_once(':') {
        Some((word, w)) => {
            let w: f64 = w.parse().map_err(|_| format!("invalid weight {w:?}"))?;
            if !(w.is_finite() && w >= 0.0) {
                return Err(format!("condition weight must be non-negative, got {w}"));
            }
            (word, Some(w))
        }
        None => (s, None),
    };
    if word.is_empty() {
        return Err("condition word is empty".into());
    }
    Ok(ConditionArg {
        word: word.to_string(),
        weight,
    })
}

fn parse_method(s: &str) -> Result<Method, String> {
    s.parse::<Method>().map_err(|e| match e {
        Error::Usage(m) => m,
        other => other.to_string(),
    })
}

/// An error together with the exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    fn usage(message: impl fmt::Display) -> Self {
        Self {
            code: EXIT_USAGE,
            message: message.to_string(),
        }
    }

    fn runtime(message: impl fmt::Display) -> Self {
        Self {
            code: EXIT_RUNTIME,
            message: message.to_string(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_usage() {
            Failure::usage(e)
        } else {
            Failure::runtime(e)
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit code; diagnostics go to stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let result = match cli.command {
        Command::Generate(args) => run_generate(&args),
        Command::Eval(args) => run_eval(&args),
        Command::MakeTestModel(args) => run_make_test_model(&args),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(f) => {
            eprintln!("error: {f}");
            f.code
        }
    }
}

fn thread_pool(jobs: Option<usize>) -> Result<rayon::ThreadPool, Failure> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = jobs {
        if n == 0 {
            return Err(Failure::usage("--jobs must be at least 1"));
        }
        builder = builder.num_threads(n);
    }
    builder.build().map_err(Failure::runtime)
}

fn sha256_file(path: &Path) -> Result<String, Failure> {
    let bytes = fs::read(path).map_err(|e| Failure::runtime(format!("{}: {e}", path.display())))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Seconds since the epoch from `SOURCE_DATE_EPOCH`; absent otherwise so
/// that repeated runs produce identical manifests.
fn manifest_timestamp() -> Option<u64> {
    std::env::var("SOURCE_DATE_EPOCH").ok()?.trim().parse().ok()
}

pub fn manifest_path(out: &Path) -> PathBuf {
    let mut name = out.as_os_str().to_owned();
    name.push(".manifest.json");
    PathBuf::from(name)
}

#[derive(Debug, Serialize)]
struct FileDigest {
    path: String,
    sha256: String,
}

impl FileDigest {
    fn of(path: &Path) -> Result<Self, Failure> {
        Ok(Self {
            path: path.display().to_string(),
            sha256: sha256_file(path)?,
        })
    }
}

#[derive(Debug, Serialize)]
struct ManifestCondition {
    word: String,
    token_id: u32,
    weight: Option<f64>,
}

#[derive(Debug, Serialize)]
struct StrategyWeight {
    word: String,
    weight: f64,
}

#[derive(Debug, Serialize)]
struct ResolvedGenerate {
    prompt: String,
    method: Method,
    conditions: Vec<ManifestCondition>,
    top_k: usize,
    length: usize,
    samples: usize,
    seed: u64,
    embed_weight: f64,
    attention_weight: f64,
    condition_weight: f64,
    early_stopping: usize,
    temperature: f64,
    prefix_text: Option<String>,
    detached_prefix: bool,
    degeneration_window: usize,
    degeneration_threshold: f64,
    /// Per-strategy weights after defaults and method gating.
    effective: BTreeMap<&'static str, Vec<StrategyWeight>>,
}

#[derive(Debug, Serialize)]
struct RunManifest {
    tool: &'static str,
    version: &'static str,
    command: &'static str,
    timestamp: Option<u64>,
    config: ResolvedGenerate,
    inputs: BTreeMap<&'static str, FileDigest>,
    outputs: Vec<FileDigest>,
}

fn resolved_config(args: &GenerateArgs, gen: &GenerationConfig) -> ResolvedGenerate {
    let word_of = |id: u32| {
        gen.conditions
            .iter()
            .find(|c| c.token_id == id)
            .map(|c| c.word.clone())
            .unwrap_or_default()
    };
    let named = |list: Vec<steered_core::WeightedToken>| {
        list.into_iter()
            .map(|w| StrategyWeight {
                word: word_of(w.token_id),
                weight: w.weight,
            })
            .collect::<Vec<_>>()
    };
    let mut effective = BTreeMap::new();
    if gen.method.uses_prefix() {
        let prefix = gen
            .prefix_conditions()
            .into_iter()
            .map(|c| StrategyWeight {
                word: c.word.clone(),
                weight: 1.0,
            })
            .collect();
        effective.insert("prefix", prefix);
    }
    effective.insert("embedding", named(gen.embedding_conditions()));
    effective.insert("attention", named(gen.attention_conditions()));
    if gen.method.uses_next_token() {
        effective.insert("next_token", named(gen.next_token_conditions()));
    }
    ResolvedGenerate {
        prompt: args.prompt.clone(),
        method: gen.method,
        conditions: gen
            .conditions
            .iter()
            .map(|c| ManifestCondition {
                word: c.word.clone(),
                token_id: c.token_id,
                weight: c.weight,
            })
            .collect(),
        top_k: gen.top_k,
        length: gen.max_tokens,
        samples: args.samples,
        seed: args.seed,
        embed_weight: gen.embed_weight,
        attention_weight: gen.attention_weight,
        condition_weight: gen.condition_weight,
        early_stopping: gen.early_stopping_steps,
        temperature: gen.temperature,
        prefix_text: gen.prefix_text.clone(),
        detached_prefix: gen.detached_prefix_experiment,
        degeneration_window: gen.degeneration.window,
        degeneration_threshold: gen.degeneration.threshold,
        effective,
    }
}

fn load_model(path: &Path) -> Result<(ModelConfig, steered_core::Weights), Failure> {
    read_model(path)
        .map_err(|e| Failure::usage(format!("cannot read model {}: {e}", path.display())))
}

pub fn run_generate(args: &GenerateArgs) -> Result<(), Failure> {
    if args.samples == 0 {
        return Err(Failure::usage("--samples must be at least 1"));
    }
    let (config, weights) = load_model(&args.model)?;
    let tokenizer = Tokenizer::from_files(&args.vocab, &args.merges)
        .map_err(|e| Failure::usage(format!("cannot load tokenizer: {e}")))?;
    let conditions = args
        .conditions
        .iter()
        .map(|c| Condition::resolve(&c.word, &tokenizer, c.weight))
        .collect::<steered_core::Result<Vec<_>>>()?;
    let gen = GenerationConfig {
        method: args.method,
        conditions,
        top_k: args.top_k,
        embed_weight: args.embed_weight,
        attention_weight: args.attention_weight,
        condition_weight: args.condition_weight,
        early_stopping_steps: args.early_stopping,
        max_tokens: args.length,
        temperature: args.temperature,
        seed: args.seed,
        detached_prefix_experiment: args.detached_prefix,
        prefix_text: args.prefix_text.clone(),
        degeneration: DegenerationParams {
            window: args.degeneration_window,
            threshold: args.degeneration_threshold,
        },
    };
    gen.validate()?;

    let pool = thread_pool(args.jobs)?;
    let records: Vec<SampleRecord> = pool.install(|| {
        (0..args.samples)
            .into_par_iter()
            .map(|i| {
                let sample = GenerationConfig {
                    seed: args.seed.wrapping_add(i as u64),
                    ..gen.clone()
                };
                generate(&weights, &config, &tokenizer, &sample, &args.prompt)
            })
            .collect::<steered_core::Result<_>>()
    })?;

    let mut jsonl = String::new();
    for r in &records {
        jsonl.push_str(&r.to_json_line());
        jsonl.push('\n');
    }
    write_file(&args.out, jsonl.as_bytes())?;

    let inputs = BTreeMap::from([
        ("model", FileDigest::of(&args.model)?),
        ("vocab", FileDigest::of(&args.vocab)?),
        ("merges", FileDigest::of(&args.merges)?),
    ]);
    let manifest = RunManifest {
        tool: "steered-decoder",
        version: env!("CARGO_PKG_VERSION"),
        command: "generate",
        timestamp: manifest_timestamp(),
        config: resolved_config(args, &gen),
        inputs,
        outputs: vec![FileDigest::of(&args.out)?],
    };
    let mut text = serde_json::to_string_pretty(&manifest).map_err(Failure::runtime)?;
    text.push('\n');
    write_file(&manifest_path(&args.out), text.as_bytes())?;
    eprintln!("wrote {} samples to {}", records.len(), args.out.display());
    Ok(())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    fs::write(path, bytes)
        .map_err(|e| Failure::runtime(format!("cannot write {}: {e}", path.display())))
}

pub fn run_eval(args: &EvalArgs) -> Result<(), Failure> {
    let selection = MetricSelection::parse(&args.metrics)?;
    if selection.perplexity && args.ref_model.is_none() {
        return Err(Failure::usage("perplexity requested without --ref-model"));
    }
    let records = read_samples(&args.samples)
        .map_err(|e| Failure::runtime(format!("{}: {e}", args.samples.display())))?;
    let reference = match &args.ref_model {
        Some(path) if selection.perplexity => Some(load_model(path)?),
        _ => None,
    };
    let options = EvalOptions {
        exclude_degenerate: args.exclude_degenerate,
    };
    let pool = thread_pool(args.jobs)?;
    let report = pool.install(|| {
        evaluate_samples(
            &records,
            reference.as_ref().map(|(c, w)| (c, w)),
            selection,
            options,
        )
    })?;
    let mut text = report.to_json();
    text.push('\n');
    match &args.out {
        Some(path) => write_file(path, text.as_bytes()),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

pub fn run_make_test_model(args: &MakeTestModelArgs) -> Result<(), Failure> {
    let config = ModelConfig::new(
        args.vocab_size,
        args.ctx,
        args.embed_dim,
        args.layers,
        args.heads,
    )
    .map_err(Failure::usage)?;
    let weights = if args.zero {
        make_zero_model(&config)
    } else {
        make_test_model(&config, args.seed)
    };
    write_model(&args.out, &config, &weights)
        .map_err(|e| Failure::runtime(format!("cannot write {}: {e}", args.out.display())))
}
