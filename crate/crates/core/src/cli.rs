//! Command-line front end. Every subcommand writes its outputs atomically and
//! leaves a JSON manifest with the resolved settings next to them.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::coverage::{coverage_csv, coverage_probability_parallel};
use crate::data::{
    generate_synthetic_corpus, load_token_corpus, write_token_corpus, CorpusFormat, SyntheticKind, SyntheticLanguage,
    SyntheticSpec,
};
use crate::error::{Error, Result};
use crate::evaluation::{passkey_sweep, sliding_window_perplexity, EvalModel};
use crate::experiment::{run_training, Manifest, RunConfig};
use crate::model::checkpoint;
use crate::position_plan::{build_plan, ContentStrategy, ExtensionConfig, PlanKind, PlanRecord};
use crate::rope::{run_invariant_suite, InterpolationKind, InterpolationStrategy};
use crate::util::write_atomic;

#[derive(Debug, Parser)]
#[command(name = "poselab", version, about = "Context-window extension experiments on a tiny transformer")]
pub struct Cli {
    /// Worker threads. 1 gives bit-identical reruns; more threads merge
    /// results in a fixed order.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample position plans and print one JSON object per line.
    Plan(PlanArgs),
    /// Estimate per-distance coverage probability as CSV.
    Coverage(CoverageArgs),
    /// Train a model from a JSON run config.
    Train(TrainArgs),
    /// Sliding-window perplexity of a checkpoint on a token file.
    EvalPpl(EvalPplArgs),
    /// Passkey retrieval accuracy per prompt length.
    Passkey(PasskeyArgs),
    /// Run the RoPE invariant checks.
    RopeCheck(RopeCheckArgs),
    /// Write a synthetic corpus in the binary token format.
    GenCorpus(GenCorpusArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct ExtensionArgs {
    /// Original context window L_c.
    #[arg(long)]
    pub original_len: usize,
    /// Target context window L_t.
    #[arg(long)]
    pub target_len: usize,
    /// Number of chunks N.
    #[arg(long, default_value_t = 2)]
    pub chunks: usize,
    /// How chunk contents are chosen: uniform-bias, zero-bias or equal-to-skip-bias.
    #[arg(long, default_value = "uniform-bias")]
    pub content_strategy: ContentStrategy,
    /// Plan family: pose, randpos or full.
    #[arg(long, default_value = "pose")]
    pub kind: PlanKind,
}

impl ExtensionArgs {
    fn config(&self) -> Result<ExtensionConfig> {
        let cfg = ExtensionConfig::new(self.original_len, self.target_len, self.chunks)?
            .with_content_strategy(self.content_strategy);
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Args, Serialize)]
pub struct PlanArgs {
    #[command(flatten)]
    pub ext: ExtensionArgs,
    /// Number of plans.
    #[arg(short = 'n', long = "count", default_value_t = 1)]
    pub count: usize,
    /// Length of the text the plans index into [default: target length].
    #[arg(long)]
    pub text_len: Option<usize>,
    /// Master seed.
    #[arg(long, env = "POSELAB_SEED", default_value_t = 0)]
    pub seed: u64,
    /// Write JSON lines here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct CoverageArgs {
    #[command(flatten)]
    pub ext: ExtensionArgs,
    /// Monte Carlo trials.
    #[arg(long, default_value_t = 10_000)]
    pub trials: usize,
    /// Master seed.
    #[arg(long, env = "POSELAB_SEED", default_value_t = 0)]
    pub seed: u64,
    /// Output CSV with columns relative_distance,probability.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
#[command(long_about = "Train a model from a JSON run config.\n\n\
The config has the fields schema_version (1), model, train, corpus and out_dir.\n\
Model defaults: ffn_mult 4, rope_base 10000, interpolation none, init_std 0.02.\n\
Train defaults: adamw betas 0.9/0.999, eps 1e-8, weight_decay 0.01, content_strategy uniform-bias, threads 1.\n\
Writes ckpt.bin, loss.csv and manifest.json into out_dir.")]
pub struct TrainArgs {
    /// JSON run config.
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides train.seed.
    #[arg(long, env = "POSELAB_SEED")]
    pub seed: Option<u64>,
    /// Overrides train.steps.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Overrides train.plan_kind.
    #[arg(long)]
    pub plan_kind: Option<PlanKind>,
    /// Overrides out_dir.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum TokenFormat {
    BinaryU16,
    Utf8Text,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalPplArgs {
    /// Checkpoint written by `train`.
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Evaluation text; every document is scored and the NLL pooled.
    #[arg(long)]
    pub tokens_file: PathBuf,
    #[arg(long, value_enum, default_value = "binary-u16")]
    pub format: TokenFormat,
    /// Evaluation window.
    #[arg(long)]
    pub window: usize,
    /// Stride between window starts [default: window].
    #[arg(long)]
    pub stride: Option<usize>,
    /// Interpolation applied at evaluation: none, linear, ntk or yarn.
    #[arg(long, default_value = "none")]
    pub strategy: InterpolationKind,
    /// Scaling factor [default: max(1, window / train_window)].
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Also write the CSV row here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct PasskeyArgs {
    /// Checkpoint written by `train`.
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Comma-separated prompt lengths.
    #[arg(long, value_delimiter = ',', default_value = "64,128,192,256")]
    pub lengths: Vec<usize>,
    /// Trials per length.
    #[arg(long, default_value_t = 50)]
    pub trials: usize,
    /// Master seed.
    #[arg(long, env = "POSELAB_SEED", default_value_t = 0)]
    pub seed: u64,
    /// Interpolation applied at evaluation: none, linear, ntk or yarn.
    #[arg(long, default_value = "none")]
    pub strategy: InterpolationKind,
    /// Scaling factor for the strategy [default: target_window / train_window].
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Also write the CSV here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct RopeCheckArgs {
    /// Master seed.
    #[arg(long, env = "POSELAB_SEED", default_value_t = 0)]
    pub seed: u64,
    /// Also write the CSV here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct GenCorpusArgs {
    /// recall-task or markov-text.
    #[arg(long, default_value = "recall-task")]
    pub kind: SyntheticKind,
    /// Number of documents.
    #[arg(long, default_value_t = 256)]
    pub docs: usize,
    /// Tokens per document.
    #[arg(long, default_value_t = 1024)]
    pub doc_len: usize,
    /// Master seed.
    #[arg(long, env = "POSELAB_SEED", default_value_t = 0)]
    pub seed: u64,
    /// Output file (little-endian u16 ids, 0xFFFF after each document).
    #[arg(long)]
    pub out: PathBuf,
}

/// Parses arguments and runs; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let mut stdout = std::io::stdout().lock();
    match run(&cli, &mut stdout) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Usage(_) => 2,
        _ => 1,
    }
}

fn manifest_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    out.with_file_name(name)
}

/// Writes `bytes` to `out` if given, else to `stdout`, and records a manifest
/// beside the file.
fn emit(
    stdout: &mut dyn Write,
    out: Option<&Path>,
    bytes: &[u8],
    command: &str,
    seed: u64,
    threads: usize,
    config: impl Serialize,
) -> Result<()> {
    match out {
        Some(path) => {
            write_atomic(path, bytes)?;
            let mut m = Manifest::new(command, seed, threads, config)?;
            m.outputs.push(path.to_path_buf());
            m.write(&manifest_path(path))
        }
        None => stdout.write_all(bytes).map_err(|e| Error::io("<stdout>", e)),
    }
}

pub fn run(cli: &Cli, stdout: &mut dyn Write) -> Result<()> {
    if cli.threads < 1 {
        return Err(Error::Usage("--threads must be at least 1".into()));
    }
    match &cli.command {
        Command::Plan(a) => plan(a, cli.threads, stdout),
        Command::Coverage(a) => coverage(a, cli.threads),
        Command::Train(a) => train(a, cli.threads),
        Command::EvalPpl(a) => eval_ppl(a, cli.threads, stdout),
        Command::Passkey(a) => passkey(a, cli.threads, stdout),
        Command::RopeCheck(a) => rope_check(a, cli.threads, stdout),
        Command::GenCorpus(a) => gen_corpus(a, cli.threads),
    }
}

fn plan(a: &PlanArgs, threads: usize, stdout: &mut dyn Write) -> Result<()> {
    let cfg = a.ext.config()?;
    let text_len = a.text_len.unwrap_or(cfg.target_len);
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let mut buf = Vec::new();
    for _ in 0..a.count {
        let p = build_plan(a.ext.kind, &cfg, text_len, &mut rng)?;
        serde_json::to_writer(&mut buf, &PlanRecord::from(&p))?;
        buf.push(b'\n');
    }
    emit(stdout, a.out.as_deref(), &buf, "plan", a.seed, threads, a)
}

fn coverage(a: &CoverageArgs, threads: usize) -> Result<()> {
    let cfg = a.ext.config()?;
    let probs = coverage_probability_parallel(&cfg, a.ext.kind, a.trials, a.seed, threads)?;
    emit(&mut std::io::sink(), Some(&a.out), &coverage_csv(&probs)?, "coverage", a.seed, threads, a)
}

fn train(a: &TrainArgs, threads: usize) -> Result<()> {
    let mut cfg = RunConfig::load(&a.config)?;
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    if let Some(s) = a.steps {
        cfg.train.steps = s;
    }
    if let Some(k) = a.plan_kind {
        cfg.train.plan_kind = k;
    }
    if let Some(d) = &a.out_dir {
        cfg.out_dir = d.clone();
    }
    cfg.train.threads = threads;
    let out = run_training(&cfg)?;
    log::info!(
        "final loss {:.4}; wrote {}",
        out.outcome.loss_trace.last().copied().unwrap_or(f64::NAN),
        out.checkpoint.display()
    );
    Ok(())
}

fn strategy_for(kind: InterpolationKind, alpha: Option<f64>, default_alpha: f64) -> InterpolationStrategy {
    match kind {
        InterpolationKind::None => InterpolationStrategy::none(),
        k => InterpolationStrategy::new(k, alpha.unwrap_or(default_alpha.max(1.0))),
    }
}

#[derive(Debug, Serialize)]
struct PplRow {
    window: usize,
    stride: usize,
    strategy: InterpolationKind,
    alpha: f64,
    perplexity: f64,
    mean_nll: f64,
    scored_tokens: usize,
}

fn eval_ppl(a: &EvalPplArgs, threads: usize, stdout: &mut dyn Write) -> Result<()> {
    let params = checkpoint::load(&a.ckpt)?;
    let format = match a.format {
        TokenFormat::BinaryU16 => CorpusFormat::BinaryU16 {
            vocab_size: params.config.vocab_size,
        },
        TokenFormat::Utf8Text => CorpusFormat::Utf8Text,
    };
    let corpus = load_token_corpus(&a.tokens_file, format, a.window + 1)?.corpus;
    if corpus.vocab_size > params.config.vocab_size {
        return Err(Error::config("token file vocabulary exceeds the model's"));
    }
    if corpus.is_empty() {
        return Err(Error::Data(format!("no document with at least {} tokens", a.window + 1)));
    }
    let stride = a.stride.unwrap_or(a.window);
    let strategy = strategy_for(a.strategy, a.alpha, a.window as f64 / params.config.train_window as f64);
    let model = EvalModel::with_strategy(&params, &strategy)?;
    let (mut nll, mut scored) = (0.0, 0);
    for doc in &corpus.documents {
        let r = sliding_window_perplexity(&model, doc, a.window, stride)?;
        nll += r.mean_nll * r.scored_tokens as f64;
        scored += r.scored_tokens;
    }
    let mean_nll = nll / scored as f64;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.serialize(PplRow {
        window: a.window,
        stride,
        strategy: strategy.kind,
        alpha: strategy.alpha,
        perplexity: mean_nll.exp(),
        mean_nll,
        scored_tokens: scored,
    })?;
    let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
    if let Some(out) = &a.out {
        emit(stdout, Some(out), &bytes, "eval-ppl", 0, threads, a)?;
    }
    stdout.write_all(&bytes).map_err(|e| Error::io("<stdout>", e))
}

#[derive(Debug, Serialize)]
struct PasskeyRow {
    length: usize,
    accuracy: f64,
}

fn passkey(a: &PasskeyArgs, threads: usize, stdout: &mut dyn Write) -> Result<()> {
    let params = checkpoint::load(&a.ckpt)?;
    let spec = SyntheticSpec::default();
    if spec.vocab.vocab_size > params.config.vocab_size {
        return Err(Error::config("model.vocab_size is smaller than the synthetic vocabulary"));
    }
    let lang = SyntheticLanguage::new(spec)?;
    let c = &params.config;
    let strategy = strategy_for(a.strategy, a.alpha, c.target_window as f64 / c.train_window as f64);
    let model = EvalModel::with_strategy(&params, &strategy)?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let results = passkey_sweep(&model, &lang, &a.lengths, a.trials, &mut rng)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in &results {
        w.serialize(PasskeyRow {
            length: r.length,
            accuracy: r.accuracy,
        })?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
    if let Some(out) = &a.out {
        emit(stdout, Some(out), &bytes, "passkey", a.seed, threads, a)?;
    }
    stdout.write_all(&bytes).map_err(|e| Error::io("<stdout>", e))
}

fn rope_check(a: &RopeCheckArgs, threads: usize, stdout: &mut dyn Write) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let outcomes = run_invariant_suite(&mut rng)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    for o in &outcomes {
        w.serialize(o)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
    if let Some(out) = &a.out {
        emit(stdout, Some(out), &bytes, "rope-check", a.seed, threads, a)?;
    }
    stdout.write_all(&bytes).map_err(|e| Error::io("<stdout>", e))?;
    match outcomes.iter().find(|o| !o.passed) {
        Some(o) => Err(Error::Data(format!("check {} failed: error {:e}", o.name, o.max_error))),
        None => Ok(()),
    }
}

fn gen_corpus(a: &GenCorpusArgs, threads: usize) -> Result<()> {
    let corpus = generate_synthetic_corpus(a.kind, &SyntheticSpec::default(), a.docs, a.doc_len, a.seed)?;
    write_token_corpus(&a.out, &corpus)?;
    let mut m = Manifest::new("gen-corpus", a.seed, threads, a)?;
    m.outputs.push(a.out.clone());
    m.write(&manifest_path(&a.out))
}
