//! `latent-steer` command line.
//!
//! Exit codes: 0 on success, 2 for usage errors (bad flags, missing model
//! files, out-of-range knobs), 1 for runtime failures. Generated text goes
//! to stdout; diagnostics go to stderr.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};

use latent_steer::attribute::{
    load_bow, train_discriminator, AttributeTarget, DiscrimTrainOptions, LinearDiscriminator, ObjectiveSign,
};
use latent_steer::eval::{generate_weighted, run_experiment, ExperimentPlan, WdOptions, REPORT_MD};
use latent_steer::lm::{train_lm, LmConfig, TokenizerKind, TrainOptions, TransformerLm};
use latent_steer::steer::{generate, generate_ranked, SampleRecord, SteeringConfig, SteeringPatch, Variant};
use latent_steer::Error;

use crate::models::{valid_name, ModelStore, DEFAULT_CHECKPOINT, MODEL_DIR_ENV};

#[derive(Debug, Parser)]
#[command(name = "latent-steer", version, about = "Steer a small transformer LM by perturbing its key/value history")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a language model on a text corpus.
    TrainLm(TrainLmArgs),
    /// Fit a linear discriminator on a frozen language model.
    TrainDiscrim(TrainDiscrimArgs),
    /// Generate one passage.
    Generate(GenerateArgs),
    /// Run an experiment plan and write its report.
    Eval(EvalArgs),
    /// Serve the HTTP API.
    Serve(ServeArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum TokenizerArg {
    Byte,
    Word,
}

#[derive(Debug, Args)]
pub struct TrainLmArgs {
    /// UTF-8 training text.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Checkpoint directory to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Start from the perplexity-evaluator architecture instead of the generator's.
    #[arg(long)]
    pub evaluator: bool,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub context: Option<usize>,
    #[arg(long, value_enum, default_value = "word")]
    pub tokenizer: TokenizerArg,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seq_len: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainDiscrimArgs {
    /// Tab-separated `label<TAB>text` rows.
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint directory or checkpoint name under the model root.
    #[arg(long)]
    pub lm: String,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub model_dir: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub train_fraction: Option<f64>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub prefix: String,
    #[arg(long, default_value_t = 20)]
    pub length: usize,
    /// B, BR, BC, BCR or WD; defaults to BC with an attribute, B without.
    #[arg(long)]
    pub variant: Option<Variant>,
    /// Bag-of-words file, or list name under the model root.
    #[arg(long, conflicts_with = "discrim")]
    pub bow: Option<String>,
    /// Discriminator directory, or name under the model root.
    #[arg(long, requires = "class")]
    pub discrim: Option<String>,
    #[arg(long)]
    pub class: Option<String>,
    /// Steer away from the attribute.
    #[arg(long)]
    pub negate: bool,
    /// Checkpoint directory or name; defaults to `default` under the model root.
    #[arg(long)]
    pub lm: Option<String>,
    /// Model root; defaults to $LATENT_STEER_MODEL_DIR.
    #[arg(long)]
    pub model_dir: Option<PathBuf>,
    #[arg(long)]
    pub stepsize: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub num_iterations: Option<usize>,
    #[arg(long)]
    pub kl_scale: Option<f64>,
    #[arg(long)]
    pub gm_scale: Option<f64>,
    #[arg(long)]
    pub window_length: Option<usize>,
    #[arg(long)]
    pub grad_length: Option<usize>,
    #[arg(long)]
    pub top_k: Option<usize>,
    #[arg(long)]
    pub num_samples: Option<usize>,
    #[arg(long)]
    pub dist_threshold: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Weighted-decoding boost for BoW targets (WD only).
    #[arg(long)]
    pub wd_boost: Option<f64>,
    /// Print the full sample record as JSON instead of the text.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Experiment plan (JSON).
    #[arg(long)]
    pub plan: PathBuf,
    /// Output directory; an interrupted run resumes here.
    #[arg(long)]
    pub out: PathBuf,
    /// Base for relative plan paths; defaults to the plan's directory.
    #[arg(long)]
    pub root: Option<PathBuf>,
    /// Overrides the plan's worker count.
    #[arg(long)]
    pub workers: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: String,
    /// Model root; defaults to $LATENT_STEER_MODEL_DIR.
    #[arg(long)]
    pub model_dir: Option<PathBuf>,
}

/// Failure classes mapped to exit codes.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Runtime(e)
    }
}

/// Library errors caused by the invocation itself are usage errors.
fn classify(e: Error) -> CliError {
    match e {
        Error::InvalidField { .. } | Error::MissingPath(_) | Error::Capacity { .. } | Error::Contract(_) => {
            CliError::Usage(e.to_string())
        }
        other => CliError::Runtime(other.into()),
    }
}

type CliResult<T> = Result<T, CliError>;

/// Parses `argv`, runs the command, and reports errors on stderr.
pub fn main_with(argv: impl IntoIterator<Item = impl Into<OsString> + Clone>) -> ExitCode {
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            match &e {
                CliError::Usage(m) => eprintln!("error: {m}"),
                CliError::Runtime(err) => eprintln!("error: {err:#}"),
            }
            ExitCode::from(e.exit_code())
        }
    }
}

pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::TrainLm(a) => train_lm_cmd(a),
        Command::TrainDiscrim(a) => train_discrim_cmd(a),
        Command::Generate(a) => {
            let record = generate_cmd(&a)?;
            if a.json {
                println!("{}", serde_json::to_string(&record).context("serialising the sample")?);
            } else {
                println!("{}", record.text);
            }
            Ok(())
        }
        Command::Eval(a) => eval_cmd(a),
        Command::Serve(a) => serve_cmd(a),
    }
}

fn model_root(flag: Option<&Path>) -> Option<PathBuf> {
    flag.map(Path::to_path_buf).or_else(|| std::env::var_os(MODEL_DIR_ENV).map(PathBuf::from))
}

/// `arg` as an existing path, else as a name under the model root.
fn resolve(
    arg: &str,
    what: &str,
    root: Option<&Path>,
    under_root: impl Fn(&ModelStore, &str) -> PathBuf,
) -> CliResult<PathBuf> {
    let direct = PathBuf::from(arg);
    if direct.exists() {
        return Ok(direct);
    }
    let mut tried = vec![direct.display().to_string()];
    if let Some(root) = root {
        let stem = Path::new(arg).file_stem().and_then(|s| s.to_str()).unwrap_or(arg);
        if valid_name(stem) {
            let candidate = under_root(&ModelStore::new(root), stem);
            if candidate.exists() {
                return Ok(candidate);
            }
            tried.push(candidate.display().to_string());
        }
    }
    Err(CliError::Usage(format!("no {what} `{arg}` (tried {})", tried.join(", "))))
}

fn load_lm(arg: Option<&str>, root: Option<&Path>) -> CliResult<TransformerLm<f32>> {
    let path = match (arg, root) {
        (Some(a), _) => resolve(a, "checkpoint", root, ModelStore::lm_path)?,
        (None, Some(r)) => resolve(DEFAULT_CHECKPOINT, "checkpoint", Some(r), ModelStore::lm_path)?,
        (None, None) => {
            return Err(CliError::Usage(format!("no checkpoint: pass --lm or set {MODEL_DIR_ENV}")));
        }
    };
    TransformerLm::<f32>::load(&path).map_err(classify)
}

fn train_lm_cmd(a: TrainLmArgs) -> CliResult<()> {
    let base = if a.evaluator { LmConfig::evaluator() } else { LmConfig::default() };
    let config = LmConfig {
        n_layers: a.layers.unwrap_or(base.n_layers),
        n_heads: a.heads.unwrap_or(base.n_heads),
        d_model: a.d_model.unwrap_or(base.d_model),
        max_context: a.context.unwrap_or(base.max_context),
        tokenizer_kind: match a.tokenizer {
            TokenizerArg::Byte => TokenizerKind::Byte,
            TokenizerArg::Word => TokenizerKind::Word,
        },
        ..base
    };
    let d = TrainOptions::default();
    let options = TrainOptions {
        epochs: a.epochs.unwrap_or(d.epochs),
        lr: a.lr.unwrap_or(d.lr),
        seed: a.seed.unwrap_or(d.seed),
        batch_size: a.batch_size.unwrap_or(d.batch_size),
        seq_len: a.seq_len.unwrap_or(d.seq_len),
        ..d
    };
    if !a.corpus.is_file() {
        return Err(CliError::Usage(format!("no corpus `{}`", a.corpus.display())));
    }
    let (lm, report) = train_lm(&a.corpus, &config, &options).map_err(classify)?;
    lm.save(&a.out).with_context(|| format!("writing {}", a.out.display()))?;
    eprintln!("saved {} (final held-out loss {:.4})", a.out.display(), report.final_loss());
    println!("{}", serde_json::to_string_pretty(&report).context("serialising the report")?);
    Ok(())
}

fn train_discrim_cmd(a: TrainDiscrimArgs) -> CliResult<()> {
    let root = model_root(a.model_dir.as_deref());
    let lm = load_lm(Some(&a.lm), root.as_deref())?;
    if !a.data.is_file() {
        return Err(CliError::Usage(format!("no dataset `{}`", a.data.display())));
    }
    let d = DiscrimTrainOptions::default();
    let options = DiscrimTrainOptions {
        epochs: a.epochs.unwrap_or(d.epochs),
        lr: a.lr.unwrap_or(d.lr),
        seed: a.seed.unwrap_or(d.seed),
        batch_size: a.batch_size.unwrap_or(d.batch_size),
        train_fraction: a.train_fraction.unwrap_or(d.train_fraction),
    };
    let (disc, report) = train_discriminator(&a.data, &lm, &options).map_err(classify)?;
    disc.save(&a.out).with_context(|| format!("writing {}", a.out.display()))?;
    eprintln!(
        "saved {} (train accuracy {:.3}, held-out accuracy {:.3})",
        a.out.display(),
        report.train_accuracy,
        report.heldout_accuracy
    );
    println!("{}", serde_json::to_string_pretty(&report).context("serialising the report")?);
    Ok(())
}

/// The steering config a `generate` invocation asks for.
pub fn steering_config(a: &GenerateArgs) -> CliResult<SteeringConfig> {
    let base = if a.discrim.is_some() { SteeringConfig::discrim_defaults() } else { SteeringConfig::bow_defaults() };
    let patch = SteeringPatch {
        stepsize: a.stepsize,
        gamma: a.gamma,
        num_iterations: a.num_iterations,
        kl_scale: a.kl_scale,
        gm_scale: a.gm_scale,
        window_length: a.window_length,
        grad_length: a.grad_length,
        top_k: a.top_k,
        num_samples: a.num_samples,
        dist_threshold: a.dist_threshold,
        objective_sign: a.negate.then_some(ObjectiveSign::Minus),
        seed: a.seed,
    };
    base.patched(&patch).map_err(classify)
}

pub fn generate_cmd(a: &GenerateArgs) -> CliResult<SampleRecord> {
    let cfg = steering_config(a)?;
    let variant = a.variant.unwrap_or(if a.bow.is_some() || a.discrim.is_some() { Variant::BC } else { Variant::B });
    if variant != Variant::B && a.bow.is_none() && a.discrim.is_none() {
        return Err(CliError::Usage(format!("--variant {variant} needs --bow or --discrim")));
    }
    let root = model_root(a.model_dir.as_deref());
    let lm = load_lm(a.lm.as_deref(), root.as_deref())?;
    let sign = if a.negate { ObjectiveSign::Minus } else { ObjectiveSign::Plus };
    let target = if let Some(bow) = &a.bow {
        let path = resolve(bow, "bag-of-words list", root.as_deref(), ModelStore::bow_path)?;
        Some(AttributeTarget::bow(load_bow(&path, lm.tokenizer()).map_err(classify)?, sign))
    } else if let Some(discrim) = &a.discrim {
        let path = resolve(discrim, "discriminator", root.as_deref(), ModelStore::discrim_path)?;
        let d = LinearDiscriminator::<f32>::load(&path).map_err(classify)?;
        let class = a.class.as_deref().expect("clap requires --class with --discrim");
        let idx = d
            .class_index(class)
            .ok_or_else(|| CliError::Usage(format!("--class `{class}` is not one of {:?}", d.class_names)))?;
        Some(AttributeTarget::discriminator(d, idx, sign).map_err(classify)?)
    } else {
        None
    };
    let record = match variant {
        Variant::B | Variant::BC => generate(&lm, &a.prefix, a.length, target.as_ref(), &cfg, variant),
        Variant::BR | Variant::BCR => {
            generate_ranked(&lm, &a.prefix, a.length, target.as_ref().expect("checked above"), &cfg, variant)
                .map(|r| r.best)
        }
        Variant::WD => {
            let opts =
                WdOptions { wd_boost: a.wd_boost.unwrap_or(WdOptions::default().wd_boost), ..WdOptions::default() };
            generate_weighted(&lm, &a.prefix, a.length, target.as_ref().expect("checked above"), &opts, cfg.seed)
        }
    };
    record.map_err(classify)
}

fn eval_cmd(a: EvalArgs) -> CliResult<()> {
    let text = fs::read_to_string(&a.plan)
        .map_err(|e| CliError::Usage(format!("reading plan `{}`: {e}", a.plan.display())))?;
    let mut plan: ExperimentPlan =
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("plan `{}`: {e}", a.plan.display())))?;
    if let Some(w) = a.workers {
        plan.config.workers = w;
    }
    let root = a.root.unwrap_or_else(|| a.plan.parent().map(Path::to_path_buf).unwrap_or_default());
    let experiment = plan.resolve(&root).map_err(classify)?;
    let outcome = run_experiment(&experiment, &a.out).map_err(classify)?;
    eprintln!(
        "{} samples ({} cells resumed) written to {}",
        outcome.records.len(),
        outcome.resumed_cells,
        a.out.display()
    );
    let md = fs::read_to_string(a.out.join(REPORT_MD)).context("reading the report")?;
    print!("{md}");
    Ok(())
}

fn serve_cmd(a: ServeArgs) -> CliResult<()> {
    let root = model_root(a.model_dir.as_deref())
        .ok_or_else(|| CliError::Usage(format!("no model root: pass --model-dir or set {MODEL_DIR_ENV}")))?;
    if !root.is_dir() {
        return Err(CliError::Usage(format!("model root `{}` is not a directory", root.display())));
    }
    let store = Arc::new(ModelStore::new(root));
    let runtime = tokio::runtime::Runtime::new().context("starting the async runtime")?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&a.addr).await.with_context(|| format!("binding {}", a.addr))?;
        log::info!("listening on {}", listener.local_addr()?);
        crate::server::serve(listener, store).await.context("serving")?;
        Ok::<_, anyhow::Error>(())
    })?;
    Ok(())
}
