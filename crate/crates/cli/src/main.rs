//! `mdat`: synthetic data, training, cross-validation, gradient checks,
//! divergence oracles and generalization-bound reports.
//!
//! Exit codes: 0 success, 1 failed check or runtime error, 2 usage or
//! configuration error. Errors are printed to stderr as
//! `{"error": {"kind": ..., "message": ...}}`.

mod commands;
mod config;
mod instance;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgAction, Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "mdat", version, about = "Margin-discrepancy adversarial training for multi-domain text classification")]
struct Cli {
    /// Log progress to stderr (-v info, -vv debug).
    #[arg(short, long, global = true, action = ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic multi-domain corpus with a manifest.
    Synth(SynthArgs),
    /// Train a model; writes metrics.csv, summary.json and model.ckpt.
    Train(TrainArgs),
    /// k-fold cross-validation over the labeled pools.
    Crossval(CrossvalArgs),
    /// Finite-difference check of every loss gradient on a built-in toy corpus.
    Gradcheck(GradcheckArgs),
    /// Exhaustive divergence values on a finite instance file.
    Oracle(OracleArgs),
    /// Numerical generalization-bound report for a trained checkpoint.
    Bound(BoundArgs),
}

/// Settings that mirror the run configuration keys.
#[derive(Args, Debug, Clone, Default)]
pub struct RunArgs {
    /// Run configuration file (`key = value` lines); flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Corpus manifest.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// mdat or mdat-l1.
    #[arg(long)]
    pub variant: Option<String>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Evaluate the test sets every this many epochs (0: final epoch only).
    #[arg(long)]
    pub eval_every: Option<usize>,
    /// Withhold this domain's labels (name or index) and evaluate it with
    /// the domain-specific features zeroed.
    #[arg(long)]
    pub msuda: Option<String>,
    /// Fraction of each labeled pool held out for model selection.
    #[arg(long)]
    pub dev_fraction: Option<f64>,
    /// Layer-size preset: standard or compact.
    #[arg(long)]
    pub arch: Option<String>,
    /// Comma-separated hidden widths of the shared extractor.
    #[arg(long)]
    pub shared_hidden: Option<String>,
    #[arg(long)]
    pub d_s: Option<usize>,
    #[arg(long)]
    pub specific_hidden: Option<String>,
    #[arg(long)]
    pub d_p: Option<usize>,
    #[arg(long)]
    pub classifier_hidden: Option<String>,
    #[arg(long)]
    pub keep_prob: Option<f64>,
    /// Run the feature-alignment diagnostic at the first and last epoch.
    #[arg(long)]
    pub diagnostic: Option<bool>,
    #[arg(long)]
    pub folds: Option<usize>,
    /// Threads for cross-validation folds.
    #[arg(long)]
    pub workers: Option<usize>,
}

impl RunArgs {
    pub fn overrides(&self) -> Vec<(&'static str, Option<String>)> {
        fn s<T: ToString>(v: &Option<T>) -> Option<String> {
            v.as_ref().map(ToString::to_string)
        }
        vec![
            ("manifest", self.manifest.as_ref().map(|p| p.display().to_string())),
            ("out_dir", self.out_dir.as_ref().map(|p| p.display().to_string())),
            ("variant", s(&self.variant)),
            ("alpha", s(&self.alpha)),
            ("beta", s(&self.beta)),
            ("lr", s(&self.lr)),
            ("batch_size", s(&self.batch_size)),
            ("epochs", s(&self.epochs)),
            ("seed", s(&self.seed)),
            ("eval_every", s(&self.eval_every)),
            ("msuda", s(&self.msuda)),
            ("dev_fraction", s(&self.dev_fraction)),
            ("arch", s(&self.arch)),
            ("shared_hidden", s(&self.shared_hidden)),
            ("d_s", s(&self.d_s)),
            ("specific_hidden", s(&self.specific_hidden)),
            ("d_p", s(&self.d_p)),
            ("classifier_hidden", s(&self.classifier_hidden)),
            ("keep_prob", s(&self.keep_prob)),
            ("diagnostic", s(&self.diagnostic)),
            ("folds", s(&self.folds)),
            ("workers", s(&self.workers)),
        ]
    }

    pub fn resolve(&self) -> mdat_core::Result<config::RunConfig> {
        config::RunConfig::build(self.config.as_deref(), &self.overrides())
    }
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Number of domains.
    #[arg(long)]
    pub domains: Option<usize>,
    #[arg(long)]
    pub vocab: Option<usize>,
    /// Labeled samples per domain.
    #[arg(long)]
    pub labeled: Option<usize>,
    #[arg(long)]
    pub unlabeled: Option<usize>,
    #[arg(long)]
    pub test: Option<usize>,
    /// Fraction of the vocabulary whose polarity varies by domain.
    #[arg(long)]
    pub flip_fraction: Option<f64>,
    /// Label noise rate.
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub doc_len_min: Option<usize>,
    #[arg(long)]
    pub doc_len_max: Option<usize>,
    #[arg(long)]
    pub min_margin: Option<f64>,
    #[arg(long)]
    pub topic_fraction: Option<f64>,
    #[arg(long)]
    pub topic_boost: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Args, Debug)]
pub struct CrossvalArgs {
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Sampled coordinates per parameter component.
    #[arg(long, default_value_t = 60)]
    pub coords: usize,
    /// Inject a gradient error (negative control for the checker).
    #[arg(long, hide = true)]
    pub corrupt_backward: bool,
}

#[derive(Args, Debug)]
pub struct OracleArgs {
    /// Instance file.
    #[arg(long)]
    pub instance: PathBuf,
    /// Ramp margins for the margin discrepancy (comma-separated).
    #[arg(long, value_delimiter = ',', default_values_t = [4f64.ln()])]
    pub rho: Vec<f64>,
    /// Pairwise label loss of the discrepancy divergence.
    #[arg(long, default_value = "squared", value_parser = ["zero-one", "squared"])]
    pub loss: String,
}

#[derive(Args, Debug)]
pub struct BoundArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Ramp margin; defaults to ln(beta).
    #[arg(long)]
    pub rho: Option<f64>,
    /// Confidence parameter, in (0, 1/3).
    #[arg(long, default_value_t = 0.05)]
    pub delta: f64,
    /// Monte-Carlo sign draws per Rademacher estimate.
    #[arg(long, default_value_t = 200)]
    pub draws: usize,
    /// Per-domain cap on samples behind the estimates.
    #[arg(long, default_value_t = 200)]
    pub max_samples: usize,
    /// Half-width of the parameter box searched around the output layer.
    #[arg(long, default_value_t = 0.1)]
    pub scale: f64,
    #[arg(long, default_value_t = 4)]
    pub restarts: usize,
    #[arg(long, default_value_t = 8)]
    pub local_steps: usize,
    /// json or kv.
    #[arg(long, default_value = "json", value_parser = ["json", "kv"])]
    pub format: String,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).format_timestamp(None).init();
    let result = match &cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Train(a) => commands::train(a),
        Command::Crossval(a) => commands::crossval(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
        Command::Oracle(a) => commands::oracle(a),
        Command::Bound(a) => commands::bound(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            let body = serde_json::json!({"error": {"kind": e.kind(), "message": e.to_string()}});
            eprint!("{}", output::to_json(&body));
            match e.kind() {
                "usage" | "config" => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
