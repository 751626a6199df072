//! `bayesduo`: fit, tune, predict, evaluate and simulate active learning with
//! Bayesian projection layers on precomputed dual-encoder features.

mod commands;
mod table;

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use bayesduo_core::Error;
use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "bayesduo", version, about, args_override_self = true)]
struct Cli {
    /// JSON file whose keys are long flag names; command-line flags win.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Log more (repeat for debug output).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Estimate Kronecker factors for both projections (τ = λ = 1).
    Fit(FitArgs),
    /// Pick λ by the evidence and τ by validation NLPD.
    Tune(TuneArgs),
    /// Write per-row class probabilities and entropies.
    Predict(PredictArgs),
    /// Accuracy, NLPD and ECE of a probability CSV.
    Eval(EvalArgs),
    /// Simulated active learning; writes learning curves.
    Active(ActiveArgs),
    /// Compare the analytic chain with Monte-Carlo estimates.
    Oracle(OracleArgs),
    /// Generate a synthetic dual-encoder problem.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// Image encoder features (.bvm, n × d_in_img).
    #[arg(long)]
    pub features_img: PathBuf,
    /// Paired text encoder features (.bvm, n × d_in_txt).
    #[arg(long)]
    pub features_txt: PathBuf,
    /// Model bundle JSON.
    #[arg(long)]
    pub bundle: PathBuf,
    /// Rows per contrastive batch (default: one batch).
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Output directory; receives image/ and text/ posteriors.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct TuneArgs {
    /// Directory written by `fit`.
    #[arg(long)]
    pub posterior: PathBuf,
    /// Validation dataset manifest (must have labels).
    #[arg(long)]
    pub val: PathBuf,
    /// Class text features (.bvm, one row per class).
    #[arg(long)]
    pub class_text: PathBuf,
    /// Comma-separated τ values (default 1,5,10,…,200).
    #[arg(long, value_delimiter = ',')]
    pub tau_grid: Option<Vec<f64>>,
    /// Output directory for the tuned posteriors and tau_curve.csv.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    /// Directory holding image/ and text/ posteriors.
    #[arg(long)]
    pub posterior: PathBuf,
    /// Image features to classify (.bvm).
    #[arg(long)]
    pub features: PathBuf,
    #[arg(long)]
    pub class_text: PathBuf,
    /// Output CSV (p0,…,entropy).
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Probability CSV from `predict`.
    #[arg(long)]
    pub probs: PathBuf,
    /// Newline-delimited labels.
    #[arg(long)]
    pub labels: PathBuf,
    #[arg(long, default_value_t = bayesduo_core::metrics::DEFAULT_BINS)]
    pub bins: usize,
    /// Report JSON.
    #[arg(long)]
    pub out: PathBuf,
    /// Reliability table CSV.
    #[arg(long)]
    pub reliability: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct ActiveArgs {
    #[arg(long)]
    pub posterior: PathBuf,
    /// Pool dataset manifest (labels act as the oracle).
    #[arg(long)]
    pub pool: PathBuf,
    /// Test dataset manifest.
    #[arg(long)]
    pub test: PathBuf,
    #[arg(long)]
    pub class_text: PathBuf,
    /// Comma-separated strategies: random, targeted_random, entropy,
    /// targeted_entropy, bald, targeted_bald, epig.
    #[arg(long, value_delimiter = ',', default_value = "random")]
    pub strategy: Vec<String>,
    #[arg(long, value_delimiter = ',', default_value = "0,10,25,50,75,100,150,200")]
    pub budgets: Vec<usize>,
    #[arg(long, default_value_t = bayesduo_core::active::DEFAULT_GAMMA)]
    pub gamma: f64,
    #[arg(long, default_value_t = bayesduo_core::active::DEFAULT_BETA)]
    pub beta: f64,
    #[arg(long, default_value_t = 64)]
    pub n_theta: usize,
    #[arg(long, default_value_t = 32)]
    pub n_target: usize,
    /// expected_cosine or wasserstein2_diag.
    #[arg(long, default_value = "wasserstein2_diag")]
    pub metric: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Number of seeds, starting at --seed.
    #[arg(long, default_value_t = 1)]
    pub repeats: u64,
    /// Curve CSV.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct OracleArgs {
    #[arg(long)]
    pub posterior: PathBuf,
    #[arg(long)]
    pub features: PathBuf,
    #[arg(long)]
    pub class_text: PathBuf,
    /// cosine or predictive.
    #[arg(long, default_value = "cosine")]
    pub mode: String,
    #[arg(long, default_value_t = 10_000)]
    pub n_samples: usize,
    /// Only the first N feature rows.
    #[arg(long)]
    pub rows: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 32)]
    pub d_in: usize,
    #[arg(long, default_value_t = 16)]
    pub d_out: usize,
    #[arg(long, default_value_t = 1024)]
    pub n: usize,
    #[arg(long, default_value_t = 10)]
    pub classes: usize,
    /// Rows moved from the end into a validation split.
    #[arg(long, default_value_t = 0)]
    pub holdout: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

/// Turns `{"key": value}` into `--key value` tokens.
fn config_tokens(path: &Path) -> Result<Vec<OsString>, Error> {
    let text = std::fs::read_to_string(path).map_err(|e| table::io_error(path, e))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let obj = value
        .as_object()
        .ok_or_else(|| Error::Format(format!("{}: config must be a JSON object", path.display())))?;
    let mut tokens = Vec::new();
    for (key, v) in obj {
        let flag = format!("--{}", key.replace('_', "-"));
        let scalar = |v: &serde_json::Value| match v {
            serde_json::Value::String(s) => Ok(s.clone()),
            serde_json::Value::Number(n) => Ok(n.to_string()),
            other => Err(Error::Format(format!("{}: unsupported value for {key}: {other}", path.display()))),
        };
        match v {
            serde_json::Value::Bool(true) => tokens.push(flag.into()),
            serde_json::Value::Bool(false) | serde_json::Value::Null => {}
            serde_json::Value::Array(items) => {
                let joined = items.iter().map(scalar).collect::<Result<Vec<_>, _>>()?.join(",");
                tokens.push(flag.into());
                tokens.push(joined.into());
            }
            other => {
                tokens.push(flag.into());
                tokens.push(scalar(other)?.into());
            }
        }
    }
    Ok(tokens)
}

/// Splices config-file tokens in right after the subcommand name so that
/// later command-line flags override them.
fn expand_config(args: Vec<OsString>) -> Result<Vec<OsString>, Error> {
    let pos = args.iter().position(|a| a == "--config" || a.to_string_lossy().starts_with("--config="));
    let Some(pos) = pos else {
        return Ok(args);
    };
    let (path, consumed) = match args[pos].to_string_lossy().strip_prefix("--config=") {
        Some(p) => (PathBuf::from(p), 1),
        None => match args.get(pos + 1) {
            Some(p) => (PathBuf::from(p), 2),
            None => return Ok(args),
        },
    };
    let tokens = config_tokens(&path)?;
    let mut rest: Vec<OsString> = args;
    rest.drain(pos..pos + consumed);
    let sub = rest
        .iter()
        .position(|a| {
            matches!(
                a.to_str(),
                Some("fit" | "tune" | "predict" | "eval" | "active" | "oracle" | "synth")
            )
        })
        .map_or(rest.len(), |i| i + 1);
    rest.splice(sub..sub, tokens);
    Ok(rest)
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Numerical(_) | Error::DegenerateInput(_) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let raw: Vec<OsString> = std::env::args_os().collect();
    let args = match expand_config(raw) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(exit_code(&e));
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match &cli.command {
        Command::Fit(a) => commands::fit(a),
        Command::Tune(a) => commands::tune(a),
        Command::Predict(a) => commands::predict(a),
        Command::Eval(a) => commands::eval(a),
        Command::Active(a) => commands::active(a),
        Command::Oracle(a) => commands::oracle(a),
        Command::Synth(a) => commands::synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
