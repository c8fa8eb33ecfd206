//! The `melodapt` command line: corpus synthesis, the three training stages,
//! adaptive testing, evaluation, report comparison and the session server.

pub mod commands;
pub mod config;
pub mod report;

use std::fmt;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use melodapt::adaptation::{Method, Selection};

pub use config::RunConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Config,
    MissingInput,
    Schema,
    Runtime,
}

impl ErrorKind {
    fn as_str(self) -> &'static str {
        match self {
            Self::Usage => "usage",
            Self::Config => "config",
            Self::MissingInput => "missing-input",
            Self::Schema => "schema",
            Self::Runtime => "runtime",
        }
    }
}

/// An error reported as one tab-separated line on stderr.
#[derive(Debug, Clone, PartialEq)]
pub struct CliError {
    pub kind: ErrorKind,
    pub message: String,
}

impl CliError {
    fn new(kind: ErrorKind, message: impl Into<String>) -> Self {
        Self {
            kind,
            message: message.into().replace(['\n', '\t'], " "),
        }
    }

    pub fn usage(m: impl Into<String>) -> Self {
        Self::new(ErrorKind::Usage, m)
    }

    pub fn config(m: impl Into<String>) -> Self {
        Self::new(ErrorKind::Config, m)
    }

    pub fn missing(m: impl Into<String>) -> Self {
        Self::new(ErrorKind::MissingInput, m)
    }

    pub fn schema(m: impl Into<String>) -> Self {
        Self::new(ErrorKind::Schema, m)
    }

    pub fn runtime(m: impl fmt::Display) -> Self {
        Self::new(ErrorKind::Runtime, m.to_string())
    }

    pub fn exit_code(&self) -> i32 {
        match self.kind {
            ErrorKind::Runtime => 1,
            _ => 2,
        }
    }

    pub fn line(&self) -> String {
        format!("error\t{}\t{}", self.kind.as_str(), self.message)
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.line())
    }
}

impl std::error::Error for CliError {}

#[derive(Debug, Parser)]
#[command(name = "melodapt", version, about = "Interactive melody extraction with active meta-learning")]
pub struct Cli {
    /// TOML run configuration; flags override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Repeat for more log output on stderr.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the synthetic source, meta and target corpus with a manifest.
    SynthData(SynthArgs),
    /// Pre-train the base model on the source domain.
    Pretrain(TrainArgs),
    /// Train the confidence head on the frozen base model.
    TrainConfidence(TrainArgs),
    /// Meta-train the classifier and confidence heads.
    MetaTrain(TrainArgs),
    /// Adapt to every target episode with an annotator and report scores.
    MetaTest(MetaTestArgs),
    /// Score a model on a split without adaptation.
    Evaluate(EvalArgs),
    /// Merge reports into one results table.
    Compare(CompareArgs),
    /// Run the HTTP session service.
    Serve(ServeArgs),
}

fn on_off(s: &str) -> Result<bool, String> {
    match s {
        "on" | "true" => Ok(true),
        "off" | "false" => Ok(false),
        _ => Err(format!("expected on or off, got {s:?}")),
    }
}

fn method(s: &str) -> Result<Method, String> {
    Method::from_label(s).ok_or_else(|| format!("unknown method {s:?}; use CT, FT, MAML, w-MAML, AML or w-AML"))
}

/// Hyperparameter flags shared by the commands that use them.
#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    /// Architecture preset: paper or desk.
    #[arg(long)]
    pub preset: Option<String>,
    /// Epochs of the stage this command runs.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Learning rate of the stage this command runs (inner rate for meta stages).
    #[arg(long)]
    pub lr: Option<f32>,
    #[arg(long)]
    pub outer_lr: Option<f32>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub k: Option<usize>,
    /// Adaptation rounds at test time.
    #[arg(long = "s")]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub inner_steps: Option<usize>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub delta_cap: Option<f64>,
    #[arg(long, value_parser = on_off)]
    pub meta_weighting: Option<bool>,
    #[arg(long)]
    pub selection: Option<Selection>,
    /// Sets meta-weighting and selection together.
    #[arg(long, value_parser = method, conflicts_with_all = ["meta_weighting", "selection"])]
    pub method: Option<Method>,
    #[arg(long)]
    pub jobs: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Pretrain,
    Confidence,
    Meta,
    Test,
}

impl Overrides {
    /// Apply flags on top of the loaded configuration.
    pub fn apply(&self, cfg: &mut RunConfig, stage: Stage) -> Result<(), CliError> {
        if let Some(p) = &self.preset {
            cfg.model.preset = p.clone();
        }
        match stage {
            Stage::Pretrain => {
                set(&mut cfg.pretrain.epochs, self.epochs);
                set(&mut cfg.pretrain.learning_rate, self.lr);
            }
            Stage::Confidence => {
                set(&mut cfg.confidence.epochs, self.epochs);
                set(&mut cfg.confidence.learning_rate, self.lr);
            }
            Stage::Meta | Stage::Test => {
                set(&mut cfg.meta.epochs, self.epochs);
                set(&mut cfg.meta.inner_lr, self.lr);
            }
        }
        let m = &mut cfg.meta;
        set(&mut m.outer_lr, self.outer_lr);
        set(&mut m.k, self.k);
        set(&mut m.iterations, self.iterations);
        set(&mut m.inner_steps, self.inner_steps);
        set(&mut m.lambda, self.lambda);
        set(&mut m.delta_cap, self.delta_cap);
        set(&mut m.meta_weighting, self.meta_weighting);
        set(&mut m.selection, self.selection);
        if let Some(method) = self.method {
            m.meta_weighting = method.meta_weighting();
            m.selection = method.selection();
            if method == Method::Ct {
                m.iterations = 0;
            }
        }
        set(&mut cfg.run.seed, self.seed);
        set(&mut cfg.run.jobs, self.jobs);
        cfg.validate()
    }
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Clips in each of the source and meta domains.
    #[arg(long, default_value_t = 30)]
    pub clips: usize,
    #[arg(long, default_value_t = 40)]
    pub target_clips: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Input model (not used by pretrain).
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Optional per-epoch loss trace (TSV).
    #[arg(long)]
    pub trace: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Debug, Args)]
pub struct MetaTestArgs {
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Report path.
    #[arg(long)]
    pub out: PathBuf,
    /// Only `oracle` (labels from the manifest) is available offline.
    #[arg(long, default_value = "oracle")]
    pub annotator: String,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Defaults to the configured target domain.
    #[arg(long)]
    pub domain: Option<String>,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long)]
    pub domain: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    pub reports: Vec<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: std::net::SocketAddr,
    /// Session journal directory; sessions are in-memory without it.
    #[arg(long)]
    pub store: Option<PathBuf>,
    /// Expose this manifest's test episodes by id.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: Overrides,
}

/// Parsed arguments, or text clap already rendered (help, version).
pub enum Parsed {
    Text(String),
    Run(Cli),
}

pub fn parse<I, T>(args: I) -> Result<Parsed, CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => Ok(Parsed::Run(cli)),
        Err(e) => match e.kind() {
            clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => {
                Ok(Parsed::Text(e.render().to_string()))
            }
            _ => {
                let text = e.render().to_string();
                let first = text.lines().next().unwrap_or("invalid arguments");
                Err(CliError::usage(first.trim_start_matches("error: ")))
            }
        },
    }
}

/// Parse arguments and run; `Ok` carries text destined for stdout.
pub fn run<I, T>(args: I) -> Result<String, CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    match parse(args)? {
        Parsed::Text(t) => Ok(t),
        Parsed::Run(cli) => commands::dispatch(cli),
    }
}
