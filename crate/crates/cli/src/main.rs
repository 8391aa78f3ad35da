//! `qelab`: trains and evaluates layer-selective adapter QE models, runs
//! prompt baselines, and merges results into comparison tables.

mod commands;
mod config;
mod prompt;
mod report;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use qelab::adapters::AdapterKind;
use qelab::data::{IngestMode, Manifest};
use qelab::prompting::TemplateKind;
use qelab::qe_head::{PoolingStrategy, ScoreScale};
use serde::de::DeserializeOwned;

use config::{ClientKind, ExperimentConfig, Format};
use run::UsageError;

#[derive(Parser)]
#[command(name = "qelab", version, about = "Translation quality estimation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one (rank, alpha, layer) configuration.
    Train(Overrides),
    /// Train every grid cell and write layer-sweep tables.
    Sweep(Overrides),
    /// Score a dataset with a saved checkpoint.
    Evaluate(Overrides),
    /// Prompt-based baselines.
    #[command(subcommand)]
    Prompt(PromptCommand),
    /// Merge run directories into one comparison table.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Write a planted-signal dataset.
    Synth {
        /// Directory to create; must be empty or absent.
        #[arg(long)]
        dest: PathBuf,
        /// Match the released per-domain split sizes.
        #[arg(long)]
        release_counts: bool,
        #[command(flatten)]
        overrides: Overrides,
    },
}

#[derive(Subcommand)]
enum PromptCommand {
    /// Write one prompt file per test record.
    Render(Overrides),
    /// Send prompts to a scorer and correlate its answers.
    Score(Overrides),
}

fn parse_enum<T: DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.into())).map_err(|e| e.to_string())
}

fn parse_pair(s: &str) -> Result<(usize, f64), String> {
    let (r, a) = s.split_once(':').ok_or_else(|| format!("expected RANK:ALPHA, got {s:?}"))?;
    Ok((r.parse().map_err(|e| format!("{r:?}: {e}"))?, a.parse().map_err(|e| format!("{a:?}: {e}"))?))
}

/// Flags shared by every command. Each one overrides the config file.
#[derive(Args, Debug, Default)]
struct Overrides {
    /// JSON experiment config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Parent directory for run directories.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Master seed for model, training, data and exemplars.
    #[arg(long)]
    seed: Option<u64>,
    /// Dataset directory with train/test files; synthetic data if unset.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, value_enum)]
    format: Option<Format>,
    /// Skip malformed lines instead of failing.
    #[arg(long)]
    lenient: bool,
    /// Split-count manifest the data must match.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    synthetic_n: Option<usize>,
    /// Noise std of synthetic DA scores.
    #[arg(long)]
    noise: Option<f64>,

    #[arg(long)]
    n_layers: Option<usize>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    n_heads: Option<usize>,
    #[arg(long)]
    d_ff: Option<usize>,
    #[arg(long)]
    max_seq_len: Option<usize>,

    /// Layer feeding the head; negative counts from the top.
    #[arg(long, allow_negative_numbers = true)]
    layer: Option<i64>,
    /// lora or lorma.
    #[arg(long, value_parser = parse_enum::<AdapterKind>)]
    adapter: Option<AdapterKind>,
    #[arg(long)]
    rank: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Store frozen weights as 4-bit codes.
    #[arg(long)]
    quantize: bool,
    /// mean or last.
    #[arg(long, value_parser = parse_enum::<PoolingStrategy>)]
    pooling: Option<PoolingStrategy>,
    /// unit_interval or raw_0_100.
    #[arg(long, value_parser = parse_enum::<ScoreScale>)]
    score_scale: Option<ScoreScale>,

    /// Sweep layers, comma separated.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    layers: Option<Vec<i64>>,
    /// Sweep RANK:ALPHA pairs, comma separated.
    #[arg(long, value_delimiter = ',', value_parser = parse_pair)]
    pairs: Option<Vec<(usize, f64)>>,
    #[arg(long)]
    eval_threads: Option<usize>,
    /// Label for comparison reports.
    #[arg(long)]
    method: Option<String>,
    /// Checkpoint for `evaluate`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,

    /// zero_shot, few_shot or few_shot_guidelines.
    #[arg(long, value_parser = parse_enum::<TemplateKind>)]
    kind: Option<TemplateKind>,
    /// Exemplars per prompt.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, value_enum)]
    client: Option<ClientKind>,
    #[arg(long)]
    fixed_response: Option<String>,
    #[arg(long)]
    endpoint: Option<String>,
    #[arg(long)]
    model_name: Option<String>,
    #[arg(long)]
    concurrency: Option<usize>,
    #[arg(long)]
    templates_dir: Option<PathBuf>,
}

macro_rules! set {
    ($($src:expr => $dst:expr),* $(,)?) => {
        $(if let Some(v) = $src { $dst = v; })*
    };
}

impl Overrides {
    /// Defaults, then the config file, then flags.
    fn resolve(self) -> anyhow::Result<ExperimentConfig> {
        let mut c = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        set! {
            self.out => c.output_dir,
            self.format => c.data.format,
            self.synthetic_n => c.data.synthetic.n,
            self.noise => c.data.synthetic.signal.noise_std,
            self.n_layers => c.model.n_layers,
            self.d_model => c.model.d_model,
            self.n_heads => c.model.n_heads,
            self.d_ff => c.model.d_ff,
            self.max_seq_len => c.model.max_seq_len,
            self.layer => c.train.layer_index,
            self.adapter => c.train.adapter.kind,
            self.rank => c.train.adapter.rank,
            self.alpha => c.train.adapter.alpha,
            self.epochs => c.train.epochs,
            self.batch_size => c.train.batch_size,
            self.lr => c.train.learning_rate,
            self.pooling => c.train.pooling,
            self.score_scale => c.train.score_scale,
            self.layers => c.grid.layers,
            self.pairs => c.grid.pairs,
            self.eval_threads => c.eval_threads,
            self.kind => c.prompt.kind,
            self.k => c.prompt.k,
            self.client => c.prompt.client,
            self.fixed_response => c.prompt.fixed_response,
            self.model_name => c.prompt.model_name,
            self.concurrency => c.prompt.concurrency,
        }
        if self.seed.is_some() {
            c.seed = self.seed;
        }
        if self.data.is_some() {
            c.data.dir = self.data;
        }
        if self.manifest.is_some() {
            c.data.manifest = self.manifest;
        }
        if self.method.is_some() {
            c.method = self.method;
        }
        if self.checkpoint.is_some() {
            c.checkpoint = self.checkpoint;
        }
        if self.endpoint.is_some() {
            c.prompt.endpoint = self.endpoint;
        }
        if self.templates_dir.is_some() {
            c.prompt.templates_dir = self.templates_dir;
        }
        if self.lenient {
            c.data.mode = IngestMode::Lenient;
        }
        if self.quantize {
            c.train.quantize_base = true;
        }
        Ok(c.resolve()?)
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Train(o) => commands::cmd_train(&o.resolve()?).map(drop),
        Command::Sweep(o) => commands::cmd_sweep(&o.resolve()?).map(drop),
        Command::Evaluate(o) => commands::cmd_evaluate(&o.resolve()?).map(drop),
        Command::Prompt(PromptCommand::Render(o)) => prompt::cmd_render(&o.resolve()?).map(drop),
        Command::Prompt(PromptCommand::Score(o)) => prompt::cmd_score(&o.resolve()?).map(drop),
        Command::Report { runs, overrides } => report::cmd_report(&overrides.resolve()?, &runs).map(drop),
        Command::Synth { dest, release_counts, overrides } => {
            let cfg = overrides.resolve()?;
            let manifest = match (&cfg.data.manifest, release_counts) {
                (Some(_), true) => return Err(UsageError("--manifest and --release-counts are exclusive".into()).into()),
                (Some(path), false) => Some(Manifest::load(path)?),
                (None, true) => Some(Manifest::indic_domain_qe()),
                (None, false) => None,
            };
            commands::cmd_synth(&cfg, &dest, manifest)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(run::exit_code(&e))
        }
    }
}
