use std::path::{Path, PathBuf};

use qelab::adapters::{AdapterConfig, DEFAULT_RANK_GRID};
use qelab::data::{DataFormat, IngestMode, PlantedSignal};
use qelab::metrics::DEFAULT_LAYERS;
use qelab::prompting::{PromptTemplate, RetryPolicy, TemplateKind};
use qelab::qe_head::TrainConfig;
use qelab::transformer::ModelConfig;
use serde::{Deserialize, Serialize};

use crate::run::UsageError;

/// Everything a command needs, resolved from defaults, then the config
/// file, then command-line flags.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// When set, replaces the model, training and synthetic-data seeds.
    pub seed: Option<u64>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub grid: GridConfig,
    pub data: DataConfig,
    pub prompt: PromptConfig,
    /// Parent of every run directory.
    pub output_dir: PathBuf,
    /// Checkpoint read by `evaluate`.
    pub checkpoint: Option<PathBuf>,
    /// Threads used for evaluation. Training is always sequential.
    pub eval_threads: usize,
    /// Label used by `report`; defaults per command.
    pub method: Option<String>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: None,
            model: default_model(),
            train: TrainConfig::default(),
            grid: GridConfig::default(),
            data: DataConfig::default(),
            prompt: PromptConfig::default(),
            output_dir: PathBuf::from("runs"),
            checkpoint: None,
            eval_threads: 1,
            method: None,
        }
    }
}

/// Twelve layers so every default sweep layer exists, narrow enough to
/// train on one core in seconds.
pub fn default_model() -> ModelConfig {
    ModelConfig { n_layers: 12, d_model: 16, n_heads: 2, d_ff: 32, vocab_size: 256, max_seq_len: 48, seed: 0 }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    /// `(rank, alpha)` pairs.
    pub pairs: Vec<(usize, f64)>,
    pub layers: Vec<i64>,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self { pairs: DEFAULT_RANK_GRID.to_vec(), layers: DEFAULT_LAYERS.to_vec() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n: usize,
    pub seed: u64,
    pub signal: PlantedSignal,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self { n: 500, seed: 0, signal: PlantedSignal::default() }
    }
}

/// A dataset directory, or synthetic data when `dir` is unset.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub dir: Option<PathBuf>,
    pub format: Format,
    pub mode: IngestMode,
    pub synthetic: SyntheticSpec,
    /// Split counts the loaded data must match.
    pub manifest: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    #[default]
    Jsonl,
    Tsv,
}

impl From<Format> for DataFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Jsonl => DataFormat::Jsonl,
            Format::Tsv => DataFormat::Tsv,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum ClientKind {
    /// Answers every prompt with `fixed_response`.
    Fixed,
    /// Answers with a hash of the prompt.
    #[default]
    Hash,
    /// Answers with each record's gold score.
    Echo,
    /// Remote JSON endpoint; needs the API key variable.
    Http,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptConfig {
    pub kind: TemplateKind,
    /// Exemplars per prompt; must be 0 for zero-shot.
    pub k: usize,
    pub client: ClientKind,
    pub fixed_response: String,
    pub endpoint: Option<String>,
    pub model_name: String,
    pub timeout_secs: u64,
    pub concurrency: usize,
    pub retry: RetryPolicy,
    /// Replaces the built-in templates.
    pub templates_dir: Option<PathBuf>,
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self {
            kind: TemplateKind::ZeroShot,
            k: 0,
            client: ClientKind::default(),
            fixed_response: "Score: 50".into(),
            endpoint: None,
            model_name: "default".into(),
            timeout_secs: 30,
            concurrency: 4,
            retry: RetryPolicy::default(),
            templates_dir: None,
        }
    }
}

impl PromptConfig {
    pub fn template(&self) -> Result<PromptTemplate, qelab::prompting::PromptError> {
        match &self.templates_dir {
            Some(dir) => PromptTemplate::from_dir(dir, self.kind, self.k),
            None => PromptTemplate::builtin(self.kind, self.k),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, UsageError> {
        let text = std::fs::read_to_string(path).map_err(|e| UsageError(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| UsageError(format!("{}: {e}", path.display())))
    }

    /// Propagates the master seed and checks the parts every command uses.
    pub fn resolve(mut self) -> Result<Self, UsageError> {
        if let Some(seed) = self.seed {
            self.model.seed = seed;
            self.train.seed = seed;
            self.data.synthetic.seed = seed;
        }
        self.model.validate().map_err(|e| UsageError(format!("model: {e}")))?;
        self.train.validate().map_err(|e| UsageError(format!("train: {e}")))?;
        qelab::transformer::resolve_layer(self.model.n_layers, self.train.layer_index)
            .map_err(|e| UsageError(format!("train.layer_index: {e}")))?;
        if self.eval_threads == 0 {
            return Err(UsageError("eval_threads must be >= 1".into()));
        }
        if self.prompt.concurrency == 0 {
            return Err(UsageError("prompt.concurrency must be >= 1".into()));
        }
        Ok(self)
    }

    /// Checks every grid cell before a sweep starts.
    pub fn validate_grid(&self) -> Result<(), UsageError> {
        if self.grid.pairs.is_empty() || self.grid.layers.is_empty() {
            return Err(UsageError("grid needs at least one (rank, alpha) pair and one layer".into()));
        }
        for &(rank, alpha) in &self.grid.pairs {
            AdapterConfig { rank, alpha, ..self.train.adapter.clone() }
                .validate()
                .map_err(|e| UsageError(format!("grid pair ({rank}, {alpha}): {e}")))?;
        }
        for &layer in &self.grid.layers {
            qelab::transformer::resolve_layer(self.model.n_layers, layer).map_err(|e| UsageError(format!("grid layer: {e}")))?;
        }
        Ok(())
    }
}
