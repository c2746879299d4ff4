//! Versioned TOML run configuration.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use oct_stroke::labeling::{Task, TaskSpec, DEFAULT_WINDOW_DAYS};
use oct_stroke::nn::{FusionMode, ModelConfig};
use oct_stroke::records::Modality;
use oct_stroke::synthgen::SynthConfig;
use oct_stroke::trainer::search::{Domain, SearchSpace, TpeSettings};
use oct_stroke::trainer::{PretrainMode, TrainConfig};
use oct_stroke::Error;

use crate::error::{CliError, CliResult};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    /// Root seed; every stage derives its own stream from it.
    pub seed: u64,
    pub desk_scale: bool,
    pub synth: SynthConfig,
    pub output: OutputConfig,
    pub labels: LabelConfig,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub finetune: TrainConfig,
    pub search: SearchConfig,
    pub evaluate: EvaluateConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            desk_scale: false,
            synth: SynthConfig::default(),
            output: OutputConfig::default(),
            labels: LabelConfig::default(),
            model: ModelConfig::default(),
            pretrain: PretrainConfig::default(),
            finetune: TrainConfig::finetune(),
            search: SearchConfig::default(),
            evaluate: EvaluateConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    /// Also write every study's images as 16-bit PGM files.
    pub export_images: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabelConfig {
    pub window_days: f64,
    pub task: Task,
    pub horizon_days: u32,
    pub test_fraction: f64,
    pub k_folds: usize,
}

impl Default for LabelConfig {
    fn default() -> Self {
        LabelConfig {
            window_days: DEFAULT_WINDOW_DAYS,
            task: Task::Overall,
            horizon_days: 365,
            test_fraction: 0.2,
            k_folds: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub enabled: bool,
    /// Image source for the OCT encoder; the infrared encoder always uses
    /// infrared images.
    pub mode: PretrainMode,
    /// Random-search runs over the pretraining space.
    pub search_runs: usize,
    pub train: TrainConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            enabled: true,
            mode: PretrainMode::MidSlice,
            search_runs: 10,
            train: TrainConfig::pretrain(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    pub n_trials: usize,
    pub n_initial: usize,
    pub gamma: f64,
    pub n_candidates: usize,
    pub finetune_space: BTreeMap<String, Domain>,
    pub pretrain_space: BTreeMap<String, Domain>,
}

impl Default for SearchConfig {
    fn default() -> Self {
        let tpe = TpeSettings::default();
        SearchConfig {
            n_trials: 50,
            n_initial: tpe.n_initial,
            gamma: tpe.gamma,
            n_candidates: tpe.n_candidates,
            finetune_space: SearchSpace::finetune().dims.into_iter().collect(),
            pretrain_space: SearchSpace::pretrain().dims.into_iter().collect(),
        }
    }
}

impl SearchConfig {
    pub fn tpe(&self) -> TpeSettings {
        TpeSettings {
            n_initial: self.n_initial,
            gamma: self.gamma,
            n_candidates: self.n_candidates,
        }
    }

    pub fn finetune_space(&self) -> SearchSpace {
        SearchSpace {
            dims: self.finetune_space.clone().into_iter().collect(),
        }
    }

    pub fn pretrain_space(&self) -> SearchSpace {
        SearchSpace {
            dims: self.pretrain_space.clone().into_iter().collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateConfig {
    pub modalities: Vec<Modality>,
    pub fusions: Vec<FusionMode>,
    pub batch_size: usize,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        EvaluateConfig {
            modalities: vec![Modality::Oct, Modality::Infrared],
            fusions: vec![FusionMode::ImageOnly, FusionMode::Multimodal],
            batch_size: 64,
        }
    }
}

/// Command-line overrides applied on top of the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub task: Option<Task>,
    pub horizon_days: Option<u32>,
    pub modality: Option<Modality>,
    pub desk_scale: bool,
}

impl RunConfig {
    pub fn from_toml(text: &str, path: &Path) -> CliResult<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::ConfigFile {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        if cfg.schema_version != SCHEMA_VERSION {
            return Err(CliError::ConfigFile {
                path: path.to_path_buf(),
                message: format!(
                    "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                    cfg.schema_version
                ),
            });
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, path)
    }

    pub fn apply(mut self, o: &Overrides) -> CliResult<Self> {
        if let Some(seed) = o.seed {
            self.seed = seed;
        }
        if let Some(task) = o.task {
            self.labels.task = task;
        }
        if let Some(h) = o.horizon_days {
            self.labels.horizon_days = h;
        }
        if let Some(m) = o.modality {
            self.evaluate.modalities = vec![m];
        }
        if o.desk_scale {
            self.desk_scale = true;
        }
        if self.desk_scale {
            self = self.shrink();
        }
        self.validate()?;
        Ok(self)
    }

    /// Desk-scale budgets: batch at most 32, at most 30 epochs, at most 10
    /// search trials (4 initial) and 3 pretraining runs. Batch-size choices
    /// are divided by 8.
    fn shrink(mut self) -> Self {
        self.finetune = self.finetune.desk();
        self.pretrain.train = self.pretrain.train.desk();
        self.search.n_trials = self.search.n_trials.min(10);
        self.search.n_initial = self.search.n_initial.min(4);
        self.pretrain.search_runs = self.pretrain.search_runs.min(3);
        self.evaluate.batch_size = self.evaluate.batch_size.min(32);
        if let Some(Domain::Categorical { choices }) = self.search.finetune_space.get_mut("batch_size") {
            for c in choices.iter_mut() {
                if let Ok(b) = c.parse::<usize>() {
                    *c = (b / 8).max(2).to_string();
                }
            }
            choices.dedup();
        }
        self
    }

    pub fn validate(&self) -> CliResult<()> {
        self.synth.validate()?;
        self.model.validate()?;
        self.finetune.validate()?;
        self.pretrain.train.validate()?;
        self.task_spec()?;
        self.search.finetune_space().validate()?;
        if self.pretrain.enabled {
            self.search.pretrain_space().validate()?;
        }
        let bad = |m: &str| Err(CliError::Core(Error::config(m)));
        if self.model.ehr_input_dim != oct_stroke::features::FEATURE_DIM {
            return bad("model.ehr_input_dim must equal the 34-dimensional clinical feature vector");
        }
        if (self.model.visual.input_height, self.model.visual.input_width)
            != (self.synth.image_height, self.synth.image_width)
        {
            return bad("model input size must match synth image size");
        }
        if !(self.labels.window_days > 0.0) {
            return bad("labels.window_days must be positive");
        }
        if self.labels.k_folds < 2 {
            return bad("labels.k_folds must be at least 2");
        }
        if self.search.n_trials == 0 || self.evaluate.batch_size < 1 {
            return bad("search.n_trials and evaluate.batch_size must be positive");
        }
        if !(self.search.gamma > 0.0 && self.search.gamma < 1.0) {
            return bad("search.gamma must be in (0,1)");
        }
        if self.pretrain.enabled && self.pretrain.search_runs == 0 {
            return bad("pretrain.search_runs must be positive when pretraining is enabled");
        }
        if self.evaluate.modalities.is_empty() || self.evaluate.fusions.is_empty() {
            return bad("evaluate.modalities and evaluate.fusions must not be empty");
        }
        Ok(())
    }

    pub fn task_spec(&self) -> CliResult<TaskSpec> {
        Ok(TaskSpec::new(self.labels.task, self.labels.horizon_days)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// SHA-256 of the canonical TOML form of the effective configuration.
    pub fn hash(&self) -> String {
        hex(&Sha256::digest(self.to_toml().as_bytes()))
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
