//! Run configuration read from a TOML file; command-line flags override it.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};

use panelsel::data::{self, Dataset, LoadOptions, Nonlinearity, SynthSpec};
use panelsel::model::{DEFAULT_NOISE_SCALE, DEFAULT_TAU0, DEFAULT_TAU_MIN};
use panelsel::{ModelConfig, SparsitySchedule, TaskSpec, TemperatureSchedule, TrainConfig};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds the model, the split, the batch order and the mask noise.
    pub seed: u64,
    pub data: DataSection,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub synth: SynthSection,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Label columns of the CSV; taken from the ground-truth sidecar when empty.
    pub label_columns: Vec<String>,
    pub regression_columns: Vec<String>,
    /// Keep only this many highest-variance features.
    pub hvg_top: Option<usize>,
    /// Replace expression values by `x > threshold`.
    pub binarize: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub k_final: usize,
    pub encoder_layers: Vec<usize>,
    pub latent_dim: usize,
    pub tau0: f64,
    pub tau_min: f64,
    /// Fraction of training after which the temperature sits at `tau_min`.
    pub tau_floor_at: f64,
    /// Fraction of training spent at `k = d`.
    pub k_warmup: f64,
    /// Fraction of training over which `k` decays to `k_final`.
    pub k_decay: f64,
    pub noise_scale0: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            k_final: 8,
            encoder_layers: vec![128, 128],
            latent_dim: 64,
            tau0: DEFAULT_TAU0,
            tau_min: DEFAULT_TAU_MIN,
            tau_floor_at: 0.8,
            k_warmup: 0.1,
            k_decay: 0.4,
            noise_scale0: DEFAULT_NOISE_SCALE,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub n: usize,
    pub d: usize,
    pub g: usize,
    pub tasks: usize,
    pub classes: usize,
    pub shared_fraction: f64,
    pub noise_sigma: f64,
    pub nonlinearity: Nonlinearity,
    pub missing_rate: Vec<f64>,
}

impl Default for SynthSection {
    fn default() -> Self {
        SynthSection {
            n: 2000,
            d: 100,
            g: 8,
            tasks: 1,
            classes: 4,
            shared_fraction: 1.0,
            noise_sigma: 0.5,
            nonlinearity: Nonlinearity::Linear,
            missing_rate: vec![],
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        match path {
            None => Ok(RunConfig::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .with_context(|| format!("reading {}", p.display()))?;
                toml::from_str(&text).with_context(|| format!("parsing {}", p.display()))
            }
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.seed = seed;
        c.train.seed = seed;
        c
    }

    pub fn synth_spec(&self) -> SynthSpec {
        let s = &self.synth;
        SynthSpec {
            n: s.n,
            d: s.d,
            g: s.g,
            tasks: (0..s.tasks)
                .map(|t| TaskSpec::classification(format!("task{t}"), s.classes))
                .collect(),
            shared_fraction: s.shared_fraction,
            noise_sigma: s.noise_sigma,
            nonlinearity: s.nonlinearity,
            missing_rate: s.missing_rate.clone(),
            seed: self.seed,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    /// Model for `tasks` on `d` features, with schedules sized to the run.
    pub fn model_config(
        &self,
        d: usize,
        tasks: Vec<TaskSpec>,
        n_train: usize,
    ) -> anyhow::Result<ModelConfig> {
        let m = &self.model;
        let total = self.train_config().total_steps(n_train);
        let at = |frac: f64| (total as f64 * frac).round() as usize;
        let config = ModelConfig {
            d,
            k_final: m.k_final,
            encoder_layers: m.encoder_layers.clone(),
            latent_dim: m.latent_dim,
            tasks,
            temperature: TemperatureSchedule::reaching_floor_at(
                m.tau0,
                m.tau_min,
                at(m.tau_floor_at),
            )?,
            sparsity: SparsitySchedule::new(d, m.k_final, at(m.k_warmup), at(m.k_decay))?,
            noise_scale0: m.noise_scale0,
            seed: self.seed,
        };
        config.validate()?;
        Ok(config)
    }
}

/// Ground-truth sidecar written next to a synthetic CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruthSidecar {
    pub schema_version: u32,
    pub label_columns: Vec<String>,
    #[serde(default)]
    pub regression_columns: Vec<String>,
    /// Union of the informative features of all tasks.
    pub ground_truth: Vec<usize>,
    pub task_informative: Vec<Vec<usize>>,
    pub spec: SynthSpec,
}

pub fn sidecar_path(csv: &Path) -> PathBuf {
    csv.with_extension("truth.json")
}

/// Loads a CSV with the configured preprocessing; label columns and ground
/// truth come from the sidecar when present.
pub fn load_dataset(path: &Path, config: &DataSection) -> anyhow::Result<Dataset> {
    let sidecar = sidecar_path(path);
    let truth: Option<TruthSidecar> = if sidecar.exists() {
        let text = std::fs::read_to_string(&sidecar)?;
        Some(
            serde_json::from_str(&text)
                .with_context(|| format!("parsing {}", sidecar.display()))?,
        )
    } else {
        None
    };
    let (labels, regression) = match (&truth, config.label_columns.is_empty()) {
        (_, false) => (
            config.label_columns.clone(),
            config.regression_columns.clone(),
        ),
        (Some(t), true) => (t.label_columns.clone(), t.regression_columns.clone()),
        (None, true) => bail!(
            "no label columns known for {}: set data.label_columns in the config or provide {}",
            path.display(),
            sidecar.display()
        ),
    };
    let names: Vec<&str> = labels.iter().map(String::as_str).collect();
    let mut ds = data::load_csv(
        path,
        &names,
        &LoadOptions {
            regression_columns: regression,
        },
    )
    .with_context(|| format!("loading {}", path.display()))?;
    if let Some(t) = truth {
        ds.ground_truth = Some(t.ground_truth);
    }
    if let Some(threshold) = config.binarize {
        ds = data::binarize(&ds, threshold);
    }
    if let Some(m) = config.hvg_top {
        ds = data::hvg_filter(&ds, m)?;
    }
    Ok(ds)
}
