use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use moes_core::dataset::DatasetSpec;
use moes_core::metrics::{Metric, DEFAULT_BORJI_SPLITS};
use moes_core::model::ModelConfig;
use moes_core::optim::TrainConfig;
use serde::{Deserialize, Serialize};

/// Everything a run depends on besides its input files. Omitted keys take
/// their defaults; unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    #[serde(default = "ModelConfig::compact")]
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub ensemble: EnsembleSection,
    pub metrics: MetricsConfig,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::compact(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
            ensemble: EnsembleSection::default(),
            metrics: MetricsConfig::default(),
            output_dir: PathBuf::from("runs"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Generator settings used by `gen-data`.
    pub spec: DatasetSpec,
    /// Dataset directory; defaults to `<output_dir>/data`.
    pub root: Option<PathBuf>,
    /// Held-out samples per category; the split is seeded by `train.seed`.
    pub val_per_category: usize,
    pub test_per_category: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            spec: DatasetSpec::default(),
            root: None,
            val_per_category: 13,
            test_per_category: 13,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnsembleSection {
    /// Fraction of the training split each member sees.
    pub subsample: f64,
}

impl Default for EnsembleSection {
    fn default() -> Self {
        Self { subsample: 0.8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    pub names: Vec<String>,
    pub borji_splits: usize,
    pub seed: u64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            names: Metric::ALL.iter().map(|m| m.name().to_string()).collect(),
            borji_splits: DEFAULT_BORJI_SPLITS,
            seed: 0,
        }
    }
}

impl MetricsConfig {
    pub fn parse(&self) -> moes_core::Result<Vec<Metric>> {
        self.names.iter().map(|n| n.parse()).collect()
    }
}

impl RunConfig {
    /// Reads `path` (or starts from defaults) and applies `--seed`, which
    /// replaces the data, training and metric seeds.
    pub fn load(path: Option<&Path>, seed: Option<u64>) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| moes_core::Error::Io {
                    path: p.to_path_buf(),
                    source: e,
                })?;
                serde_json::from_str(&text)
                    .map_err(|e| moes_core::Error::Config(format!("{}: {e}", p.display())))?
            }
            None => Self::default(),
        };
        if let Some(s) = seed {
            cfg.data.spec.seed = s;
            cfg.train.seed = s;
            cfg.metrics.seed = s;
        }
        Ok(cfg)
    }

    pub fn data_root(&self) -> PathBuf {
        self.data.root.clone().unwrap_or_else(|| self.output_dir.join("data"))
    }

    /// Pretty JSON with keys sorted and every default expanded.
    pub fn resolved_json(&self) -> Result<String> {
        let value = serde_json::to_value(self)?;
        Ok(serde_json::to_string_pretty(&value)? + "\n")
    }

    pub fn write_resolved(&self, dir: &Path) -> Result<()> {
        let path = dir.join("config.json");
        fs::write(&path, self.resolved_json()?).with_context(|| format!("writing {}", path.display()))
    }
}
