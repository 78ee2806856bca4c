use std::path::{Path, PathBuf};

use far::attacks::AttackConfig;
use far::attribution::AttributionSpec;
use far::data::{load_idx, make_synthetic, Dataset, Scaling, SyntheticSpec};
use far::harness::{EvalConfig, ExperimentConfig, ModelSpec, SweepSpec, SweepValues};
use far::objectives::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// One run of one command, read from a TOML file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    /// Output directory; `--out` takes precedence.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    pub data: DataConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelSpec>,
    /// Saved model to start from instead of a freshly initialized one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_samples: Option<usize>,
    /// Training stages, run in order.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub train: Vec<TrainConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval: Option<EvalConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attack: Option<AttackSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub explain: Option<ExplainSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSection>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataConfig {
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        #[serde(default = "default_scaling")]
        scaling: Scaling,
    },
    Synthetic {
        train: SyntheticSpec,
        test: SyntheticSpec,
    },
}

fn default_scaling() -> Scaling {
    Scaling::Unit
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackMethod {
    Ifia,
    AdversarialIfia,
    Pgd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSection {
    pub method: AttackMethod,
    /// Softplus tightness for ReLU second derivatives.
    #[serde(default = "default_beta")]
    pub beta: f64,
    pub config: AttackConfig,
}

fn default_beta() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExplainSection {
    #[serde(default)]
    pub attribution: AttributionSpec,
    /// Class to explain; the predicted class when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub grid: SweepValues,
    pub seeds: Vec<u64>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        let cfg: RunConfig = toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {}", path.display(), e.message())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        for t in &self.train {
            t.validate()?;
        }
        if let Some(e) = &self.eval {
            e.validate()?;
        }
        if let Some(a) = &self.attack {
            a.config.validate()?;
        }
        if let Some(x) = &self.explain {
            x.attribution.validate()?;
        }
        if let Some(s) = &self.sweep {
            if s.grid.is_empty() || s.seeds.is_empty() {
                return Err(CliError::Config("sweep needs at least one value and one seed".into()));
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string(self).map_err(|e| CliError::Config(format!("cannot echo config: {e}")))
    }

    pub fn load_data(&self) -> Result<(Dataset, Dataset), CliError> {
        match &self.data {
            DataConfig::Idx { train_images, train_labels, test_images, test_labels, scaling } => {
                let train = load_idx(train_images, train_labels)?;
                let test = load_idx(test_images, test_labels)?;
                if train.class_count != test.class_count && test.labels.iter().any(|&l| l >= train.class_count) {
                    return Err(CliError::Config("test labels exceed the training classes".into()));
                }
                let test = Dataset::new(test.images, test.labels, train.class_count, test.split, test.scaling, test.bounds)?;
                match scaling {
                    Scaling::Symmetric => Ok((train.to_symmetric()?, test.to_symmetric()?)),
                    _ => Ok((train, test)),
                }
            }
            DataConfig::Synthetic { train, test } => {
                let mut test = make_synthetic(test)?;
                test.split = far::data::Split::Test;
                Ok((make_synthetic(train)?, test))
            }
        }
    }

    pub fn require_model(&self) -> Result<&ModelSpec, CliError> {
        self.model.as_ref().ok_or_else(|| CliError::Config("a [model] section or a checkpoint is required".into()))
    }

    pub fn require_eval(&self) -> Result<&EvalConfig, CliError> {
        self.eval.as_ref().ok_or_else(|| CliError::Config("an [eval] section is required".into()))
    }

    pub fn experiment(&self) -> Result<ExperimentConfig, CliError> {
        Ok(ExperimentConfig {
            model: self.require_model()?.clone(),
            stages: self.train.clone(),
            eval: self.require_eval()?.clone(),
            train_samples: self.train_samples,
        })
    }

    pub fn sweep_spec(&self) -> Result<SweepSpec, CliError> {
        let s = self.sweep.as_ref().ok_or_else(|| CliError::Config("a [sweep] section is required".into()))?;
        Ok(SweepSpec { sweep: s.grid.clone(), base: self.experiment()?, seeds: s.seeds.clone() })
    }
}
