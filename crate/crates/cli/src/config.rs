use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use sctts_core::dsp::FeatureConfig;
use sctts_core::model::ModelConfig;
use sctts_core::rate::DEFAULT_LAMBDA;
use sctts_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RateSection {
    pub lambda: f64,
}

impl Default for RateSection {
    fn default() -> Self {
        Self {
            lambda: DEFAULT_LAMBDA,
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathSection {
    pub work_dir: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
}

/// Settings shared by every subcommand; command-line flags override them.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CliConfig {
    pub feature: FeatureConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub rate: RateSection,
    pub paths: PathSection,
}

impl CliConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let cfg: Self = serde_json::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.feature
            .validate()
            .context("invalid [feature] section")?;
        self.train.validate().context("invalid [train] section")?;
        anyhow::ensure!(
            self.rate.lambda > 0.0 && self.rate.lambda.is_finite(),
            "rate.lambda must be positive, got {}",
            self.rate.lambda
        );
        Ok(())
    }
}
