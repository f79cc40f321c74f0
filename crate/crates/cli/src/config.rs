//! Run configuration read from TOML.

use std::path::{Path, PathBuf};

use jumphmm::predict::{HighRiskRule, RiskThresholds};
use jumphmm::simulate::CohortSpec;
use jumphmm::survival::KmBandConfig;
use jumphmm::train::ModelStructure;
use jumphmm::EmConfig;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub records: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictConfig {
    pub rule: HighRiskRule,
    /// `p_star` at or above this is a positive prediction.
    pub threshold: f64,
}

impl Default for PredictConfig {
    fn default() -> Self {
        Self {
            rule: HighRiskRule::default(),
            threshold: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ValidateConfig {
    pub km: KmBandConfig,
    pub risk: RiskThresholds,
    /// Class whose posterior drives the risk bands; picked from the model
    /// (largest total exit rate out of the normal state) when absent.
    pub frail_class: Option<usize>,
    pub exclude_untested: bool,
}

impl Default for ValidateConfig {
    fn default() -> Self {
        Self {
            km: KmBandConfig::default(),
            risk: RiskThresholds::default(),
            frail_class: None,
            exclude_untested: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradientConfig {
    /// Sequences simulated from the model when no records are given.
    pub sequences: usize,
    pub step: f64,
    pub floor: f64,
    pub tolerance: f64,
}

impl Default for GradientConfig {
    fn default() -> Self {
        Self {
            sequences: 20,
            step: 1e-6,
            floor: 1e-2,
            tolerance: 1e-5,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: Paths,
    pub model: ModelStructure,
    pub em: EmConfig,
    pub simulate: CohortSpec,
    pub predict: PredictConfig,
    pub validate: ValidateConfig,
    pub check_gradients: GradientConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if !(0.0..=1.0).contains(&self.predict.threshold) {
            return Err(CliError::usage("predict.threshold must lie in [0, 1]"));
        }
        RiskThresholds::new(self.validate.risk.cuts).map_err(CliError::usage)?;
        self.em.validate().map_err(CliError::usage)?;
        let g = &self.check_gradients;
        if !(g.step > 0.0 && g.floor > 0.0 && g.tolerance > 0.0) {
            return Err(CliError::usage(
                "check_gradients step, floor and tolerance must be positive",
            ));
        }
        Ok(())
    }
}
