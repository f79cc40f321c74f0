use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How latent states enter the M-step objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StateAssignment {
    /// Viterbi path per class (hard assignment).
    #[default]
    Viterbi,
    /// Forward-backward state and pair marginals (soft assignment).
    /// Memory grows with `M²` per visit; meant for small problems.
    Marginals,
}

/// Which parameter blocks the M-step may move.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitTargets {
    pub intensities: bool,
    pub initial: bool,
    pub emission_rates: bool,
    pub grade_probs: bool,
}

impl Default for FitTargets {
    fn default() -> Self {
        Self {
            intensities: true,
            initial: true,
            emission_rates: true,
            grade_probs: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmConfig {
    pub em_iterations: usize,
    pub lbfgs_iterations: usize,
    pub lbfgs_memory: usize,
    pub cluster_size: usize,
    /// Stop when the relative change of the marginal log-likelihood drops below
    /// this; zero runs all iterations.
    pub convergence_tolerance: f64,
    pub rng_seed: u64,
    /// Update the class prior in closed form instead of holding it fixed.
    pub optimize_class_prior: bool,
    /// With `optimize_class_prior`, keep the prior fixed for this many
    /// initial iterations. Convergence is not tested before they end.
    pub class_prior_burn_in: usize,
    pub state_assignment: StateAssignment,
    pub targets: FitTargets,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            em_iterations: 100,
            lbfgs_iterations: 8,
            lbfgs_memory: 10,
            cluster_size: 100,
            convergence_tolerance: 1e-6,
            rng_seed: 0,
            optimize_class_prior: false,
            class_prior_burn_in: 0,
            state_assignment: StateAssignment::Viterbi,
            targets: FitTargets::default(),
        }
    }
}

impl EmConfig {
    /// `em_iterations = 0` is allowed and means "evaluate the initial model only".
    pub fn validate(&self) -> Result<()> {
        if self.lbfgs_iterations == 0 || self.lbfgs_memory == 0 || self.cluster_size == 0 {
            return Err(Error::Domain(
                "lbfgs_iterations, lbfgs_memory and cluster_size must be at least 1".into(),
            ));
        }
        if !(self.convergence_tolerance >= 0.0) {
            return Err(Error::Domain(
                "convergence_tolerance must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = EmConfig::default();
        assert_eq!(c.em_iterations, 100);
        assert_eq!(c.lbfgs_iterations, 8);
        assert_eq!(c.cluster_size, 100);
        c.validate().unwrap();
        let bad = EmConfig {
            convergence_tolerance: -1.0,
            ..EmConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
