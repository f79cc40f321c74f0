//! Central finite-difference check of the EMCLL gradient.

use serde::Serialize;

use crate::config::{FitTargets, StateAssignment};
use crate::data::ScreeningSequence;
use crate::error::{Error, Result};
use crate::model::HierarchicalModel;
use crate::scalar::Real;

use super::emcll::{estep_sequence, ClusterPartition, Emcll};
use super::params::ParamLayout;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CoordinateCheck {
    pub index: usize,
    pub analytic: f64,
    pub finite_difference: f64,
    pub relative_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradientCheck {
    pub step: f64,
    pub max_relative_error: f64,
    pub coordinates: Vec<CoordinateCheck>,
}

impl GradientCheck {
    pub fn worst(&self) -> Option<&CoordinateCheck> {
        self.coordinates
            .iter()
            .max_by(|a, b| a.relative_error.total_cmp(&b.relative_error))
    }
}

/// Compares the analytic EMCLL gradient at `model` with central differences
/// of step `step` in every layout coordinate.
///
/// The E-step is taken at `estep_model`. Relative error is
/// `|fd - g| / max(|fd|, |g|, floor)`, the floor keeping near-zero
/// coordinates from dominating.
pub fn check_gradient<T: Real>(
    model: &HierarchicalModel<T>,
    estep_model: &HierarchicalModel<T>,
    sequences: &[ScreeningSequence<T>],
    assignment: StateAssignment,
    step: f64,
    floor: f64,
) -> Result<GradientCheck> {
    if !(step > 0.0) {
        return Err(Error::Domain("finite-difference step must be positive".into()));
    }
    let entries = sequences
        .iter()
        .map(|s| estep_sequence(estep_model, s, assignment))
        .collect::<Result<Vec<_>>>()?;
    let layout = ParamLayout::new(model, &FitTargets::default());
    let clusters = ClusterPartition::new(sequences.len(), sequences.len().max(1));
    let problem = Emcll {
        template: model,
        layout: &layout,
        sequences,
        entries: &entries,
        clusters: &clusters,
    };
    let theta = layout.pack(model);
    let grad = problem.evaluate(&theta, true)?.1.expect("requested");
    let h = T::lit(step);
    let mut coordinates = Vec::with_capacity(theta.len());
    for i in 0..theta.len() {
        let mut up = theta.clone();
        let mut down = theta.clone();
        up[i] = up[i] + h;
        down[i] = down[i] - h;
        let fd = ((problem.evaluate(&up, false)?.0 - problem.evaluate(&down, false)?.0)
            / (h + h))
            .as_f64();
        let analytic = grad[i].as_f64();
        let relative_error = (fd - analytic).abs() / fd.abs().max(analytic.abs()).max(floor);
        if !relative_error.is_finite() {
            return Err(Error::Numerical(format!(
                "coordinate {i}: non-finite objective near the check point"
            )));
        }
        coordinates.push(CoordinateCheck {
            index: i,
            analytic,
            finite_difference: fd,
            relative_error,
        });
    }
    let max_relative_error = coordinates
        .iter()
        .map(|c| c.relative_error)
        .fold(0.0, f64::max);
    Ok(GradientCheck {
        step,
        max_relative_error,
        coordinates,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::two_class_model;
    use crate::simulate::{simulate_cohort, CohortSpec};

    #[test]
    fn sweep_passes_on_fixture() {
        let model = two_class_model();
        let spec = CohortSpec {
            size: 10,
            ..CohortSpec::default()
        };
        let seqs: Vec<_> = simulate_cohort(&model, &spec, 2)
            .unwrap()
            .into_iter()
            .map(|s| s.sequence)
            .collect();
        let r = check_gradient(&model, &model, &seqs, StateAssignment::Viterbi, 1e-6, 1e-2)
            .unwrap();
        assert!(r.max_relative_error < 1e-5, "{:?}", r.worst());
        assert!(check_gradient(&model, &model, &seqs, StateAssignment::Viterbi, 0.0, 1e-2).is_err());
    }
}
