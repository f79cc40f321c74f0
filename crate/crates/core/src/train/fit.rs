//! Hybrid EM: soft class posteriors, per-class state assignments, L-BFGS M-step.

use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use crate::config::EmConfig;
use crate::data::ScreeningSequence;
use crate::error::{Error, Result};
use crate::model::HierarchicalModel;
use crate::reduce::{ExactSum, ExactVec};
use crate::scalar::Real;

use super::emcll::{estep_sequence, ClusterPartition, EStepEntry, Emcll};
use super::lbfgs::{minimize, LbfgsOptions};
use super::params::ParamLayout;

/// E-step results for every sequence, in input order.
#[derive(Debug, Clone, PartialEq)]
pub struct EStep<T> {
    pub entries: Vec<EStepEntry<T>>,
    /// `Σ_n log Σ_z p_z p(O_n | z)`.
    pub log_likelihood: T,
}

/// Runs the E-step cluster by cluster in parallel.
pub fn estep<T: Real>(
    model: &HierarchicalModel<T>,
    sequences: &[ScreeningSequence<T>],
    clusters: &ClusterPartition,
    config: &EmConfig,
) -> Result<EStep<T>> {
    let parts = clusters
        .clusters
        .par_iter()
        .map(|cluster| {
            cluster
                .iter()
                .map(|&n| {
                    estep_sequence(model, &sequences[n], config.state_assignment).map(|e| (n, e))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let mut slots: Vec<Option<EStepEntry<T>>> = vec![None; sequences.len()];
    let mut ll = ExactSum::new();
    for (n, e) in parts.into_iter().flatten() {
        ll.add(e.posterior.log_marginal(&model.class_prior));
        slots[n] = Some(e);
    }
    let log_likelihood = ll.value();
    if log_likelihood.is_nan() {
        return Err(Error::Numerical("marginal log-likelihood is NaN".into()));
    }
    let entries = slots
        .into_iter()
        .map(|e| {
            e.ok_or_else(|| Error::Domain("cluster partition does not cover every sequence".into()))
        })
        .collect::<Result<_>>()?;
    Ok(EStep {
        entries,
        log_likelihood,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(bound = "T: Real")]
pub struct MStepSummary<T> {
    /// Objective at the M-step input (after any class-prior update).
    pub objective_before: T,
    pub objective_after: T,
    /// Objective after every accepted line-search step.
    pub accepted_values: Vec<T>,
    pub gradient_norm: T,
    pub lbfgs_iterations: usize,
    pub line_search_failures: usize,
}

/// Closed-form class prior: the average class posterior.
pub fn update_class_prior<T: Real>(entries: &[EStepEntry<T>], num_classes: usize) -> Vec<T> {
    if entries.is_empty() {
        return vec![T::one() / T::from_count(num_classes); num_classes];
    }
    let mut acc = ExactVec::zeros(num_classes);
    for e in entries {
        acc.add_slice(&e.posterior.probs);
    }
    let n = T::from_count(entries.len());
    acc.values().into_iter().map(|x| x / n).collect()
}

/// Maximizes the EMCLL over the free parameters with L-BFGS.
pub fn mstep<T: Real>(
    model: &HierarchicalModel<T>,
    sequences: &[ScreeningSequence<T>],
    entries: &[EStepEntry<T>],
    clusters: &ClusterPartition,
    config: &EmConfig,
) -> Result<(HierarchicalModel<T>, MStepSummary<T>)> {
    let mut template = model.clone();
    if config.optimize_class_prior {
        template.class_prior = update_class_prior(entries, model.num_classes());
    }
    let layout = ParamLayout::new(&template, &config.targets);
    let problem = Emcll {
        template: &template,
        layout: &layout,
        sequences,
        entries,
        clusters,
    };
    let theta0 = layout.pack(&template);
    let options = LbfgsOptions {
        max_iterations: config.lbfgs_iterations,
        memory: config.lbfgs_memory,
        ..LbfgsOptions::default()
    };
    let report = minimize(
        |theta, grad| {
            let (v, g) = problem.evaluate(theta, grad)?;
            Ok((-v, g.map(|g| g.into_iter().map(|x| -x).collect())))
        },
        theta0,
        &options,
    )?;
    let before = -report.accepted_values[0];
    if !before.is_finite() {
        return Err(Error::Numerical(
            "M-step objective is not finite at the E-step model".into(),
        ));
    }
    let updated = layout.unpack(&report.x, &template);
    let summary = MStepSummary {
        objective_before: before,
        objective_after: -report.value,
        accepted_values: report.accepted_values.iter().map(|&v| -v).collect(),
        gradient_norm: report.gradient_norm,
        lbfgs_iterations: report.iterations,
        line_search_failures: report.line_search_failures,
    };
    Ok((updated, summary))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IterationTiming {
    pub estep_seconds: f64,
    pub mstep_seconds: f64,
}

/// Outcome of [`fit`].
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(bound = "T: Real")]
pub struct FitReport<T> {
    #[serde(skip)]
    pub model: HierarchicalModel<T>,
    pub initial_log_likelihood: T,
    /// Marginal log-likelihood after each EM iteration.
    pub loglik_trace: Vec<T>,
    pub msteps: Vec<MStepSummary<T>>,
    pub timings: Vec<IterationTiming>,
    pub initial_estep_seconds: f64,
    pub converged: bool,
}

impl<T: Real> FitReport<T> {
    pub fn iterations(&self) -> usize {
        self.loglik_trace.len()
    }

    pub fn final_log_likelihood(&self) -> T {
        self.loglik_trace
            .last()
            .copied()
            .unwrap_or(self.initial_log_likelihood)
    }
}

/// Checks the model and every sequence before any work is done.
pub fn validate_inputs<T: Real>(
    model: &HierarchicalModel<T>,
    sequences: &[ScreeningSequence<T>],
) -> Result<()> {
    model.ensure_valid()?;
    let levels = model.emission.grade_levels();
    for s in sequences {
        s.validate(&levels)?;
    }
    Ok(())
}

/// Runs EM from `init` until `em_iterations` or relative log-likelihood change below tolerance.
pub fn fit<T: Real>(
    init: &HierarchicalModel<T>,
    sequences: &[ScreeningSequence<T>],
    config: &EmConfig,
) -> Result<FitReport<T>> {
    config.validate()?;
    validate_inputs(init, sequences)?;
    if sequences.is_empty() {
        return Err(Error::Empty("no training sequences".into()));
    }
    let clusters = ClusterPartition::new(sequences.len(), config.cluster_size);
    fit_with_clusters(init, sequences, &clusters, config)
}

/// [`fit`] with an explicit cluster partition.
pub fn fit_with_clusters<T: Real>(
    init: &HierarchicalModel<T>,
    sequences: &[ScreeningSequence<T>],
    clusters: &ClusterPartition,
    config: &EmConfig,
) -> Result<FitReport<T>> {
    let clock = Instant::now();
    let mut e = estep(init, sequences, clusters, config)?;
    let mut report = FitReport {
        model: init.clone(),
        initial_log_likelihood: e.log_likelihood,
        loglik_trace: Vec::new(),
        msteps: Vec::new(),
        timings: Vec::new(),
        initial_estep_seconds: clock.elapsed().as_secs_f64(),
        converged: false,
    };
    log::info!("initial marginal log-likelihood {}", e.log_likelihood);
    let mut previous = e.log_likelihood;
    for iteration in 1..=config.em_iterations {
        let clock = Instant::now();
        let burning_in = config.optimize_class_prior && iteration <= config.class_prior_burn_in;
        let step_config = EmConfig {
            optimize_class_prior: config.optimize_class_prior && !burning_in,
            ..config.clone()
        };
        let (model, summary) =
            mstep(&report.model, sequences, &e.entries, clusters, &step_config)?;
        let mstep_seconds = clock.elapsed().as_secs_f64();
        let clock = Instant::now();
        e = estep(&model, sequences, clusters, config)?;
        let estep_seconds = clock.elapsed().as_secs_f64();
        report.model = model;
        report.msteps.push(summary);
        report.timings.push(IterationTiming {
            estep_seconds,
            mstep_seconds,
        });
        report.loglik_trace.push(e.log_likelihood);
        log::info!(
            "iteration {iteration}: marginal log-likelihood {}",
            e.log_likelihood
        );
        let change =
            ((e.log_likelihood - previous) / previous.abs().max(T::min_positive_value())).abs();
        if !burning_in && change.as_f64() < config.convergence_tolerance {
            report.converged = true;
            break;
        }
        previous = e.log_likelihood;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{FitTargets, StateAssignment};
    use crate::data::Visit;
    use crate::fixtures::two_class_model;
    use crate::linalg::Matrix;
    use crate::model::{
        AgePartition, ClassComponent, EmissionModel, PiecewiseIntensity, TransitionMask,
    };
    use crate::simulate::{simulate_cohort, CohortSpec};

    fn cohort(model: &HierarchicalModel<f64>, n: usize, seed: u64) -> Vec<ScreeningSequence<f64>> {
        let spec = CohortSpec {
            size: n,
            ..CohortSpec::default()
        };
        simulate_cohort(model, &spec, seed)
            .unwrap()
            .into_iter()
            .map(|s| s.sequence)
            .collect()
    }

    #[test]
    fn zero_iterations_returns_initial_model() {
        let model = two_class_model();
        let seqs = cohort(&model, 20, 1);
        let cfg = EmConfig {
            em_iterations: 0,
            ..EmConfig::default()
        };
        let r = fit(&model, &seqs, &cfg).unwrap();
        assert_eq!(r.model, model);
        assert!(r.loglik_trace.is_empty());
    }

    #[test]
    fn mstep_never_decreases_objective() {
        let model = two_class_model();
        let seqs = cohort(&model, 150, 2);
        let cfg = EmConfig {
            em_iterations: 3,
            convergence_tolerance: 0.0,
            ..EmConfig::default()
        };
        let r = fit(&model, &seqs, &cfg).unwrap();
        assert_eq!(r.loglik_trace.len(), 3);
        for m in &r.msteps {
            assert!(m.objective_after >= m.objective_before);
            assert!(m.accepted_values.windows(2).all(|w| w[1] >= w[0]));
        }
    }

    #[test]
    fn self_consistent_data_is_near_stationary() {
        let model = two_class_model();
        let seqs = cohort(&model, 400, 3);
        let cfg = EmConfig {
            em_iterations: 10,
            convergence_tolerance: 0.0,
            ..EmConfig::default()
        };
        let r = fit(&model, &seqs, &cfg).unwrap();
        let rel = (r.final_log_likelihood() - r.initial_log_likelihood).abs()
            / r.initial_log_likelihood.abs();
        assert!(rel < 0.01, "{rel}");
    }

    #[test]
    fn cluster_count_invariance() {
        let model = two_class_model();
        let seqs = cohort(&model, 48, 4);
        let cfg = EmConfig {
            em_iterations: 2,
            convergence_tolerance: 0.0,
            ..EmConfig::default()
        };
        let run = |c: usize| {
            fit_with_clusters(&model, &seqs, &ClusterPartition::with_count(48, c), &cfg).unwrap()
        };
        let one = run(1);
        for c in [4, 16] {
            let other = run(c);
            assert_eq!(one.loglik_trace, other.loglik_trace);
            assert_eq!(one.model, other.model);
        }
    }

    #[test]
    fn single_state_fit_matches_closed_form_map() {
        let model = HierarchicalModel {
            class_prior: vec![1.0],
            classes: vec![ClassComponent {
                intensity: PiecewiseIntensity::zero(AgePartition::single(), 1),
                initial: vec![vec![1.0]],
                initial_priors: vec![vec![1.0]],
                emission: None,
            }],
            emission: EmissionModel {
                rates: Matrix::from_rows(&[vec![1.0, 1.0]]).unwrap(),
                grade_probs: vec![vec![vec![0.4, 0.3, 0.3], vec![0.5, 0.5]]],
                grade_priors: vec![vec![vec![2.0, 1.5, 3.0], vec![1.0, 1.0]]],
                death_state: None,
            },
            normal_state: 0,
        };
        let hist = [
            (vec![3, 0, 1], vec![1, 0]),
            (vec![0, 0, 0], vec![2, 2]),
            (vec![1, 2, 0], vec![0, 1]),
            (vec![5, 1, 0], vec![0, 0]),
        ];
        let seqs: Vec<_> = hist
            .iter()
            .enumerate()
            .map(|(i, (a, b))| {
                ScreeningSequence::new(
                    i.to_string(),
                    vec![Visit::new(20.0 + i as f64, vec![a.clone(), b.clone()])],
                    None,
                )
            })
            .collect();
        let cfg = EmConfig {
            em_iterations: 4,
            lbfgs_iterations: 60,
            convergence_tolerance: 0.0,
            state_assignment: StateAssignment::Viterbi,
            ..EmConfig::default()
        };
        let r = fit(&model, &seqs, &cfg).unwrap();
        let em = &r.model.emission;
        // Poisson MLE: mean count; multinomial MAP: (G + α - 1) / Σ(G + α - 1).
        let counts0: Vec<f64> = (0..3)
            .map(|l| hist.iter().map(|h| h.0[l] as f64).sum())
            .collect();
        let counts1: Vec<f64> = (0..2)
            .map(|l| hist.iter().map(|h| h.1[l] as f64).sum())
            .collect();
        assert!((em.rates[(0, 0)] - counts0.iter().sum::<f64>() / 4.0).abs() < 1e-8);
        assert!((em.rates[(0, 1)] - counts1.iter().sum::<f64>() / 4.0).abs() < 1e-8);
        let alpha = [2.0, 1.5, 3.0];
        let denom: f64 = (0..3).map(|l| counts0[l] + alpha[l] - 1.0).sum();
        for l in 0..3 {
            assert!((em.grade_probs[0][0][l] - (counts0[l] + alpha[l] - 1.0) / denom).abs() < 1e-8);
        }
        for l in 0..2 {
            assert!(
                (em.grade_probs[0][1][l] - counts1[l] / counts1.iter().sum::<f64>()).abs() < 1e-8
            );
        }
    }

    #[test]
    fn one_rate_problem_converges_to_closed_form() {
        let mask = TransitionMask::from_rows(&[vec![false, true], vec![false, false]]).unwrap();
        let q0 = 0.05;
        let g = crate::model::generator_from_rates(
            &Matrix::from_rows(&[vec![0.0, q0], vec![0.0, 0.0]]).unwrap(),
        );
        let model = HierarchicalModel {
            class_prior: vec![1.0],
            classes: vec![ClassComponent {
                intensity: PiecewiseIntensity::new(AgePartition::single(), vec![g], mask).unwrap(),
                initial: vec![vec![1.0, 0.0]],
                initial_priors: vec![vec![1.0, 1.0]],
                emission: None,
            }],
            emission: EmissionModel {
                rates: Matrix::from_rows(&[vec![5.0], vec![5.0]]).unwrap(),
                grade_probs: vec![vec![vec![0.999, 0.001]], vec![vec![0.001, 0.999]]],
                grade_priors: vec![vec![vec![1.0, 1.0]]; 2],
                death_state: None,
            },
            normal_state: 0,
        };
        let d = 2.0;
        let seqs: Vec<_> = (0..10)
            .map(|i| {
                let last = if i < 3 { vec![0, 5] } else { vec![5, 0] };
                ScreeningSequence::new(
                    i.to_string(),
                    vec![
                        Visit::new(30.0, vec![vec![5, 0]]),
                        Visit::new(30.0 + d, vec![last]),
                    ],
                    None,
                )
            })
            .collect();
        let cfg = EmConfig {
            targets: FitTargets {
                initial: false,
                emission_rates: false,
                grade_probs: false,
                ..FitTargets::default()
            },
            ..EmConfig::default()
        };
        let clusters = ClusterPartition::new(seqs.len(), 100);
        let e = estep(&model, &seqs, &clusters, &cfg).unwrap();
        let (out, summary) = mstep(&model, &seqs, &e.entries, &clusters, &cfg).unwrap();
        let q_star = -(0.7f64).ln() / d;
        assert!(summary.lbfgs_iterations <= 8);
        assert!((out.classes[0].intensity.rate(0, 0, 1) - q_star).abs() < 1e-6);
        // Starting at the optimum leaves it there.
        let (again, s2) = mstep(&out, &seqs, &e.entries, &clusters, &cfg).unwrap();
        assert!(
            (again.classes[0].intensity.rate(0, 0, 1) - out.classes[0].intensity.rate(0, 0, 1))
                .abs()
                < 1e-10
        );
        assert!(s2.objective_after >= s2.objective_before);
    }

    #[test]
    fn class_prior_update_is_average_posterior() {
        let model = two_class_model();
        let seqs = cohort(&model, 100, 5);
        let cfg = EmConfig {
            optimize_class_prior: true,
            ..EmConfig::default()
        };
        let clusters = ClusterPartition::new(100, 30);
        let e = estep(&model, &seqs, &clusters, &cfg).unwrap();
        let p = update_class_prior(&e.entries, 2);
        let mean0: f64 = e.entries.iter().map(|x| x.posterior.probs[0]).sum::<f64>() / 100.0;
        assert!((p[0] - mean0).abs() < 1e-12);
        let (out, _) = mstep(&model, &seqs, &e.entries, &clusters, &cfg).unwrap();
        assert_eq!(out.class_prior, p);
    }

    #[test]
    fn impossible_sequence_aborts_with_id() {
        let mut model = two_class_model();
        let partition = model.partition().clone();
        for c in &mut model.classes {
            c.intensity = PiecewiseIntensity::zero(partition.clone(), 3);
        }
        let seqs = vec![ScreeningSequence::new(
            "ghost",
            vec![Visit::new(30.0, vec![vec![1, 0, 0, 0], vec![0, 0]])],
            Some(crate::data::Censoring {
                age: 35.0,
                outcome: crate::data::Outcome::Death,
            }),
        )];
        let err = fit(&model, &seqs, &EmConfig::default()).unwrap_err();
        assert!(matches!(err, Error::ImpossibleSequence { id } if id == "ghost"));
    }
}
