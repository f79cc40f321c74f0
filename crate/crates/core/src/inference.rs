//! Exact inference for one sequence under fixed parameters.
//!
//! A sequence is first turned into a [`Lattice`]: per-visit emission scores,
//! log transition matrices between consecutive visits (with treatment resets
//! folded into the rows) and terminal censoring scores. Forward, backward,
//! Viterbi and FFBS then run on the lattice in log space.

use rand::Rng;
use rayon::prelude::*;

use crate::data::ScreeningSequence;
use crate::emissions::{censor_terms, log_visit_likelihood};
use crate::error::{Error, Result};
use crate::kernel::interval_transition;
use crate::linalg::Matrix;
use crate::model::{ClassModel, HierarchicalModel};
use crate::scalar::{log_sum_exp, Real};

/// Log-space scores of a sequence on the visit grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Lattice<T> {
    pub log_initial: Vec<T>,
    /// `log_emission[t][s]`.
    pub log_emission: Vec<Vec<T>>,
    /// `log_transition[t][(s, s')]` from visit `t` to `t + 1`, after any reset at `t`.
    pub log_transition: Vec<Matrix<T>>,
    /// Censoring score of the state at the last visit (zero without censoring).
    pub log_terminal: Vec<T>,
}

impl<T: Real> Lattice<T> {
    pub fn build(class: &ClassModel<'_, T>, sequence: &ScreeningSequence<T>) -> Result<Self> {
        sequence.validate(&class.emission.grade_levels())?;
        let m = class.num_states();
        let visits = &sequence.visits;
        let log_initial = class
            .initial_distribution(visits[0].age)?
            .iter()
            .map(|p| p.ln())
            .collect();
        let log_emission = visits
            .iter()
            .map(|v| {
                (0..m)
                    .map(|s| log_visit_likelihood(class.emission, s, v))
                    .collect()
            })
            .collect();
        let mut log_transition = Vec::with_capacity(visits.len().saturating_sub(1));
        for w in visits.windows(2) {
            let p = interval_transition(class.intensity, w[0].age, w[1].age)?;
            let reset = w[0].treated;
            log_transition.push(Matrix::from_fn(m, m, |s, s2| {
                let from = if reset { class.reset_target(s) } else { s };
                p.prob(from, s2).ln()
            }));
        }
        let last = visits.last().expect("validated nonempty");
        let log_terminal = match sequence.censor {
            None => vec![T::zero(); m],
            Some(c) => {
                let terms = censor_terms(class, last.age, c.age, c.outcome)?;
                (0..m)
                    .map(|s| {
                        terms[if last.treated {
                            class.reset_target(s)
                        } else {
                            s
                        }]
                    })
                    .collect()
            }
        };
        Ok(Self {
            log_initial,
            log_emission,
            log_transition,
            log_terminal,
        })
    }

    pub fn num_visits(&self) -> usize {
        self.log_emission.len()
    }

    pub fn num_states(&self) -> usize {
        self.log_initial.len()
    }

    /// Joint log-probability of a state path (states at visits).
    pub fn path_score(&self, path: &[usize]) -> T {
        let mut total = self.log_initial[path[0]] + self.log_emission[0][path[0]];
        for t in 1..path.len() {
            total = total
                + self.log_transition[t - 1][(path[t - 1], path[t])]
                + self.log_emission[t][path[t]];
        }
        total + self.log_terminal[path[path.len() - 1]]
    }
}

/// Forward/backward output for one sequence under one class.
#[derive(Debug, Clone, PartialEq)]
pub struct StatePosterior<T> {
    /// `log p(S_t | O_1..t)`, rows normalized.
    pub filtered: Vec<Vec<T>>,
    /// `log p(S_t | O_1..T)`; empty when only the forward pass was run.
    pub smoothed: Vec<Vec<T>>,
    /// Viterbi path; empty when not decoded.
    pub viterbi_path: Vec<usize>,
    /// `log p(O | z)`, `-inf` for an impossible sequence.
    pub log_marginal: T,
}

impl<T: Real> StatePosterior<T> {
    pub fn is_possible(&self) -> bool {
        self.log_marginal > T::neg_infinity()
    }
}

fn normalize_row<T: Real>(row: &[T]) -> Vec<T> {
    let z = log_sum_exp(row);
    if z == T::neg_infinity() {
        return vec![T::neg_infinity(); row.len()];
    }
    row.iter().map(|&x| x - z).collect()
}

/// Unnormalized forward table `alpha[t][s] = log p(O_1..t, S_t = s)`.
pub fn forward_table<T: Real>(lattice: &Lattice<T>) -> Vec<Vec<T>> {
    let m = lattice.num_states();
    let mut alpha = Vec::with_capacity(lattice.num_visits());
    alpha.push(
        (0..m)
            .map(|s| lattice.log_initial[s] + lattice.log_emission[0][s])
            .collect::<Vec<T>>(),
    );
    let mut buf = vec![T::zero(); m];
    for t in 1..lattice.num_visits() {
        let prev = &alpha[t - 1];
        let a = &lattice.log_transition[t - 1];
        let row = (0..m)
            .map(|s2| {
                for s in 0..m {
                    buf[s] = prev[s] + a[(s, s2)];
                }
                log_sum_exp(&buf) + lattice.log_emission[t][s2]
            })
            .collect();
        alpha.push(row);
    }
    alpha
}

/// Backward table `beta[t][s] = log p(O_t+1..T, censor | S_t = s)`.
pub fn backward_table<T: Real>(lattice: &Lattice<T>) -> Vec<Vec<T>> {
    let m = lattice.num_states();
    let n = lattice.num_visits();
    let mut beta = vec![vec![T::zero(); m]; n];
    beta[n - 1] = lattice.log_terminal.clone();
    let mut buf = vec![T::zero(); m];
    for t in (0..n - 1).rev() {
        let a = &lattice.log_transition[t];
        for s in 0..m {
            for s2 in 0..m {
                buf[s2] = a[(s, s2)] + lattice.log_emission[t + 1][s2] + beta[t + 1][s2];
            }
            beta[t][s] = log_sum_exp(&buf);
        }
    }
    beta
}

fn terminal_scores<T: Real>(lattice: &Lattice<T>, alpha: &[Vec<T>]) -> Vec<T> {
    let last = alpha.last().expect("nonempty");
    last.iter()
        .zip(&lattice.log_terminal)
        .map(|(&a, &c)| a + c)
        .collect()
}

/// Log marginal likelihood of a lattice.
pub fn lattice_log_marginal<T: Real>(lattice: &Lattice<T>) -> T {
    let alpha = forward_table(lattice);
    log_sum_exp(&terminal_scores(lattice, &alpha))
}

/// Forward pass: filtered distributions and `log p(O | z)`.
pub fn forward<T: Real>(
    sequence: &ScreeningSequence<T>,
    class: &ClassModel<'_, T>,
) -> Result<StatePosterior<T>> {
    let lattice = Lattice::build(class, sequence)?;
    let alpha = forward_table(&lattice);
    Ok(StatePosterior {
        filtered: alpha.iter().map(|r| normalize_row(r)).collect(),
        smoothed: Vec::new(),
        viterbi_path: Vec::new(),
        log_marginal: log_sum_exp(&terminal_scores(&lattice, &alpha)),
    })
}

/// Smoothed marginals from a lattice.
pub fn lattice_smoothed<T: Real>(lattice: &Lattice<T>) -> Result<(Vec<Vec<T>>, T)> {
    let alpha = forward_table(lattice);
    let log_marginal = log_sum_exp(&terminal_scores(lattice, &alpha));
    if log_marginal == T::neg_infinity() {
        return Err(Error::Numerical(
            "observation sequence has zero likelihood".into(),
        ));
    }
    let beta = backward_table(lattice);
    let smoothed = alpha
        .iter()
        .zip(&beta)
        .map(|(a, b)| normalize_row(&a.iter().zip(b).map(|(&x, &y)| x + y).collect::<Vec<_>>()))
        .collect();
    Ok((smoothed, log_marginal))
}

/// `log p(S_t = s | O)` for every visit.
pub fn smoothed_marginals<T: Real>(
    sequence: &ScreeningSequence<T>,
    class: &ClassModel<'_, T>,
) -> Result<Vec<Vec<T>>> {
    let lattice = Lattice::build(class, sequence)?;
    lattice_smoothed(&lattice)
        .map(|(s, _)| s)
        .map_err(|_| Error::ImpossibleSequence {
            id: sequence.id.clone(),
        })
}

/// Forward, backward and Viterbi in one pass over a shared lattice.
pub fn posterior<T: Real>(
    sequence: &ScreeningSequence<T>,
    class: &ClassModel<'_, T>,
) -> Result<StatePosterior<T>> {
    let lattice = Lattice::build(class, sequence)?;
    let alpha = forward_table(&lattice);
    let (smoothed, log_marginal) =
        lattice_smoothed(&lattice).map_err(|_| Error::ImpossibleSequence {
            id: sequence.id.clone(),
        })?;
    let (viterbi_path, _) = lattice_viterbi(&lattice).expect("possible sequence has a path");
    Ok(StatePosterior {
        filtered: alpha.iter().map(|r| normalize_row(r)).collect(),
        smoothed,
        viterbi_path,
        log_marginal,
    })
}

/// Maximum a posteriori path and its joint log-probability; `None` if every
/// path has zero probability. Ties go to the lower state index.
pub fn lattice_viterbi<T: Real>(lattice: &Lattice<T>) -> Option<(Vec<usize>, T)> {
    let m = lattice.num_states();
    let n = lattice.num_visits();
    let mut delta: Vec<T> = (0..m)
        .map(|s| lattice.log_initial[s] + lattice.log_emission[0][s])
        .collect();
    let mut back = Vec::with_capacity(n.saturating_sub(1));
    for t in 1..n {
        let a = &lattice.log_transition[t - 1];
        let mut next = vec![T::neg_infinity(); m];
        let mut arg = vec![0usize; m];
        for s2 in 0..m {
            let mut best = T::neg_infinity();
            let mut best_s = 0;
            for s in 0..m {
                let v = delta[s] + a[(s, s2)];
                if v > best {
                    best = v;
                    best_s = s;
                }
            }
            next[s2] = best + lattice.log_emission[t][s2];
            arg[s2] = best_s;
        }
        back.push(arg);
        delta = next;
    }
    let mut best = T::neg_infinity();
    let mut last = 0;
    for s in 0..m {
        let v = delta[s] + lattice.log_terminal[s];
        if v > best {
            best = v;
            last = s;
        }
    }
    if best == T::neg_infinity() {
        return None;
    }
    let mut path = vec![last; n];
    for t in (1..n).rev() {
        path[t - 1] = back[t - 1][path[t]];
    }
    Some((path, best))
}

/// Most probable state path at the visit ages.
pub fn viterbi<T: Real>(
    sequence: &ScreeningSequence<T>,
    class: &ClassModel<'_, T>,
) -> Result<Vec<usize>> {
    viterbi_with_score(sequence, class).map(|(p, _)| p)
}

pub fn viterbi_with_score<T: Real>(
    sequence: &ScreeningSequence<T>,
    class: &ClassModel<'_, T>,
) -> Result<(Vec<usize>, T)> {
    let lattice = Lattice::build(class, sequence)?;
    lattice_viterbi(&lattice).ok_or_else(|| Error::ImpossibleSequence {
        id: sequence.id.clone(),
    })
}

fn sample_log_weights<T: Real, R: Rng + ?Sized>(logw: &[T], rng: &mut R) -> usize {
    let z = log_sum_exp(logw);
    let u = T::lit(rng.random::<f64>());
    let mut acc = T::zero();
    let mut last = 0;
    for (i, &w) in logw.iter().enumerate() {
        if w == T::neg_infinity() {
            continue;
        }
        acc = acc + (w - z).exp();
        last = i;
        if u < acc {
            return i;
        }
    }
    last
}

/// Forward-filter backward-sample on a lattice.
pub fn lattice_ffbs<T: Real, R: Rng + ?Sized>(
    lattice: &Lattice<T>,
    alpha: &[Vec<T>],
    rng: &mut R,
) -> Vec<usize> {
    let m = lattice.num_states();
    let n = lattice.num_visits();
    let mut path = vec![0; n];
    path[n - 1] = sample_log_weights(&terminal_scores(lattice, alpha), rng);
    let mut w = vec![T::zero(); m];
    for t in (0..n - 1).rev() {
        for s in 0..m {
            w[s] = alpha[t][s] + lattice.log_transition[t][(s, path[t + 1])];
        }
        path[t] = sample_log_weights(&w, rng);
    }
    path
}

/// Draws a path from `p(S | O, z)`.
pub fn ffbs_sample<T: Real, R: Rng + ?Sized>(
    sequence: &ScreeningSequence<T>,
    class: &ClassModel<'_, T>,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let lattice = Lattice::build(class, sequence)?;
    let alpha = forward_table(&lattice);
    if log_sum_exp(&terminal_scores(&lattice, &alpha)) == T::neg_infinity() {
        return Err(Error::ImpossibleSequence {
            id: sequence.id.clone(),
        });
    }
    Ok(lattice_ffbs(&lattice, &alpha, rng))
}

/// Posterior over frailty classes.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassPosterior<T> {
    pub probs: Vec<T>,
    /// `log p(O | z)` per class.
    pub per_class_loglik: Vec<T>,
}

impl<T: Real> ClassPosterior<T> {
    /// Normalizes `prior_z * exp(loglik_z)`; `None` if every term vanishes.
    pub fn from_logliks(class_prior: &[T], per_class_loglik: Vec<T>) -> Option<Self> {
        let joint: Vec<T> = class_prior
            .iter()
            .zip(&per_class_loglik)
            .map(|(&p, &l)| {
                if p > T::zero() {
                    p.ln() + l
                } else {
                    T::neg_infinity()
                }
            })
            .collect();
        let z = log_sum_exp(&joint);
        if z == T::neg_infinity() {
            return None;
        }
        Some(Self {
            probs: joint.iter().map(|&j| (j - z).exp()).collect(),
            per_class_loglik,
        })
    }

    /// `log Σ_z p_z p(O | z)`.
    pub fn log_marginal(&self, class_prior: &[T]) -> T {
        let joint: Vec<T> = class_prior
            .iter()
            .zip(&self.per_class_loglik)
            .map(|(&p, &l)| {
                if p > T::zero() {
                    p.ln() + l
                } else {
                    T::neg_infinity()
                }
            })
            .collect();
        log_sum_exp(&joint)
    }

    /// Most probable class, lower index on ties.
    pub fn map_class(&self) -> usize {
        let mut best = 0;
        for (z, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = z;
            }
        }
        best
    }
}

pub fn class_posterior<T: Real>(
    sequence: &ScreeningSequence<T>,
    model: &HierarchicalModel<T>,
) -> Result<ClassPosterior<T>> {
    let lls = (0..model.num_classes())
        .map(|z| forward(sequence, &model.class(z)).map(|f| f.log_marginal))
        .collect::<Result<Vec<_>>>()?;
    ClassPosterior::from_logliks(&model.class_prior, lls).ok_or_else(|| Error::ImpossibleSequence {
        id: sequence.id.clone(),
    })
}

/// Class posterior plus the Viterbi path under every class.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceInference<T> {
    pub class_posterior: ClassPosterior<T>,
    /// `paths[z]`, `None` where the sequence is impossible under class `z`.
    pub paths: Vec<Option<Vec<usize>>>,
}

/// One lattice per class feeds both the likelihood and the decoding.
pub fn infer_sequence<T: Real>(
    sequence: &ScreeningSequence<T>,
    model: &HierarchicalModel<T>,
) -> Result<SequenceInference<T>> {
    let mut lls = Vec::with_capacity(model.num_classes());
    let mut paths = Vec::with_capacity(model.num_classes());
    for z in 0..model.num_classes() {
        let lattice = Lattice::build(&model.class(z), sequence)?;
        lls.push(lattice_log_marginal(&lattice));
        paths.push(lattice_viterbi(&lattice).map(|(p, _)| p));
    }
    let class_posterior =
        ClassPosterior::from_logliks(&model.class_prior, lls).ok_or_else(|| {
            Error::ImpossibleSequence {
                id: sequence.id.clone(),
            }
        })?;
    Ok(SequenceInference {
        class_posterior,
        paths,
    })
}

/// Class posteriors for many sequences, evaluated in parallel; order preserved.
pub fn class_posteriors<T: Real>(
    sequences: &[ScreeningSequence<T>],
    model: &HierarchicalModel<T>,
) -> Vec<Result<ClassPosterior<T>>> {
    sequences
        .par_iter()
        .map(|s| class_posterior(s, model))
        .collect()
}

/// Full E-step quantities for many sequences, evaluated in parallel.
pub fn infer_batch<T: Real>(
    sequences: &[ScreeningSequence<T>],
    model: &HierarchicalModel<T>,
) -> Vec<Result<SequenceInference<T>>> {
    sequences
        .par_iter()
        .map(|s| infer_sequence(s, model))
        .collect()
}

/// One row of the per-visit diagnostic table.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagnosticRow<T> {
    pub id: String,
    pub visit_age: T,
    pub map_class: usize,
    pub viterbi_state: usize,
    /// Smoothed state probabilities under the MAP class.
    pub state_probs: Vec<T>,
}

pub fn diagnostics<T: Real>(
    sequence: &ScreeningSequence<T>,
    model: &HierarchicalModel<T>,
) -> Result<Vec<DiagnosticRow<T>>> {
    let z = class_posterior(sequence, model)?.map_class();
    let post = posterior(sequence, &model.class(z))?;
    Ok(sequence
        .visits
        .iter()
        .enumerate()
        .map(|(t, v)| DiagnosticRow {
            id: sequence.id.clone(),
            visit_age: v.age,
            map_class: z,
            viterbi_state: post.viterbi_path[t],
            state_probs: post.smoothed[t].iter().map(|x| x.exp()).collect(),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Censoring, Outcome, Visit};
    use crate::emissions::log_censor_likelihood;
    use crate::fixtures::{random_model, random_sequence, two_class_model};
    use crate::model::{
        AgePartition, ClassComponent, EmissionModel, PiecewiseIntensity, TransitionMask,
    };
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Joint log-probability of a path computed directly from the model,
    /// without going through the lattice.
    fn direct_path_score(
        class: &ClassModel<'_, f64>,
        seq: &ScreeningSequence<f64>,
        path: &[usize],
    ) -> f64 {
        let v = &seq.visits;
        let mut lp = class.initial_distribution(v[0].age).unwrap()[path[0]].ln();
        for t in 0..v.len() {
            lp += log_visit_likelihood(class.emission, path[t], &v[t]);
            let after = if v[t].treated {
                class.reset_target(path[t])
            } else {
                path[t]
            };
            if t + 1 < v.len() {
                let p = interval_transition(class.intensity, v[t].age, v[t + 1].age).unwrap();
                lp += p.prob(after, path[t + 1]).ln();
            } else if let Some(c) = seq.censor {
                lp += log_censor_likelihood(class, after, v[t].age, c.age, c.outcome).unwrap();
            }
        }
        lp
    }

    fn all_paths(m: usize, n: usize) -> Vec<Vec<usize>> {
        let mut out = vec![vec![]];
        for _ in 0..n {
            out = out
                .into_iter()
                .flat_map(|p| {
                    (0..m).map(move |s| {
                        let mut q = p.clone();
                        q.push(s);
                        q
                    })
                })
                .collect();
        }
        out
    }

    fn lse(xs: &[f64]) -> f64 {
        let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if m == f64::NEG_INFINITY {
            return m;
        }
        m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
    }

    #[test]
    fn forward_matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for case in 0..30 {
            let m = 2 + case % 2;
            let model = random_model(&mut rng, 1, m, case % 3 != 0);
            let t = 1 + case % 6;
            let seq = random_sequence(&mut rng, "x", t, 0.3);
            let class = model.class(0);
            let scores: Vec<f64> = all_paths(m, t)
                .iter()
                .map(|p| direct_path_score(&class, &seq, p))
                .collect();
            let exact = lse(&scores);
            let f = forward(&seq, &class).unwrap();
            if exact == f64::NEG_INFINITY {
                assert!(!f.is_possible());
                continue;
            }
            assert!(
                (f.log_marginal - exact).abs() < 1e-12 * exact.abs().max(1.0),
                "{} vs {exact}",
                f.log_marginal
            );
        }
    }

    #[test]
    fn smoothed_matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let model = random_model(&mut rng, 1, 3, true);
        let mut seq = random_sequence(&mut rng, "x", 5, 0.3);
        seq.censor.as_mut().unwrap().outcome = Outcome::Alive;
        let class = model.class(0);
        let paths = all_paths(3, 5);
        let scores: Vec<f64> = paths
            .iter()
            .map(|p| direct_path_score(&class, &seq, p))
            .collect();
        let z = lse(&scores);
        let sm = smoothed_marginals(&seq, &class).unwrap();
        for t in 0..5 {
            for s in 0..3 {
                let exact: f64 = paths
                    .iter()
                    .zip(&scores)
                    .filter(|(p, _)| p[t] == s)
                    .map(|(_, &l)| (l - z).exp())
                    .sum();
                assert!((sm[t][s].exp() - exact).abs() < 1e-12);
            }
            let row: f64 = sm[t].iter().map(|x| x.exp()).sum();
            assert!((row - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn viterbi_matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let model = random_model(&mut rng, 1, 3, true);
            let mut seq = random_sequence(&mut rng, "x", 5, 0.3);
            seq.censor.as_mut().unwrap().outcome = Outcome::Alive;
            let class = model.class(0);
            let mut best = (f64::NEG_INFINITY, vec![]);
            for p in all_paths(3, 5) {
                let l = direct_path_score(&class, &seq, &p);
                if l > best.0 {
                    best = (l, p);
                }
            }
            let (path, score) = viterbi_with_score(&seq, &class).unwrap();
            assert_eq!(path, best.1);
            assert!((score - best.0).abs() < 1e-12 * best.0.abs().max(1.0));
        }
    }

    #[test]
    fn viterbi_beats_sampled_paths() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let model = random_model(&mut rng, 1, 3, true);
        let class = model.class(0);
        for _ in 0..5 {
            let seq = random_sequence(&mut rng, "x", 8, 0.2);
            let Ok((_, best)) = viterbi_with_score(&seq, &class) else {
                continue;
            };
            for _ in 0..100 {
                let p = ffbs_sample(&seq, &class, &mut rng).unwrap();
                assert!(direct_path_score(&class, &seq, &p) <= best + 1e-9);
            }
        }
    }

    #[test]
    fn single_visit_with_fixed_initial_state() {
        let mut model = two_class_model();
        model.classes[0].initial = vec![vec![0.0, 1.0, 0.0]; 2];
        let class = model.class(0);
        let v = Visit::new(30.0, vec![vec![1, 0, 2, 0], vec![0, 1]]);
        let censor = Censoring {
            age: 33.0,
            outcome: Outcome::Alive,
        };
        let seq = ScreeningSequence::new("a", vec![v.clone()], Some(censor));
        let f = forward(&seq, &class).unwrap();
        let expect = log_visit_likelihood(class.emission, 1, &v)
            + log_censor_likelihood(&class, 1, 30.0, 33.0, Outcome::Alive).unwrap();
        assert!((f.log_marginal - expect).abs() < 1e-14);
    }

    #[test]
    fn identical_emissions_factor_out() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut model = random_model(&mut rng, 1, 3, false);
        let row = model.emission.grade_probs[0].clone();
        for s in 0..3 {
            model.emission.grade_probs[s] = row.clone();
            for k in 0..2 {
                model.emission.rates[(s, k)] = model.emission.rates[(0, k)];
            }
        }
        let mut seq = random_sequence(&mut rng, "x", 6, 0.0);
        seq.censor = None;
        let total: f64 = seq
            .visits
            .iter()
            .map(|v| log_visit_likelihood(&model.emission, 0, v))
            .sum();
        let f = forward(&seq, &model.class(0)).unwrap();
        assert!((f.log_marginal - total).abs() < 1e-12);
    }

    #[test]
    fn single_state_viterbi_is_constant() {
        let partition = AgePartition::single();
        let model = HierarchicalModel {
            class_prior: vec![1.0],
            classes: vec![ClassComponent {
                intensity: PiecewiseIntensity::zero(partition, 1),
                initial: vec![vec![1.0]],
                initial_priors: vec![vec![1.0]],
                emission: None,
            }],
            emission: EmissionModel {
                rates: Matrix::from_rows(&[vec![2.0]]).unwrap(),
                grade_probs: vec![vec![vec![0.3, 0.7]]],
                grade_priors: vec![vec![vec![1.0, 1.0]]],
                death_state: None,
            },
            normal_state: 0,
        };
        model.ensure_valid().unwrap();
        let seq = ScreeningSequence::new(
            "a",
            (0..4)
                .map(|i| Visit::new(20.0 + i as f64, vec![vec![1, 1]]))
                .collect(),
            None,
        );
        assert_eq!(viterbi(&seq, &model.class(0)).unwrap(), vec![0; 4]);
    }

    #[test]
    fn peaked_emissions_dominate_viterbi() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut model = random_model(&mut rng, 1, 3, false);
        // State s only ever produces grade s on the first test.
        for s in 0..3 {
            model.emission.grade_probs[s][0] =
                (0..3).map(|l| if l == s { 1.0 } else { 0.0 }).collect();
            model.emission.rates[(s, 0)] = 30.0;
        }
        let truth = [0, 2, 1, 1, 0];
        let visits = truth
            .iter()
            .enumerate()
            .map(|(t, &s)| {
                let mut h = vec![0; 3];
                h[s] = 30;
                Visit::new(25.0 + 2.0 * t as f64, vec![h, vec![0, 0]])
            })
            .collect();
        let seq = ScreeningSequence::new("a", visits, None);
        assert_eq!(viterbi(&seq, &model.class(0)).unwrap(), truth.to_vec());
    }

    #[test]
    fn ffbs_matches_exact_path_probabilities() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let model = random_model(&mut rng, 1, 2, false);
        let mut seq = random_sequence(&mut rng, "x", 3, 0.0);
        seq.censor = None;
        let class = model.class(0);
        let paths = all_paths(2, 3);
        let scores: Vec<f64> = paths
            .iter()
            .map(|p| direct_path_score(&class, &seq, p))
            .collect();
        let z = lse(&scores);
        let n = 100_000;
        let mut counts = vec![0usize; paths.len()];
        for _ in 0..n {
            let p = ffbs_sample(&seq, &class, &mut rng).unwrap();
            counts[paths.iter().position(|q| *q == p).unwrap()] += 1;
        }
        for (i, &l) in scores.iter().enumerate() {
            let p = (l - z).exp();
            let emp = counts[i] as f64 / n as f64;
            let se = (p * (1.0 - p) / n as f64).sqrt();
            assert!(
                (emp - p).abs() <= 3.0 * se + 1e-12,
                "path {:?}: {emp} vs {p}",
                paths[i]
            );
        }
    }

    #[test]
    fn ffbs_with_flat_emissions_follows_prior_marginals() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut model = random_model(&mut rng, 1, 3, false);
        for s in 0..3 {
            model.emission.rates[(s, 0)] = 0.0;
            model.emission.rates[(s, 1)] = 0.0;
        }
        let visits: Vec<_> = [30.0, 32.0, 37.0, 45.0]
            .iter()
            .map(|&a| Visit::new(a, vec![vec![0; 3], vec![0; 2]]))
            .collect();
        let seq = ScreeningSequence::new("a", visits.clone(), None);
        let class = model.class(0);
        let mut prior = class.initial_distribution(30.0).unwrap().to_vec();
        let mut marginals = vec![prior.clone()];
        for w in visits.windows(2) {
            let p = interval_transition(class.intensity, w[0].age, w[1].age).unwrap();
            prior = (0..3)
                .map(|j| (0..3).map(|i| prior[i] * p.prob(i, j)).sum())
                .collect();
            marginals.push(prior.clone());
        }
        let n = 50_000;
        let mut counts = vec![vec![0usize; 3]; 4];
        for _ in 0..n {
            for (t, s) in ffbs_sample(&seq, &class, &mut rng)
                .unwrap()
                .into_iter()
                .enumerate()
            {
                counts[t][s] += 1;
            }
        }
        for t in 0..4 {
            for s in 0..3 {
                let p = marginals[t][s];
                let se = (p * (1.0 - p) / n as f64).sqrt();
                let emp = counts[t][s] as f64 / n as f64;
                assert!((emp - p).abs() <= 3.0 * se + 1e-12);
            }
        }
    }

    #[test]
    fn deterministic_model_has_unique_path() {
        let mut model = two_class_model();
        model.classes[0].intensity = PiecewiseIntensity::zero(model.partition().clone(), 3);
        model.classes[0].initial = vec![vec![0.0, 1.0, 0.0]; 2];
        let seq = ScreeningSequence::new(
            "a",
            (0..3)
                .map(|i| Visit::new(30.0 + i as f64, vec![vec![0; 4], vec![0; 2]]))
                .collect(),
            None,
        );
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            assert_eq!(
                ffbs_sample(&seq, &model.class(0), &mut rng).unwrap(),
                vec![1, 1, 1]
            );
        }
    }

    #[test]
    fn class_posterior_cases() {
        let mut model = two_class_model();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let seq = crate::simulate::simulate_sequence(
            &model,
            "a",
            &[25.0, 28.0, 31.0],
            33.0,
            &crate::simulate::TreatmentPolicy::Never,
            &mut rng,
        )
        .unwrap()
        .sequence;
        let mut same = model.clone();
        same.classes[1] = same.classes[0].clone();
        same.class_prior = vec![0.3, 0.7];
        let p = class_posterior(&seq, &same).unwrap();
        assert!((p.probs[0] - 0.3).abs() < 1e-12 && (p.probs[1] - 0.7).abs() < 1e-12);
        model.class_prior = vec![1.0, 0.0];
        let p = class_posterior(&seq, &model).unwrap();
        assert_eq!(p.probs, vec![1.0, 0.0]);
    }

    #[test]
    fn class_posterior_from_likelihood_ratio() {
        let e2 = 2f64.exp();
        let p = ClassPosterior::from_logliks(&[0.5, 0.5], vec![-10.0, -12.0]).unwrap();
        assert!((p.probs[0] - e2 / (1.0 + e2)).abs() < 1e-12);
        assert!((p.probs[1] - 1.0 / (1.0 + e2)).abs() < 1e-12);
        let shifted = ClassPosterior::from_logliks(&[0.5, 0.5], vec![-510.0, -512.0]).unwrap();
        assert!((shifted.probs[0] - p.probs[0]).abs() < 1e-12);
        assert!(ClassPosterior::from_logliks(&[0.5, 0.5], vec![f64::NEG_INFINITY; 2]).is_none());
    }

    #[test]
    fn impossible_sequence_is_flagged() {
        // Death is reported at censoring but no state can reach it.
        let mut m = two_class_model();
        let partition = m.partition().clone();
        for c in &mut m.classes {
            c.intensity = PiecewiseIntensity::zero(partition.clone(), 3);
        }
        let seq = ScreeningSequence::new(
            "gone",
            vec![Visit::new(30.0, vec![vec![1, 0, 0, 0], vec![0, 0]])],
            Some(Censoring {
                age: 35.0,
                outcome: Outcome::Death,
            }),
        );
        let f = forward(&seq, &m.class(0)).unwrap();
        assert!(!f.is_possible());
        assert!(matches!(
            viterbi(&seq, &m.class(0)),
            Err(Error::ImpossibleSequence { .. })
        ));
        assert!(
            matches!(class_posterior(&seq, &m), Err(Error::ImpossibleSequence { id }) if id == "gone")
        );
    }

    #[test]
    fn treatment_restricts_next_support() {
        // 0 <-> 1, 2 -> 0; nothing enters 2, so after a reset to 0 state 2 is unreachable.
        let mask = TransitionMask::from_rows(&[
            vec![false, true, false],
            vec![true, false, false],
            vec![true, false, false],
        ])
        .unwrap();
        let q = crate::model::generator_from_rates(
            &Matrix::from_rows(&[
                vec![0.0, 0.3, 0.0],
                vec![0.2, 0.0, 0.0],
                vec![0.1, 0.0, 0.0],
            ])
            .unwrap(),
        );
        let intensity = PiecewiseIntensity::new(AgePartition::single(), vec![q], mask).unwrap();
        let em = EmissionModel {
            rates: Matrix::from_rows(&[vec![1.0], vec![1.0], vec![1.0]]).unwrap(),
            grade_probs: vec![vec![vec![0.5, 0.5]]; 3],
            grade_priors: vec![vec![vec![1.0, 1.0]]; 3],
            death_state: None,
        };
        let model = HierarchicalModel {
            class_prior: vec![1.0],
            classes: vec![ClassComponent {
                intensity,
                initial: vec![vec![0.0, 0.0, 1.0]],
                initial_priors: vec![vec![1.0; 3]],
                emission: None,
            }],
            emission: em,
            normal_state: 0,
        };
        model.ensure_valid().unwrap();
        let visits = vec![
            Visit::new(30.0, vec![vec![1, 0]]).treated(true),
            Visit::new(30.5, vec![vec![0, 1]]),
        ];
        let seq = ScreeningSequence::new("a", visits, None);
        let untreated = {
            let mut s = seq.clone();
            s.visits[0].treated = false;
            s
        };
        let f = forward(&seq, &model.class(0)).unwrap();
        assert_eq!(f.filtered[1][2], f64::NEG_INFINITY);
        let g = forward(&untreated, &model.class(0)).unwrap();
        assert!(g.filtered[1][2] > f64::NEG_INFINITY);
    }

    #[test]
    fn batch_preserves_order() {
        let model = two_class_model();
        let spec = crate::simulate::CohortSpec {
            size: 40,
            ..Default::default()
        };
        let seqs: Vec<_> = crate::simulate::simulate_cohort(&model, &spec, 3)
            .unwrap()
            .into_iter()
            .map(|s| s.sequence)
            .collect();
        let batch = class_posteriors(&seqs, &model);
        for (s, b) in seqs.iter().zip(batch) {
            assert_eq!(b.unwrap(), class_posterior(s, &model).unwrap());
        }
        let rows = diagnostics(&seqs[0], &model).unwrap();
        assert_eq!(rows.len(), seqs[0].len());
        for r in rows {
            assert!((r.state_probs.iter().sum::<f64>() - 1.0).abs() < 1e-10);
        }
    }
}
