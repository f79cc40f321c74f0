//! Last-visit prediction and frailty-based risk bands.

use serde::{Deserialize, Serialize};

use crate::data::{ScreeningSequence, Visit};
use crate::error::{Error, Result};
use crate::inference::{forward, ClassPosterior};
use crate::kernel::interval_transition;
use crate::model::HierarchicalModel;
use crate::scalar::Real;

/// Which results count as a high-risk finding.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct HighRiskRule {
    /// Lowest grade index that counts as high grade.
    pub min_grade: usize,
    /// Test types that enter the rule. Indices beyond the model's test types
    /// are ignored.
    pub tests: Vec<usize>,
}

impl Default for HighRiskRule {
    fn default() -> Self {
        Self {
            min_grade: 2,
            tests: vec![0, 1],
        }
    }
}

impl HighRiskRule {
    /// Whether a visit contains at least one high-grade result.
    pub fn observed<T: Real>(&self, visit: &Visit<T>) -> bool {
        self.tests.iter().any(|&k| {
            visit
                .results
                .get(k)
                .is_some_and(|h| h.iter().skip(self.min_grade).any(|&c| c > 0))
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionResult<T> {
    pub p_star: T,
    pub hard_label: bool,
    pub class_posterior: ClassPosterior<T>,
    /// Per-class probability of a high-risk finding.
    pub class_p_star: Vec<T>,
    /// `p(S_T = s | history)`, mixed over classes.
    pub state_distribution: Vec<T>,
    /// Expected grade probabilities per test type at the last visit.
    pub predicted_grade_distribution: Vec<Vec<T>>,
}

/// Distribution of the state at `age` for class `z` given the history and
/// survival to `age`, plus the probability of that survival. The distribution
/// is left unnormalized when survival is impossible.
fn last_state_distribution<T: Real>(
    history: &ScreeningSequence<T>,
    model: &HierarchicalModel<T>,
    z: usize,
    age: T,
    filtered_last: &[T],
) -> Result<(Vec<T>, T)> {
    let class = model.class(z);
    let m = class.num_states();
    let last = history.visits.last().expect("nonempty history");
    let mut start = vec![T::zero(); m];
    for (s, &lp) in filtered_last.iter().enumerate() {
        let target = if last.treated {
            class.reset_target(s)
        } else {
            s
        };
        start[target] = start[target] + lp.exp();
    }
    let p = interval_transition(class.intensity, last.age, age)?;
    let mut dist = p.entries.left_mul_vec(&start);
    if let Some(d) = class.death_state() {
        dist[d] = T::zero();
    }
    let total: T = dist.iter().copied().sum();
    if !(total > T::zero()) {
        return Ok((dist, T::zero()));
    }
    Ok((dist.into_iter().map(|x| x / total).collect(), total))
}

/// Class posterior and per-class state distribution at a visit at `age`,
/// given the earlier visits in `history`.
///
/// A visit implies survival, so both are conditioned on being alive at `age`.
#[derive(Debug, Clone, PartialEq)]
pub struct LastVisitState<T> {
    pub class_posterior: ClassPosterior<T>,
    /// `states[z][s]`; empty for classes that cannot explain the history.
    pub states: Vec<Vec<T>>,
}

pub fn last_visit_state<T: Real>(
    history: &ScreeningSequence<T>,
    age: T,
    model: &HierarchicalModel<T>,
) -> Result<LastVisitState<T>> {
    if history.is_empty() {
        return Err(Error::Empty(format!(
            "sequence {} has no history before the last visit",
            history.id
        )));
    }
    let history = ScreeningSequence {
        censor: None,
        ..history.clone()
    };
    let mut logliks = Vec::with_capacity(model.num_classes());
    let mut states = Vec::with_capacity(model.num_classes());
    for z in 0..model.num_classes() {
        let f = forward(&history, &model.class(z))?;
        let filtered = f.filtered.last().cloned().unwrap_or_default();
        if f.is_possible() {
            let (dist, alive) = last_state_distribution(&history, model, z, age, &filtered)?;
            logliks.push(f.log_marginal + alive.ln());
            states.push(dist);
        } else {
            logliks.push(T::neg_infinity());
            states.push(Vec::new());
        }
    }
    let class_posterior =
        ClassPosterior::from_logliks(&model.class_prior, logliks).ok_or_else(|| {
            Error::ImpossibleSequence {
                id: history.id.clone(),
            }
        })?;
    Ok(LastVisitState {
        class_posterior,
        states,
    })
}

/// Probability of at least one high-risk result at a visit at `age` with
/// `counts[k]` tests of each type, given the earlier visits.
pub fn predict_last_visit<T: Real>(
    history: &ScreeningSequence<T>,
    age: T,
    counts: &[u32],
    model: &HierarchicalModel<T>,
    rule: &HighRiskRule,
) -> Result<PredictionResult<T>> {
    let LastVisitState {
        class_posterior,
        states: dists,
    } = last_visit_state(history, age, model)?;
    let tests = model.emission.num_tests();
    let mut class_p_star = Vec::with_capacity(model.num_classes());
    let mut state_distribution: Vec<T> = Vec::new();
    let mut grade_dist: Vec<Vec<T>> = model
        .emission
        .grade_levels()
        .iter()
        .map(|&l| vec![T::zero(); l])
        .collect();
    let mut p_star = T::zero();
    for (z, (&w, dist)) in class_posterior.probs.iter().zip(&dists).enumerate() {
        if !(w > T::zero()) {
            class_p_star.push(T::zero());
            continue;
        }
        let em = model.emission_for(z);
        let mut clear = T::zero();
        for (s, &ps) in dist.iter().enumerate() {
            let mut q = T::one();
            for &k in rule.tests.iter().filter(|&&k| k < tests) {
                let e = counts.get(k).copied().unwrap_or(0);
                if e == 0 {
                    continue;
                }
                let high: T = em.grade_probs[s][k]
                    .iter()
                    .skip(rule.min_grade)
                    .copied()
                    .sum();
                q = q * (T::one() - high).max(T::zero()).powi(e as i32);
            }
            clear = clear + ps * q;
            for (k, g) in grade_dist.iter_mut().enumerate() {
                for (l, x) in g.iter_mut().enumerate() {
                    *x = *x + w * ps * em.grade_probs[s][k][l];
                }
            }
        }
        let pz = (T::one() - clear).max(T::zero()).min(T::one());
        class_p_star.push(pz);
        p_star = p_star + w * pz;
        if state_distribution.len() < dist.len() {
            state_distribution.resize(dist.len(), T::zero());
        }
        for (acc, &x) in state_distribution.iter_mut().zip(dist) {
            *acc = *acc + w * x;
        }
    }
    let p_star = p_star.max(T::zero()).min(T::one());
    Ok(PredictionResult {
        p_star,
        hard_label: p_star >= T::lit(0.5),
        class_posterior,
        class_p_star,
        state_distribution,
        predicted_grade_distribution: grade_dist,
    })
}

/// Splits off the last visit, predicts it from the rest and returns the
/// prediction together with the observed label.
pub fn predict_sequence<T: Real>(
    sequence: &ScreeningSequence<T>,
    model: &HierarchicalModel<T>,
    rule: &HighRiskRule,
) -> Result<(PredictionResult<T>, bool)> {
    let (history, last) = sequence
        .history()
        .ok_or_else(|| Error::Empty(format!("sequence {} has no visits", sequence.id)))?;
    let counts = last.counts();
    let r = predict_last_visit(&history, last.age, &counts, model, rule)?;
    Ok((r, rule.observed(last)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RiskBand {
    Low,
    Unknown,
    Medium,
    High,
}

impl RiskBand {
    pub const ALL: [RiskBand; 4] = [
        RiskBand::Low,
        RiskBand::Unknown,
        RiskBand::Medium,
        RiskBand::High,
    ];

    pub fn name(self) -> &'static str {
        match self {
            RiskBand::Low => "low",
            RiskBand::Unknown => "unknown",
            RiskBand::Medium => "medium",
            RiskBand::High => "high",
        }
    }
}

/// Cut points between the four bands.
///
/// With cuts `(a, b, c)`: `[0, a)` low, `[a, b)` unknown, `[b, c]` medium,
/// `(c, 1]` high.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RiskThresholds {
    pub cuts: [f64; 3],
}

impl Default for RiskThresholds {
    fn default() -> Self {
        Self {
            cuts: [0.125, 0.25, 0.75],
        }
    }
}

impl RiskThresholds {
    pub fn new(cuts: [f64; 3]) -> Result<Self> {
        let ok = cuts.iter().all(|&c| (0.0..=1.0).contains(&c))
            && cuts[0] < cuts[1]
            && cuts[1] < cuts[2];
        if !ok {
            return Err(Error::Domain(format!(
                "risk thresholds must be strictly increasing within [0, 1], got {cuts:?}"
            )));
        }
        Ok(Self { cuts })
    }

    pub fn band(&self, posterior: f64) -> Result<RiskBand> {
        if !(0.0..=1.0).contains(&posterior) {
            return Err(Error::Domain(format!(
                "posterior {posterior} outside [0, 1]"
            )));
        }
        let [a, b, c] = self.cuts;
        Ok(if posterior < a {
            RiskBand::Low
        } else if posterior < b {
            RiskBand::Unknown
        } else if posterior <= c {
            RiskBand::Medium
        } else {
            RiskBand::High
        })
    }
}

/// Risk band of each individual from the posterior probability of the frail
/// class.
pub fn risk_stratify<T: Real>(
    posteriors: &[ClassPosterior<T>],
    frail_class: usize,
    thresholds: &RiskThresholds,
) -> Result<Vec<RiskBand>> {
    RiskThresholds::new(thresholds.cuts)?;
    posteriors
        .iter()
        .map(|p| {
            let x = p
                .probs
                .get(frail_class)
                .ok_or_else(|| Error::Domain(format!("frail class {frail_class} out of range")))?;
            thresholds.band(x.as_f64().clamp(0.0, 1.0))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Visit;
    use crate::emissions::log_visit_likelihood;
    use crate::fixtures::{random_model, random_sequence, two_class_model};
    use crate::linalg::Matrix;
    use crate::model::{
        AgePartition, ClassComponent, EmissionModel, PiecewiseIntensity, TransitionMask,
    };
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn single_state(probs: Vec<f64>) -> HierarchicalModel<f64> {
        let partition = AgePartition::single();
        let levels = probs.len();
        HierarchicalModel {
            class_prior: vec![1.0],
            classes: vec![ClassComponent {
                intensity: PiecewiseIntensity::new(
                    partition,
                    vec![Matrix::zeros(1, 1)],
                    TransitionMask::complete(1, &[]),
                )
                .unwrap(),
                initial: vec![vec![1.0]],
                initial_priors: vec![vec![1.0]],
                emission: None,
            }],
            emission: EmissionModel {
                rates: Matrix::from_rows(&[vec![1.0]]).unwrap(),
                grade_probs: vec![vec![probs]],
                grade_priors: vec![vec![vec![1.0; levels]]],
                death_state: None,
            },
            normal_state: 0,
        }
    }

    fn one_visit(age: f64, hist: Vec<u32>) -> ScreeningSequence<f64> {
        ScreeningSequence::new("a", vec![Visit::new(age, vec![hist])], None)
    }

    #[test]
    fn high_grade_mass_gives_p_star() {
        let m = single_state(vec![0.5, 0.2, 0.2, 0.1]);
        let rule = HighRiskRule {
            min_grade: 2,
            tests: vec![0],
        };
        let r =
            predict_last_visit(&one_visit(20.0, vec![1, 0, 0, 0]), 22.0, &[1], &m, &rule).unwrap();
        assert!((r.p_star - 0.3).abs() < 1e-15);
        assert!(!r.hard_label);
        let r =
            predict_last_visit(&one_visit(20.0, vec![1, 0, 0, 0]), 22.0, &[2], &m, &rule).unwrap();
        assert!((r.p_star - (1.0 - 0.7f64 * 0.7)).abs() < 1e-15);
        assert!(r.hard_label);
    }

    #[test]
    fn low_grade_only_model_never_predicts_high_risk() {
        let m = single_state(vec![1.0, 0.0, 0.0]);
        let r = predict_last_visit(
            &one_visit(20.0, vec![2, 0, 0]),
            23.0,
            &[5],
            &m,
            &HighRiskRule::default(),
        )
        .unwrap();
        assert_eq!(r.p_star, 0.0);
    }

    #[test]
    fn empty_history_is_an_error() {
        let m = single_state(vec![1.0, 0.0, 0.0]);
        let empty = ScreeningSequence::new("e", vec![], None);
        assert!(predict_last_visit(&empty, 30.0, &[1], &m, &HighRiskRule::default()).is_err());
    }

    /// Brute force over the class, every history path and the last state.
    fn enumerate_p_star(
        model: &HierarchicalModel<f64>,
        seq: &ScreeningSequence<f64>,
        rule: &HighRiskRule,
    ) -> f64 {
        let (history, last) = seq.history().unwrap();
        let t = history.len();
        let mut num = 0.0;
        let mut den = 0.0;
        for z in 0..model.num_classes() {
            let class = model.class(z);
            let m = class.num_states();
            let dead = |s: usize| Some(s) == class.death_state();
            let init = class.initial_distribution(history.visits[0].age).unwrap();
            let mut path = vec![0usize; t];
            loop {
                let mut w = model.class_prior[z] * init[path[0]];
                for i in 0..t {
                    let v = &history.visits[i];
                    w *= log_visit_likelihood(class.emission, path[i], v).exp();
                    if i + 1 < t {
                        let from = if v.treated {
                            class.reset_target(path[i])
                        } else {
                            path[i]
                        };
                        let p =
                            interval_transition(class.intensity, v.age, history.visits[i + 1].age)
                                .unwrap();
                        w *= p.prob(from, path[i + 1]);
                    }
                }
                let lv = history.visits.last().unwrap();
                let from = if lv.treated {
                    class.reset_target(path[t - 1])
                } else {
                    path[t - 1]
                };
                let p = interval_transition(class.intensity, lv.age, last.age).unwrap();
                for s in (0..m).filter(|&s| !dead(s)) {
                    let ws = w * p.prob(from, s);
                    let mut clear = 1.0;
                    for &k in &rule.tests {
                        if k >= last.results.len() {
                            continue;
                        }
                        let high: f64 = class.emission.grade_probs[s][k]
                            .iter()
                            .skip(rule.min_grade)
                            .sum();
                        clear *= (1.0 - high).powi(last.count(k) as i32);
                    }
                    num += ws * (1.0 - clear);
                    den += ws;
                }
                let mut i = 0;
                loop {
                    if i == t {
                        break;
                    }
                    path[i] += 1;
                    if path[i] < m {
                        break;
                    }
                    path[i] = 0;
                    i += 1;
                }
                if i == t {
                    break;
                }
            }
        }
        num / den
    }

    #[test]
    fn matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let rule = HighRiskRule {
            min_grade: 1,
            tests: vec![0, 1],
        };
        let mut checked = 0;
        for _ in 0..40 {
            let with_death = checked % 2 == 0;
            let model = random_model(&mut rng, 2, if with_death { 3 } else { 2 }, with_death);
            let seq = random_sequence(&mut rng, "r", 4, 0.3);
            if seq.len() < 2 {
                continue;
            }
            let Ok((r, _)) = predict_sequence(&seq, &model, &rule) else {
                continue;
            };
            let want = enumerate_p_star(&model, &seq, &rule);
            assert!((r.p_star - want).abs() < 1e-12, "{} vs {}", r.p_star, want);
            let mixed: f64 = r
                .class_posterior
                .probs
                .iter()
                .zip(&r.class_p_star)
                .map(|(w, p)| w * p)
                .sum();
            assert!((mixed - r.p_star).abs() < 1e-12);
            checked += 1;
        }
        assert!(checked >= 20);
    }

    #[test]
    fn treatment_before_last_visit_resets_state() {
        let model = two_class_model();
        let high = vec![vec![0, 0, 0, 2], vec![0, 2]];
        let mut seq = ScreeningSequence::new(
            "t",
            vec![
                Visit::new(30.0, high.clone()),
                Visit::new(30.5, vec![vec![1, 0, 0, 0], vec![1, 0]]),
            ],
            None,
        );
        let rule = HighRiskRule::default();
        let (untreated, _) = predict_sequence(&seq, &model, &rule).unwrap();
        seq.visits[0].treated = true;
        let (treated, _) = predict_sequence(&seq, &model, &rule).unwrap();
        assert!(treated.p_star < untreated.p_star);
        assert!((enumerate_p_star(&model, &seq, &rule) - treated.p_star).abs() < 1e-12);
    }

    #[test]
    fn observed_label_uses_rule() {
        let rule = HighRiskRule::default();
        let v = Visit::new(1.0, vec![vec![0, 1, 0, 0], vec![0, 1]]);
        assert!(!rule.observed(&v));
        let v = Visit::new(1.0, vec![vec![0, 0, 1, 0], vec![1, 0]]);
        assert!(rule.observed(&v));
        let v = Visit::new(1.0, vec![vec![1, 0, 0, 0], vec![1, 0], vec![0, 0, 3]]);
        assert!(!rule.observed(&v));
    }

    fn cp(p: f64) -> ClassPosterior<f64> {
        ClassPosterior {
            probs: vec![1.0 - p, p],
            per_class_loglik: vec![0.0, 0.0],
        }
    }

    #[test]
    fn risk_bands() {
        let t = RiskThresholds::default();
        let got = risk_stratify(
            &[
                cp(0.0),
                cp(0.2),
                cp(0.9),
                cp(0.125),
                cp(0.25),
                cp(0.75),
                cp(1.0),
            ],
            1,
            &t,
        )
        .unwrap();
        use RiskBand::*;
        assert_eq!(got, vec![Low, Unknown, High, Unknown, Medium, Medium, High]);
        assert!(RiskThresholds::new([0.3, 0.2, 0.9]).is_err());
        assert!(risk_stratify(
            &[cp(0.5)],
            1,
            &RiskThresholds {
                cuts: [0.5, 0.5, 0.6]
            }
        )
        .is_err());
    }
}
