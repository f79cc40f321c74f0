//! Starting values for EM.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::ScreeningSequence;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::{
    generator_from_rates, AgePartition, ClassComponent, EmissionModel, HierarchicalModel,
    PiecewiseIntensity, TransitionMask,
};
use crate::scalar::Real;

/// Shape of a model to be learned.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelStructure {
    pub num_classes: usize,
    pub num_states: usize,
    /// Interior boundaries of the age partition.
    pub age_boundaries: Vec<f64>,
    pub death_state: Option<usize>,
    pub normal_state: usize,
    /// Allowed transitions; all off-diagonal moves out of non-death states when absent.
    pub allowed: Option<Vec<Vec<bool>>>,
    /// Fixed class prior; uniform when absent.
    pub class_prior: Option<Vec<f64>>,
    /// Dirichlet concentration on every grade probability.
    pub grade_prior: f64,
    /// Dirichlet concentration on every initial-state probability.
    pub initial_prior: f64,
    /// Pseudo-count added to global grade frequencies.
    pub grade_smoothing: f64,
    /// Range of the log-uniform draw for initial intensities, per year.
    pub intensity_range: [f64; 2],
}

impl Default for ModelStructure {
    fn default() -> Self {
        Self {
            num_classes: 2,
            num_states: 3,
            age_boundaries: vec![23.0, 30.0, 60.0],
            death_state: Some(2),
            normal_state: 0,
            allowed: None,
            class_prior: None,
            grade_prior: 1.0,
            initial_prior: 1.0,
            grade_smoothing: 1.0,
            intensity_range: [1e-3, 1e-1],
        }
    }
}

impl ModelStructure {
    pub fn mask(&self) -> Result<TransitionMask> {
        match &self.allowed {
            Some(rows) => TransitionMask::from_rows(rows),
            None => Ok(TransitionMask::complete(
                self.num_states,
                &self.death_state.into_iter().collect::<Vec<_>>(),
            )),
        }
    }

    fn check(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Domain(m.to_string()));
        if self.num_classes == 0 || self.num_states == 0 {
            return bad("num_classes and num_states must be at least 1");
        }
        if self.death_state.is_some_and(|d| d >= self.num_states)
            || self.normal_state >= self.num_states
        {
            return bad("death_state and normal_state must be valid states");
        }
        if self.death_state == Some(self.normal_state) {
            return bad("normal_state cannot be the death state");
        }
        let [lo, hi] = self.intensity_range;
        if !(lo > 0.0 && hi >= lo) {
            return bad("intensity_range must be positive and ordered");
        }
        if !(self.grade_smoothing >= 0.0 && self.grade_prior > 0.0 && self.initial_prior > 0.0) {
            return bad("priors must be positive and grade_smoothing non-negative");
        }
        if let Some(p) = &self.class_prior {
            if p.len() != self.num_classes {
                return bad("class_prior length must equal num_classes");
            }
        }
        Ok(())
    }
}

/// Builds a starting model from data.
///
/// Intensities are drawn log-uniformly on allowed entries; emission rates are
/// the mean test count per visit (zero for death); initial distributions are
/// uniform over non-death states. Grade probabilities start from global grade
/// frequencies with Dirichlet smoothing. To break the symmetry between states,
/// state with severity rank `r` (0 for the normal state, rising with the state
/// index) tilts the frequencies by `(1 + l)^(2r)` toward higher grades `l`.
pub fn initialize<T: Real, R: Rng + ?Sized>(
    structure: &ModelStructure,
    grade_levels: &[usize],
    sequences: &[ScreeningSequence<T>],
    rng: &mut R,
) -> Result<HierarchicalModel<T>> {
    structure.check()?;
    if grade_levels.is_empty() || grade_levels.contains(&0) {
        return Err(Error::Domain(
            "each test type needs at least one grade level".into(),
        ));
    }
    let m = structure.num_states;
    let partition = AgePartition::new(
        structure
            .age_boundaries
            .iter()
            .map(|&b| T::lit(b))
            .collect(),
    )?;
    let mask = structure.mask()?;
    if mask.num_states() != m {
        return Err(Error::Domain(
            "allowed matrix does not match num_states".into(),
        ));
    }
    let [lo, hi] = structure.intensity_range;
    let (llo, lhi) = (lo.ln(), hi.ln());
    let alive: Vec<usize> = (0..m)
        .filter(|&s| Some(s) != structure.death_state)
        .collect();
    let classes = (0..structure.num_classes)
        .map(|_| {
            let segs = (0..partition.num_segments())
                .map(|_| {
                    let rates = Matrix::from_fn(m, m, |i, j| {
                        if mask.allows(i, j) {
                            T::lit((llo + (lhi - llo) * rng.random::<f64>()).exp())
                        } else {
                            T::zero()
                        }
                    });
                    generator_from_rates(&rates)
                })
                .collect();
            let mut initial = vec![T::zero(); m];
            for &s in &alive {
                initial[s] = T::one() / T::from_count(alive.len());
            }
            Ok(ClassComponent {
                intensity: PiecewiseIntensity::new(partition.clone(), segs, mask.clone())?,
                initial: vec![initial; partition.num_segments()],
                initial_priors: vec![
                    vec![T::lit(structure.initial_prior); m];
                    partition.num_segments()
                ],
                emission: None,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let tests = grade_levels.len();
    let mut visits = 0usize;
    let mut counts = vec![0u64; tests];
    let mut grades: Vec<Vec<f64>> = grade_levels.iter().map(|&l| vec![0.0; l]).collect();
    for seq in sequences {
        for v in &seq.visits {
            visits += 1;
            for (k, hist) in v.results.iter().enumerate().take(tests) {
                for (l, &g) in hist.iter().enumerate().take(grade_levels[k]) {
                    counts[k] += g as u64;
                    grades[k][l] += g as f64;
                }
            }
        }
    }
    let mean_rate: Vec<f64> = counts
        .iter()
        .map(|&c| {
            if visits > 0 {
                (c as f64 / visits as f64).max(1e-3)
            } else {
                1.0
            }
        })
        .collect();
    let rank_of = |s: usize| {
        alive
            .iter()
            .filter(|&&a| a != structure.normal_state && a < s)
            .count()
            + usize::from(s != structure.normal_state)
    };
    let rates = Matrix::from_fn(m, tests, |s, k| {
        if Some(s) == structure.death_state {
            T::zero()
        } else {
            T::lit(mean_rate[k])
        }
    });
    let grade_probs = (0..m)
        .map(|s| {
            let tilt = if Some(s) == structure.death_state {
                0
            } else {
                rank_of(s)
            };
            grades
                .iter()
                .map(|freq| {
                    let w: Vec<f64> = freq
                        .iter()
                        .enumerate()
                        .map(|(l, &f)| {
                            (f + structure.grade_smoothing.max(1e-6))
                                * ((1 + l) as f64).powi(2 * tilt as i32)
                        })
                        .collect();
                    let total: f64 = w.iter().sum();
                    w.into_iter().map(|x| T::lit(x / total)).collect()
                })
                .collect()
        })
        .collect();
    let class_prior = match &structure.class_prior {
        Some(p) => p.iter().map(|&x| T::lit(x)).collect(),
        None => vec![T::one() / T::from_count(structure.num_classes); structure.num_classes],
    };
    let model = HierarchicalModel {
        class_prior,
        classes,
        emission: EmissionModel {
            rates,
            grade_probs,
            grade_priors: (0..m)
                .map(|_| {
                    grade_levels
                        .iter()
                        .map(|&l| vec![T::lit(structure.grade_prior); l])
                        .collect()
                })
                .collect(),
            death_state: structure.death_state,
        },
        normal_state: structure.normal_state,
    };
    model.ensure_valid()?;
    Ok(model)
}
