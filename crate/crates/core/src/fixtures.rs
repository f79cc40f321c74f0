//! Reference models and random instances used by examples, tests and the
//! acceptance suite.

use rand::Rng;

use crate::data::{Censoring, Outcome, ScreeningSequence, Visit};
use crate::linalg::Matrix;
use crate::model::{
    AgePartition, ClassComponent, EmissionModel, HierarchicalModel, PiecewiseIntensity,
    TransitionMask,
};

/// Random intensity matrix with off-diagonal rates in `[0, scale)`.
pub fn random_generator<R: Rng + ?Sized>(rng: &mut R, n: usize, scale: f64) -> Matrix<f64> {
    let rates = Matrix::from_fn(n, n, |i, j| {
        if i == j {
            0.0
        } else {
            rng.random::<f64>() * scale
        }
    });
    crate::model::generator_from_rates(&rates)
}

/// Off-diagonal rates `(from, to, rate)` turned into a generator.
fn generator(n: usize, rates: &[(usize, usize, f64)]) -> Matrix<f64> {
    let mut m = Matrix::zeros(n, n);
    for &(i, j, r) in rates {
        m[(i, j)] = r;
    }
    crate::model::generator_from_rates(&m)
}

/// States of [`two_class_model`].
pub const NORMAL: usize = 0;
pub const LESION: usize = 1;
pub const DEATH: usize = 2;

/// Mask for normal ⇄ lesion with death reachable from both.
pub fn screening_mask() -> TransitionMask {
    TransitionMask::from_rows(&[
        vec![false, true, true],
        vec![true, false, true],
        vec![false, false, false],
    ])
    .expect("square")
}

/// Two test types: a 4-grade test and a 2-grade test. Death emits nothing.
pub fn screening_emission() -> EmissionModel<f64> {
    EmissionModel {
        rates: Matrix::from_rows(&[vec![3.0, 3.0], vec![3.0, 3.0], vec![0.0, 0.0]]).unwrap(),
        grade_probs: vec![
            vec![vec![0.85, 0.10, 0.04, 0.01], vec![0.9, 0.1]],
            vec![vec![0.05, 0.15, 0.40, 0.40], vec![0.15, 0.85]],
            vec![vec![0.25; 4], vec![0.5; 2]],
        ],
        grade_priors: vec![vec![vec![1.0; 4], vec![1.0; 2]]; 3],
        death_state: Some(DEATH),
    }
}

/// Low-risk and high-risk classes over `[0, 40), [40, ∞)` with three states
/// (normal, lesion, death).
pub fn two_class_model() -> HierarchicalModel<f64> {
    let partition = AgePartition::new(vec![40.0]).unwrap();
    let low = vec![
        generator(
            3,
            &[(0, 1, 0.10), (1, 0, 0.50), (0, 2, 0.010), (1, 2, 0.05)],
        ),
        generator(
            3,
            &[(0, 1, 0.08), (1, 0, 0.40), (0, 2, 0.020), (1, 2, 0.08)],
        ),
    ];
    let high = vec![
        generator(
            3,
            &[(0, 1, 0.30), (1, 0, 0.05), (0, 2, 0.010), (1, 2, 0.05)],
        ),
        generator(
            3,
            &[(0, 1, 0.20), (1, 0, 0.04), (0, 2, 0.020), (1, 2, 0.08)],
        ),
    ];
    let class = |segs: Vec<Matrix<f64>>, initial: Vec<Vec<f64>>| ClassComponent {
        intensity: PiecewiseIntensity::new(partition.clone(), segs, screening_mask()).unwrap(),
        initial,
        initial_priors: vec![vec![1.0; 3]; 2],
        emission: None,
    };
    HierarchicalModel {
        class_prior: vec![0.6, 0.4],
        classes: vec![
            class(low, vec![vec![0.95, 0.05, 0.0], vec![0.9, 0.1, 0.0]]),
            class(high, vec![vec![0.7, 0.3, 0.0], vec![0.6, 0.4, 0.0]]),
        ],
        emission: screening_emission(),
        normal_state: NORMAL,
    }
}

/// Mask for normal ⇄ lesion with death reachable only from the lesion.
pub fn progression_mask() -> TransitionMask {
    TransitionMask::from_rows(&[
        vec![false, true, false],
        vec![true, false, true],
        vec![false, false, false],
    ])
    .expect("square")
}

/// Two well-separated classes over `[0, 35), [35, ∞)` on [`progression_mask`]:
/// lesions are transient in class 0 and persistent in class 1.
pub fn recovery_model() -> HierarchicalModel<f64> {
    let partition = AgePartition::new(vec![35.0]).unwrap();
    let class = |segs: Vec<Matrix<f64>>, initial: Vec<Vec<f64>>| ClassComponent {
        intensity: PiecewiseIntensity::new(partition.clone(), segs, progression_mask()).unwrap(),
        initial,
        initial_priors: vec![vec![1.0; 3]; 2],
        emission: None,
    };
    let low = vec![
        generator(3, &[(0, 1, 0.10), (1, 0, 0.40), (1, 2, 0.10)]),
        generator(3, &[(0, 1, 0.08), (1, 0, 0.30), (1, 2, 0.15)]),
    ];
    let high = vec![
        generator(3, &[(0, 1, 0.30), (1, 0, 0.10), (1, 2, 0.10)]),
        generator(3, &[(0, 1, 0.25), (1, 0, 0.12), (1, 2, 0.15)]),
    ];
    HierarchicalModel {
        class_prior: vec![0.6, 0.4],
        classes: vec![
            class(low, vec![vec![0.9, 0.1, 0.0], vec![0.85, 0.15, 0.0]]),
            class(high, vec![vec![0.6, 0.4, 0.0], vec![0.5, 0.5, 0.0]]),
        ],
        emission: screening_emission(),
        normal_state: NORMAL,
    }
}

fn random_simplex<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    let w: Vec<f64> = (0..n).map(|_| 0.05 + rng.random::<f64>()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|x| x / s).collect()
}

/// Random model on a two-segment partition `[0, 40), [40, ∞)`.
///
/// With `with_death`, the last state is an absorbing death state that emits
/// no tests. Grade levels are `[3, 2]`.
pub fn random_model<R: Rng + ?Sized>(
    rng: &mut R,
    num_classes: usize,
    num_states: usize,
    with_death: bool,
) -> HierarchicalModel<f64> {
    let partition = AgePartition::new(vec![40.0]).unwrap();
    let death = with_death.then(|| num_states - 1);
    let absorbing: Vec<usize> = death.into_iter().collect();
    let mask = TransitionMask::complete(num_states, &absorbing);
    let levels = [3usize, 2];
    let alive: Vec<usize> = (0..num_states).filter(|&s| Some(s) != death).collect();
    let classes = (0..num_classes)
        .map(|_| {
            let segs = (0..2)
                .map(|_| {
                    let rates = Matrix::from_fn(num_states, num_states, |i, j| {
                        if mask.allows(i, j) {
                            0.02 + 0.4 * rng.random::<f64>()
                        } else {
                            0.0
                        }
                    });
                    crate::model::generator_from_rates(&rates)
                })
                .collect();
            let initial = (0..2)
                .map(|_| {
                    let p = random_simplex(rng, alive.len());
                    let mut full = vec![0.0; num_states];
                    for (&s, v) in alive.iter().zip(p) {
                        full[s] = v;
                    }
                    full
                })
                .collect();
            ClassComponent {
                intensity: PiecewiseIntensity::new(partition.clone(), segs, mask.clone()).unwrap(),
                initial,
                initial_priors: vec![vec![1.0 + rng.random::<f64>(); num_states]; 2],
                emission: None,
            }
        })
        .collect();
    let rates = Matrix::from_fn(num_states, levels.len(), |s, _| {
        if Some(s) == death {
            0.0
        } else {
            0.5 + 2.0 * rng.random::<f64>()
        }
    });
    let grade_probs = (0..num_states)
        .map(|_| levels.iter().map(|&l| random_simplex(rng, l)).collect())
        .collect();
    let grade_priors = (0..num_states)
        .map(|_| {
            levels
                .iter()
                .map(|&l| vec![1.0 + rng.random::<f64>(); l])
                .collect()
        })
        .collect();
    let prior = random_simplex(rng, num_classes);
    HierarchicalModel {
        class_prior: prior,
        classes,
        emission: EmissionModel {
            rates,
            grade_probs,
            grade_priors,
            death_state: death,
        },
        normal_state: 0,
    }
}

/// Random observation sequence with `visits` visits, grade levels `[3, 2]`,
/// occasional treatment and a censoring record.
pub fn random_sequence<R: Rng + ?Sized>(
    rng: &mut R,
    id: &str,
    visits: usize,
    treatment_prob: f64,
) -> ScreeningSequence<f64> {
    let mut age = 25.0 + 20.0 * rng.random::<f64>();
    let mut out = Vec::with_capacity(visits);
    for _ in 0..visits {
        let mut hist = |l: usize| -> Vec<u32> {
            let mut h = vec![0u32; l];
            let n = rng.random_range(0..3u32);
            for _ in 0..n {
                h[rng.random_range(0..l)] += 1;
            }
            h
        };
        let results = vec![hist(3), hist(2)];
        let treated = rng.random::<f64>() < treatment_prob;
        out.push(Visit::new(age, results).treated(treated));
        age += 0.5 + 4.0 * rng.random::<f64>();
    }
    let last = out.last().map_or(age, |v| v.age);
    let censor = Censoring {
        age: last + 3.0 * rng.random::<f64>(),
        outcome: if rng.random::<f64>() < 0.3 {
            Outcome::Death
        } else {
            Outcome::Alive
        },
    };
    ScreeningSequence::new(id, out, Some(censor))
}
