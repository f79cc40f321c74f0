//! Flat unconstrained coordinates for the free parameters of a model.
//!
//! Positive quantities are stored as logs, probability vectors as logits
//! relative to their last supported entry (held at zero). Entries that are
//! zero in the template model are structural and never move.

use crate::config::FitTargets;
use crate::linalg::Matrix;
use crate::model::{generator_from_rates, HierarchicalModel, PiecewiseIntensity};
use crate::scalar::Real;

/// A probability vector whose supported entries are free.
#[derive(Debug, Clone, PartialEq)]
pub struct SimplexBlock {
    /// Indices with positive probability; the last one is the reference.
    pub support: Vec<usize>,
    /// Position of the first free coordinate in the flat vector.
    pub offset: usize,
}

impl SimplexBlock {
    pub fn free(&self) -> usize {
        self.support.len().saturating_sub(1)
    }
}

/// Emission models in the parameter vector: index 0 is the shared model,
/// then each class-specific override in class order.
#[derive(Debug, Clone, PartialEq)]
pub struct EmissionSlots {
    /// `slot_of_class[z]`.
    pub slot_of_class: Vec<usize>,
    /// `owner[e]`: `None` for the shared model, `Some(z)` for an override.
    pub owner: Vec<Option<usize>>,
}

impl EmissionSlots {
    pub fn new<T: Real>(model: &HierarchicalModel<T>) -> Self {
        let mut owner = vec![None];
        let slot_of_class = model
            .classes
            .iter()
            .enumerate()
            .map(|(z, c)| {
                if c.emission.is_some() {
                    owner.push(Some(z));
                    owner.len() - 1
                } else {
                    0
                }
            })
            .collect();
        Self {
            slot_of_class,
            owner,
        }
    }

    pub fn len(&self) -> usize {
        self.owner.len()
    }

    pub fn is_empty(&self) -> bool {
        self.owner.is_empty()
    }
}

/// Position of every free parameter in the flat vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamLayout {
    /// `(class, segment, from, to)` of each log-rate coordinate.
    pub intensities: Vec<(usize, usize, usize, usize)>,
    /// `initial[class][segment]`, empty when initial distributions are frozen.
    pub initial: Vec<Vec<SimplexBlock>>,
    /// `(slot, state, test)` of each log emission-rate coordinate.
    pub rates: Vec<(usize, usize, usize)>,
    /// `grades[slot][state][test]`, empty when grade probabilities are frozen.
    pub grades: Vec<Vec<Vec<SimplexBlock>>>,
    pub emissions: EmissionSlots,
    len: usize,
}

fn emission_of<T: Real>(
    model: &HierarchicalModel<T>,
    owner: Option<usize>,
) -> &crate::model::EmissionModel<T> {
    match owner {
        None => &model.emission,
        Some(z) => model.classes[z]
            .emission
            .as_ref()
            .expect("override present"),
    }
}

fn emission_of_mut<T: Real>(
    model: &mut HierarchicalModel<T>,
    owner: Option<usize>,
) -> &mut crate::model::EmissionModel<T> {
    match owner {
        None => &mut model.emission,
        Some(z) => model.classes[z]
            .emission
            .as_mut()
            .expect("override present"),
    }
}

fn simplex_block<T: Real>(p: &[T], offset: &mut usize) -> SimplexBlock {
    let support: Vec<usize> = (0..p.len()).filter(|&i| p[i] > T::zero()).collect();
    let block = SimplexBlock {
        support,
        offset: *offset,
    };
    *offset += block.free();
    block
}

impl ParamLayout {
    pub fn new<T: Real>(model: &HierarchicalModel<T>, targets: &FitTargets) -> Self {
        let mut len = 0;
        let mut intensities = Vec::new();
        if targets.intensities {
            for (z, c) in model.classes.iter().enumerate() {
                for k in 0..c.intensity.segments().len() {
                    for (i, j) in c.intensity.mask().pairs() {
                        if c.intensity.rate(k, i, j) > T::zero() {
                            intensities.push((z, k, i, j));
                        }
                    }
                }
            }
        }
        len += intensities.len();
        let initial = if targets.initial {
            model
                .classes
                .iter()
                .map(|c| {
                    c.initial
                        .iter()
                        .map(|p| simplex_block(p, &mut len))
                        .collect()
                })
                .collect()
        } else {
            Vec::new()
        };
        let emissions = EmissionSlots::new(model);
        let mut rates = Vec::new();
        if targets.emission_rates {
            for (e, &owner) in emissions.owner.iter().enumerate() {
                let em = emission_of(model, owner);
                for s in 0..em.num_states() {
                    for k in 0..em.num_tests() {
                        if em.rate(s, k) > T::zero() {
                            rates.push((e, s, k));
                        }
                    }
                }
            }
        }
        len += rates.len();
        let grades = if targets.grade_probs {
            emissions
                .owner
                .iter()
                .map(|&owner| {
                    emission_of(model, owner)
                        .grade_probs
                        .iter()
                        .map(|tests| tests.iter().map(|p| simplex_block(p, &mut len)).collect())
                        .collect()
                })
                .collect()
        } else {
            Vec::new()
        };
        Self {
            intensities,
            initial,
            rates,
            grades,
            emissions,
            len,
        }
    }

    /// Number of free coordinates.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    fn rates_offset(&self) -> usize {
        self.intensities.len()
            + self
                .initial
                .iter()
                .flatten()
                .map(SimplexBlock::free)
                .sum::<usize>()
    }

    /// Reads the free parameters of `model`.
    pub fn pack<T: Real>(&self, model: &HierarchicalModel<T>) -> Vec<T> {
        let mut theta = vec![T::zero(); self.len];
        for (n, &(z, k, i, j)) in self.intensities.iter().enumerate() {
            theta[n] = model.classes[z].intensity.rate(k, i, j).ln();
        }
        for (z, blocks) in self.initial.iter().enumerate() {
            for (k, b) in blocks.iter().enumerate() {
                pack_simplex(b, &model.classes[z].initial[k], &mut theta);
            }
        }
        let off = self.rates_offset();
        for (n, &(e, s, k)) in self.rates.iter().enumerate() {
            theta[off + n] = emission_of(model, self.emissions.owner[e]).rate(s, k).ln();
        }
        for (e, states) in self.grades.iter().enumerate() {
            let em = emission_of(model, self.emissions.owner[e]);
            for (s, tests) in states.iter().enumerate() {
                for (k, b) in tests.iter().enumerate() {
                    pack_simplex(b, &em.grade_probs[s][k], &mut theta);
                }
            }
        }
        theta
    }

    /// Writes `theta` into a copy of `template`; frozen entries keep their values.
    pub fn unpack<T: Real>(
        &self,
        theta: &[T],
        template: &HierarchicalModel<T>,
    ) -> HierarchicalModel<T> {
        let mut model = template.clone();
        if !self.intensities.is_empty() {
            let mut rates: Vec<Vec<Matrix<T>>> = model
                .classes
                .iter()
                .map(|c| {
                    c.intensity
                        .segments()
                        .iter()
                        .map(|g| {
                            Matrix::from_fn(g.rows(), g.cols(), |i, j| {
                                if i == j {
                                    T::zero()
                                } else {
                                    g[(i, j)]
                                }
                            })
                        })
                        .collect()
                })
                .collect();
            for (n, &(z, k, i, j)) in self.intensities.iter().enumerate() {
                rates[z][k][(i, j)] = theta[n].exp();
            }
            for (c, r) in model.classes.iter_mut().zip(rates) {
                let segs = r.iter().map(generator_from_rates).collect();
                c.intensity = PiecewiseIntensity::new_unchecked(
                    c.intensity.partition().clone(),
                    segs,
                    c.intensity.mask().clone(),
                );
            }
        }
        for (z, blocks) in self.initial.iter().enumerate() {
            for (k, b) in blocks.iter().enumerate() {
                unpack_simplex(b, theta, &mut model.classes[z].initial[k]);
            }
        }
        let off = self.rates_offset();
        for (n, &(e, s, k)) in self.rates.iter().enumerate() {
            emission_of_mut(&mut model, self.emissions.owner[e]).rates[(s, k)] =
                theta[off + n].exp();
        }
        for (e, states) in self.grades.iter().enumerate() {
            let em = emission_of_mut(&mut model, self.emissions.owner[e]);
            for (s, tests) in states.iter().enumerate() {
                for (k, b) in tests.iter().enumerate() {
                    unpack_simplex(b, theta, &mut em.grade_probs[s][k]);
                }
            }
        }
        model
    }

    pub fn rates_start(&self) -> usize {
        self.rates_offset()
    }
}

fn pack_simplex<T: Real>(block: &SimplexBlock, p: &[T], theta: &mut [T]) {
    let Some(&reference) = block.support.last() else {
        return;
    };
    let base = p[reference].ln();
    for (n, &i) in block.support[..block.free()].iter().enumerate() {
        theta[block.offset + n] = p[i].ln() - base;
    }
}

fn unpack_simplex<T: Real>(block: &SimplexBlock, theta: &[T], p: &mut [T]) {
    if block.support.len() < 2 {
        return;
    }
    let logits: Vec<T> = (0..block.support.len())
        .map(|n| {
            if n < block.free() {
                theta[block.offset + n]
            } else {
                T::zero()
            }
        })
        .collect();
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let w: Vec<T> = logits.iter().map(|&x| (x - max).exp()).collect();
    let total: T = w.iter().copied().sum();
    for (&i, &wi) in block.support.iter().zip(&w) {
        p[i] = wi / total;
    }
}

/// Gradient of `Σ_i c_i log p_i` with respect to the free logits of `block`.
pub(crate) fn simplex_gradient<T: Real>(
    block: &SimplexBlock,
    p: &[T],
    counts: &[T],
    grad: &mut [T],
) {
    let total: T = block.support.iter().map(|&i| counts[i]).sum();
    for (n, &i) in block.support[..block.free()].iter().enumerate() {
        grad[block.offset + n] = grad[block.offset + n] + counts[i] - p[i] * total;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::{random_model, two_class_model};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_reproduces_model() {
        let m = two_class_model();
        let layout = ParamLayout::new(&m, &FitTargets::default());
        // 2 classes x 2 segments x 4 rates, 2 x 2 initial vectors with 2 free
        // states (death has zero mass), 4 positive rates, 2 grade vectors with
        // 3 + 1 free logits per alive state and 3 + 1 for death.
        assert_eq!(layout.len(), 16 + 4 + 4 + 12);
        let theta = layout.pack(&m);
        let back = layout.unpack(&theta, &m);
        assert!(back.validate().is_empty());
        for z in 0..2 {
            for k in 0..2 {
                let d = back.classes[z]
                    .intensity
                    .generator(k)
                    .max_abs_diff(m.classes[z].intensity.generator(k));
                assert!(d < 1e-15);
            }
        }
        let again = layout.pack(&back);
        for (a, b) in theta.iter().zip(&again) {
            assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        }
    }

    #[test]
    fn any_vector_unpacks_to_a_valid_model() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = random_model(&mut rng, 2, 3, true);
        let layout = ParamLayout::new(&m, &FitTargets::default());
        for _ in 0..50 {
            let theta: Vec<f64> = (0..layout.len())
                .map(|_| rand::Rng::random_range(&mut rng, -8.0..3.0))
                .collect();
            let u = layout.unpack(&theta, &m);
            assert!(u.validate().is_empty(), "{:?}", u.validate());
        }
    }

    #[test]
    fn frozen_blocks_are_untouched() {
        let m = two_class_model();
        let targets = FitTargets {
            intensities: false,
            emission_rates: false,
            ..FitTargets::default()
        };
        let layout = ParamLayout::new(&m, &targets);
        assert_eq!(layout.len(), 4 + 12);
        let theta = vec![0.0; layout.len()];
        let u = layout.unpack(&theta, &m);
        assert_eq!(u.classes[1].intensity, m.classes[1].intensity);
        assert_eq!(u.emission.rates, m.emission.rates);
        assert_eq!(u.classes[0].initial[0], vec![0.5, 0.5, 0.0]);
    }

    #[test]
    fn simplex_gradient_matches_difference() {
        let block = SimplexBlock {
            support: vec![0, 2, 3],
            offset: 0,
        };
        let counts = [2.0, 0.0, 5.0, 1.5];
        let f = |theta: &[f64]| {
            let mut p = vec![0.0; 4];
            unpack_simplex(&block, theta, &mut p);
            (0..4)
                .filter(|&i| counts[i] > 0.0)
                .map(|i| counts[i] * p[i].ln())
                .sum::<f64>()
        };
        let theta = [0.3, -0.7];
        let mut p = vec![0.0; 4];
        unpack_simplex(&block, &theta, &mut p);
        let mut g = vec![0.0; 2];
        simplex_gradient(&block, &p, &counts, &mut g);
        for n in 0..2 {
            let h = 1e-6;
            let mut a = theta;
            let mut b = theta;
            a[n] += h;
            b[n] -= h;
            let fd = (f(&a) - f(&b)) / (2.0 * h);
            assert!((fd - g[n]).abs() < 1e-7);
        }
    }
}
