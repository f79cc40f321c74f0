//! Visit-level likelihoods: Poisson test counts with multinomial grades, and
//! the end-of-follow-up censoring term.

use rand::Rng;
use rand_distr::{Binomial, Distribution, Poisson};

use crate::data::{Outcome, Visit};
use crate::error::Result;
use crate::kernel::interval_transition;
use crate::model::{ClassModel, EmissionModel};
use crate::scalar::{ln_factorial, Real};

/// `Σ_k [log Poisson(E_k; η_sk) + log Multinomial(G_k; E_k, π̃_sk)]`.
///
/// Impossible observations give `-inf`.
pub fn log_visit_likelihood<T: Real>(em: &EmissionModel<T>, state: usize, visit: &Visit<T>) -> T {
    let mut total = T::zero();
    for (k, hist) in visit.results.iter().enumerate() {
        let rate = em.rate(state, k);
        let count: u32 = hist.iter().sum();
        // The E! of the Poisson pmf cancels the multinomial coefficient numerator.
        total = total - rate;
        if count == 0 {
            continue;
        }
        if rate == T::zero() {
            return T::neg_infinity();
        }
        total = total + T::from_count(count as usize) * rate.ln();
        let probs = &em.grade_probs[state][k];
        for (&g, &p) in hist.iter().zip(probs) {
            if g == 0 {
                continue;
            }
            if p == T::zero() {
                return T::neg_infinity();
            }
            total = total + T::from_count(g as usize) * p.ln() - ln_factorial::<T>(g as u64);
        }
    }
    total
}

/// Log multinomial pmf of one grade histogram given its total.
pub fn log_grade_pmf<T: Real>(probs: &[T], hist: &[u32]) -> T {
    let n: u32 = hist.iter().sum();
    let mut total = ln_factorial::<T>(n as u64);
    for (&g, &p) in hist.iter().zip(probs) {
        if g == 0 {
            continue;
        }
        if p == T::zero() {
            return T::neg_infinity();
        }
        total = total + T::from_count(g as usize) * p.ln() - ln_factorial::<T>(g as u64);
    }
    total
}

/// `log P(last_age, censor_age)[state, death]` for a death outcome, otherwise
/// the log of its complement.
///
/// Without a death state the alive outcome is certain and death impossible.
pub fn log_censor_likelihood<T: Real>(
    class: &ClassModel<'_, T>,
    state: usize,
    last_visit_age: T,
    censor_age: T,
    outcome: Outcome,
) -> Result<T> {
    Ok(censor_terms(class, last_visit_age, censor_age, outcome)?[state])
}

/// Censoring log-likelihood for every terminal state at once.
pub fn censor_terms<T: Real>(
    class: &ClassModel<'_, T>,
    last_visit_age: T,
    censor_age: T,
    outcome: Outcome,
) -> Result<Vec<T>> {
    let m = class.num_states();
    let Some(death) = class.death_state() else {
        let v = match outcome {
            Outcome::Alive => T::zero(),
            Outcome::Death => T::neg_infinity(),
        };
        return Ok(vec![v; m]);
    };
    let p = interval_transition(class.intensity, last_visit_age, censor_age)?;
    Ok((0..m)
        .map(|s| {
            let dead = p.prob(s, death);
            match outcome {
                Outcome::Death => dead.ln(),
                Outcome::Alive => (T::one() - dead).ln(),
            }
        })
        .collect())
}

/// Draws test counts and grade histograms for one visit in `state`.
pub fn sample_visit<T: Real, R: Rng + ?Sized>(
    em: &EmissionModel<T>,
    state: usize,
    rng: &mut R,
) -> Vec<Vec<u32>> {
    (0..em.num_tests())
        .map(|k| {
            let rate = em.rate(state, k).as_f64();
            let count = if rate > 0.0 {
                Poisson::new(rate)
                    .map(|d| d.sample(rng) as u64)
                    .unwrap_or(0)
            } else {
                0
            };
            sample_multinomial(&em.grade_probs[state][k], count, rng)
        })
        .collect()
}

/// Multinomial draw by sequential conditional binomials.
pub fn sample_multinomial<T: Real, R: Rng + ?Sized>(probs: &[T], n: u64, rng: &mut R) -> Vec<u32> {
    let mut out = vec![0u32; probs.len()];
    let mut remaining = n;
    let mut mass = 1.0f64;
    for (l, p) in probs.iter().enumerate() {
        if remaining == 0 {
            break;
        }
        let p = p.as_f64();
        if l + 1 == probs.len() || mass <= 0.0 {
            out[l] = remaining as u32;
            break;
        }
        let cond = (p / mass).clamp(0.0, 1.0);
        let draw = Binomial::new(remaining, cond)
            .map(|b| b.sample(rng))
            .unwrap_or(0);
        out[l] = draw as u32;
        remaining -= draw;
        mass -= p;
    }
    out
}
