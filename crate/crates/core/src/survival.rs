//! Time to first high-risk finding, Kaplan-Meier curves, simulation bands
//! and average posterior predictive probabilities.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::ScreeningSequence;
use crate::emissions::log_grade_pmf;
use crate::error::{Error, Result};
use crate::model::HierarchicalModel;
use crate::predict::{last_visit_state, HighRiskRule};
use crate::scalar::Real;
use crate::simulate::{simulate_cohort, CohortSpec};

/// Follow-up from the first normal or low-grade result.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FailureRecord {
    /// Years since the first qualifying result.
    pub time: f64,
    /// `true` for an observed high-risk finding, `false` for censoring.
    pub event: bool,
}

/// Time from the first visit with results on the rule's tests, provided none
/// is high grade, to the first later visit with a high-grade result. Without
/// such a visit the record is censored at the censoring age (or the last
/// visit). `None` when the first result is already high grade or no result
/// exists.
pub fn extract_failure_time<T: Real>(
    sequence: &ScreeningSequence<T>,
    rule: &HighRiskRule,
) -> Option<FailureRecord> {
    let has_result = |v: &crate::data::Visit<T>| {
        rule.tests
            .iter()
            .any(|&k| v.results.get(k).is_some_and(|h| h.iter().any(|&c| c > 0)))
    };
    let first = sequence.visits.iter().position(has_result)?;
    let origin = &sequence.visits[first];
    if rule.observed(origin) {
        return None;
    }
    let origin_age = origin.age.as_f64();
    if let Some(v) = sequence.visits[first + 1..]
        .iter()
        .find(|v| rule.observed(*v))
    {
        return Some(FailureRecord {
            time: v.age.as_f64() - origin_age,
            event: true,
        });
    }
    let end = sequence
        .censor
        .map(|c| c.age)
        .or(sequence.last_age())
        .expect("has visits");
    Some(FailureRecord {
        time: (end.as_f64() - origin_age).max(0.0),
        event: false,
    })
}

/// Product-limit estimate. Records censored at an event time stay in the risk
/// set for that time.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KaplanMeierCurve {
    pub event_times: Vec<f64>,
    pub at_risk: Vec<usize>,
    pub failures: Vec<usize>,
    /// Survival just after each event time.
    pub survival: Vec<f64>,
}

impl KaplanMeierCurve {
    /// Right-continuous step function; 1 before the first event.
    pub fn survival_at(&self, t: f64) -> f64 {
        let n = self.event_times.partition_point(|&e| e <= t);
        if n == 0 {
            1.0
        } else {
            self.survival[n - 1]
        }
    }

    pub fn on_grid(&self, grid: &[f64]) -> Vec<f64> {
        grid.iter().map(|&t| self.survival_at(t)).collect()
    }
}

pub fn kaplan_meier(records: &[FailureRecord]) -> Result<KaplanMeierCurve> {
    if records.is_empty() {
        return Err(Error::Empty("no failure records".into()));
    }
    let mut sorted = records.to_vec();
    // Events before censorings at equal times.
    sorted.sort_by(|a, b| a.time.total_cmp(&b.time).then(b.event.cmp(&a.event)));
    let mut curve = KaplanMeierCurve {
        event_times: Vec::new(),
        at_risk: Vec::new(),
        failures: Vec::new(),
        survival: Vec::new(),
    };
    let mut s = 1.0;
    let mut i = 0;
    while i < sorted.len() {
        let t = sorted[i].time;
        let n = sorted.len() - i;
        let mut d = 0;
        let mut j = i;
        while j < sorted.len() && sorted[j].time == t {
            d += usize::from(sorted[j].event);
            j += 1;
        }
        if d > 0 {
            s *= 1.0 - d as f64 / n as f64;
            curve.event_times.push(t);
            curve.at_risk.push(n);
            curve.failures.push(d);
            curve.survival.push(s);
        }
        i = j;
    }
    Ok(curve)
}

/// Replication settings for [`km_band`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KmBandConfig {
    pub replications: usize,
    /// Grid spacing in years.
    pub grid_step: f64,
    /// Last grid point in years.
    pub horizon: f64,
    /// Lower and upper percentiles of the band.
    pub percentiles: [f64; 2],
}

impl Default for KmBandConfig {
    fn default() -> Self {
        Self {
            replications: 100,
            grid_step: 0.25,
            horizon: 20.0,
            percentiles: [2.5, 97.5],
        }
    }
}

impl KmBandConfig {
    pub fn grid(&self) -> Vec<f64> {
        let n = (self.horizon / self.grid_step + 1e-9).floor() as usize;
        (0..=n).map(|i| i as f64 * self.grid_step).collect()
    }
}

/// Pointwise median and percentile band of simulated KM curves.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KmBand {
    pub grid: Vec<f64>,
    pub median: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl KmBand {
    /// Fraction of grid points where `curve` lies inside the band.
    pub fn coverage(&self, curve: &KaplanMeierCurve) -> f64 {
        let inside = self
            .grid
            .iter()
            .enumerate()
            .filter(|&(i, &t)| {
                let s = curve.survival_at(t);
                s >= self.lower[i] - 1e-12 && s <= self.upper[i] + 1e-12
            })
            .count();
        inside as f64 / self.grid.len() as f64
    }
}

/// Nearest-rank percentile of sorted values: the element at rank
/// `ceil(p / 100 * n)`, clamped to `[1, n]`.
pub fn nearest_rank(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let rank = ((p / 100.0) * n as f64).ceil() as usize;
    sorted[rank.clamp(1, n) - 1]
}

/// Simulates `config.replications` cohorts, computes the KM curve of each and
/// summarizes them pointwise on the grid.
pub fn km_band<T: Real, R: Rng + ?Sized>(
    model: &HierarchicalModel<T>,
    cohort: &CohortSpec,
    rule: &HighRiskRule,
    config: &KmBandConfig,
    rng: &mut R,
) -> Result<KmBand> {
    if config.replications < 2 {
        return Err(Error::Domain(
            "km_band needs at least 2 replications".into(),
        ));
    }
    if !(config.grid_step > 0.0 && config.horizon >= 0.0) {
        return Err(Error::Domain("grid_step must be positive".into()));
    }
    let grid = config.grid();
    let seeds: Vec<u64> = (0..config.replications).map(|_| rng.random()).collect();
    let curves = seeds
        .par_iter()
        .map(|&seed| {
            let sims = simulate_cohort(model, cohort, seed)?;
            let records: Vec<FailureRecord> = sims
                .iter()
                .filter_map(|s| extract_failure_time(&s.sequence, rule))
                .collect();
            Ok(match kaplan_meier(&records) {
                Ok(curve) => curve.on_grid(&grid),
                Err(_) => vec![1.0; grid.len()],
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut band = KmBand {
        grid: grid.clone(),
        median: Vec::with_capacity(grid.len()),
        lower: Vec::with_capacity(grid.len()),
        upper: Vec::with_capacity(grid.len()),
    };
    let mut column = Vec::with_capacity(curves.len());
    for i in 0..grid.len() {
        column.clear();
        column.extend(curves.iter().map(|c| c[i]));
        column.sort_by(f64::total_cmp);
        band.median.push(nearest_rank(&column, 50.0));
        band.lower
            .push(nearest_rank(&column, config.percentiles[0]));
        band.upper
            .push(nearest_rank(&column, config.percentiles[1]));
    }
    Ok(band)
}

/// Average over sequences of `p(G_T,k | earlier visits, E_T,k)` per test type.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PosteriorPredictive {
    pub average: Vec<f64>,
    /// Sequences that entered each average.
    pub counted: Vec<usize>,
    /// Sequences with fewer than two visits.
    pub skipped: usize,
}

/// With `exclude_untested`, a sequence whose last visit has no test of type
/// `k` does not enter the average for `k`; otherwise it contributes 1.
pub fn avg_posterior_predictive<T: Real>(
    sequences: &[ScreeningSequence<T>],
    model: &HierarchicalModel<T>,
    exclude_untested: bool,
) -> Result<PosteriorPredictive> {
    let tests = model.emission.num_tests();
    let per_sequence = sequences
        .par_iter()
        .map(|seq| -> Result<Option<Vec<Option<f64>>>> {
            let Some((history, last)) = seq.history() else {
                return Ok(None);
            };
            if history.is_empty() {
                return Ok(None);
            }
            let state = last_visit_state(&history, last.age, model)?;
            let mut out = Vec::with_capacity(tests);
            for k in 0..tests {
                if last.count(k) == 0 {
                    out.push((!exclude_untested).then_some(1.0));
                    continue;
                }
                let mut p = T::zero();
                for (z, &w) in state.class_posterior.probs.iter().enumerate() {
                    if !(w > T::zero()) {
                        continue;
                    }
                    let em = model.emission_for(z);
                    for (s, &ps) in state.states[z].iter().enumerate() {
                        if ps > T::zero() {
                            p = p + w
                                * ps
                                * log_grade_pmf(&em.grade_probs[s][k], &last.results[k]).exp();
                        }
                    }
                }
                out.push(Some(p.as_f64().clamp(0.0, 1.0)));
            }
            Ok(Some(out))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut sum = vec![0.0; tests];
    let mut counted = vec![0usize; tests];
    let mut skipped = 0;
    for row in per_sequence {
        let Some(row) = row else {
            skipped += 1;
            continue;
        };
        for (k, v) in row.into_iter().enumerate() {
            if let Some(v) = v {
                sum[k] += v;
                counted[k] += 1;
            }
        }
    }
    Ok(PosteriorPredictive {
        average: sum
            .iter()
            .zip(&counted)
            .map(|(&s, &c)| if c > 0 { s / c as f64 } else { f64::NAN })
            .collect(),
        counted,
        skipped,
    })
}
