//! Observed screening histories.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    Death,
    Alive,
}

/// End-of-follow-up observation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Censoring<T> {
    pub age: T,
    pub outcome: Outcome,
}

/// One screening visit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Visit<T> {
    pub age: T,
    /// `results[test][grade]`: number of results of each grade. The number of
    /// tests of a type is the histogram total.
    pub results: Vec<Vec<u32>>,
    pub treated: bool,
}

impl<T: Real> Visit<T> {
    pub fn new(age: T, results: Vec<Vec<u32>>) -> Self {
        Self {
            age,
            results,
            treated: false,
        }
    }

    pub fn treated(mut self, treated: bool) -> Self {
        self.treated = treated;
        self
    }

    /// Number of tests of type `test` (`E_k`).
    pub fn count(&self, test: usize) -> u32 {
        self.results[test].iter().sum()
    }

    pub fn counts(&self) -> Vec<u32> {
        (0..self.results.len()).map(|k| self.count(k)).collect()
    }

    pub fn total_tests(&self) -> u32 {
        self.results.iter().flatten().sum()
    }

    /// Highest grade index observed across `tests`, if any result exists.
    pub fn worst_grade(&self, tests: impl IntoIterator<Item = usize>) -> Option<usize> {
        tests
            .into_iter()
            .filter_map(|k| self.results.get(k))
            .filter_map(|h| h.iter().rposition(|&c| c > 0))
            .max()
    }
}

/// One individual's visits plus the censoring observation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScreeningSequence<T> {
    pub id: String,
    pub visits: Vec<Visit<T>>,
    pub censor: Option<Censoring<T>>,
}

impl<T: Real> ScreeningSequence<T> {
    pub fn new(id: impl Into<String>, visits: Vec<Visit<T>>, censor: Option<Censoring<T>>) -> Self {
        Self {
            id: id.into(),
            visits,
            censor,
        }
    }

    pub fn len(&self) -> usize {
        self.visits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.visits.is_empty()
    }

    pub fn first_age(&self) -> Option<T> {
        self.visits.first().map(|v| v.age)
    }

    pub fn last_age(&self) -> Option<T> {
        self.visits.last().map(|v| v.age)
    }

    /// The sequence without its last visit and without censoring.
    pub fn history(&self) -> Option<(ScreeningSequence<T>, &Visit<T>)> {
        let (last, rest) = self.visits.split_last()?;
        Some((
            ScreeningSequence {
                id: self.id.clone(),
                visits: rest.to_vec(),
                censor: None,
            },
            last,
        ))
    }

    /// Checks ordering, censoring and histogram shapes against `grade_levels`.
    pub fn validate(&self, grade_levels: &[usize]) -> Result<()> {
        let err = |message: String| Error::InvalidSequence {
            id: self.id.clone(),
            message,
        };
        if self.visits.is_empty() {
            return Err(err("no visits".into()));
        }
        let mut prev: Option<T> = None;
        for (t, v) in self.visits.iter().enumerate() {
            if !(v.age >= T::zero()) || !v.age.is_finite() {
                return Err(err(format!("visit {t} has invalid age {}", v.age)));
            }
            if let Some(p) = prev {
                if !(v.age > p) {
                    return Err(err(format!(
                        "visit ages not strictly increasing at visit {t}"
                    )));
                }
            }
            prev = Some(v.age);
            if v.results.len() != grade_levels.len() {
                return Err(err(format!(
                    "visit {t} has {} test types, expected {}",
                    v.results.len(),
                    grade_levels.len()
                )));
            }
            for (k, h) in v.results.iter().enumerate() {
                if h.len() != grade_levels[k] {
                    return Err(err(format!(
                        "visit {t} test {k} has {} grades, expected {}",
                        h.len(),
                        grade_levels[k]
                    )));
                }
            }
        }
        if let (Some(c), Some(last)) = (self.censor, prev) {
            if !(c.age >= last) {
                return Err(err("censor age precedes the last visit".into()));
            }
        }
        Ok(())
    }
}
