//! Model parameters: age partition, piecewise intensities, emissions and the
//! hierarchical frailty mixture.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::scalar::Real;

/// A broken model invariant, naming the offending field.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub field: String,
    pub rule: String,
}

impl Violation {
    fn new(field: impl Into<String>, rule: impl Into<String>) -> Self {
        Self {
            field: field.into(),
            rule: rule.into(),
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.rule)
    }
}

/// Disjoint age intervals `[0, b_1), [b_1, b_2), …, [b_last, ∞)`.
///
/// Only the interior boundaries are stored; the first interval always starts
/// at age 0 and the last is unbounded above.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AgePartition<T> {
    boundaries: Vec<T>,
}

/// One piece of an age interval clipped to a single partition segment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegmentPiece<T> {
    pub segment: usize,
    pub start: T,
    pub end: T,
}

impl<T: Real> SegmentPiece<T> {
    pub fn duration(&self) -> T {
        self.end - self.start
    }
}

impl<T: Real> AgePartition<T> {
    pub fn new(boundaries: Vec<T>) -> Result<Self> {
        let p = Self { boundaries };
        match p.violations().first() {
            Some(v) => Err(Error::Domain(v.to_string())),
            None => Ok(p),
        }
    }

    /// A partition with a single unbounded segment.
    pub fn single() -> Self {
        Self {
            boundaries: Vec::new(),
        }
    }

    /// `[0,23), [23,30), [30,60), [60,∞)`.
    pub fn screening_default() -> Self {
        Self {
            boundaries: vec![T::lit(23.0), T::lit(30.0), T::lit(60.0)],
        }
    }

    pub fn boundaries(&self) -> &[T] {
        &self.boundaries
    }

    pub fn num_segments(&self) -> usize {
        self.boundaries.len() + 1
    }

    pub fn segment_start(&self, k: usize) -> T {
        if k == 0 {
            T::zero()
        } else {
            self.boundaries[k - 1]
        }
    }

    /// Upper end of segment `k`, `None` for the unbounded last segment.
    pub fn segment_end(&self, k: usize) -> Option<T> {
        self.boundaries.get(k).copied()
    }

    /// Index of the segment containing `age` (0-based).
    pub fn segment_index(&self, age: T) -> Result<usize> {
        if !(age >= T::zero()) {
            return Err(Error::Domain(format!("age must be nonnegative, got {age}")));
        }
        Ok(self.boundaries.partition_point(|&b| b <= age))
    }

    /// Splits `[from, to)` at segment boundaries. Empty for a zero-length interval.
    pub fn pieces(&self, from: T, to: T) -> Result<Vec<SegmentPiece<T>>> {
        if !(from <= to) {
            return Err(Error::Domain(format!(
                "interval start {from} exceeds end {to}"
            )));
        }
        let mut out = Vec::new();
        if from == to {
            return Ok(out);
        }
        let mut k = self.segment_index(from)?;
        let mut start = from;
        loop {
            match self.segment_end(k) {
                Some(end) if end < to => {
                    out.push(SegmentPiece {
                        segment: k,
                        start,
                        end,
                    });
                    start = end;
                    k += 1;
                }
                _ => {
                    out.push(SegmentPiece {
                        segment: k,
                        start,
                        end: to,
                    });
                    return Ok(out);
                }
            }
        }
    }

    pub fn violations(&self) -> Vec<Violation> {
        let mut v = Vec::new();
        let mut prev = T::zero();
        for (i, &b) in self.boundaries.iter().enumerate() {
            if !b.is_finite() || b <= prev {
                v.push(Violation::new(
                    format!("partition[{i}]"),
                    "boundaries must be finite, positive and strictly increasing",
                ));
                break;
            }
            prev = b;
        }
        v
    }
}

/// Which off-diagonal transitions the state graph permits.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransitionMask {
    n: usize,
    allowed: Vec<bool>,
}

impl TransitionMask {
    /// Builds a mask; diagonal entries are ignored.
    pub fn from_rows(rows: &[Vec<bool>]) -> Result<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::Domain("transition mask must be square".into()));
        }
        let mut allowed: Vec<bool> = rows.iter().flatten().copied().collect();
        for i in 0..n {
            allowed[i * n + i] = false;
        }
        Ok(Self { n, allowed })
    }

    /// Every off-diagonal transition allowed, except out of `absorbing` states.
    pub fn complete(n: usize, absorbing: &[usize]) -> Self {
        let mut allowed = vec![true; n * n];
        for i in 0..n {
            allowed[i * n + i] = false;
            if absorbing.contains(&i) {
                for j in 0..n {
                    allowed[i * n + j] = false;
                }
            }
        }
        Self { n, allowed }
    }

    pub fn num_states(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn allows(&self, from: usize, to: usize) -> bool {
        self.allowed[from * self.n + to]
    }

    /// Allowed `(from, to)` pairs in row-major order.
    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.n)
            .flat_map(move |i| (0..self.n).map(move |j| (i, j)))
            .filter(|&(i, j)| self.allows(i, j))
    }

    pub fn to_rows(&self) -> Vec<Vec<bool>> {
        self.allowed
            .chunks(self.n.max(1))
            .map(<[bool]>::to_vec)
            .take(self.n)
            .collect()
    }
}

impl Serialize for TransitionMask {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_rows().serialize(s)
    }
}

impl<'de> Deserialize<'de> for TransitionMask {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let rows = Vec::<Vec<bool>>::deserialize(d)?;
        TransitionMask::from_rows(&rows).map_err(serde::de::Error::custom)
    }
}

/// Transition intensities that are constant on each segment of an age partition.
#[derive(Debug, Clone, PartialEq)]
pub struct PiecewiseIntensity<T> {
    partition: AgePartition<T>,
    segments: Vec<Matrix<T>>,
    mask: TransitionMask,
}

impl<T: Real> PiecewiseIntensity<T> {
    /// Builds intensities from full generator matrices, checking every invariant.
    pub fn new(
        partition: AgePartition<T>,
        segments: Vec<Matrix<T>>,
        mask: TransitionMask,
    ) -> Result<Self> {
        let out = Self::new_unchecked(partition, segments, mask);
        let v = out.violations("intensity");
        if v.is_empty() {
            Ok(out)
        } else {
            Err(Error::InvalidModel(v))
        }
    }

    pub(crate) fn new_unchecked(
        partition: AgePartition<T>,
        segments: Vec<Matrix<T>>,
        mask: TransitionMask,
    ) -> Self {
        Self {
            partition,
            segments,
            mask,
        }
    }

    /// Builds generators from off-diagonal rates; diagonals are filled in so
    /// every row sums to zero. Entries outside the mask must be zero.
    pub fn from_rates(
        partition: AgePartition<T>,
        rates: Vec<Matrix<T>>,
        mask: TransitionMask,
    ) -> Result<Self> {
        let segments = rates
            .into_iter()
            .map(|r| generator_from_rates(&r))
            .collect();
        Self::new(partition, segments, mask)
    }

    /// The all-zero intensity: nothing ever moves.
    pub fn zero(partition: AgePartition<T>, num_states: usize) -> Self {
        let segments = vec![Matrix::zeros(num_states, num_states); partition.num_segments()];
        Self {
            partition,
            segments,
            mask: TransitionMask::from_rows(&vec![vec![false; num_states]; num_states])
                .expect("square"),
        }
    }

    pub fn partition(&self) -> &AgePartition<T> {
        &self.partition
    }

    pub fn mask(&self) -> &TransitionMask {
        &self.mask
    }

    pub fn num_states(&self) -> usize {
        self.mask.num_states()
    }

    pub fn segments(&self) -> &[Matrix<T>] {
        &self.segments
    }

    pub fn generator(&self, segment: usize) -> &Matrix<T> {
        &self.segments[segment]
    }

    #[inline]
    pub fn rate(&self, segment: usize, from: usize, to: usize) -> T {
        self.segments[segment][(from, to)]
    }

    /// Total exit rate `q_i` of `state` in `segment`.
    #[inline]
    pub fn exit_rate(&self, segment: usize, state: usize) -> T {
        -self.segments[segment][(state, state)]
    }

    /// Returns a copy with one off-diagonal rate replaced (diagonal kept consistent).
    pub fn with_rate(&self, segment: usize, from: usize, to: usize, value: T) -> Self {
        let mut out = self.clone();
        let g = &mut out.segments[segment];
        let old = g[(from, to)];
        g[(from, to)] = value;
        g[(from, from)] = g[(from, from)] + old - value;
        out
    }

    pub fn violations(&self, field: &str) -> Vec<Violation> {
        let mut v = Vec::new();
        let n = self.num_states();
        if self.segments.len() != self.partition.num_segments() {
            v.push(Violation::new(
                field,
                format!(
                    "expected {} segment matrices, found {}",
                    self.partition.num_segments(),
                    self.segments.len()
                ),
            ));
            return v;
        }
        for (k, q) in self.segments.iter().enumerate() {
            if q.rows() != n || q.cols() != n {
                v.push(Violation::new(
                    format!("{field}[{k}]"),
                    format!("generator must be {n}x{n}"),
                ));
                continue;
            }
            for i in 0..n {
                let mut off = T::zero();
                let mut scale = T::one();
                for j in 0..n {
                    let qij = q[(i, j)];
                    if !qij.is_finite() {
                        v.push(Violation::new(
                            format!("{field}[{k}][{i}][{j}]"),
                            "q_ij not finite",
                        ));
                        continue;
                    }
                    if i == j {
                        continue;
                    }
                    if qij < T::zero() {
                        v.push(Violation::new(
                            format!("{field}[{k}][{i}][{j}]"),
                            "q_ij must be nonnegative off the diagonal",
                        ));
                    }
                    if qij != T::zero() && !self.mask.allows(i, j) {
                        v.push(Violation::new(
                            format!("{field}[{k}][{i}][{j}]"),
                            "q_ij must be zero for a disallowed transition",
                        ));
                    }
                    off = off + qij;
                    scale = scale.max(qij.abs());
                }
                let row_sum = off + q[(i, i)];
                if !(row_sum.abs() <= T::structural_tol() * scale) {
                    v.push(Violation::new(
                        format!("{field}[{k}][{i}]"),
                        "generator row must sum to zero (q_ii = -sum of q_ij)",
                    ));
                }
            }
        }
        v
    }
}

/// Fills the diagonal of an off-diagonal rate matrix so rows sum to zero.
pub fn generator_from_rates<T: Real>(rates: &Matrix<T>) -> Matrix<T> {
    let n = rates.rows();
    let mut g = rates.clone();
    for i in 0..n {
        g[(i, i)] = T::zero();
        let s: T = (0..n).filter(|&j| j != i).map(|j| rates[(i, j)]).sum();
        g[(i, i)] = -s;
    }
    g
}

/// Visit-level observation model: Poisson test counts and multinomial grades.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct EmissionModel<T> {
    /// `rates[state][test]`: expected number of tests per visit.
    pub rates: Matrix<T>,
    /// `grade_probs[state][test][grade]`.
    pub grade_probs: Vec<Vec<Vec<T>>>,
    /// Dirichlet concentrations, same shape as `grade_probs`.
    pub grade_priors: Vec<Vec<Vec<T>>>,
    pub death_state: Option<usize>,
}

impl<T: Real> EmissionModel<T> {
    pub fn num_states(&self) -> usize {
        self.rates.rows()
    }

    pub fn num_tests(&self) -> usize {
        self.rates.cols()
    }

    /// Number of grade levels `L_k` per test type.
    pub fn grade_levels(&self) -> Vec<usize> {
        self.grade_probs
            .first()
            .map(|s| s.iter().map(Vec::len).collect())
            .unwrap_or_default()
    }

    #[inline]
    pub fn rate(&self, state: usize, test: usize) -> T {
        self.rates[(state, test)]
    }

    pub fn violations(&self, field: &str) -> Vec<Violation> {
        let mut v = Vec::new();
        let m = self.num_states();
        let k = self.num_tests();
        let levels = self.grade_levels();
        if self.grade_probs.len() != m || self.grade_priors.len() != m {
            v.push(Violation::new(
                format!("{field}.grade_probs"),
                "one entry per state required",
            ));
            return v;
        }
        for s in 0..m {
            for t in 0..k {
                let r = self.rates[(s, t)];
                if !(r >= T::zero()) || !r.is_finite() {
                    v.push(Violation::new(
                        format!("{field}.rates[{s}][{t}]"),
                        "rate must be finite and nonnegative",
                    ));
                }
            }
            if self.grade_probs[s].len() != k || self.grade_priors[s].len() != k {
                v.push(Violation::new(
                    format!("{field}.grade_probs[{s}]"),
                    "one vector per test type required",
                ));
                continue;
            }
            for t in 0..k {
                let p = &self.grade_probs[s][t];
                let a = &self.grade_priors[s][t];
                if p.len() != levels[t] || a.len() != levels[t] {
                    v.push(Violation::new(
                        format!("{field}.grade_probs[{s}][{t}]"),
                        "grade vector length differs from other states",
                    ));
                    continue;
                }
                if let Some(rule) = simplex_violation(p) {
                    v.push(Violation::new(
                        format!("{field}.grade_probs[{s}][{t}]"),
                        rule,
                    ));
                }
                if a.iter().any(|&x| !(x > T::zero()) || !x.is_finite()) {
                    v.push(Violation::new(
                        format!("{field}.grade_priors[{s}][{t}]"),
                        "Dirichlet concentrations must be positive",
                    ));
                }
            }
        }
        if let Some(d) = self.death_state {
            if d >= m {
                v.push(Violation::new(
                    format!("{field}.death_state"),
                    "death state index out of range",
                ));
            }
        }
        v
    }
}

fn simplex_violation<T: Real>(p: &[T]) -> Option<&'static str> {
    if p.iter().any(|&x| !(x >= T::zero()) || !x.is_finite()) {
        return Some("probabilities must be finite and nonnegative");
    }
    let s: T = p.iter().copied().sum();
    if !((s - T::one()).abs() <= T::structural_tol()) {
        return Some("probabilities must sum to 1");
    }
    None
}

/// One frailty class: its dynamics and initial-state distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassComponent<T> {
    pub intensity: PiecewiseIntensity<T>,
    /// `initial[segment][state]`: distribution of the state at the first visit.
    pub initial: Vec<Vec<T>>,
    /// Dirichlet concentrations for each `initial[segment]`.
    pub initial_priors: Vec<Vec<T>>,
    /// Per-class emission override; the shared model is used when `None`.
    pub emission: Option<EmissionModel<T>>,
}

/// Mixture of frailty classes sharing an age partition.
#[derive(Debug, Clone, PartialEq)]
pub struct HierarchicalModel<T> {
    pub class_prior: Vec<T>,
    pub classes: Vec<ClassComponent<T>>,
    pub emission: EmissionModel<T>,
    /// State that treatment resets to.
    pub normal_state: usize,
}

/// Borrowed view of everything needed to evaluate one class.
#[derive(Debug, Clone, Copy)]
pub struct ClassModel<'a, T> {
    pub intensity: &'a PiecewiseIntensity<T>,
    pub initial: &'a [Vec<T>],
    pub emission: &'a EmissionModel<T>,
    pub normal_state: usize,
}

impl<'a, T: Real> ClassModel<'a, T> {
    pub fn num_states(&self) -> usize {
        self.intensity.num_states()
    }

    pub fn death_state(&self) -> Option<usize> {
        self.emission.death_state
    }

    /// State entered after a treated visit: the normal state, except that
    /// death stays death.
    #[inline]
    pub fn reset_target(&self, state: usize) -> usize {
        if Some(state) == self.emission.death_state {
            state
        } else {
            self.normal_state
        }
    }

    pub fn initial_distribution(&self, age: T) -> Result<&'a [T]> {
        let k = self.intensity.partition().segment_index(age)?;
        Ok(&self.initial[k])
    }
}

impl<T: Real> HierarchicalModel<T> {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn partition(&self) -> &AgePartition<T> {
        self.classes[0].intensity.partition()
    }

    pub fn death_state(&self) -> Option<usize> {
        self.emission.death_state
    }

    pub fn emission_for(&self, class: usize) -> &EmissionModel<T> {
        self.classes[class]
            .emission
            .as_ref()
            .unwrap_or(&self.emission)
    }

    pub fn class(&self, class: usize) -> ClassModel<'_, T> {
        let c = &self.classes[class];
        ClassModel {
            intensity: &c.intensity,
            initial: &c.initial,
            emission: self.emission_for(class),
            normal_state: self.normal_state,
        }
    }

    /// All invariant violations; empty iff the model is well formed.
    pub fn validate(&self) -> Vec<Violation> {
        let mut v = Vec::new();
        if self.classes.is_empty() {
            v.push(Violation::new("classes", "at least one class required"));
            return v;
        }
        if self.class_prior.len() != self.classes.len() {
            v.push(Violation::new(
                "class_prior",
                "length must equal the number of classes",
            ));
        } else if let Some(rule) = simplex_violation(&self.class_prior) {
            v.push(Violation::new("class_prior", rule));
        }
        v.extend(self.emission.violations("emission"));
        let partition = self.partition();
        v.extend(partition.violations());
        for (z, c) in self.classes.iter().enumerate() {
            let field = format!("classes[{z}]");
            if c.intensity.partition() != partition {
                v.push(Violation::new(
                    format!("{field}.intensity"),
                    "all classes must share the same age partition",
                ));
            }
            v.extend(c.intensity.violations(&format!("{field}.intensity")));
            let m = c.intensity.num_states();
            let em = self.emission_for(z);
            if let Some(e) = &c.emission {
                v.extend(e.violations(&format!("{field}.emission")));
            }
            if em.num_states() != m {
                v.push(Violation::new(
                    format!("{field}.intensity"),
                    format!(
                        "class has {m} states but its emission model has {}",
                        em.num_states()
                    ),
                ));
            }
            if self.normal_state >= m {
                v.push(Violation::new(
                    "normal_state",
                    "normal state index out of range",
                ));
            }
            if let Some(d) = em.death_state {
                if d < m {
                    let q_dead = c
                        .intensity
                        .segments()
                        .iter()
                        .any(|q| q.row(d).iter().any(|&x| x != T::zero()));
                    if q_dead || (0..m).any(|j| c.intensity.mask().allows(d, j)) {
                        v.push(Violation::new(
                            format!("{field}.intensity"),
                            "death state must be absorbing (zero row)",
                        ));
                    }
                }
            }
            if c.initial.len() != partition.num_segments()
                || c.initial_priors.len() != partition.num_segments()
            {
                v.push(Violation::new(
                    format!("{field}.initial"),
                    "one distribution per partition segment required",
                ));
                continue;
            }
            for (k, (p, a)) in c.initial.iter().zip(&c.initial_priors).enumerate() {
                if p.len() != m || a.len() != m {
                    v.push(Violation::new(
                        format!("{field}.initial[{k}]"),
                        "length must equal the number of states",
                    ));
                    continue;
                }
                if let Some(rule) = simplex_violation(p) {
                    v.push(Violation::new(format!("{field}.initial[{k}]"), rule));
                }
                if a.iter().any(|&x| !(x > T::zero()) || !x.is_finite()) {
                    v.push(Violation::new(
                        format!("{field}.initial_priors[{k}]"),
                        "Dirichlet concentrations must be positive",
                    ));
                }
            }
        }
        v
    }

    pub fn ensure_valid(&self) -> Result<()> {
        let v = self.validate();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidModel(v))
        }
    }

    /// Converts every parameter to another precision.
    pub fn cast<U: Real>(&self) -> HierarchicalModel<U> {
        let c1 = |v: &Vec<T>| v.iter().map(|x| U::lit(x.as_f64())).collect::<Vec<U>>();
        let c2 = |v: &Vec<Vec<T>>| v.iter().map(c1).collect::<Vec<_>>();
        let c3 = |v: &Vec<Vec<Vec<T>>>| v.iter().map(c2).collect::<Vec<_>>();
        let em = |e: &EmissionModel<T>| EmissionModel {
            rates: e.rates.cast(),
            grade_probs: c3(&e.grade_probs),
            grade_priors: c3(&e.grade_priors),
            death_state: e.death_state,
        };
        let partition = AgePartition {
            boundaries: c1(&self.partition().boundaries),
        };
        HierarchicalModel {
            class_prior: c1(&self.class_prior),
            classes: self
                .classes
                .iter()
                .map(|c| ClassComponent {
                    intensity: PiecewiseIntensity::new_unchecked(
                        partition.clone(),
                        c.intensity.segments().iter().map(Matrix::cast).collect(),
                        c.intensity.mask().clone(),
                    ),
                    initial: c2(&c.initial),
                    initial_priors: c2(&c.initial_priors),
                    emission: c.emission.as_ref().map(em),
                })
                .collect(),
            emission: em(&self.emission),
            normal_state: self.normal_state,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::two_class_model;

    #[test]
    fn segment_index_on_screening_partition() {
        let p = AgePartition::<f64>::screening_default();
        assert_eq!(p.segment_index(25.0).unwrap(), 1);
        assert_eq!(p.segment_index(0.0).unwrap(), 0);
        assert_eq!(p.segment_index(75.0).unwrap(), 3);
        assert_eq!(p.segment_index(23.0).unwrap(), 1);
        assert_eq!(p.segment_index(22.999).unwrap(), 0);
        assert!(p.segment_index(-0.1).is_err());
        assert!(p.segment_index(f64::NAN).is_err());
    }

    #[test]
    fn pieces_split_at_boundaries() {
        let p = AgePartition::<f64>::screening_default();
        let pieces = p.pieces(22.0, 31.0).unwrap();
        let got: Vec<_> = pieces.iter().map(|x| (x.segment, x.duration())).collect();
        assert_eq!(got, vec![(0, 1.0), (1, 7.0), (2, 1.0)]);
        assert!(p.pieces(5.0, 5.0).unwrap().is_empty());
        assert!(p.pieces(6.0, 5.0).is_err());
        let tail = p.pieces(70.0, 90.0).unwrap();
        assert_eq!(tail.len(), 1);
        assert_eq!(tail[0].segment, 3);
    }

    #[test]
    fn partition_rejects_unsorted() {
        assert!(AgePartition::new(vec![10.0f64, 5.0]).is_err());
        assert!(AgePartition::new(vec![0.0f64]).is_err());
    }

    #[test]
    fn well_formed_model_has_no_violations() {
        let m = two_class_model();
        assert_eq!(m.validate(), vec![]);
    }

    #[test]
    fn negative_intensity_is_named() {
        let mut m = two_class_model();
        let seg = m.classes[0].intensity.segments()[0].clone();
        let mut bad = seg.clone();
        bad[(0, 1)] = -0.1;
        bad[(0, 0)] = -bad[(0, 2)] + 0.1;
        let mut segs = m.classes[0].intensity.segments().to_vec();
        segs[0] = bad;
        m.classes[0].intensity = PiecewiseIntensity::new_unchecked(
            m.partition().clone(),
            segs,
            m.classes[0].intensity.mask().clone(),
        );
        let v = m.validate();
        assert_eq!(v.len(), 1, "{v:?}");
        assert!(v[0].field.contains("intensity[0][0][1]"));
        assert!(v[0].rule.contains("q_ij"));
    }

    #[test]
    fn class_prior_sum_is_checked() {
        let mut m = two_class_model();
        m.class_prior = vec![0.3, 0.6];
        let v = m.validate();
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].field, "class_prior");
    }

    #[test]
    fn death_row_must_be_zero() {
        let mut m = two_class_model();
        let d = m.death_state().unwrap();
        let intensity = m.classes[1].intensity.with_rate(0, d, 0, 0.5);
        m.classes[1].intensity = intensity;
        assert!(m.validate().iter().any(|v| v.rule.contains("absorbing")));
    }

    #[test]
    fn casting_preserves_validity() {
        let m = two_class_model();
        let m32: HierarchicalModel<f32> = m.cast();
        assert!(m32.validate().is_empty(), "{:?}", m32.validate());
    }
}
