//! Expected complete-data log-likelihood and its gradient.
//!
//! The E-step fixes, for every sequence, class weights `w_nz` and a state
//! assignment per class (a Viterbi path, or forward-backward marginals). The
//! objective under candidate parameters is
//!
//! `Σ_n Σ_z w_nz [log p_z + log π_z(S_1) + Σ_t log P_z(a_t, a_t+1)[S_t, S_t+1]
//!  + Σ_t log p(O_t | S_t) + censor term] + Dirichlet log-priors`.
//!
//! Transition terms are differentiated by pulling `∂f/∂P` back through the
//! ordered product of segment exponentials and then through `exp` with the
//! adjoint Fréchet derivative, one block exponential per segment piece.

use rayon::prelude::*;

use crate::config::StateAssignment;
use crate::data::{Outcome, ScreeningSequence};
use crate::emissions::log_visit_likelihood;
use crate::error::{Error, Result};
use crate::inference::{backward_table, forward_table, lattice_viterbi, ClassPosterior, Lattice};
use crate::kernel::{matrix_exp, matrix_exp_frechet};
use crate::linalg::Matrix;
use crate::model::{ClassModel, HierarchicalModel};
use crate::reduce::{ExactSum, ExactVec};
use crate::scalar::{log_sum_exp, Real};

use super::params::{simplex_gradient, ParamLayout};

/// Latent states of one sequence under one class, as seen by the M-step.
#[derive(Debug, Clone, PartialEq)]
pub enum Assignment<T> {
    Path(Vec<usize>),
    Marginals {
        /// `gamma[t][s] = p(S_t = s | O)`.
        gamma: Vec<Vec<T>>,
        /// `xi[t][(s, s')] = p(S_t = s, S_t+1 = s' | O)`.
        xi: Vec<Matrix<T>>,
    },
}

impl<T: Real> Assignment<T> {
    #[inline]
    pub fn state_weight(&self, t: usize, s: usize) -> T {
        match self {
            Assignment::Path(p) => {
                if p[t] == s {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Assignment::Marginals { gamma, .. } => gamma[t][s],
        }
    }

    #[inline]
    pub fn pair_weight(&self, t: usize, s: usize, s2: usize) -> T {
        match self {
            Assignment::Path(p) => {
                if p[t] == s && p[t + 1] == s2 {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Assignment::Marginals { xi, .. } => xi[t][(s, s2)],
        }
    }
}

/// E-step output for one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct EStepEntry<T> {
    pub posterior: ClassPosterior<T>,
    /// `assignments[z]`; `None` where the sequence is impossible under `z`.
    pub assignments: Vec<Option<Assignment<T>>>,
}

fn marginals<T: Real>(lattice: &Lattice<T>, log_marginal: T) -> Assignment<T> {
    let alpha = forward_table(lattice);
    let beta = backward_table(lattice);
    let m = lattice.num_states();
    let gamma = alpha
        .iter()
        .zip(&beta)
        .map(|(a, b)| (0..m).map(|s| (a[s] + b[s] - log_marginal).exp()).collect())
        .collect();
    let xi = (0..lattice.num_visits() - 1)
        .map(|t| {
            Matrix::from_fn(m, m, |s, s2| {
                (alpha[t][s]
                    + lattice.log_transition[t][(s, s2)]
                    + lattice.log_emission[t + 1][s2]
                    + beta[t + 1][s2]
                    - log_marginal)
                    .exp()
            })
        })
        .collect();
    Assignment::Marginals { gamma, xi }
}

/// Class posterior and per-class state assignment for one sequence.
pub fn estep_sequence<T: Real>(
    model: &HierarchicalModel<T>,
    sequence: &ScreeningSequence<T>,
    mode: StateAssignment,
) -> Result<EStepEntry<T>> {
    let mut lls = Vec::with_capacity(model.num_classes());
    let mut assignments = Vec::with_capacity(model.num_classes());
    for z in 0..model.num_classes() {
        let lattice = Lattice::build(&model.class(z), sequence)?;
        let alpha = forward_table(&lattice);
        let last = alpha.last().expect("nonempty");
        let terminal: Vec<T> = last
            .iter()
            .zip(&lattice.log_terminal)
            .map(|(&a, &c)| a + c)
            .collect();
        let ll = log_sum_exp(&terminal);
        if ll.is_nan() {
            return Err(Error::Numerical(format!(
                "likelihood of sequence {} is NaN",
                sequence.id
            )));
        }
        lls.push(ll);
        assignments.push(if ll == T::neg_infinity() {
            None
        } else {
            match mode {
                StateAssignment::Viterbi => {
                    lattice_viterbi(&lattice).map(|(p, _)| Assignment::Path(p))
                }
                StateAssignment::Marginals => Some(marginals(&lattice, ll)),
            }
        });
    }
    let posterior = ClassPosterior::from_logliks(&model.class_prior, lls).ok_or_else(|| {
        Error::ImpossibleSequence {
            id: sequence.id.clone(),
        }
    })?;
    Ok(EStepEntry {
        posterior,
        assignments,
    })
}

/// Contiguous groups of sequence indices that are processed as one unit.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusterPartition {
    pub clusters: Vec<Vec<usize>>,
}

impl ClusterPartition {
    pub fn new(num_sequences: usize, cluster_size: usize) -> Self {
        let size = cluster_size.max(1);
        let clusters = (0..num_sequences)
            .collect::<Vec<_>>()
            .chunks(size)
            .map(<[usize]>::to_vec)
            .collect();
        Self { clusters }
    }

    /// `count` near-equal contiguous groups.
    pub fn with_count(num_sequences: usize, count: usize) -> Self {
        let count = count.max(1);
        let clusters = (0..count)
            .map(|c| {
                (c * num_sequences / count..(c + 1) * num_sequences / count).collect::<Vec<_>>()
            })
            .filter(|c| !c.is_empty())
            .collect();
        Self { clusters }
    }

    pub fn len(&self) -> usize {
        self.clusters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clusters.is_empty()
    }
}

/// Dense accumulator layout in natural coordinates: generator gradients,
/// initial-state counts, emission count sums and grade counts.
#[derive(Debug, Clone)]
struct RawLayout {
    segments: usize,
    states: usize,
    tests: usize,
    max_levels: usize,
    init_base: usize,
    rate_a_base: usize,
    rate_b_base: usize,
    grade_base: usize,
    len: usize,
}

impl RawLayout {
    fn new<T: Real>(model: &HierarchicalModel<T>, slots: usize) -> Self {
        let z = model.num_classes();
        let segments = model.partition().num_segments();
        let states = model.classes[0].intensity.num_states();
        let tests = model.emission.num_tests();
        let max_levels = model.emission.grade_levels().into_iter().max().unwrap_or(0);
        let init_base = z * segments * states * states;
        let rate_a_base = init_base + z * segments * states;
        let rate_b_base = rate_a_base + slots * states * tests;
        let grade_base = rate_b_base + slots * states * tests;
        let len = grade_base + slots * states * tests * max_levels;
        Self {
            segments,
            states,
            tests,
            max_levels,
            init_base,
            rate_a_base,
            rate_b_base,
            grade_base,
            len,
        }
    }

    fn q(&self, z: usize, k: usize, i: usize, j: usize) -> usize {
        ((z * self.segments + k) * self.states + i) * self.states + j
    }

    fn init(&self, z: usize, k: usize, s: usize) -> usize {
        self.init_base + (z * self.segments + k) * self.states + s
    }

    fn rate_a(&self, e: usize, s: usize, k: usize) -> usize {
        self.rate_a_base + (e * self.states + s) * self.tests + k
    }

    fn rate_b(&self, e: usize, s: usize, k: usize) -> usize {
        self.rate_b_base + (e * self.states + s) * self.tests + k
    }

    fn grade(&self, e: usize, s: usize, k: usize, l: usize) -> usize {
        self.grade_base + ((e * self.states + s) * self.tests + k) * self.max_levels + l
    }
}

/// Segment pieces of an interval with their exponentials.
struct IntervalProduct<T> {
    pieces: Vec<(usize, T)>,
    factors: Vec<Matrix<T>>,
    product: Matrix<T>,
}

fn interval_product<T: Real>(
    class: &ClassModel<'_, T>,
    from: T,
    to: T,
) -> Result<IntervalProduct<T>> {
    let m = class.num_states();
    let mut pieces = Vec::new();
    let mut factors = Vec::new();
    let mut product = Matrix::identity(m);
    for piece in class.intensity.partition().pieces(from, to)? {
        let d = piece.duration();
        let e = matrix_exp(&class.intensity.generator(piece.segment).scale(d))?;
        product = product.matmul(&e);
        pieces.push((piece.segment, d));
        factors.push(e);
    }
    Ok(IntervalProduct {
        pieces,
        factors,
        product,
    })
}

/// Adds `∂f/∂Q_k` for every piece given `g = ∂f/∂P`.
fn pull_back<T: Real>(
    class: &ClassModel<'_, T>,
    interval: &IntervalProduct<T>,
    g: &Matrix<T>,
    z: usize,
    raw_layout: &RawLayout,
    raw: &mut [T],
) -> Result<()> {
    let n = interval.factors.len();
    let m = class.num_states();
    // suffix[i] = F_{i+1} ... F_{n-1}
    let mut suffix = vec![Matrix::identity(m); n];
    for i in (0..n.saturating_sub(1)).rev() {
        suffix[i] = interval.factors[i + 1].matmul(&suffix[i + 1]);
    }
    let mut prefix = Matrix::identity(m);
    for i in 0..n {
        let (k, d) = interval.pieces[i];
        let gi = prefix.transpose().matmul(g).matmul(&suffix[i].transpose());
        let a_t = class.intensity.generator(k).transpose().scale(d);
        let (_, l) = matrix_exp_frechet(&a_t, &gi)?;
        for a in 0..m {
            for b in 0..m {
                let idx = raw_layout.q(z, k, a, b);
                raw[idx] = raw[idx] + d * l[(a, b)];
            }
        }
        prefix = prefix.matmul(&interval.factors[i]);
    }
    Ok(())
}

/// Objective contribution of one sequence; fills `raw` when present.
fn sequence_term<T: Real>(
    model: &HierarchicalModel<T>,
    layout: &ParamLayout,
    raw_layout: &RawLayout,
    sequence: &ScreeningSequence<T>,
    entry: &EStepEntry<T>,
    mut raw: Option<&mut [T]>,
) -> Result<T> {
    let mut total = ExactSum::new();
    let visits = &sequence.visits;
    for z in 0..model.num_classes() {
        let w = entry.posterior.probs[z];
        if w == T::zero() {
            continue;
        }
        let Some(assign) = &entry.assignments[z] else {
            continue;
        };
        let class = model.class(z);
        let e = layout.emissions.slot_of_class[z];
        let m = class.num_states();
        let prior = model.class_prior[z];
        if prior > T::zero() {
            total.add(w * prior.ln());
        }
        let k0 = class.intensity.partition().segment_index(visits[0].age)?;
        let init = &class.initial[k0];
        for s in 0..m {
            let ws = w * assign.state_weight(0, s);
            if ws > T::zero() {
                total.add(ws * init[s].ln());
                if let Some(r) = raw.as_deref_mut() {
                    let i = raw_layout.init(z, k0, s);
                    r[i] = r[i] + ws;
                }
            }
        }
        for (t, v) in visits.iter().enumerate() {
            for s in 0..m {
                let ws = w * assign.state_weight(t, s);
                if ws <= T::zero() {
                    continue;
                }
                total.add(ws * log_visit_likelihood(class.emission, s, v));
                if let Some(r) = raw.as_deref_mut() {
                    for (k, hist) in v.results.iter().enumerate() {
                        let count: u32 = hist.iter().sum();
                        let a = raw_layout.rate_a(e, s, k);
                        r[a] = r[a] + ws * T::from_count(count as usize);
                        let b = raw_layout.rate_b(e, s, k);
                        r[b] = r[b] + ws;
                        for (l, &g) in hist.iter().enumerate() {
                            if g > 0 {
                                let gi = raw_layout.grade(e, s, k, l);
                                r[gi] = r[gi] + ws * T::from_count(g as usize);
                            }
                        }
                    }
                }
            }
        }
        let source = |t: usize, s: usize| {
            if visits[t].treated {
                class.reset_target(s)
            } else {
                s
            }
        };
        for t in 0..visits.len().saturating_sub(1) {
            let interval = interval_product(&class, visits[t].age, visits[t + 1].age)?;
            let p = &interval.product;
            let mut g = Matrix::zeros(m, m);
            let mut any = false;
            for s in 0..m {
                for s2 in 0..m {
                    let wp = w * assign.pair_weight(t, s, s2);
                    if wp <= T::zero() {
                        continue;
                    }
                    let from = source(t, s);
                    total.add(wp * p[(from, s2)].ln());
                    g[(from, s2)] = g[(from, s2)] + wp / p[(from, s2)];
                    any = true;
                }
            }
            if any {
                if let Some(r) = raw.as_deref_mut() {
                    pull_back(&class, &interval, &g, z, raw_layout, r)?;
                }
            }
        }
        if let Some(c) = sequence.censor {
            let last = visits.len() - 1;
            match class.death_state() {
                None => {
                    if c.outcome == Outcome::Death {
                        total.add(T::neg_infinity());
                    }
                }
                Some(death) => {
                    let interval = interval_product(&class, visits[last].age, c.age)?;
                    let mut g = Matrix::zeros(m, m);
                    let mut any = false;
                    for s in 0..m {
                        let ws = w * assign.state_weight(last, s);
                        if ws <= T::zero() {
                            continue;
                        }
                        let from = source(last, s);
                        let dead = interval.product[(from, death)];
                        let (term, slope) = match c.outcome {
                            Outcome::Death => (dead.ln(), T::one() / dead),
                            Outcome::Alive => {
                                ((T::one() - dead).ln(), -T::one() / (T::one() - dead))
                            }
                        };
                        total.add(ws * term);
                        g[(from, death)] = g[(from, death)] + ws * slope;
                        any = true;
                    }
                    if any && !interval.pieces.is_empty() {
                        if let Some(r) = raw.as_deref_mut() {
                            pull_back(&class, &interval, &g, z, raw_layout, r)?;
                        }
                    }
                }
            }
        }
    }
    Ok(total.value())
}

/// Dirichlet log-prior terms over supported probabilities.
fn log_prior<T: Real>(model: &HierarchicalModel<T>) -> T {
    let mut total = ExactSum::new();
    let mut add = |p: &[T], alpha: &[T]| {
        for (&pi, &a) in p.iter().zip(alpha) {
            if pi > T::zero() && a != T::one() {
                total.add((a - T::one()) * pi.ln());
            }
        }
    };
    for c in &model.classes {
        for (p, a) in c.initial.iter().zip(&c.initial_priors) {
            add(p, a);
        }
    }
    let mut emissions = vec![&model.emission];
    emissions.extend(model.classes.iter().filter_map(|c| c.emission.as_ref()));
    for em in emissions {
        for (ps, als) in em.grade_probs.iter().zip(&em.grade_priors) {
            for (p, a) in ps.iter().zip(als) {
                add(p, a);
            }
        }
    }
    total.value()
}

/// The M-step objective over a fixed E-step.
pub struct Emcll<'a, T> {
    pub template: &'a HierarchicalModel<T>,
    pub layout: &'a ParamLayout,
    pub sequences: &'a [ScreeningSequence<T>],
    pub entries: &'a [EStepEntry<T>],
    pub clusters: &'a ClusterPartition,
}

impl<'a, T: Real> Emcll<'a, T> {
    /// Objective and, optionally, its gradient with respect to the layout coordinates.
    ///
    /// Cluster results are combined with exact summation, so the output does
    /// not depend on how sequences are grouped.
    pub fn evaluate(&self, theta: &[T], with_gradient: bool) -> Result<(T, Option<Vec<T>>)> {
        let model = self.layout.unpack(theta, self.template);
        self.evaluate_model(&model, with_gradient)
    }

    pub fn evaluate_model(
        &self,
        model: &HierarchicalModel<T>,
        with_gradient: bool,
    ) -> Result<(T, Option<Vec<T>>)> {
        let raw_layout = RawLayout::new(model, self.layout.emissions.len());
        let parts = self
            .clusters
            .clusters
            .par_iter()
            .map(|cluster| {
                let mut value = ExactSum::new();
                let mut raw_total = ExactVec::zeros(if with_gradient { raw_layout.len } else { 0 });
                let mut raw = vec![T::zero(); raw_total.len()];
                for &n in cluster {
                    raw.iter_mut().for_each(|x| *x = T::zero());
                    let r = with_gradient.then_some(raw.as_mut_slice());
                    value.add(sequence_term(
                        model,
                        self.layout,
                        &raw_layout,
                        &self.sequences[n],
                        &self.entries[n],
                        r,
                    )?);
                    if with_gradient {
                        raw_total.add_slice(&raw);
                    }
                }
                Ok((value, raw_total))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut value = ExactSum::new();
        let mut raw = ExactVec::zeros(if with_gradient { raw_layout.len } else { 0 });
        for (v, r) in &parts {
            value.merge(v);
            raw.merge(r);
        }
        value.add(log_prior(model));
        let value = value.value();
        if !with_gradient {
            return Ok((value, None));
        }
        Ok((value, Some(self.chain(model, &raw_layout, &raw.values()))))
    }

    /// Maps natural-coordinate totals to the layout coordinates.
    fn chain(&self, model: &HierarchicalModel<T>, rl: &RawLayout, raw: &[T]) -> Vec<T> {
        let layout = self.layout;
        let mut grad = vec![T::zero(); layout.len()];
        for (n, &(z, k, i, j)) in layout.intensities.iter().enumerate() {
            let q = model.classes[z].intensity.rate(k, i, j);
            grad[n] = q * (raw[rl.q(z, k, i, j)] - raw[rl.q(z, k, i, i)]);
        }
        for (z, blocks) in layout.initial.iter().enumerate() {
            let c = &model.classes[z];
            for (k, b) in blocks.iter().enumerate() {
                let counts: Vec<T> = (0..rl.states)
                    .map(|s| raw[rl.init(z, k, s)] + c.initial_priors[k][s] - T::one())
                    .collect();
                simplex_gradient(b, &c.initial[k], &counts, &mut grad);
            }
        }
        let off = layout.rates_start();
        let emission = |e: usize| match layout.emissions.owner[e] {
            None => &model.emission,
            Some(z) => model.classes[z]
                .emission
                .as_ref()
                .expect("override present"),
        };
        for (n, &(e, s, k)) in layout.rates.iter().enumerate() {
            let eta = emission(e).rate(s, k);
            grad[off + n] = raw[rl.rate_a(e, s, k)] - raw[rl.rate_b(e, s, k)] * eta;
        }
        for (e, states) in layout.grades.iter().enumerate() {
            let em = emission(e);
            for (s, tests) in states.iter().enumerate() {
                for (k, b) in tests.iter().enumerate() {
                    let p = &em.grade_probs[s][k];
                    let counts: Vec<T> = (0..p.len())
                        .map(|l| raw[rl.grade(e, s, k, l)] + em.grade_priors[s][k][l] - T::one())
                        .collect();
                    simplex_gradient(b, p, &counts, &mut grad);
                }
            }
        }
        grad
    }
}

/// EMCLL of `model` for a fixed E-step, as one cluster.
pub fn emcll<T: Real>(
    model: &HierarchicalModel<T>,
    sequences: &[ScreeningSequence<T>],
    entries: &[EStepEntry<T>],
) -> Result<T> {
    let layout = ParamLayout::new(model, &Default::default());
    let clusters = ClusterPartition::new(sequences.len(), sequences.len().max(1));
    let problem = Emcll {
        template: model,
        layout: &layout,
        sequences,
        entries,
        clusters: &clusters,
    };
    problem.evaluate_model(model, false).map(|(v, _)| v)
}

/// Gradient of [`emcll`] with respect to all free coordinates of `layout`.
pub fn emcll_gradient<T: Real>(
    model: &HierarchicalModel<T>,
    layout: &ParamLayout,
    sequences: &[ScreeningSequence<T>],
    entries: &[EStepEntry<T>],
) -> Result<Vec<T>> {
    let clusters = ClusterPartition::new(sequences.len(), sequences.len().max(1));
    let problem = Emcll {
        template: model,
        layout,
        sequences,
        entries,
        clusters: &clusters,
    };
    Ok(problem.evaluate_model(model, true)?.1.expect("requested"))
}
