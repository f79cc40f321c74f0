//! Forward simulation of latent trajectories and synthetic screening cohorts.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Censoring, Outcome, ScreeningSequence, Visit};
use crate::emissions::{log_visit_likelihood, sample_visit};
use crate::error::{Error, Result};
use crate::model::{AgePartition, EmissionModel, HierarchicalModel, PiecewiseIntensity};
use crate::scalar::Real;

/// Per-segment occupancy times and jump counts of a trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct SufficientStats<T> {
    /// `occupancy[segment][state]`, years.
    pub occupancy: Vec<Vec<T>>,
    /// `jumps[segment][from][to]`, intensity-driven jumps only.
    pub jumps: Vec<Vec<Vec<u32>>>,
}

impl<T: Real> SufficientStats<T> {
    pub fn total_occupancy(&self) -> T {
        self.occupancy.iter().flatten().copied().sum()
    }
}

/// A continuous-time state path over `[start_age, end_age]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentTrajectory<T> {
    pub start_age: T,
    pub end_age: T,
    /// Ages of state changes, strictly increasing.
    pub jump_ages: Vec<T>,
    /// `states[0]` is the initial state, `states[i + 1]` the state after jump `i`.
    pub states: Vec<usize>,
    /// `true` where a jump is a treatment reset rather than an intensity-driven jump.
    pub resets: Vec<bool>,
    pub stats: SufficientStats<T>,
}

impl<T: Real> LatentTrajectory<T> {
    fn start(state: usize, age: T) -> Self {
        Self {
            start_age: age,
            end_age: age,
            jump_ages: Vec::new(),
            states: vec![state],
            resets: Vec::new(),
            stats: SufficientStats {
                occupancy: Vec::new(),
                jumps: Vec::new(),
            },
        }
    }

    pub fn initial_state(&self) -> usize {
        self.states[0]
    }

    pub fn final_state(&self) -> usize {
        *self.states.last().expect("nonempty")
    }

    pub fn num_jumps(&self) -> usize {
        self.jump_ages.len()
    }

    /// State occupied just before `age` (a jump exactly at `age` is not yet applied).
    pub fn state_at(&self, age: T) -> usize {
        self.states[self.jump_ages.partition_point(|&a| a < age)]
    }

    /// Recomputes occupancy times and jump counts from the jump list.
    pub fn compute_stats(
        &self,
        partition: &AgePartition<T>,
        num_states: usize,
    ) -> Result<SufficientStats<T>> {
        let segs = partition.num_segments();
        let mut occupancy = vec![vec![T::zero(); num_states]; segs];
        let mut jumps = vec![vec![vec![0u32; num_states]; num_states]; segs];
        let mut from = self.start_age;
        for (i, &age) in self.jump_ages.iter().enumerate() {
            for piece in partition.pieces(from, age)? {
                occupancy[piece.segment][self.states[i]] =
                    occupancy[piece.segment][self.states[i]] + piece.duration();
            }
            if !self.resets[i] {
                let k = partition.segment_index(age)?;
                jumps[k][self.states[i]][self.states[i + 1]] += 1;
            }
            from = age;
        }
        for piece in partition.pieces(from, self.end_age)? {
            let s = self.final_state();
            occupancy[piece.segment][s] = occupancy[piece.segment][s] + piece.duration();
        }
        Ok(SufficientStats { occupancy, jumps })
    }

    fn push_jump(&mut self, age: T, to: usize, reset: bool) {
        self.jump_ages.push(age);
        self.states.push(to);
        self.resets.push(reset);
    }

    /// Runs the process forward from `end_age` to `to`.
    fn advance<R: Rng + ?Sized>(
        &mut self,
        intensity: &PiecewiseIntensity<T>,
        to: T,
        rng: &mut R,
    ) -> Result<()> {
        let partition = intensity.partition();
        let mut now = self.end_age;
        let mut state = self.final_state();
        while now < to {
            let k = partition.segment_index(now)?;
            let horizon = match partition.segment_end(k) {
                Some(end) if end < to => end,
                _ => to,
            };
            let rate = intensity.exit_rate(k, state);
            if !(rate > T::zero()) {
                now = horizon;
                continue;
            }
            let hold: f64 = Exp1.sample(rng);
            let jump_at = now + T::lit(hold) / rate;
            if jump_at >= horizon {
                // Memorylessness: restart the clock at the boundary with the next segment's rates.
                now = horizon;
                continue;
            }
            let target = draw_target(intensity, k, state, rate, rng);
            self.push_jump(jump_at, target, false);
            state = target;
            now = jump_at;
        }
        self.end_age = to.max(self.end_age);
        Ok(())
    }

    fn finish(&mut self, partition: &AgePartition<T>, num_states: usize) -> Result<()> {
        self.stats = self.compute_stats(partition, num_states)?;
        Ok(())
    }
}

fn draw_target<T: Real, R: Rng + ?Sized>(
    intensity: &PiecewiseIntensity<T>,
    segment: usize,
    from: usize,
    exit_rate: T,
    rng: &mut R,
) -> usize {
    let u = T::lit(rng.random::<f64>()) * exit_rate;
    let mut acc = T::zero();
    let mut last = from;
    for j in 0..intensity.num_states() {
        if j == from {
            continue;
        }
        let q = intensity.rate(segment, from, j);
        if q <= T::zero() {
            continue;
        }
        acc = acc + q;
        last = j;
        if u < acc {
            return j;
        }
    }
    last
}

/// Samples a path of the jump process on `[start_age, end_age]`.
pub fn simulate_trajectory<T: Real, R: Rng + ?Sized>(
    intensity: &PiecewiseIntensity<T>,
    initial_state: usize,
    start_age: T,
    end_age: T,
    rng: &mut R,
) -> Result<LatentTrajectory<T>> {
    if !(start_age < end_age) || !(start_age >= T::zero()) {
        return Err(Error::Domain(format!(
            "trajectory window [{start_age}, {end_age}] is empty or negative"
        )));
    }
    let mut traj = LatentTrajectory::start(initial_state, start_age);
    traj.advance(intensity, end_age, rng)?;
    traj.finish(intensity.partition(), intensity.num_states())?;
    Ok(traj)
}

/// When simulated visits are marked as treated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum TreatmentPolicy {
    #[default]
    Never,
    /// Treat after any visit showing a grade at or above `min_grade` on any test.
    OnHighGrade { min_grade: usize },
    /// Treat exactly at the listed visit indices.
    AtVisits { visits: Vec<usize> },
}

impl TreatmentPolicy {
    fn treat<T: Real>(&self, index: usize, visit: &Visit<T>) -> bool {
        match self {
            TreatmentPolicy::Never => false,
            TreatmentPolicy::OnHighGrade { min_grade } => visit
                .worst_grade(0..visit.results.len())
                .is_some_and(|g| g >= *min_grade),
            TreatmentPolicy::AtVisits { visits } => visits.contains(&index),
        }
    }
}

/// One simulated individual with its latent truth.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedSequence<T> {
    pub class: usize,
    pub trajectory: LatentTrajectory<T>,
    pub sequence: ScreeningSequence<T>,
}

fn sample_categorical<T: Real, R: Rng + ?Sized>(probs: &[T], rng: &mut R) -> usize {
    let u = T::lit(rng.random::<f64>());
    let mut acc = T::zero();
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p <= T::zero() {
            continue;
        }
        acc = acc + p;
        last = i;
        if u < acc {
            return i;
        }
    }
    last
}

/// Draws a class, an initial state at the first visit, a latent path up to
/// `censor_age`, one visit per age and the censoring outcome. Treated visits
/// reset the latent state to the normal state right after emitting.
pub fn simulate_sequence<T: Real, R: Rng + ?Sized>(
    model: &HierarchicalModel<T>,
    id: &str,
    visit_ages: &[T],
    censor_age: T,
    treatment: &TreatmentPolicy,
    rng: &mut R,
) -> Result<SimulatedSequence<T>> {
    let Some(&first) = visit_ages.first() else {
        return Err(Error::Domain("at least one visit age required".into()));
    };
    if visit_ages.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::Domain(
            "visit ages must be strictly increasing".into(),
        ));
    }
    let last = *visit_ages.last().expect("nonempty");
    if !(censor_age >= last) {
        return Err(Error::Domain("censor age precedes the last visit".into()));
    }
    let z = sample_categorical(&model.class_prior, rng);
    let class = model.class(z);
    let s0 = sample_categorical(class.initial_distribution(first)?, rng);
    let mut traj = LatentTrajectory::start(s0, first);
    let mut visits = Vec::with_capacity(visit_ages.len());
    for (t, &age) in visit_ages.iter().enumerate() {
        traj.advance(class.intensity, age, rng)?;
        let state = traj.final_state();
        let visit = Visit::new(age, sample_visit(class.emission, state, rng));
        let treated = treatment.treat(t, &visit);
        if treated {
            let target = class.reset_target(state);
            if target != state {
                traj.push_jump(age, target, true);
            }
        }
        visits.push(visit.treated(treated));
    }
    traj.advance(class.intensity, censor_age, rng)?;
    traj.finish(class.intensity.partition(), class.num_states())?;
    let outcome = if Some(traj.final_state()) == class.death_state() {
        Outcome::Death
    } else {
        Outcome::Alive
    };
    Ok(SimulatedSequence {
        class: z,
        trajectory: traj,
        sequence: ScreeningSequence::new(
            id,
            visits,
            Some(Censoring {
                age: censor_age,
                outcome,
            }),
        ),
    })
}

/// `log CL`: exponential holding terms, jump intensities and emissions along
/// a fully observed path. The censoring outcome must agree with the path
/// (otherwise `-inf`). The initial state is taken as given.
pub fn complete_log_likelihood<T: Real>(
    intensity: &PiecewiseIntensity<T>,
    emission: &EmissionModel<T>,
    trajectory: &LatentTrajectory<T>,
    sequence: &ScreeningSequence<T>,
) -> Result<T> {
    let covers = |age: T| age >= trajectory.start_age && age <= trajectory.end_age;
    if sequence.visits.iter().any(|v| !covers(v.age))
        || sequence.censor.is_some_and(|c| !covers(c.age))
    {
        return Err(Error::Domain(format!(
            "trajectory window [{}, {}] does not cover sequence {}",
            trajectory.start_age, trajectory.end_age, sequence.id
        )));
    }
    let stats = trajectory.compute_stats(intensity.partition(), intensity.num_states())?;
    let mut total = T::zero();
    for (k, occ) in stats.occupancy.iter().enumerate() {
        for (i, &tau) in occ.iter().enumerate() {
            total = total - intensity.exit_rate(k, i) * tau;
            for (j, &n) in stats.jumps[k][i].iter().enumerate() {
                if n > 0 {
                    total = total + T::from_count(n as usize) * intensity.rate(k, i, j).ln();
                }
            }
        }
    }
    for v in &sequence.visits {
        total = total + log_visit_likelihood(emission, trajectory.state_at(v.age), v);
    }
    if let Some(c) = sequence.censor {
        let s = if c.age == trajectory.end_age {
            trajectory.final_state()
        } else {
            trajectory.state_at(c.age)
        };
        let dead = Some(s) == emission.death_state;
        if dead != (c.outcome == Outcome::Death) {
            return Ok(T::neg_infinity());
        }
    }
    Ok(total)
}

/// Visit-age generator for synthetic cohorts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum VisitSchedule {
    /// Renewal process: first visit uniform in `start_age`, gaps uniform in
    /// `gap`, a visit count uniform in `visits` (inclusive), then censoring
    /// after an extra uniform `censor_gap`.
    Renewal {
        start_age: [f64; 2],
        gap: [f64; 2],
        visits: [usize; 2],
        censor_gap: [f64; 2],
    },
    /// Resample (visit ages, censor age) patterns with replacement.
    Empirical { patterns: Vec<(Vec<f64>, f64)> },
}

impl Default for VisitSchedule {
    fn default() -> Self {
        VisitSchedule::Renewal {
            start_age: [20.0, 35.0],
            gap: [1.0, 5.0],
            visits: [6, 10],
            censor_gap: [0.0, 5.0],
        }
    }
}

impl VisitSchedule {
    /// Schedule that replays the visit patterns of observed sequences.
    pub fn from_sequences<T: Real>(sequences: &[ScreeningSequence<T>]) -> Self {
        let patterns = sequences
            .iter()
            .filter(|s| !s.is_empty())
            .map(|s| {
                let ages: Vec<f64> = s.visits.iter().map(|v| v.age.as_f64()).collect();
                let last = *ages.last().expect("nonempty");
                let censor = s.censor.map_or(last, |c| c.age.as_f64());
                (ages, censor)
            })
            .collect();
        VisitSchedule::Empirical { patterns }
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<(Vec<f64>, f64)> {
        let uniform = |rng: &mut R, r: [f64; 2]| r[0] + (r[1] - r[0]) * rng.random::<f64>();
        match self {
            VisitSchedule::Renewal {
                start_age,
                gap,
                visits,
                censor_gap,
            } => {
                if gap[0] <= 0.0 || visits[0] == 0 || visits[1] < visits[0] {
                    return Err(Error::Domain(
                        "renewal schedule needs positive gaps and visits".into(),
                    ));
                }
                let n = rng.random_range(visits[0]..=visits[1]);
                let mut ages = Vec::with_capacity(n);
                let mut age = uniform(rng, *start_age);
                for _ in 0..n {
                    ages.push(age);
                    age += uniform(rng, *gap);
                }
                let last = *ages.last().expect("nonempty");
                Ok((ages, last + uniform(rng, *censor_gap)))
            }
            VisitSchedule::Empirical { patterns } => {
                if patterns.is_empty() {
                    return Err(Error::Empty(
                        "empirical visit schedule has no patterns".into(),
                    ));
                }
                Ok(patterns[rng.random_range(0..patterns.len())].clone())
            }
        }
    }
}

/// Synthetic cohort description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CohortSpec {
    pub size: usize,
    pub schedule: VisitSchedule,
    pub treatment: TreatmentPolicy,
    pub id_prefix: String,
}

impl Default for CohortSpec {
    fn default() -> Self {
        Self {
            size: 1000,
            schedule: VisitSchedule::default(),
            treatment: TreatmentPolicy::Never,
            id_prefix: "s".into(),
        }
    }
}

/// Random stream for sequence `index`: independent of thread scheduling.
pub fn sequence_rng(seed: u64, index: u64) -> ChaCha8Rng {
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Simulates a cohort in parallel; output depends only on `(model, spec, seed)`.
pub fn simulate_cohort<T: Real>(
    model: &HierarchicalModel<T>,
    spec: &CohortSpec,
    seed: u64,
) -> Result<Vec<SimulatedSequence<T>>> {
    model.ensure_valid()?;
    (0..spec.size)
        .into_par_iter()
        .map(|i| {
            let mut rng = sequence_rng(seed, i as u64);
            let (ages, censor) = spec.schedule.draw(&mut rng)?;
            let ages: Vec<T> = ages.into_iter().map(T::lit).collect();
            let id = format!("{}{}", spec.id_prefix, i);
            simulate_sequence(model, &id, &ages, T::lit(censor), &spec.treatment, &mut rng)
        })
        .collect()
}
