//! File formats: model documents, records files and run outputs.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Censoring, Outcome, ScreeningSequence, Visit};
use crate::error::{Error, Result};
use crate::inference::DiagnosticRow;
use crate::linalg::Matrix;
use crate::metrics::ClassificationMetrics;
use crate::model::{
    AgePartition, ClassComponent, EmissionModel, HierarchicalModel, PiecewiseIntensity,
    TransitionMask,
};
use crate::simulate::SimulatedSequence;
use crate::survival::{KaplanMeierCurve, KmBand};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmissionDocument {
    /// `rates[state][test]`.
    pub rates: Vec<Vec<f64>>,
    /// `grade_probs[state][test][grade]`.
    pub grade_probs: Vec<Vec<Vec<f64>>>,
    pub grade_priors: Vec<Vec<Vec<f64>>>,
    pub death_state: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassDocument {
    /// `intensity[segment][row][col]`.
    pub intensity: Vec<Vec<Vec<f64>>>,
    pub allowed: Vec<Vec<bool>>,
    /// `initial[segment][state]`.
    pub initial: Vec<Vec<f64>>,
    pub initial_priors: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub emission: Option<EmissionDocument>,
}

/// Serialized form of a [`HierarchicalModel`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDocument {
    /// Interior age boundaries.
    pub partition: Vec<f64>,
    pub class_prior: Vec<f64>,
    pub normal_state: usize,
    pub classes: Vec<ClassDocument>,
    pub emission: EmissionDocument,
}

impl From<&EmissionModel<f64>> for EmissionDocument {
    fn from(e: &EmissionModel<f64>) -> Self {
        Self {
            rates: e.rates.to_rows(),
            grade_probs: e.grade_probs.clone(),
            grade_priors: e.grade_priors.clone(),
            death_state: e.death_state,
        }
    }
}

impl EmissionDocument {
    fn to_model(&self) -> Result<EmissionModel<f64>> {
        Ok(EmissionModel {
            rates: Matrix::from_rows(&self.rates)
                .ok_or_else(|| Error::Domain("emission.rates rows differ in length".into()))?,
            grade_probs: self.grade_probs.clone(),
            grade_priors: self.grade_priors.clone(),
            death_state: self.death_state,
        })
    }
}

impl From<&HierarchicalModel<f64>> for ModelDocument {
    fn from(m: &HierarchicalModel<f64>) -> Self {
        Self {
            partition: m.partition().boundaries().to_vec(),
            class_prior: m.class_prior.clone(),
            normal_state: m.normal_state,
            classes: m
                .classes
                .iter()
                .map(|c| ClassDocument {
                    intensity: c.intensity.segments().iter().map(Matrix::to_rows).collect(),
                    allowed: c.intensity.mask().to_rows(),
                    initial: c.initial.clone(),
                    initial_priors: c.initial_priors.clone(),
                    emission: c.emission.as_ref().map(EmissionDocument::from),
                })
                .collect(),
            emission: EmissionDocument::from(&m.emission),
        }
    }
}

impl ModelDocument {
    /// Builds and validates the model.
    pub fn to_model(&self) -> Result<HierarchicalModel<f64>> {
        let partition = AgePartition::new(self.partition.clone())?;
        let classes = self
            .classes
            .iter()
            .enumerate()
            .map(|(z, c)| {
                let segments = c
                    .intensity
                    .iter()
                    .map(|rows| {
                        Matrix::from_rows(rows).ok_or_else(|| {
                            Error::Domain(format!("classes[{z}].intensity rows differ in length"))
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(ClassComponent {
                    intensity: PiecewiseIntensity::new(
                        partition.clone(),
                        segments,
                        TransitionMask::from_rows(&c.allowed)?,
                    )?,
                    initial: c.initial.clone(),
                    initial_priors: c.initial_priors.clone(),
                    emission: c.emission.as_ref().map(|e| e.to_model()).transpose()?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let model = HierarchicalModel {
            class_prior: self.class_prior.clone(),
            classes,
            emission: self.emission.to_model()?,
            normal_state: self.normal_state,
        };
        model.ensure_valid()?;
        Ok(model)
    }
}

pub fn model_to_json(model: &HierarchicalModel<f64>) -> Result<String> {
    Ok(serde_json::to_string_pretty(&ModelDocument::from(model))?)
}

pub fn model_from_json(text: &str) -> Result<HierarchicalModel<f64>> {
    serde_json::from_str::<ModelDocument>(text)?.to_model()
}

pub fn write_model(path: &Path, model: &HierarchicalModel<f64>) -> Result<()> {
    std::fs::write(path, model_to_json(model)? + "\n")?;
    Ok(())
}

pub fn read_model(path: &Path) -> Result<HierarchicalModel<f64>> {
    model_from_json(&std::fs::read_to_string(path)?)
}

/// Sequences read from a records file.
#[derive(Debug, Clone, PartialEq)]
pub struct RecordSet {
    pub sequences: Vec<ScreeningSequence<f64>>,
    /// Number of grade levels per test type.
    pub grade_levels: Vec<usize>,
}

pub const RECORDS_HEADER: &str = "individual_id,age,test_type,grade_counts,treated";

struct VisitLine {
    age: f64,
    test: usize,
    counts: Vec<u32>,
    treated: bool,
    line: usize,
}

#[derive(Default)]
struct Pending {
    lines: Vec<VisitLine>,
    censor: Option<(Censoring<f64>, usize)>,
}

/// Parses a records file.
///
/// Each visit line is `individual_id,age,test_type,grade_counts...,treated`
/// with a 0-based test type, one count per grade and a `0`/`1` treated flag.
/// Lines sharing an individual and an age form one visit; test types without
/// a line at a visit have no tests. A censoring line reads
/// `individual_id,CENSOR,age,death|alive`. Individuals keep the order of
/// their first line. Blank lines and lines starting with `#` are skipped.
///
/// With `grade_levels`, every visit line must have that many grade columns
/// for its test type; otherwise the levels are inferred and must agree across
/// lines.
pub fn parse_records<R: Read>(
    reader: R,
    source: &str,
    grade_levels: Option<&[usize]>,
) -> Result<RecordSet> {
    let perr = |line: usize, message: String| Error::Parse {
        source_name: source.to_string(),
        line,
        message,
    };
    let mut order: Vec<String> = Vec::new();
    let mut by_id: HashMap<String, Pending> = HashMap::new();
    let mut levels: Vec<Option<usize>> = grade_levels
        .map(|l| l.iter().copied().map(Some).collect())
        .unwrap_or_default();
    for (i, text) in BufReader::new(reader).lines().enumerate() {
        let line = i + 1;
        let text = text.map_err(|e| perr(line, e.to_string()))?;
        let text = text.trim();
        if text.is_empty() || text.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = text.split(',').map(str::trim).collect();
        if fields[0] == "individual_id" {
            continue;
        }
        if fields.len() < 4 {
            return Err(perr(
                line,
                format!("expected at least 4 fields, found {}", fields.len()),
            ));
        }
        let id = fields[0];
        if id.is_empty() {
            return Err(perr(line, "empty individual_id".into()));
        }
        let entry = by_id.entry(id.to_string()).or_insert_with(|| {
            order.push(id.to_string());
            Pending::default()
        });
        if fields[1].eq_ignore_ascii_case("CENSOR") {
            if fields.len() != 4 {
                return Err(perr(
                    line,
                    "censoring line needs id,CENSOR,age,outcome".into(),
                ));
            }
            let age = parse_age(fields[2]).map_err(|m| perr(line, m))?;
            let outcome = match fields[3].to_ascii_lowercase().as_str() {
                "death" | "dead" => Outcome::Death,
                "alive" => Outcome::Alive,
                other => return Err(perr(line, format!("unknown censoring outcome '{other}'"))),
            };
            if entry.censor.is_some() {
                return Err(perr(line, format!("second censoring line for {id}")));
            }
            entry.censor = Some((Censoring { age, outcome }, line));
            continue;
        }
        let age = parse_age(fields[1]).map_err(|m| perr(line, m))?;
        let test: usize = fields[2]
            .parse()
            .map_err(|_| perr(line, format!("invalid test type '{}'", fields[2])))?;
        let treated = match fields[fields.len() - 1] {
            "0" | "false" => false,
            "1" | "true" => true,
            other => return Err(perr(line, format!("invalid treated flag '{other}'"))),
        };
        let counts = fields[3..fields.len() - 1]
            .iter()
            .map(|f| {
                f.parse::<u32>()
                    .map_err(|_| perr(line, format!("invalid grade count '{f}'")))
            })
            .collect::<Result<Vec<_>>>()?;
        if counts.is_empty() {
            return Err(perr(line, "no grade counts".into()));
        }
        if grade_levels.is_some() && test >= levels.len() {
            return Err(perr(line, format!("test type {test} out of range")));
        }
        if test >= levels.len() {
            levels.resize(test + 1, None);
        }
        match levels[test] {
            Some(l) if l != counts.len() => {
                return Err(perr(
                    line,
                    format!(
                        "test type {test} has {} grade columns, expected {l}",
                        counts.len()
                    ),
                ))
            }
            Some(_) => {}
            None => levels[test] = Some(counts.len()),
        }
        entry.lines.push(VisitLine {
            age,
            test,
            counts,
            treated,
            line,
        });
    }
    let grade_levels = levels
        .iter()
        .enumerate()
        .map(|(k, l)| l.ok_or_else(|| perr(0, format!("test type {k} never appears"))))
        .collect::<Result<Vec<_>>>()?;
    let mut sequences = Vec::with_capacity(order.len());
    for id in order {
        let mut p = by_id.remove(&id).expect("recorded");
        p.lines
            .sort_by(|a, b| a.age.total_cmp(&b.age).then(a.line.cmp(&b.line)));
        let mut visits: Vec<Visit<f64>> = Vec::new();
        let mut seen = vec![false; grade_levels.len()];
        for l in &p.lines {
            let same_visit = visits.last().is_some_and(|v| v.age == l.age);
            if !same_visit {
                let empty = grade_levels.iter().map(|&n| vec![0; n]).collect();
                visits.push(Visit::new(l.age, empty));
                seen.fill(false);
            }
            let v = visits.last_mut().expect("pushed");
            if std::mem::replace(&mut seen[l.test], true) {
                return Err(perr(
                    l.line,
                    format!("duplicate test type {} for {id} at age {}", l.test, l.age),
                ));
            }
            v.results[l.test] = l.counts.clone();
            v.treated |= l.treated;
        }
        if visits.is_empty() {
            let line = p.censor.map_or(0, |c| c.1);
            return Err(perr(line, format!("individual {id} has no visits")));
        }
        if let Some((c, line)) = p.censor {
            if c.age < visits.last().expect("nonempty").age {
                return Err(perr(
                    line,
                    format!("censor age precedes the last visit of {id}"),
                ));
            }
        }
        sequences.push(ScreeningSequence::new(id, visits, p.censor.map(|c| c.0)));
    }
    Ok(RecordSet {
        sequences,
        grade_levels,
    })
}

fn parse_age(s: &str) -> std::result::Result<f64, String> {
    match s.parse::<f64>() {
        Ok(a) if a.is_finite() && a >= 0.0 => Ok(a),
        _ => Err(format!("invalid age '{s}'")),
    }
}

pub fn read_records(path: &Path, grade_levels: Option<&[usize]>) -> Result<RecordSet> {
    let file = std::fs::File::open(path)?;
    parse_records(
        std::io::BufReader::new(file),
        &path.display().to_string(),
        grade_levels,
    )
}

/// Writes sequences in the records format, one line per visit and test type
/// (zero histograms included) followed by the censoring line.
pub fn write_records<W: Write>(mut w: W, sequences: &[ScreeningSequence<f64>]) -> Result<()> {
    writeln!(w, "{RECORDS_HEADER}")?;
    for s in sequences {
        for v in &s.visits {
            for (k, hist) in v.results.iter().enumerate() {
                write!(w, "{},{},{}", s.id, v.age, k)?;
                for c in hist {
                    write!(w, ",{c}")?;
                }
                writeln!(w, ",{}", u8::from(v.treated))?;
            }
        }
        if let Some(c) = s.censor {
            let outcome = match c.outcome {
                Outcome::Death => "death",
                Outcome::Alive => "alive",
            };
            writeln!(w, "{},CENSOR,{},{}", s.id, c.age, outcome)?;
        }
    }
    Ok(())
}

/// Latent truth of one simulated individual.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthRecord {
    pub individual_id: String,
    pub class: usize,
    pub start_age: f64,
    pub initial_state: usize,
    pub jump_ages: Vec<f64>,
    /// State entered at each jump.
    pub states: Vec<usize>,
}

impl From<&SimulatedSequence<f64>> for TruthRecord {
    fn from(s: &SimulatedSequence<f64>) -> Self {
        Self {
            individual_id: s.sequence.id.clone(),
            class: s.class,
            start_age: s.trajectory.start_age,
            initial_state: s.trajectory.initial_state(),
            jump_ages: s.trajectory.jump_ages.clone(),
            states: s.trajectory.states[1..].to_vec(),
        }
    }
}

pub fn write_truth<W: Write>(w: W, sims: &[SimulatedSequence<f64>]) -> Result<()> {
    let records: Vec<TruthRecord> = sims.iter().map(TruthRecord::from).collect();
    serde_json::to_writer_pretty(w, &records)?;
    Ok(())
}

/// `iteration,marginal_loglik` for iterations 1, 2, ...
pub fn write_loglik_trace<W: Write>(mut w: W, trace: &[f64]) -> Result<()> {
    writeln!(w, "iteration,marginal_loglik")?;
    for (i, ll) in trace.iter().enumerate() {
        writeln!(w, "{},{}", i + 1, ll)?;
    }
    Ok(())
}

pub fn write_metrics<W: Write>(mut w: W, m: &ClassificationMetrics) -> Result<()> {
    writeln!(w, "metric,value")?;
    for (name, v) in m.rows() {
        writeln!(w, "{name},{v}")?;
    }
    writeln!(w, "auc_defined,{}", u8::from(m.auc_defined))?;
    writeln!(w, "n,{}", m.n)?;
    writeln!(w, "positives,{}", m.positives)?;
    Ok(())
}

/// Empirical survival against the simulated band on the band's grid.
pub fn write_km<W: Write>(mut w: W, empirical: &KaplanMeierCurve, band: &KmBand) -> Result<()> {
    writeln!(w, "time,survival,lower,upper,median")?;
    for (i, &t) in band.grid.iter().enumerate() {
        writeln!(
            w,
            "{},{},{},{},{}",
            t,
            empirical.survival_at(t),
            band.lower[i],
            band.upper[i],
            band.median[i]
        )?;
    }
    Ok(())
}

pub fn write_diagnostics<W: Write>(mut w: W, rows: &[DiagnosticRow<f64>]) -> Result<()> {
    let m = rows.first().map_or(0, |r| r.state_probs.len());
    write!(w, "individual_id,visit_age,map_class,viterbi_state")?;
    for s in 0..m {
        write!(w, ",p_state_{s}")?;
    }
    writeln!(w)?;
    for r in rows {
        write!(
            w,
            "{},{},{},{}",
            r.id, r.visit_age, r.map_class, r.viterbi_state
        )?;
        for p in &r.state_probs {
            write!(w, ",{p}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}
