//! Subcommand implementations.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use jumphmm::inference::{class_posteriors, diagnostics};
use jumphmm::io::{
    read_model, read_records, write_diagnostics, write_km, write_loglik_trace, write_metrics,
    write_model, write_records, write_truth, RecordSet,
};
use jumphmm::metrics::classification_metrics;
use jumphmm::predict::{predict_sequence, risk_stratify, RiskBand};
use jumphmm::simulate::{simulate_cohort, CohortSpec, VisitSchedule};
use jumphmm::survival::{avg_posterior_predictive, extract_failure_time, kaplan_meier, km_band};
use jumphmm::train::{check_gradient, fit, initialize};
use jumphmm::{HierarchicalModel, ScreeningSequence};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::CliError;

/// Resolved inputs shared by every command.
#[derive(Debug, Clone)]
pub struct Run {
    pub command: &'static str,
    pub config: RunConfig,
    pub config_path: Option<PathBuf>,
    pub seed: u64,
    pub threads: usize,
    pub out: PathBuf,
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    version: &'a str,
    seed: u64,
    threads: usize,
    config_path: Option<&'a Path>,
    config: &'a RunConfig,
    outputs: &'a [String],
    started_unix_seconds: u64,
    wall_clock_seconds: f64,
}

/// What a command produced, for the manifest and the console.
#[derive(Default)]
struct Outputs {
    files: Vec<String>,
}

impl Run {
    fn records_path(&self) -> Result<&Path, CliError> {
        existing(self.config.paths.records.as_deref(), "--records")
    }

    fn model_path(&self) -> Result<&Path, CliError> {
        existing(self.config.paths.model.as_deref(), "--model")
    }

    fn load_model(&self) -> Result<HierarchicalModel, CliError> {
        Ok(read_model(self.model_path()?)?)
    }

    fn load_records(&self, levels: Option<&[usize]>) -> Result<RecordSet, CliError> {
        Ok(read_records(self.records_path()?, levels)?)
    }

    fn create(&self, outputs: &mut Outputs, name: &str) -> Result<BufWriter<File>, CliError> {
        let path = self.out.join(name);
        let file = File::create(&path)
            .map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
        outputs.files.push(name.to_string());
        Ok(BufWriter::new(file))
    }

    fn write_json<S: Serialize>(
        &self,
        outputs: &mut Outputs,
        name: &str,
        value: &S,
    ) -> Result<(), CliError> {
        let mut w = self.create(outputs, name)?;
        serde_json::to_writer_pretty(&mut w, value)
            .map_err(|e| CliError::data(format!("{name}: {e}")))?;
        writeln!(w).map_err(io_error(name))?;
        w.flush().map_err(io_error(name))
    }

    fn finish(&self, outputs: &mut Outputs, started: SystemTime, clock: Instant) -> Result<(), CliError> {
        outputs.files.push("manifest.json".into());
        let manifest = Manifest {
            command: self.command,
            version: env!("CARGO_PKG_VERSION"),
            seed: self.seed,
            threads: self.threads,
            config_path: self.config_path.as_deref(),
            config: &self.config,
            outputs: &outputs.files,
            started_unix_seconds: started
                .duration_since(UNIX_EPOCH)
                .map_or(0, |d| d.as_secs()),
            wall_clock_seconds: clock.elapsed().as_secs_f64(),
        };
        let path = self.out.join("manifest.json");
        let text = serde_json::to_string_pretty(&manifest)
            .map_err(|e| CliError::data(format!("manifest: {e}")))?;
        std::fs::write(&path, text + "\n")
            .map_err(|e| CliError::data(format!("{}: {e}", path.display())))
    }
}

fn existing<'a>(path: Option<&'a Path>, flag: &str) -> Result<&'a Path, CliError> {
    let path = path.ok_or_else(|| CliError::usage(format!("{flag} is required")))?;
    if !path.is_file() {
        return Err(CliError::usage(format!("{}: no such file", path.display())));
    }
    Ok(path)
}

fn io_error(name: &str) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::data(format!("{name}: {e}"))
}

fn flush<W: Write>(mut w: W, name: &str) -> Result<(), CliError> {
    w.flush().map_err(io_error(name))
}

/// Runs `run.command` and writes its outputs plus a manifest into `run.out`.
pub fn execute(run: &Run) -> Result<(), CliError> {
    let started = SystemTime::now();
    let clock = Instant::now();
    run.config.validate()?;
    std::fs::create_dir_all(&run.out)
        .map_err(|e| CliError::usage(format!("{}: {e}", run.out.display())))?;
    let mut outputs = Outputs::default();
    match run.command {
        "fit" => cmd_fit(run, &mut outputs)?,
        "simulate" => cmd_simulate(run, &mut outputs)?,
        "predict" => cmd_predict(run, &mut outputs)?,
        "validate" => cmd_validate(run, &mut outputs)?,
        "check-gradients" => cmd_check_gradients(run, &mut outputs)?,
        other => return Err(CliError::usage(format!("unknown command {other}"))),
    }
    run.finish(&mut outputs, started, clock)
}

#[derive(Serialize)]
struct FitSummary<'a> {
    sequences: usize,
    iterations: usize,
    converged: bool,
    initial_log_likelihood: f64,
    final_log_likelihood: f64,
    report: &'a jumphmm::train::FitReport<f64>,
}

fn cmd_fit(run: &Run, outputs: &mut Outputs) -> Result<(), CliError> {
    let (init, records) = match run.config.paths.model {
        Some(_) => {
            let model = run.load_model()?;
            let records = run.load_records(Some(&model.emission.grade_levels()))?;
            (model, records)
        }
        None => {
            let records = run.load_records(None)?;
            let mut rng = ChaCha8Rng::seed_from_u64(run.seed);
            let model = initialize(
                &run.config.model,
                &records.grade_levels,
                &records.sequences,
                &mut rng,
            )?;
            (model, records)
        }
    };
    let em = jumphmm::EmConfig {
        rng_seed: run.seed,
        ..run.config.em.clone()
    };
    let report = fit(&init, &records.sequences, &em)?;
    write_model(&run.out.join("model.json"), &report.model)?;
    outputs.files.push("model.json".into());
    let mut w = run.create(outputs, "loglik_trace.csv")?;
    write_loglik_trace(&mut w, &report.loglik_trace)?;
    flush(w, "loglik_trace.csv")?;
    let summary = FitSummary {
        sequences: records.sequences.len(),
        iterations: report.iterations(),
        converged: report.converged,
        initial_log_likelihood: report.initial_log_likelihood,
        final_log_likelihood: report.final_log_likelihood(),
        report: &report,
    };
    run.write_json(outputs, "fit_report.json", &summary)?;
    println!(
        "fit: {} sequences, {} iterations, log-likelihood {} -> {}",
        summary.sequences,
        summary.iterations,
        summary.initial_log_likelihood,
        summary.final_log_likelihood
    );
    Ok(())
}

fn cmd_simulate(run: &Run, outputs: &mut Outputs) -> Result<(), CliError> {
    let model = run.load_model()?;
    let sims = simulate_cohort(&model, &run.config.simulate, run.seed)?;
    let sequences: Vec<ScreeningSequence> = sims.iter().map(|s| s.sequence.clone()).collect();
    let mut w = run.create(outputs, "records.csv")?;
    write_records(&mut w, &sequences)?;
    flush(w, "records.csv")?;
    let mut w = run.create(outputs, "truth.json")?;
    write_truth(&mut w, &sims)?;
    writeln!(w).map_err(io_error("truth.json"))?;
    flush(w, "truth.json")?;
    let mut counts = vec![0usize; model.num_classes()];
    for s in &sims {
        counts[s.class] += 1;
    }
    println!("simulate: {} sequences, class counts {:?}", sims.len(), counts);
    Ok(())
}

/// Sequences with at least two visits; the rest are counted and reported.
fn predictable(sequences: &[ScreeningSequence]) -> Vec<&ScreeningSequence> {
    let kept: Vec<_> = sequences.iter().filter(|s| s.len() >= 2).collect();
    let skipped = sequences.len() - kept.len();
    if skipped > 0 {
        log::warn!("skipped {skipped} individuals with fewer than two visits");
    }
    kept
}

fn cmd_predict(run: &Run, outputs: &mut Outputs) -> Result<(), CliError> {
    let model = run.load_model()?;
    let records = run.load_records(Some(&model.emission.grade_levels()))?;
    let kept = predictable(&records.sequences);
    if kept.is_empty() {
        return Err(CliError::data(
            "no individuals with at least two visits to predict",
        ));
    }
    let rule = &run.config.predict.rule;
    let results = kept
        .par_iter()
        .map(|s| predict_sequence(s, &model, rule))
        .collect::<Result<Vec<_>, _>>()?;
    let threshold = run.config.predict.threshold;
    let mut w = run.create(outputs, "predictions.csv")?;
    let header = (0..model.num_classes())
        .map(|z| format!(",p_class_{z}"))
        .collect::<String>();
    writeln!(w, "individual_id,p_star,predicted,observed{header}")
        .map_err(io_error("predictions.csv"))?;
    for (s, (r, observed)) in kept.iter().zip(&results) {
        write!(
            w,
            "{},{},{},{}",
            s.id,
            r.p_star,
            u8::from(r.p_star >= threshold),
            u8::from(*observed)
        )
        .map_err(io_error("predictions.csv"))?;
        for p in &r.class_posterior.probs {
            write!(w, ",{p}").map_err(io_error("predictions.csv"))?;
        }
        writeln!(w).map_err(io_error("predictions.csv"))?;
    }
    flush(w, "predictions.csv")?;
    let scores: Vec<f64> = results.iter().map(|(r, _)| r.p_star).collect();
    let truths: Vec<bool> = results.iter().map(|&(_, o)| o).collect();
    let metrics = classification_metrics(&scores, &truths, threshold)?;
    let mut w = run.create(outputs, "metrics.csv")?;
    write_metrics(&mut w, &metrics)?;
    flush(w, "metrics.csv")?;
    println!(
        "predict: {} predicted, {} skipped, AUC {:.4}, accuracy {:.4}",
        kept.len(),
        records.sequences.len() - kept.len(),
        metrics.auc,
        metrics.accuracy
    );
    Ok(())
}

/// Class with the largest total exit rate out of the normal state.
fn default_frail_class(model: &HierarchicalModel) -> usize {
    let outflow = |z: usize| {
        let q = &model.classes[z].intensity;
        (0..q.partition().num_segments())
            .map(|k| q.exit_rate(k, model.normal_state))
            .sum::<f64>()
    };
    (0..model.num_classes())
        .max_by(|&a, &b| outflow(a).total_cmp(&outflow(b)))
        .unwrap_or(0)
}

#[derive(Serialize)]
struct ValidationSummary {
    individuals: usize,
    failures: usize,
    km_replications: usize,
    km_grid_points: usize,
    km_coverage: f64,
    frail_class: usize,
    risk_band_counts: Vec<(RiskBand, usize)>,
    posterior_predictive: jumphmm::survival::PosteriorPredictive,
}

fn cmd_validate(run: &Run, outputs: &mut Outputs) -> Result<(), CliError> {
    let model = run.load_model()?;
    let records = run.load_records(Some(&model.emission.grade_levels()))?;
    let sequences = &records.sequences;
    if sequences.is_empty() {
        return Err(CliError::data("records file has no individuals"));
    }
    let cfg = &run.config.validate;
    let rule = &run.config.predict.rule;

    let failures: Vec<_> = sequences
        .iter()
        .filter_map(|s| extract_failure_time(s, rule))
        .collect();
    let empirical = kaplan_meier(&failures)?;
    let cohort = CohortSpec {
        size: sequences.len(),
        schedule: VisitSchedule::from_sequences(sequences),
        treatment: run.config.simulate.treatment.clone(),
        id_prefix: run.config.simulate.id_prefix.clone(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(run.seed);
    let band = km_band(&model, &cohort, rule, &cfg.km, &mut rng)?;
    let coverage = band.coverage(&empirical);
    let mut w = run.create(outputs, "km.csv")?;
    write_km(&mut w, &empirical, &band)?;
    flush(w, "km.csv")?;

    let predictive = avg_posterior_predictive(sequences, &model, cfg.exclude_untested)?;

    let frail = match cfg.frail_class {
        Some(z) if z < model.num_classes() => z,
        Some(z) => return Err(CliError::usage(format!("frail_class {z} out of range"))),
        None => default_frail_class(&model),
    };
    let posteriors = class_posteriors(sequences, &model)
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;
    let bands = risk_stratify(&posteriors, frail, &cfg.risk)?;
    let mut w = run.create(outputs, "risk_bands.csv")?;
    writeln!(w, "individual_id,frail_posterior,band").map_err(io_error("risk_bands.csv"))?;
    for ((s, p), b) in sequences.iter().zip(&posteriors).zip(&bands) {
        writeln!(w, "{},{},{}", s.id, p.probs[frail], b.name())
            .map_err(io_error("risk_bands.csv"))?;
    }
    flush(w, "risk_bands.csv")?;

    let rows = sequences
        .par_iter()
        .map(|s| diagnostics(s, &model))
        .collect::<Result<Vec<_>, _>>()?;
    let rows: Vec<_> = rows.into_iter().flatten().collect();
    let mut w = run.create(outputs, "diagnostics.csv")?;
    write_diagnostics(&mut w, &rows)?;
    flush(w, "diagnostics.csv")?;

    let summary = ValidationSummary {
        individuals: sequences.len(),
        failures: failures.iter().filter(|f| f.event).count(),
        km_replications: cfg.km.replications,
        km_grid_points: band.grid.len(),
        km_coverage: coverage,
        frail_class: frail,
        risk_band_counts: RiskBand::ALL
            .iter()
            .map(|&b| (b, bands.iter().filter(|&&x| x == b).count()))
            .collect(),
        posterior_predictive: predictive,
    };
    run.write_json(outputs, "validation.json", &summary)?;
    println!(
        "validate: {} individuals, KM band coverage {:.3}, frail class {}",
        summary.individuals, coverage, frail
    );
    Ok(())
}

fn cmd_check_gradients(run: &Run, outputs: &mut Outputs) -> Result<(), CliError> {
    let model = run.load_model()?;
    let cfg = &run.config.check_gradients;
    let sequences = match run.config.paths.records {
        Some(_) => run.load_records(Some(&model.emission.grade_levels()))?.sequences,
        None => {
            let spec = CohortSpec {
                size: cfg.sequences,
                ..run.config.simulate.clone()
            };
            simulate_cohort(&model, &spec, run.seed)?
                .into_iter()
                .map(|s| s.sequence)
                .collect()
        }
    };
    let check = check_gradient(
        &model,
        &model,
        &sequences,
        run.config.em.state_assignment,
        cfg.step,
        cfg.floor,
    )?;
    run.write_json(outputs, "gradient_check.json", &check)?;
    let worst = check.worst().map_or(0, |c| c.index);
    println!(
        "check-gradients: {} coordinates, max relative error {:.3e} at coordinate {}",
        check.coordinates.len(),
        check.max_relative_error,
        worst
    );
    if check.max_relative_error > cfg.tolerance {
        run.finish(outputs, SystemTime::now(), Instant::now())?;
        return Err(CliError::numerical(format!(
            "max relative gradient error {:.3e} exceeds tolerance {:.1e}",
            check.max_relative_error, cfg.tolerance
        )));
    }
    Ok(())
}
