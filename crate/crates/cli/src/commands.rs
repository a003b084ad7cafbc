//! The four subcommands. Each writes its effective config and a metadata
//! file (the only place wall-clock values appear) next to its results.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use gmpf_core::eval::{
    comparison_csv, derive_seed, run_filter, AggregateReport, Algorithm, ComparisonRow, TrialResult,
};
use gmpf_core::filter::{FilterConfig, StepDiagnostics};
use gmpf_core::forward::{ForwardModel, LeadField, NoiseSpec};
use gmpf_core::mesh::CorticalMesh;
use serde::Serialize;

use crate::config::{RunConfig, SweepAxis, SweepConfig};
use crate::io::{self, SimulationInfo};
use crate::CliError;

/// Command-line values that take precedence over the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    /// `Some(None)` fixes the count to the scenario's source total.
    pub known_n: Option<Option<usize>>,
    pub gibbs_iters: Option<usize>,
    pub particles: Option<usize>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut RunConfig) {
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.output_dir = o.clone();
        }
        if let Some(n) = self.known_n {
            cfg.filter.known_n = Some(n.unwrap_or(cfg.scenario.source_total()));
        }
        if let Some(l) = self.gibbs_iters {
            cfg.filter.gibbs_iterations = l;
            cfg.algorithm = Algorithm::Gmpf { gibbs: l }.label();
        }
        if let Some(p) = self.particles {
            cfg.filter.initial_particles = p;
            cfg.filter.min_particles = cfg.filter.min_particles.min(p);
        }
    }
}

#[derive(Serialize)]
struct Metadata<'a> {
    command: &'a str,
    version: &'a str,
    threads: usize,
    wall_clock_s: f64,
}

fn prepare_out(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    let out = cfg.output_dir.clone();
    std::fs::create_dir_all(&out).map_err(|e| CliError::io(&out, e))?;
    io::write_file(&out.join(io::EFFECTIVE_CONFIG), &cfg.to_toml())?;
    Ok(out)
}

fn finish(out: &Path, command: &str, start: Instant) -> Result<(), CliError> {
    let meta = Metadata {
        command,
        version: env!("CARGO_PKG_VERSION"),
        threads: rayon::current_num_threads(),
        wall_clock_s: start.elapsed().as_secs_f64(),
    };
    io::write_file(
        &out.join(io::METADATA),
        &serde_json::to_string_pretty(&meta).expect("metadata serialises"),
    )
}

fn to_json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("report serialises");
    s.push('\n');
    s
}

/// Simulates one recording of the configured scenario with `cfg.seed`.
pub fn simulate(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    let start = Instant::now();
    cfg.validate()?;
    let (mesh, model) = cfg.build_model()?;
    let exp = cfg.experiment(&mesh, &model)?;
    let (truth, measurements, noise_sigma) = exp.simulate(cfg.seed)?;
    let out = prepare_out(cfg)?;
    io::write_file(&out.join(io::MESH), &mesh.to_text())?;
    io::write_file(&out.join(io::LEADFIELD), &model.leadfield().to_csv())?;
    io::write_file(&out.join(io::MEASUREMENTS), &io::measurements_csv(&measurements))?;
    io::write_file(&out.join(io::TRUTH), &io::truth_csv(&truth, &mesh))?;
    let info = SimulationInfo {
        seed: cfg.seed,
        horizon: cfg.scenario.horizon,
        sensors: model.sensors(),
        noise_sigma,
        sources: exp.sources.clone(),
    };
    io::write_file(&out.join(io::SIMULATION), &to_json(&info))?;
    log::info!(
        "simulated {} steps, {} sensors, noise sigma {noise_sigma:.4} fT",
        info.horizon,
        info.sensors
    );
    finish(&out, "simulate", start)?;
    Ok(out)
}

fn load_data_model(data: &Path) -> Result<(CorticalMesh, ForwardModel), CliError> {
    let mesh_path = data.join(io::MESH);
    if !mesh_path.exists() {
        return Err(CliError::Data(format!("missing mesh file {}", mesh_path.display())));
    }
    let lf_path = data.join(io::LEADFIELD);
    if !lf_path.exists() {
        return Err(CliError::Data(format!("missing lead field {}", lf_path.display())));
    }
    let mesh = CorticalMesh::load(&mesh_path)?;
    let lf = LeadField::load(&lf_path)?;
    let model = ForwardModel::new(&mesh, lf)?;
    Ok((mesh, model))
}

fn read_info(data: &Path) -> Result<Option<SimulationInfo>, CliError> {
    let path = data.join(io::SIMULATION);
    if !path.exists() {
        return Ok(None);
    }
    serde_json::from_str(&io::read_file(&path)?)
        .map(Some)
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

/// Runs the configured tracker over the recording in `data`, streaming one
/// diagnostics line per step.
pub fn localize(cfg: &RunConfig, data: &Path) -> Result<PathBuf, CliError> {
    let start = Instant::now();
    cfg.validate()?;
    let alg = cfg.algorithm()?;
    let (mesh, model) = load_data_model(data)?;
    let measurements = io::read_measurements(&data.join(io::MEASUREMENTS))?;
    if let Some(y) = measurements.first() {
        if y.values.len() != model.sensors() {
            return Err(CliError::Data(format!(
                "measurements have {} channels, the lead field has {}",
                y.values.len(),
                model.sensors()
            )));
        }
    }
    let info = read_info(data)?;
    let sigma = match (cfg.filter.noise_sigma, &info) {
        (Some(s), _) => s,
        (None, Some(i)) => cfg.filter.likelihood_sigma(i.noise_sigma),
        (None, None) => {
            return Err(CliError::Config(format!(
                "filter.noise_sigma is required when {} has no {}",
                data.display(),
                io::SIMULATION
            )))
        }
    };
    // Simulated data reuse the filter stream of the matching trial.
    let filter_seed = derive_seed(info.as_ref().map_or(cfg.seed, |i| i.seed), 2);
    let fcfg = FilterConfig {
        seed: filter_seed,
        ..cfg.filter
    };
    let out = prepare_out(cfg)?;
    let diag_path = out.join(io::DIAGNOSTICS);
    let file = std::fs::File::create(&diag_path).map_err(|e| CliError::io(&diag_path, e))?;
    let mut diag = std::io::BufWriter::new(file);
    let mut rois = format!("{}\n", io::ROI_HEADER);
    let mut write_err = None;
    let steps: Vec<StepDiagnostics> = run_filter(&mesh, &model, &measurements, sigma, &cfg.mne, alg, &fcfg, |d, roi| {
        let line = serde_json::to_string(d).expect("diagnostics serialise");
        if let Err(e) = writeln!(diag, "{line}").and_then(|_| diag.flush()) {
            write_err.get_or_insert(e);
        }
        if let Some(r) = roi {
            io::roi_rows(&mut rois, d.k, r);
        }
        log::info!("k={} n_hat={} particles={} e_k={:?}", d.k, d.n_hat, d.particles, d.e_k);
    })?;
    if let Some(e) = write_err {
        return Err(CliError::io(&diag_path, e));
    }
    io::write_file(&out.join(io::ESTIMATES), &io::estimates_csv(&steps))?;
    io::write_file(&out.join(io::STEPS), &io::steps_csv(&steps))?;
    io::write_file(&out.join(io::ROIS), &rois)?;
    finish(&out, "localize", start)?;
    Ok(out)
}

fn write_report(out: &Path, prefix: &str, report: &AggregateReport) -> Result<(), CliError> {
    io::write_file(&out.join(format!("{prefix}report.json")), &to_json(report))?;
    io::write_file(&out.join(format!("{prefix}per_step.csv")), &report.per_step_csv())?;
    io::write_file(&out.join(format!("{prefix}rmse.svg")), &report.rmse_svg())?;
    io::write_file(&out.join(format!("{prefix}histogram.svg")), &report.histogram_svg())?;
    Ok(())
}

/// Scores the run in `run` against the ground truth in `truth`.
pub fn evaluate(cfg: &RunConfig, run: &Path, truth: &Path) -> Result<PathBuf, CliError> {
    let start = Instant::now();
    let mesh_path = truth.join(io::MESH);
    let mesh = CorticalMesh::load(&mesh_path)?;
    let info = read_info(truth)?.ok_or_else(|| CliError::Data(format!("{} has no {}", truth.display(), io::SIMULATION)))?;
    let true_states = io::read_truth(&truth.join(io::TRUTH), info.horizon, &mesh)?;
    let steps = io::read_run(run)?;
    let trial = TrialResult::from_summaries(info.seed, &steps, &true_states, &mesh, &cfg.eval, 0.0)?;
    let report = AggregateReport::from_trials(std::slice::from_ref(&trial), &cfg.eval)?;
    let out = prepare_out(cfg)?;
    io::write_file(&out.join("trial.json"), &to_json(&trial))?;
    write_report(&out, "", &report)?;
    finish(&out, "evaluate", start)?;
    Ok(out)
}

/// Repeated seeded trials over the cross product of the sweep axis values
/// and the compared algorithms. Without a sweep the configured run is
/// repeated as a single row.
pub fn sweep(cfg: &RunConfig, spec: Option<&SweepConfig>) -> Result<Vec<ComparisonRow>, CliError> {
    let start = Instant::now();
    cfg.validate()?;
    let spec = spec.cloned().or_else(|| cfg.sweep.clone()).unwrap_or_else(|| SweepConfig {
        axis: SweepAxis::Particles,
        values: vec![cfg.filter.initial_particles as f64],
        algorithms: Vec::new(),
    });
    if spec.values.is_empty() {
        return Err(CliError::Config("sweep axis has no values".into()));
    }
    let algorithms: Vec<Algorithm> = if spec.algorithms.is_empty() {
        vec![cfg.algorithm()?]
    } else {
        spec.algorithms
            .iter()
            .map(|a| Algorithm::parse(a).ok_or_else(|| CliError::Config(format!("unknown algorithm {a:?}"))))
            .collect::<Result<_, _>>()?
    };
    let (mesh, model) = cfg.build_model()?;
    let base = cfg.experiment(&mesh, &model)?;
    let seeds = cfg.trial_seeds();
    let out = prepare_out(cfg)?;
    let mut rows = Vec::new();
    for &value in &spec.values {
        let mut exp = base.clone();
        let mut fcfg = cfg.filter;
        let mut algs = algorithms.clone();
        match spec.axis {
            SweepAxis::Particles => {
                if !(value >= 1.0 && value.fract() == 0.0) {
                    return Err(CliError::Config(format!("particle count {value} is not a positive integer")));
                }
                fcfg.initial_particles = value as usize;
                fcfg.min_particles = fcfg.min_particles.min(fcfg.initial_particles);
            }
            SweepAxis::Gibbs => {
                if !(value >= 1.0 && value.fract() == 0.0) {
                    return Err(CliError::Config(format!("Gibbs iteration count {value} is not a positive integer")));
                }
                algs = vec![Algorithm::Gmpf { gibbs: value as usize }];
            }
            SweepAxis::Snr => {
                if value.is_nan() || value <= 0.0 {
                    return Err(CliError::Config(format!("SNR {value} is not positive")));
                }
                exp.noise = NoiseSpec::Snr(value);
            }
        }
        for alg in algs {
            log::info!("{} {}={value}: {} trials", alg.label(), spec.axis.name(), seeds.len());
            let trials = exp.run_trials(alg, &fcfg, &seeds)?;
            let report = AggregateReport::from_trials(&trials, &exp.eval)?;
            write_report(&out, &format!("{}_{}{value}_", alg.label(), spec.axis.name()), &report)?;
            rows.push(ComparisonRow {
                algorithm: alg.label(),
                axis: spec.axis.name().into(),
                value,
                report,
            });
        }
    }
    io::write_file(&out.join("comparison.csv"), &comparison_csv(&rows))?;
    finish(&out, "sweep", start)?;
    Ok(rows)
}
