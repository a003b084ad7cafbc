//! Ground-truth metrics and the repeated-trial harness.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assign::{distance_matrix, greedy_associate, hungarian};
use crate::dynamics::JointState;
use crate::filter::{FilterConfig, FilterError, SirFilter, StepDiagnostics, Tracker};
use crate::forward::{scripted_truth, simulate_scenario, ForwardError, ForwardModel, Measurement, NoiseSpec, Scenario, SourceWindow};
use crate::mesh::{CorticalMesh, Point3};
use crate::mne::{MneConfig, RoiEstimate, RoiEstimator};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Filter(#[from] FilterError),
    #[error(transparent)]
    Forward(#[from] ForwardError),
    #[error("{0}")]
    Invalid(String),
}

/// OSPA distance between point sets with order `p` and cutoff `c` (mm).
pub fn ospa_distance(truth: &[Point3], est: &[Point3], p: f64, c: f64) -> f64 {
    let (small, large) = if est.len() >= truth.len() { (truth, est) } else { (est, truth) };
    if large.is_empty() {
        return 0.0;
    }
    if small.is_empty() {
        return c;
    }
    let cost: Vec<Vec<f64>> = distance_matrix(small, large)
        .into_iter()
        .map(|row| row.into_iter().map(|d| d.min(c).powf(p)).collect())
        .collect();
    let matched: f64 = hungarian(&cost)
        .iter()
        .enumerate()
        .filter_map(|(r, col)| col.map(|col| cost[r][col]))
        .sum();
    let n = large.len() as f64;
    let missing = (large.len() - small.len()) as f64 * c.powf(p);
    ((matched + missing) / n).powf(1.0 / p)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub ospa_order: f64,
    pub ospa_cutoff_mm: f64,
    /// A trial whose mean RMSE exceeds this is a lost track.
    pub lost_track_mm: f64,
    /// Leading steps left out of a trial's mean RMSE.
    pub burn_in: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            ospa_order: 1.0,
            ospa_cutoff_mm: 20.0,
            lost_track_mm: 30.0,
            burn_in: 0,
        }
    }
}

/// Tracking algorithm under test.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Algorithm {
    /// Joint-state bootstrap filter (known count only).
    Sir,
    /// Multiple particle filter with `gibbs` sweeps per step.
    Gmpf { gibbs: usize },
}

impl Algorithm {
    pub fn label(&self) -> String {
        match self {
            Algorithm::Sir => "SIR".into(),
            Algorithm::Gmpf { gibbs: 1 } => "MPF".into(),
            Algorithm::Gmpf { gibbs } => format!("GMPF-{gibbs}"),
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        let t = s.trim().to_ascii_uppercase();
        match t.as_str() {
            "SIR" => Some(Algorithm::Sir),
            "MPF" => Some(Algorithm::Gmpf { gibbs: 1 }),
            _ => t
                .strip_prefix("GMPF-")
                .and_then(|l| l.parse().ok())
                .filter(|&l| l >= 1)
                .map(|gibbs| Algorithm::Gmpf { gibbs }),
        }
    }
}

/// Runs a filter over a measurement sequence, computing ROIs when the
/// configuration needs them (unknown count or adaptive budgets). `on_step`
/// sees each step's diagnostics and ROIs as soon as the step completes.
#[allow(clippy::too_many_arguments)]
pub fn run_filter(
    mesh: &CorticalMesh,
    model: &ForwardModel,
    measurements: &[Measurement],
    sigma: f64,
    mne: &MneConfig,
    algorithm: Algorithm,
    cfg: &FilterConfig,
    mut on_step: impl FnMut(&StepDiagnostics, Option<&RoiEstimate>),
) -> Result<Vec<StepDiagnostics>, EvalError> {
    let mut out = Vec::with_capacity(measurements.len());
    match algorithm {
        Algorithm::Sir => {
            let mut f = SirFilter::new(mesh, model, sigma, *cfg)?;
            for y in measurements {
                let d = f.step(y)?;
                on_step(&d, None);
                out.push(d);
            }
        }
        Algorithm::Gmpf { gibbs } => {
            let cfg = FilterConfig {
                gibbs_iterations: gibbs,
                ..*cfg
            };
            let mut tracker = Tracker::new(mesh, model, sigma, cfg)?;
            let needs_rois = cfg.known_n.is_none() || cfg.adaptive.enabled;
            let estimator = RoiEstimator::new(model.leadfield(), *mne, sigma);
            let mut roi_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            roi_rng.set_stream(1);
            for y in measurements {
                let roi = if needs_rois {
                    Some(estimator.estimate(&y.values, mesh, &mut roi_rng).map_err(FilterError::from)?)
                } else {
                    None
                };
                let d = tracker.step(y, roi.as_ref())?;
                on_step(&d, roi.as_ref());
                out.push(d);
            }
        }
    }
    Ok(out)
}

/// Per-step outcome of one seeded trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub seed: u64,
    pub true_n: Vec<usize>,
    pub n_hat: Vec<usize>,
    pub estimates: Vec<Vec<Point3>>,
    /// RMSE of greedily matched estimate/truth pairs (mm).
    pub rmse: Vec<Option<f64>>,
    pub ospa: Vec<f64>,
    pub particles: Vec<usize>,
    /// ROI-versus-estimate error driving the adaptive budget (mm).
    pub e_k: Vec<Option<f64>>,
    pub roi_count: Vec<Option<usize>>,
    #[serde(skip)]
    pub wall_clock_s: f64,
}

/// What the trial metrics need from one filter step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepSummary {
    pub k: usize,
    pub n_hat: usize,
    pub estimates: Vec<Point3>,
    pub particles: usize,
    pub e_k: Option<f64>,
    pub roi_count: Option<usize>,
}

impl From<&StepDiagnostics> for StepSummary {
    fn from(s: &StepDiagnostics) -> Self {
        Self {
            k: s.k,
            n_hat: s.n_hat,
            estimates: s.positions(),
            particles: s.particles,
            e_k: s.e_k,
            roi_count: s.roi_count,
        }
    }
}

impl TrialResult {
    pub fn from_steps(
        seed: u64,
        steps: &[StepDiagnostics],
        truth: &[JointState],
        mesh: &CorticalMesh,
        eval: &EvalConfig,
        wall_clock_s: f64,
    ) -> Result<Self, EvalError> {
        let summaries: Vec<StepSummary> = steps.iter().map(StepSummary::from).collect();
        Self::from_summaries(seed, &summaries, truth, mesh, eval, wall_clock_s)
    }

    pub fn from_summaries(
        seed: u64,
        steps: &[StepSummary],
        truth: &[JointState],
        mesh: &CorticalMesh,
        eval: &EvalConfig,
        wall_clock_s: f64,
    ) -> Result<Self, EvalError> {
        if steps.len() != truth.len() {
            return Err(EvalError::Invalid(format!(
                "horizon mismatch: {} estimate steps, {} truth steps",
                steps.len(),
                truth.len()
            )));
        }
        let mut out = TrialResult {
            seed,
            true_n: Vec::new(),
            n_hat: Vec::new(),
            estimates: Vec::new(),
            rmse: Vec::new(),
            ospa: Vec::new(),
            particles: Vec::new(),
            e_k: Vec::new(),
            roi_count: Vec::new(),
            wall_clock_s,
        };
        for (s, t) in steps.iter().zip(truth) {
            let tru = t.positions(mesh);
            out.rmse.push(greedy_associate(&s.estimates, &tru).rms());
            out.ospa.push(ospa_distance(&tru, &s.estimates, eval.ospa_order, eval.ospa_cutoff_mm));
            out.true_n.push(tru.len());
            out.n_hat.push(s.n_hat);
            out.particles.push(s.particles);
            out.e_k.push(s.e_k);
            out.roi_count.push(s.roi_count);
            out.estimates.push(s.estimates.clone());
        }
        Ok(out)
    }

    /// Mean per-step RMSE after the burn-in; steps without a matched pair
    /// are skipped.
    pub fn mean_rmse(&self, burn_in: usize) -> Option<f64> {
        let v: Vec<f64> = self.rmse.iter().skip(burn_in).flatten().copied().collect();
        if v.is_empty() {
            None
        } else {
            Some(v.iter().sum::<f64>() / v.len() as f64)
        }
    }

    pub fn mean_n_hat(&self) -> f64 {
        self.n_hat.iter().sum::<usize>() as f64 / self.n_hat.len().max(1) as f64
    }

    pub fn mean_abs_count_error(&self) -> f64 {
        let s: usize = self.n_hat.iter().zip(&self.true_n).map(|(a, b)| a.abs_diff(*b)).sum();
        s as f64 / self.n_hat.len().max(1) as f64
    }

    pub fn is_lost(&self, eval: &EvalConfig) -> bool {
        self.mean_rmse(eval.burn_in).is_none_or(|r| r > eval.lost_track_mm)
    }
}

/// Scripted scenario replayed with different seeds.
#[derive(Debug, Clone)]
pub struct Experiment<'a> {
    pub mesh: &'a CorticalMesh,
    pub model: &'a ForwardModel,
    pub sources: Vec<SourceWindow>,
    pub horizon: usize,
    pub noise: NoiseSpec,
    /// Redraw each source's position within its face every step.
    pub jitter: bool,
    pub mne: MneConfig,
    pub eval: EvalConfig,
}

/// Seed of one random stream of trial `seed`: stream 0 drives the truth
/// jitter, 1 the measurement noise and 2 the filter.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    use rand::Rng;
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r.random()
}

impl Experiment<'_> {
    /// Ground truth and measurements of trial `seed`.
    pub fn simulate(&self, seed: u64) -> Result<(Vec<JointState>, Vec<Measurement>, f64), EvalError> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0));
        let script = scripted_truth(self.mesh, &self.sources, self.horizon, self.jitter, &mut rng)?;
        let data = simulate_scenario(
            self.model,
            &Scenario {
                script,
                noise: self.noise,
                seed: derive_seed(seed, 1),
            },
        )?;
        Ok((data.truth, data.measurements, data.noise_sigma))
    }

    pub fn run_trial(&self, algorithm: Algorithm, cfg: &FilterConfig, seed: u64) -> Result<TrialResult, EvalError> {
        let (truth, measurements, data_sigma) = self.simulate(seed)?;
        let cfg = FilterConfig {
            seed: derive_seed(seed, 2),
            ..*cfg
        };
        let start = Instant::now();
        let steps = run_filter(
            self.mesh,
            self.model,
            &measurements,
            cfg.likelihood_sigma(data_sigma),
            &self.mne,
            algorithm,
            &cfg,
            |_, _| {},
        )?;
        TrialResult::from_steps(seed, &steps, &truth, self.mesh, &self.eval, start.elapsed().as_secs_f64())
    }

    /// Independent trials, one per seed, run in parallel.
    pub fn run_trials(&self, algorithm: Algorithm, cfg: &FilterConfig, seeds: &[u64]) -> Result<Vec<TrialResult>, EvalError> {
        seeds.par_iter().map(|&s| self.run_trial(algorithm, cfg, s)).collect()
    }
}

fn median(v: &mut [f64]) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 })
}

/// Summary over repeated trials. Lost tracks are dropped before any RMSE
/// statistic is formed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub trials: usize,
    pub lost_tracks: usize,
    pub lost_track_rate: f64,
    pub mean_rmse: Option<f64>,
    pub median_rmse: Option<f64>,
    pub per_step_mean_rmse: Vec<Option<f64>>,
    pub per_step_median_rmse: Vec<Option<f64>>,
    pub per_step_mean_ospa: Vec<f64>,
    pub per_step_mean_n_hat: Vec<f64>,
    pub per_step_mean_particles: Vec<f64>,
    pub true_n: Vec<usize>,
    /// Trials per time-averaged estimated count, rounded to an integer.
    pub n_hat_histogram: BTreeMap<usize, usize>,
    pub modal_n_hat: Option<usize>,
    pub mean_n_hat: f64,
    pub mean_abs_count_error: f64,
    pub seeds: Vec<u64>,
}

impl AggregateReport {
    pub fn from_trials(trials: &[TrialResult], eval: &EvalConfig) -> Result<Self, EvalError> {
        if trials.is_empty() {
            return Err(EvalError::Invalid("no trials to aggregate".into()));
        }
        let mut sorted: Vec<&TrialResult> = trials.iter().collect();
        sorted.sort_by_key(|t| t.seed);
        let horizon = sorted[0].rmse.len();
        if sorted.iter().any(|t| t.rmse.len() != horizon) {
            return Err(EvalError::Invalid("trials have different horizons".into()));
        }
        let kept: Vec<&TrialResult> = sorted.iter().copied().filter(|t| !t.is_lost(eval)).collect();
        let mut per_trial: Vec<f64> = kept.iter().filter_map(|t| t.mean_rmse(eval.burn_in)).collect();
        let mean_rmse = (!per_trial.is_empty()).then(|| per_trial.iter().sum::<f64>() / per_trial.len() as f64);
        let median_rmse = median(&mut per_trial);
        let mut per_step_mean_rmse = Vec::with_capacity(horizon);
        let mut per_step_median_rmse = Vec::with_capacity(horizon);
        for k in 0..horizon {
            let mut v: Vec<f64> = kept.iter().filter_map(|t| t.rmse[k]).collect();
            per_step_mean_rmse.push((!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64));
            per_step_median_rmse.push(median(&mut v));
        }
        let n = sorted.len() as f64;
        let avg = |f: &dyn Fn(&TrialResult, usize) -> f64| -> Vec<f64> {
            (0..horizon).map(|k| sorted.iter().map(|t| f(t, k)).sum::<f64>() / n).collect()
        };
        let mut hist = BTreeMap::new();
        for t in &sorted {
            *hist.entry(t.mean_n_hat().round() as usize).or_insert(0) += 1;
        }
        let modal_n_hat = hist
            .iter()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
            .map(|(k, _)| *k);
        let lost = sorted.len() - kept.len();
        Ok(Self {
            trials: sorted.len(),
            lost_tracks: lost,
            lost_track_rate: lost as f64 / n,
            mean_rmse,
            median_rmse,
            per_step_mean_rmse,
            per_step_median_rmse,
            per_step_mean_ospa: avg(&|t, k| t.ospa[k]),
            per_step_mean_n_hat: avg(&|t, k| t.n_hat[k] as f64),
            per_step_mean_particles: avg(&|t, k| t.particles[k] as f64),
            true_n: sorted[0].true_n.clone(),
            n_hat_histogram: hist,
            modal_n_hat,
            mean_n_hat: sorted.iter().map(|t| t.mean_n_hat()).sum::<f64>() / n,
            mean_abs_count_error: sorted.iter().map(|t| t.mean_abs_count_error()).sum::<f64>() / n,
            seeds: sorted.iter().map(|t| t.seed).collect(),
        })
    }

    /// One row per step: mean and median RMSE, mean OSPA, mean count,
    /// true count, mean particles.
    pub fn per_step_csv(&self) -> String {
        let mut out = String::from("k,mean_rmse,median_rmse,mean_ospa,mean_n_hat,true_n,mean_particles\n");
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.6}"));
        for k in 0..self.per_step_mean_ospa.len() {
            let _ = writeln!(
                out,
                "{},{},{},{:.6},{:.6},{},{:.1}",
                k + 1,
                opt(self.per_step_mean_rmse[k]),
                opt(self.per_step_median_rmse[k]),
                self.per_step_mean_ospa[k],
                self.per_step_mean_n_hat[k],
                self.true_n[k],
                self.per_step_mean_particles[k],
            );
        }
        out
    }

    pub fn rmse_svg(&self) -> String {
        let series: Vec<(f64, f64)> = self
            .per_step_mean_rmse
            .iter()
            .enumerate()
            .filter_map(|(k, v)| v.map(|v| ((k + 1) as f64, v)))
            .collect();
        line_chart_svg("Mean RMSE per step", "k", "RMSE (mm)", &series)
    }

    pub fn histogram_svg(&self) -> String {
        bar_chart_svg("Time-averaged estimated dipole count", &self.n_hat_histogram)
    }
}

/// One cell of an algorithm comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub algorithm: String,
    pub axis: String,
    pub value: f64,
    pub report: AggregateReport,
}

/// Runs every algorithm at every particle count over the same seeds.
pub fn compare_algorithms(
    exp: &Experiment<'_>,
    algorithms: &[Algorithm],
    particle_counts: &[usize],
    cfg: &FilterConfig,
    seeds: &[u64],
) -> Result<Vec<ComparisonRow>, EvalError> {
    let mut rows = Vec::new();
    for &count in particle_counts {
        let cfg = FilterConfig {
            initial_particles: count,
            min_particles: cfg.min_particles.min(count),
            ..*cfg
        };
        for &alg in algorithms {
            let trials = exp.run_trials(alg, &cfg, seeds)?;
            rows.push(ComparisonRow {
                algorithm: alg.label(),
                axis: "particles".into(),
                value: count as f64,
                report: AggregateReport::from_trials(&trials, &exp.eval)?,
            });
        }
    }
    Ok(rows)
}

pub fn comparison_csv(rows: &[ComparisonRow]) -> String {
    let mut out = String::from("algorithm,axis,value,trials,lost_tracks,mean_rmse,median_rmse,mean_n_hat,mean_abs_count_error\n");
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.6}"));
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{:.6},{:.6}",
            r.algorithm,
            r.axis,
            r.value,
            r.report.trials,
            r.report.lost_tracks,
            opt(r.report.mean_rmse),
            opt(r.report.median_rmse),
            r.report.mean_n_hat,
            r.report.mean_abs_count_error,
        );
    }
    out
}

const W: f64 = 640.0;
const H: f64 = 400.0;
const PAD: f64 = 50.0;

fn svg_header(title: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"16\">{}</text>\n",
        W / 2.0,
        xml_escape(title)
    )
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn line_chart_svg(title: &str, xlabel: &str, ylabel: &str, pts: &[(f64, f64)]) -> String {
    let mut s = svg_header(title);
    let xmax = pts.iter().map(|p| p.0).fold(1.0, f64::max);
    let ymax = pts.iter().map(|p| p.1).fold(1e-9, f64::max) * 1.1;
    let sx = |x: f64| PAD + x / xmax * (W - 2.0 * PAD);
    let sy = |y: f64| H - PAD - y / ymax * (H - 2.0 * PAD);
    let _ = writeln!(
        s,
        "<line x1=\"{PAD}\" y1=\"{0}\" x2=\"{1}\" y2=\"{0}\" stroke=\"black\"/>\n<line x1=\"{PAD}\" y1=\"{PAD}\" x2=\"{PAD}\" y2=\"{0}\" stroke=\"black\"/>",
        H - PAD,
        W - PAD
    );
    let _ = writeln!(
        s,
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">{}</text>",
        W / 2.0,
        H - 12.0,
        xml_escape(xlabel)
    );
    let _ = writeln!(
        s,
        "<text x=\"14\" y=\"{}\" transform=\"rotate(-90 14 {})\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">{}</text>",
        H / 2.0,
        H / 2.0,
        xml_escape(ylabel)
    );
    let _ = writeln!(
        s,
        "<text x=\"{}\" y=\"{}\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"10\">{:.1}</text>",
        PAD - 4.0,
        PAD + 4.0,
        ymax
    );
    let path: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
    let _ = writeln!(s, "<polyline fill=\"none\" stroke=\"steelblue\" stroke-width=\"2\" points=\"{}\"/>", path.join(" "));
    s.push_str("</svg>\n");
    s
}

fn bar_chart_svg(title: &str, hist: &BTreeMap<usize, usize>) -> String {
    let mut s = svg_header(title);
    let max_count = hist.values().copied().max().unwrap_or(1).max(1) as f64;
    let bins = hist.len().max(1) as f64;
    let bw = (W - 2.0 * PAD) / bins;
    for (i, (k, c)) in hist.iter().enumerate() {
        let h = *c as f64 / max_count * (H - 2.0 * PAD);
        let x = PAD + i as f64 * bw;
        let _ = writeln!(
            s,
            "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"steelblue\"/>\n\
             <text x=\"{:.2}\" y=\"{}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">{k} ({c})</text>",
            x + 0.1 * bw,
            H - PAD - h,
            0.8 * bw,
            h,
            x + bw / 2.0,
            H - PAD + 16.0
        );
    }
    s.push_str("</svg>\n");
    s
}
