use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{ipf_step, ConditionalLikelihood, FilterConfig, FilterContext, FilterError, ParticleSet, ScoreForm};
use crate::assign::{greedy_associate, Association};
use crate::dynamics::{apply_death, sample_birth, DipoleState, JointState, NumberTransition};
use crate::forward::{ForwardModel, Measurement};
use crate::mesh::{CorticalMesh, Point3};
use crate::mne::RoiEstimate;

/// Dipole-count hypothesis relative to the previous estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Hypothesis {
    Minus,
    Zero,
    Plus,
}

impl Hypothesis {
    pub fn offset(self) -> i32 {
        match self {
            Hypothesis::Minus => -1,
            Hypothesis::Zero => 0,
            Hypothesis::Plus => 1,
        }
    }

    /// Preference when scores tie: stay, then shrink, then grow.
    fn tie_rank(self) -> u8 {
        match self {
            Hypothesis::Zero => 0,
            Hypothesis::Minus => 1,
            Hypothesis::Plus => 2,
        }
    }
}

/// Result of the Gibbs sweeps for one count hypothesis.
#[derive(Debug, Clone)]
pub struct SweepResult {
    /// Last sampled state of every source.
    pub conditioning: Vec<DipoleState>,
    /// Resampled particles of the final sweep, one set per source.
    pub sets: Vec<ParticleSet>,
    /// Per-source log mean weight in the final sweep.
    pub log_mean_weights: Vec<f64>,
    /// Per-source pre-resampling log-weights in the final sweep.
    pub log_weights: Vec<Vec<f64>>,
    /// Log-likelihood of the measurement with no source at all.
    pub empty_log_likelihood: f64,
    pub flat_fallbacks: usize,
}

impl SweepResult {
    /// `log (1/N) prod_n mean_i w_n^i`, or the no-source likelihood when
    /// `N = 0`.
    pub fn product_of_means(&self) -> f64 {
        let n = self.sets.len();
        if n == 0 {
            return self.empty_log_likelihood;
        }
        self.log_mean_weights.iter().sum::<f64>() - (n as f64).ln()
    }

    /// `log (1/N) sum_i prod_n w_n^i`, or the no-source likelihood when
    /// `N = 0`.
    pub fn index_product(&self) -> f64 {
        let n = self.log_weights.len();
        if n == 0 {
            return self.empty_log_likelihood;
        }
        let len = self.log_weights.iter().map(Vec::len).min().unwrap_or(0);
        let joint: Vec<f64> = (0..len)
            .map(|i| self.log_weights.iter().map(|w| w[i]).sum())
            .collect();
        let m = joint.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !m.is_finite() {
            return m;
        }
        m + joint.iter().map(|x| (x - m).exp()).sum::<f64>().ln() - (n as f64).ln()
    }

    pub fn score(&self, form: ScoreForm) -> f64 {
        match form {
            ScoreForm::ProductOfMeans => self.product_of_means(),
            ScoreForm::IndexProduct => self.index_product(),
        }
    }
}

/// Runs `iterations` Gibbs sweeps at one time step. Every sweep updates the
/// sources in order; each source's filter restarts from its previous-step
/// particles `prev_sets[n]` and is conditioned on the latest sampled states
/// of all other sources, and its own sample replaces entry `n` straight
/// away.
#[allow(clippy::too_many_arguments)]
pub fn gibbs_sweep<R: Rng + ?Sized>(
    prev_sets: &[ParticleSet],
    init: &[DipoleState],
    y: &DVector<f64>,
    ctx: &FilterContext<'_>,
    iterations: usize,
    count: usize,
    range_scale: f64,
    rng: &mut R,
) -> SweepResult {
    assert_eq!(prev_sets.len(), init.len(), "one particle set per source");
    let n = init.len();
    let mut conditioning = init.to_vec();
    let mut sets = prev_sets.to_vec();
    let mut log_mean_weights = vec![0.0; n];
    let mut log_weights = vec![Vec::new(); n];
    let mut flat_fallbacks = 0;
    let mut others = Vec::with_capacity(n);
    for _ in 0..iterations.max(1) {
        for s in 0..n {
            others.clear();
            others.extend(conditioning.iter().enumerate().filter(|(j, _)| *j != s).map(|(_, d)| *d));
            let lik = ConditionalLikelihood::new(y, &others, ctx.model, ctx.sigma);
            let out = ipf_step(&prev_sets[s], count, &lik, ctx, range_scale, rng);
            conditioning[s] = out.chosen;
            sets[s] = out.particles;
            log_mean_weights[s] = out.log_mean_weight;
            log_weights[s] = out.log_weights;
            flat_fallbacks += out.flat_fallback as usize;
        }
    }
    SweepResult {
        conditioning,
        sets,
        log_mean_weights,
        log_weights,
        empty_log_likelihood: -y.norm_squared() / (2.0 * ctx.sigma * ctx.sigma),
        flat_fallbacks,
    }
}

/// Scored hypothesis entering the selection step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CandidateScore {
    pub hypothesis: Hypothesis,
    /// Log marginal likelihood of the measurement.
    pub log_likelihood: f64,
    /// Prior probability of the count change.
    pub prior: f64,
}

impl CandidateScore {
    pub fn log_posterior(&self) -> f64 {
        if self.prior > 0.0 {
            self.log_likelihood + self.prior.ln()
        } else {
            f64::NEG_INFINITY
        }
    }
}

/// Index of the candidate maximising likelihood times count prior. Ties go
/// to staying, then shrinking, then growing.
pub fn selection_criterion(candidates: &[CandidateScore]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, c) in candidates.iter().enumerate() {
        let s = c.log_posterior();
        let s = if s.is_nan() { f64::NEG_INFINITY } else { s };
        best = match best {
            None => Some((i, s)),
            Some((bi, bs)) => {
                let better = s > bs
                    || (s == bs && c.hypothesis.tie_rank() < candidates[bi].hypothesis.tie_rank());
                if better {
                    Some((i, s))
                } else {
                    Some((bi, bs))
                }
            }
        };
    }
    best.map(|(i, _)| i)
}

/// Particle budget and transition range for the next step from the
/// ROI-to-estimate RMSE `e_k` (mm).
pub fn adaptive_update(e_k: f64, cfg: &FilterConfig) -> (usize, f64) {
    if e_k < cfg.adaptive.low_mm {
        (cfg.min_particles, 0.25)
    } else if e_k < cfg.adaptive.high_mm {
        ((cfg.initial_particles / 2).max(cfg.min_particles), 0.5)
    } else {
        (cfg.initial_particles, 1.0)
    }
}

/// Greedy association of estimates to reference points with the RMSE of the
/// matched pairs.
pub fn associate_and_rmse(estimates: &[Point3], refs: &[Point3]) -> (Option<f64>, Association) {
    let a = greedy_associate(estimates, refs);
    (a.rms(), a)
}

/// Filter state carried between steps.
#[derive(Debug, Clone, PartialEq)]
pub struct GmpfState {
    pub estimate: JointState,
    pub sets: Vec<ParticleSet>,
}

/// One reported dipole estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimateRecord {
    pub face: usize,
    pub phi: f64,
    pub varphi: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub amplitude: f64,
}

impl EstimateRecord {
    pub fn new(d: &DipoleState, mesh: &CorticalMesh) -> Self {
        let p = mesh.position(&d.location);
        Self {
            face: d.location.face,
            phi: d.location.phi,
            varphi: d.location.varphi,
            x: p.x,
            y: p.y,
            z: p.z,
            amplitude: d.amplitude,
        }
    }

    pub fn position(&self) -> Point3 {
        Point3::new(self.x, self.y, self.z)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CandidateDiagnostics {
    pub hypothesis: Hypothesis,
    pub count: usize,
    pub log_prior: f64,
    pub product_of_means: f64,
    pub index_product: f64,
    /// Log-likelihood used for selection plus log prior.
    pub score: f64,
}

/// Per-step record of a tracker run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepDiagnostics {
    pub k: usize,
    pub winner: Hypothesis,
    pub n_hat: usize,
    pub estimates: Vec<EstimateRecord>,
    pub candidates: Vec<CandidateDiagnostics>,
    /// Particles per source used at this step.
    pub particles: usize,
    pub range_scale: f64,
    pub roi_count: Option<usize>,
    /// RMSE between ROI centres and the estimates (mm).
    pub e_k: Option<f64>,
    pub flat_fallbacks: usize,
}

impl StepDiagnostics {
    pub fn positions(&self) -> Vec<Point3> {
        self.estimates.iter().map(EstimateRecord::position).collect()
    }
}

struct CandidateRun {
    hypothesis: Hypothesis,
    sweep: SweepResult,
    estimate: Vec<DipoleState>,
}

/// Multiple-source tracker with dipole-count selection and adaptive
/// particle budgets.
#[derive(Debug, Clone)]
pub struct Tracker<'a> {
    mesh: &'a CorticalMesh,
    model: &'a ForwardModel,
    sigma: f64,
    cfg: FilterConfig,
    rng: ChaCha8Rng,
    state: Option<GmpfState>,
    particles: usize,
    range_scale: f64,
}

impl<'a> Tracker<'a> {
    /// `sigma` is the noise level used in the likelihood.
    pub fn new(mesh: &'a CorticalMesh, model: &'a ForwardModel, sigma: f64, cfg: FilterConfig) -> Result<Self, FilterError> {
        cfg.validate()?;
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(FilterError::Config(format!("likelihood sigma must be positive, got {sigma}")));
        }
        Ok(Self {
            mesh,
            model,
            sigma,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            particles: cfg.initial_particles,
            range_scale: 1.0,
            state: None,
            cfg,
        })
    }

    pub fn state(&self) -> Option<&GmpfState> {
        self.state.as_ref()
    }

    pub fn config(&self) -> &FilterConfig {
        &self.cfg
    }

    fn context(&self) -> FilterContext<'a> {
        FilterContext {
            mesh: self.mesh,
            model: self.model,
            transition: self.cfg.transition,
            sigma: self.sigma,
        }
    }

    fn initial_state(&mut self, roi: Option<&RoiEstimate>) -> GmpfState {
        let n = self
            .cfg
            .known_n
            .unwrap_or_else(|| roi.map_or(0, |r| r.rois.len()))
            .min(self.cfg.max_sources.max(self.cfg.known_n.unwrap_or(0)));
        let prior = self.cfg.amplitude_prior;
        let sets = (0..n)
            .map(|_| ParticleSet::on_vertices(self.mesh, self.cfg.initial_particles, &prior, &mut self.rng))
            .collect();
        let dipoles = (0..n)
            .map(|_| {
                let loc = self.mesh.sample_uniform_surface_point(&mut self.rng);
                DipoleState::new(loc, prior.sample(&mut self.rng))
            })
            .collect();
        GmpfState {
            estimate: JointState::new(dipoles, 0),
            sets,
        }
    }

    /// Processes one measurement. `roi` supplies birth locations, the
    /// initial count and the adaptive-budget reference.
    pub fn step(&mut self, y: &Measurement, roi: Option<&RoiEstimate>) -> Result<StepDiagnostics, FilterError> {
        if y.values.len() != self.model.sensors() {
            return Err(FilterError::ShapeMismatch {
                expected: self.model.sensors(),
                found: y.values.len(),
            });
        }
        let prev = match self.state.take() {
            Some(s) => s,
            None => self.initial_state(roi),
        };
        let n_prev = prev.estimate.len();
        let prior = self.cfg.number_prior.transition(n_prev, &mut self.rng);
        let hypotheses: Vec<Hypothesis> = if self.cfg.known_n.is_some() {
            vec![Hypothesis::Zero]
        } else {
            let mut h = Vec::with_capacity(3);
            if n_prev > 0 {
                h.push(Hypothesis::Minus);
            }
            h.push(Hypothesis::Zero);
            if n_prev < self.cfg.max_sources {
                h.push(Hypothesis::Plus);
            }
            h
        };
        let seeds: Vec<u64> = hypotheses.iter().map(|_| self.rng.random()).collect();
        let ctx = self.context();
        let cfg = self.cfg;
        let count = self.particles;
        let range_scale = self.range_scale;
        let birth_points: &[usize] = roi.map_or(&[], |r| r.points.points.as_slice());
        let runs: Vec<Result<CandidateRun, FilterError>> = hypotheses
            .par_iter()
            .zip(seeds.par_iter())
            .map(|(&h, &seed)| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let (init, sets) = match h {
                    Hypothesis::Zero => (prev.estimate.dipoles.clone(), prev.sets.clone()),
                    Hypothesis::Minus => {
                        let (x, idx) = apply_death(&prev.estimate, &mut rng)?;
                        let mut sets = prev.sets.clone();
                        sets.remove(idx);
                        (x.dipoles, sets)
                    }
                    Hypothesis::Plus => {
                        let x = sample_birth(&prev.estimate, birth_points, ctx.mesh, &cfg.amplitude_prior, &mut rng);
                        let mut sets = prev.sets.clone();
                        sets.push(ParticleSet::uniform(ctx.mesh, count, &cfg.amplitude_prior, &mut rng));
                        (x.dipoles, sets)
                    }
                };
                let sweep = gibbs_sweep(&sets, &init, &y.values, &ctx, cfg.gibbs_iterations, count, range_scale, &mut rng);
                let estimate = sweep
                    .sets
                    .iter()
                    .map(|s| s.posterior_mean(ctx.mesh).expect("particle sets are never empty"))
                    .collect();
                Ok(CandidateRun {
                    hypothesis: h,
                    sweep,
                    estimate,
                })
            })
            .collect();
        let runs: Vec<CandidateRun> = runs.into_iter().collect::<Result<_, _>>()?;

        let scores: Vec<CandidateScore> = runs
            .iter()
            .map(|r| CandidateScore {
                hypothesis: r.hypothesis,
                log_likelihood: r.sweep.score(cfg.score),
                prior: transition_prior(&prior, r.hypothesis, cfg.known_n.is_some()),
            })
            .collect();
        if scores.iter().all(|s| !s.log_likelihood.is_finite()) {
            return Err(FilterError::NonFinite(y.time_index));
        }
        let w = selection_criterion(&scores).expect("at least one candidate");
        let candidates = runs
            .iter()
            .zip(&scores)
            .map(|(r, s)| CandidateDiagnostics {
                hypothesis: r.hypothesis,
                count: r.sweep.sets.len(),
                log_prior: s.prior.ln(),
                product_of_means: r.sweep.product_of_means(),
                index_product: r.sweep.index_product(),
                score: s.log_posterior(),
            })
            .collect();
        let flat_fallbacks = runs.iter().map(|r| r.sweep.flat_fallbacks).sum();
        let winner = runs.into_iter().nth(w).expect("winner index is valid");
        let estimate = JointState::new(winner.estimate, y.time_index);
        let records: Vec<EstimateRecord> = estimate.dipoles.iter().map(|d| EstimateRecord::new(d, self.mesh)).collect();

        let centres = roi.map(RoiEstimate::centres).unwrap_or_default();
        let (e_k, _) = associate_and_rmse(&estimate.positions(self.mesh), &centres);
        let used_particles = self.particles;
        let used_range = self.range_scale;
        if cfg.adaptive.enabled {
            let (next, range) = adaptive_update(e_k.unwrap_or(f64::INFINITY), &cfg);
            self.particles = next;
            self.range_scale = range;
        }
        self.state = Some(GmpfState {
            estimate,
            sets: winner.sweep.sets,
        });
        Ok(StepDiagnostics {
            k: y.time_index,
            winner: winner.hypothesis,
            n_hat: records.len(),
            estimates: records,
            candidates,
            particles: used_particles,
            range_scale: used_range,
            roi_count: roi.map(|r| r.rois.len()),
            e_k,
            flat_fallbacks,
        })
    }
}

fn transition_prior(prior: &NumberTransition, h: Hypothesis, known: bool) -> f64 {
    if known {
        1.0
    } else {
        prior.prob(h.offset())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::TransitionModel;
    use crate::forward::LeadField;
    use crate::mesh::planar_grid;
    use nalgebra::DMatrix;

    fn cand(h: Hypothesis, ll: f64, prior: f64) -> CandidateScore {
        CandidateScore {
            hypothesis: h,
            log_likelihood: ll,
            prior,
        }
    }

    #[test]
    fn argmax_and_tie_order() {
        use Hypothesis::*;
        let c = [cand(Minus, 0.1f64.ln(), 1.0), cand(Zero, 0.8f64.ln(), 1.0), cand(Plus, 0.1f64.ln(), 1.0)];
        assert_eq!(selection_criterion(&c), Some(1));
        let eq = [cand(Minus, -3.0, 0.25), cand(Zero, -3.0, 0.5), cand(Plus, -3.0, 0.25)];
        assert_eq!(selection_criterion(&eq), Some(1));
        let tie = [cand(Plus, -3.0, 0.5), cand(Minus, -3.0, 0.5)];
        assert_eq!(selection_criterion(&tie), Some(1));
        let zero_lik = [cand(Zero, f64::NEG_INFINITY, 0.5), cand(Plus, -1e4, 0.25)];
        assert_eq!(selection_criterion(&zero_lik), Some(1));
    }

    #[test]
    fn selection_matches_hand_evaluation() {
        // Two candidates, two particles each, hand-set per-source weights.
        // (0): one source, weights (0.2, 0.6); (+): two sources,
        // weights (0.5, 0.1) and (0.4, 0.4).
        let mk = |w: Vec<Vec<f64>>| {
            let n = w.len();
            let lw: Vec<Vec<f64>> = w.iter().map(|v| v.iter().map(|x: &f64| x.ln()).collect()).collect();
            SweepResult {
                conditioning: Vec::new(),
                sets: vec![ParticleSet::default(); n],
                log_mean_weights: lw.iter().map(|v| super::super::log_mean_exp(v)).collect(),
                log_weights: lw,
                empty_log_likelihood: 0.0,
                flat_fallbacks: 0,
            }
        };
        let zero = mk(vec![vec![0.2, 0.6]]);
        let plus = mk(vec![vec![0.5, 0.1], vec![0.4, 0.4]]);
        assert!((zero.product_of_means().exp() - 0.4).abs() < 1e-12);
        assert!((plus.product_of_means().exp() - 0.3 * 0.4 / 2.0).abs() < 1e-12);
        assert!((zero.index_product().exp() - 0.8).abs() < 1e-12);
        assert!((plus.index_product().exp() - (0.5 * 0.4 + 0.1 * 0.4) / 2.0).abs() < 1e-12);
        let scores = [
            cand(Hypothesis::Zero, zero.product_of_means(), 0.5),
            cand(Hypothesis::Plus, plus.product_of_means(), 0.25),
        ];
        // 0.4 * 0.5 = 0.2 against 0.06 * 0.25 = 0.015.
        assert_eq!(selection_criterion(&scores), Some(0));
        // Scaling all likelihoods by a common factor leaves the winner.
        let scaled: Vec<CandidateScore> = scores
            .iter()
            .map(|c| CandidateScore {
                log_likelihood: c.log_likelihood + 1234.5,
                ..*c
            })
            .collect();
        assert_eq!(selection_criterion(&scaled), Some(0));
    }

    #[test]
    fn adaptive_tiers() {
        let cfg = FilterConfig::default();
        assert_eq!(adaptive_update(0.0, &cfg), (cfg.min_particles, 0.25));
        assert_eq!(adaptive_update(15.0, &cfg), (cfg.initial_particles / 2, 0.5));
        assert_eq!(adaptive_update(100.0, &cfg), (cfg.initial_particles, 1.0));
        let mut last = (0, 0.0);
        for i in 0..400 {
            let out = adaptive_update(i as f64 * 0.1, &cfg);
            assert!(out.0 >= last.0 && out.1 >= last.1);
            last = out;
        }
    }

    #[test]
    fn association_cases() {
        let p = vec![Point3::new(0.0, 0.0, 0.0), Point3::new(30.0, 0.0, 0.0)];
        let (e, a) = associate_and_rmse(&p, &p);
        assert_eq!(e, Some(0.0));
        assert_eq!(a.pairs.len(), 2);
        let (e, a) = associate_and_rmse(&p[..1], &[Point3::new(3.0, 4.0, 0.0), Point3::new(40.0, 0.0, 0.0)]);
        assert_eq!(e, Some(5.0));
        assert_eq!(a.unmatched_cols, vec![1]);
    }

    fn toy() -> (CorticalMesh, ForwardModel) {
        let mesh = planar_grid(6, 6, 4.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let lf = DMatrix::from_fn(30, mesh.vertex_count(), |_, _| rng.random_range(-1.0..1.0));
        (mesh.clone(), ForwardModel::new(&mesh, LeadField::new(lf).unwrap()).unwrap())
    }

    #[test]
    fn single_source_sweep_is_one_ipf_step() {
        let (mesh, model) = toy();
        let ctx = FilterContext {
            mesh: &mesh,
            model: &model,
            transition: TransitionModel::default(),
            sigma: 0.3,
        };
        let truth = DipoleState::new(mesh.vertex_surface_point(14).unwrap(), 1.0);
        let y = model.predict_measurement(&[truth]);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let set = ParticleSet::uniform(&mesh, 500, &Default::default(), &mut rng);
        let init = [DipoleState::new(mesh.sample_uniform_surface_point(&mut rng), 1.0)];
        let sweep = gibbs_sweep(std::slice::from_ref(&set), &init, &y, &ctx, 1, 500, 1.0, &mut ChaCha8Rng::seed_from_u64(7));
        let lik = ConditionalLikelihood::new(&y, &[], &model, 0.3);
        let direct = ipf_step(&set, 500, &lik, &ctx, 1.0, &mut ChaCha8Rng::seed_from_u64(7));
        assert_eq!(sweep.sets[0], direct.particles);
        assert_eq!(sweep.conditioning[0], direct.chosen);
    }

    #[test]
    fn tracker_is_deterministic_and_skips_minus_at_zero() {
        let (mesh, model) = toy();
        let truth = DipoleState::new(mesh.vertex_surface_point(20).unwrap(), 1.0);
        let y = Measurement {
            values: model.predict_measurement(&[truth]),
            time_index: 1,
        };
        let cfg = FilterConfig {
            initial_particles: 300,
            min_particles: 50,
            known_n: None,
            seed: 3,
            ..FilterConfig::default()
        };
        let run = || {
            let mut t = Tracker::new(&mesh, &model, 0.5, cfg).unwrap();
            let a = t.step(&y, None).unwrap();
            let b = t.step(&Measurement { time_index: 2, ..y.clone() }, None).unwrap();
            (a, b)
        };
        let (a, b) = run();
        assert_eq!(run(), (a.clone(), b));
        // No ROIs means no initial sources, so only staying and birth exist.
        let hs: Vec<Hypothesis> = a.candidates.iter().map(|c| c.hypothesis).collect();
        assert_eq!(hs, vec![Hypothesis::Zero, Hypothesis::Plus]);
        assert_eq!(a.winner, Hypothesis::Plus);
    }

    #[test]
    fn known_n_runs_only_the_stay_candidate() {
        let (mesh, model) = toy();
        let truth = DipoleState::new(mesh.vertex_surface_point(20).unwrap(), 1.0);
        let y = Measurement {
            values: model.predict_measurement(&[truth]),
            time_index: 1,
        };
        let cfg = FilterConfig {
            initial_particles: 300,
            min_particles: 50,
            known_n: Some(2),
            ..FilterConfig::default()
        };
        let mut t = Tracker::new(&mesh, &model, 0.5, cfg).unwrap();
        let d = t.step(&y, None).unwrap();
        assert_eq!(d.candidates.len(), 1);
        assert_eq!(d.n_hat, 2);
        assert_eq!(d.e_k, None);
        assert_eq!(t.state().unwrap().sets[0].len(), 300);
    }
}
