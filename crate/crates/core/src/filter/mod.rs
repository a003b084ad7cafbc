//! Particle filters for surface-constrained dipoles.
//!
//! [`gmpf`] holds the multiple-source tracker: one bootstrap filter per
//! source, Gibbs sweeps that condition each source on the others, and a
//! birth/stay/death choice of the dipole count scored by approximate
//! marginal likelihood. [`sir`] is the joint-state bootstrap baseline.

mod gmpf;
mod ipf;
mod likelihood;
mod sir;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{AmplitudePrior, DipoleState, DynamicsError, NumberPrior, TransitionModel};
use crate::forward::ForwardModel;
use crate::mesh::{CorticalMesh, Point3, SurfacePoint};
use crate::mne::MneError;

pub use gmpf::{
    adaptive_update, associate_and_rmse, gibbs_sweep, selection_criterion, CandidateDiagnostics, CandidateScore,
    EstimateRecord, GmpfState, Hypothesis, StepDiagnostics, SweepResult, Tracker,
};
pub use ipf::{ipf_step, IpfOutput};
pub use likelihood::{compute_weight, ConditionalLikelihood};
pub use sir::SirFilter;

/// Particles propagated per independent random stream.
pub const BLOCK_SIZE: usize = 1024;

#[derive(Debug, Error)]
pub enum FilterError {
    #[error("filter configuration: {0}")]
    Config(String),
    #[error("measurement has {found} channels, the forward model has {expected}")]
    ShapeMismatch { expected: usize, found: usize },
    #[error("likelihood is not finite at step {0}")]
    NonFinite(usize),
    #[error(transparent)]
    Mne(#[from] MneError),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
}

/// How candidate marginal likelihoods are formed from per-source weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScoreForm {
    /// Product over sources of each source's mean weight, over `N`.
    #[default]
    ProductOfMeans,
    /// Sum over particle index of the product of same-index weights, over `N`.
    IndexProduct,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaptiveConfig {
    pub enabled: bool,
    /// Below this ROI-to-estimate RMSE (mm) the smallest budget is used.
    pub low_mm: f64,
    /// At or above this RMSE the full budget is used.
    pub high_mm: f64,
}

impl Default for AdaptiveConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            low_mm: 10.0,
            high_mm: 20.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterConfig {
    /// Particles per source at the start (and in the top adaptive tier).
    pub initial_particles: usize,
    pub min_particles: usize,
    pub gibbs_iterations: usize,
    /// Likelihood noise level; `sigma_factor` times the data noise when absent.
    pub noise_sigma: Option<f64>,
    pub sigma_factor: f64,
    pub number_prior: NumberPrior,
    /// Fixes the dipole count and disables birth and death.
    pub known_n: Option<usize>,
    pub max_sources: usize,
    pub transition: TransitionModel,
    pub amplitude_prior: AmplitudePrior,
    pub adaptive: AdaptiveConfig,
    pub score: ScoreForm,
    pub seed: u64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            initial_particles: 10_000,
            min_particles: 500,
            gibbs_iterations: 1,
            noise_sigma: None,
            sigma_factor: 2.0,
            number_prior: NumberPrior::default(),
            known_n: None,
            max_sources: 10,
            transition: TransitionModel::default(),
            amplitude_prior: AmplitudePrior::default(),
            adaptive: AdaptiveConfig::default(),
            score: ScoreForm::default(),
            seed: 0,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<(), FilterError> {
        if self.gibbs_iterations < 1 {
            return Err(FilterError::Config("gibbs_iterations must be at least 1".into()));
        }
        if self.min_particles < 1 || self.initial_particles < self.min_particles {
            return Err(FilterError::Config(
                "need initial_particles >= min_particles >= 1".into(),
            ));
        }
        if let Some(s) = self.noise_sigma {
            if !(s > 0.0 && s.is_finite()) {
                return Err(FilterError::Config(format!("noise_sigma must be positive, got {s}")));
            }
        }
        if !(self.sigma_factor > 0.0 && self.sigma_factor.is_finite()) {
            return Err(FilterError::Config("sigma_factor must be positive".into()));
        }
        if self.adaptive.low_mm > self.adaptive.high_mm {
            return Err(FilterError::Config("adaptive.low_mm exceeds adaptive.high_mm".into()));
        }
        if let NumberPrior::Fixed { plus, zero, minus } = self.number_prior {
            if [plus, zero, minus].iter().any(|p| !(*p >= 0.0 && p.is_finite())) || plus + zero + minus <= 0.0 {
                return Err(FilterError::Config("number prior masses must be non-negative".into()));
            }
        }
        Ok(())
    }

    /// Likelihood noise for data simulated with `data_sigma`.
    pub fn likelihood_sigma(&self, data_sigma: f64) -> f64 {
        self.noise_sigma.unwrap_or(self.sigma_factor * data_sigma)
    }
}

/// A weighted sample of one dipole.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Particle {
    pub state: DipoleState,
    pub weight: f64,
}

/// Equally weighted samples of one source.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParticleSet {
    pub particles: Vec<DipoleState>,
}

impl ParticleSet {
    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    pub fn weights(&self) -> Vec<f64> {
        vec![1.0 / self.len() as f64; self.len()]
    }

    /// `count` particles uniformly distributed over the surface.
    pub fn uniform<R: Rng + ?Sized>(mesh: &CorticalMesh, count: usize, prior: &AmplitudePrior, rng: &mut R) -> Self {
        Self {
            particles: (0..count)
                .map(|_| DipoleState::new(mesh.sample_uniform_surface_point(rng), prior.sample(rng)))
                .collect(),
        }
    }

    /// `count` particles at uniformly drawn grid vertices.
    pub fn on_vertices<R: Rng + ?Sized>(mesh: &CorticalMesh, count: usize, prior: &AmplitudePrior, rng: &mut R) -> Self {
        Self {
            particles: (0..count)
                .map(|_| {
                    let v = rng.random_range(0..mesh.vertex_count());
                    let loc = mesh
                        .vertex_surface_point(v)
                        .expect("validated meshes have no isolated vertices");
                    DipoleState::new(loc, prior.sample(rng))
                })
                .collect(),
        }
    }

    /// Mean position and amplitude, placed on the closest of the faces the
    /// particles occupy.
    pub fn posterior_mean(&self, mesh: &CorticalMesh) -> Option<DipoleState> {
        if self.is_empty() {
            return None;
        }
        let n = self.len() as f64;
        let mean = self
            .particles
            .iter()
            .map(|p| mesh.position(&p.location))
            .sum::<Point3>()
            / n;
        let amplitude = self.particles.iter().map(|p| p.amplitude).sum::<f64>() / n;
        let mut faces: Vec<usize> = self.particles.iter().map(|p| p.location.face).collect();
        faces.sort_unstable();
        faces.dedup();
        let location: SurfacePoint = mesh.closest_surface_point(faces, &mean)?;
        Some(DipoleState::new(location, amplitude))
    }
}

/// Residual resampling: `floor(I w_i)` deterministic copies of each index,
/// the remaining draws multinomial on the fractional parts. Returns sorted
/// indices, as many as there are weights.
pub fn residual_resample<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> Vec<usize> {
    let n = weights.len();
    let total: f64 = weights.iter().sum();
    let mut out = Vec::with_capacity(n);
    let mut residual = Vec::with_capacity(n);
    for (i, &w) in weights.iter().enumerate() {
        let expected = n as f64 * w / total;
        let copies = expected.floor();
        out.extend(std::iter::repeat_n(i, copies as usize));
        residual.push(expected - copies);
    }
    let remaining = n.saturating_sub(out.len());
    if remaining > 0 {
        match WeightedIndex::new(&residual) {
            Ok(dist) => out.extend((0..remaining).map(|_| dist.sample(rng))),
            Err(_) => out.extend((0..remaining).map(|_| rng.random_range(0..n))),
        }
    }
    out.truncate(n);
    out.sort_unstable();
    out
}

/// Shared read-only inputs of a filter step.
#[derive(Debug, Clone, Copy)]
pub struct FilterContext<'a> {
    pub mesh: &'a CorticalMesh,
    pub model: &'a ForwardModel,
    pub transition: TransitionModel,
    pub sigma: f64,
}

/// Log of the mean of `exp(lw)`.
pub(crate) fn log_mean_exp(lw: &[f64]) -> f64 {
    if lw.is_empty() {
        return f64::NEG_INFINITY;
    }
    let m = lw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    let s: f64 = lw.iter().map(|x| (x - m).exp()).sum();
    m + (s / lw.len() as f64).ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn resample_degenerate_and_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(residual_resample(&[1.0, 0.0, 0.0], &mut rng), vec![0, 0, 0]);
        let u = vec![0.25; 4];
        assert_eq!(residual_resample(&u, &mut rng), vec![0, 1, 2, 3]);
    }

    #[test]
    fn resample_deterministic_part_and_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut w = vec![0.5, 0.3, 0.2];
        w.extend(std::iter::repeat_n(0.0, 7));
        let mut sums = [0usize; 3];
        for _ in 0..10_000 {
            let idx = residual_resample(&w, &mut rng);
            assert_eq!(idx.len(), 10);
            let c = |j| idx.iter().filter(|&&i| i == j).count();
            assert!(c(0) >= 5 && c(1) >= 3 && c(2) >= 2);
            for (j, s) in sums.iter_mut().enumerate() {
                *s += c(j);
            }
        }
        // The deterministic part already fills all ten draws.
        assert_eq!(sums, [50_000, 30_000, 20_000]);
    }

    #[test]
    fn resample_is_unbiased_with_fractional_parts() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = [0.37, 0.21, 0.42];
        let runs = 20_000;
        let mut sums = [0.0f64; 3];
        let mut sq = [0.0f64; 3];
        for _ in 0..runs {
            let idx = residual_resample(&w, &mut rng);
            for j in 0..3 {
                let c = idx.iter().filter(|&&i| i == j).count() as f64;
                sums[j] += c;
                sq[j] += c * c;
            }
        }
        for j in 0..3 {
            let mean = sums[j] / runs as f64;
            let var = sq[j] / runs as f64 - mean * mean;
            let se = (var / runs as f64).sqrt().max(1e-12);
            assert!((mean - 3.0 * w[j]).abs() < 3.0 * se + 1e-9, "{j}: {mean}");
        }
    }

    #[test]
    fn log_mean_exp_is_stable() {
        assert!((log_mean_exp(&[-1000.0, -1000.0]) + 1000.0).abs() < 1e-12);
        assert!((log_mean_exp(&[0.0, 2f64.ln()]) - 1.5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn config_validation() {
        assert!(FilterConfig::default().validate().is_ok());
        let bad = FilterConfig {
            gibbs_iterations: 0,
            ..FilterConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = FilterConfig {
            min_particles: 20_000,
            ..FilterConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
