use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{log_mean_exp, residual_resample, ConditionalLikelihood, FilterContext, ParticleSet, BLOCK_SIZE};
use crate::dynamics::DipoleState;

/// Outcome of one individual-filter update.
#[derive(Debug, Clone)]
pub struct IpfOutput {
    /// Resampled, equally weighted particles.
    pub particles: ParticleSet,
    /// One particle picked uniformly from the resampled set.
    pub chosen: DipoleState,
    /// Pre-resampling log-weights, in propagation order.
    pub log_weights: Vec<f64>,
    /// Log of the mean pre-resampling weight.
    pub log_mean_weight: f64,
    /// True when every weight vanished and a flat weighting was used.
    pub flat_fallback: bool,
}

/// One bootstrap update of a single source conditioned on the others.
///
/// `count` particles are propagated from `prev` (when the count changes,
/// particle `i` descends from `prev[floor(i * len / count)]`), weighted by
/// `lik`, and residual-resampled. Propagation runs in blocks, each with its
/// own random stream, so the result does not depend on the thread count.
pub fn ipf_step<R: Rng + ?Sized>(
    prev: &ParticleSet,
    count: usize,
    lik: &ConditionalLikelihood,
    ctx: &FilterContext<'_>,
    range_scale: f64,
    rng: &mut R,
) -> IpfOutput {
    assert!(!prev.is_empty(), "ipf_step needs at least one particle");
    let count = count.max(1);
    let seed: u64 = rng.random();
    let len = prev.len();
    let blocks: Vec<(Vec<DipoleState>, Vec<f64>)> = (0..count.div_ceil(BLOCK_SIZE))
        .into_par_iter()
        .map(|b| {
            let mut brng = ChaCha8Rng::seed_from_u64(seed);
            brng.set_stream(b as u64);
            let lo = b * BLOCK_SIZE;
            let hi = (lo + BLOCK_SIZE).min(count);
            let mut states = Vec::with_capacity(hi - lo);
            let mut lw = Vec::with_capacity(hi - lo);
            for i in lo..hi {
                let parent = &prev.particles[i * len / count];
                let x = ctx.transition.propagate(parent, ctx.mesh, &mut brng, range_scale);
                lw.push(lik.log_weight(&x, ctx.model));
                states.push(x);
            }
            (states, lw)
        })
        .collect();
    let mut states = Vec::with_capacity(count);
    let mut log_weights = Vec::with_capacity(count);
    for (s, w) in blocks {
        states.extend(s);
        log_weights.extend(w);
    }

    let max = log_weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let flat_fallback = !max.is_finite();
    let weights: Vec<f64> = if flat_fallback {
        log::warn!("all particle weights vanished; using flat weights");
        vec![1.0; count]
    } else {
        log_weights.iter().map(|w| (w - max).exp()).collect()
    };
    let idx = residual_resample(&weights, rng);
    let particles: Vec<DipoleState> = idx.iter().map(|&i| states[i]).collect();
    let chosen = particles[rng.random_range(0..particles.len())];
    IpfOutput {
        particles: ParticleSet { particles },
        chosen,
        log_mean_weight: log_mean_exp(&log_weights),
        log_weights,
        flat_fallback,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::TransitionModel;
    use crate::forward::{ForwardModel, LeadField};
    use crate::mesh::{planar_grid, SurfacePoint};
    use nalgebra::{DMatrix, DVector};

    fn setup() -> (crate::mesh::CorticalMesh, ForwardModel) {
        let mesh = planar_grid(5, 5, 5.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let lf = DMatrix::from_fn(12, mesh.vertex_count(), |_, _| rng.random_range(-1.0..1.0));
        (mesh.clone(), ForwardModel::new(&mesh, LeadField::new(lf).unwrap()).unwrap())
    }

    #[test]
    fn uninformative_likelihood_keeps_every_particle() {
        let (mesh, model) = setup();
        let ctx = FilterContext {
            mesh: &mesh,
            model: &model,
            transition: TransitionModel::default(),
            sigma: 1e12,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let prev = ParticleSet::uniform(&mesh, 300, &Default::default(), &mut rng);
        let y = DVector::from_element(12, 1.0);
        let lik = ConditionalLikelihood::new(&y, &[], &model, ctx.sigma);
        let out = ipf_step(&prev, 300, &lik, &ctx, 1.0, &mut rng);
        // Flat weights copy each propagated particle exactly once.
        let mut a: Vec<String> = out.particles.particles.iter().map(|p| format!("{p:?}")).collect();
        a.sort();
        assert_eq!(out.particles.len(), 300);
        a.dedup();
        assert_eq!(a.len(), 300);
    }

    #[test]
    fn single_particle_is_chosen() {
        let (mesh, model) = setup();
        let ctx = FilterContext {
            mesh: &mesh,
            model: &model,
            transition: TransitionModel::default(),
            sigma: 1.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let prev = ParticleSet {
            particles: vec![DipoleState::new(SurfacePoint::new(3, 0.1, 0.1), 1.0)],
        };
        let lik = ConditionalLikelihood::new(&DVector::zeros(12), &[], &model, 1.0);
        let out = ipf_step(&prev, 1, &lik, &ctx, 1.0, &mut rng);
        assert_eq!(out.particles.particles, vec![out.chosen]);
    }

    #[test]
    fn same_seed_same_output_and_resize() {
        let (mesh, model) = setup();
        let ctx = FilterContext {
            mesh: &mesh,
            model: &model,
            transition: TransitionModel::default(),
            sigma: 0.5,
        };
        let truth = DipoleState::new(SurfacePoint::new(10, 0.3, 0.3), 1.0);
        let y = model.predict_measurement(&[truth]);
        let lik = ConditionalLikelihood::new(&y, &[], &model, 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let prev = ParticleSet::uniform(&mesh, 2500, &Default::default(), &mut rng);
        let a = ipf_step(&prev, 3000, &lik, &ctx, 1.0, &mut ChaCha8Rng::seed_from_u64(4));
        let b = ipf_step(&prev, 3000, &lik, &ctx, 1.0, &mut ChaCha8Rng::seed_from_u64(4));
        assert_eq!(a.particles, b.particles);
        assert_eq!(a.particles.len(), 3000);
        assert_eq!(a.log_weights.len(), 3000);
        let c = ipf_step(&prev, 700, &lik, &ctx, 1.0, &mut ChaCha8Rng::seed_from_u64(4));
        assert_eq!(c.particles.len(), 700);
    }
}
