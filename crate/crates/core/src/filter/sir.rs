use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{residual_resample, EstimateRecord, FilterConfig, FilterError, Hypothesis, StepDiagnostics, BLOCK_SIZE};
use crate::assign::{distance_matrix, hungarian};
use crate::dynamics::DipoleState;
use crate::forward::{ForwardModel, Measurement};
use crate::mesh::{CorticalMesh, Point3};

/// Bootstrap filter over the concatenated state of a known number of
/// sources: one particle holds every source.
#[derive(Debug, Clone)]
pub struct SirFilter<'a> {
    mesh: &'a CorticalMesh,
    model: &'a ForwardModel,
    sigma: f64,
    cfg: FilterConfig,
    rng: ChaCha8Rng,
    particles: Vec<Vec<DipoleState>>,
}

impl<'a> SirFilter<'a> {
    /// Uses `initial_particles`, the transition and amplitude models and the
    /// seed from `cfg`; the count comes from `cfg.known_n`.
    pub fn new(mesh: &'a CorticalMesh, model: &'a ForwardModel, sigma: f64, cfg: FilterConfig) -> Result<Self, FilterError> {
        cfg.validate()?;
        let n = cfg
            .known_n
            .ok_or_else(|| FilterError::Config("the joint-state filter needs a known source count".into()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let particles = (0..cfg.initial_particles)
            .map(|_| {
                (0..n)
                    .map(|_| {
                        let v = rng.random_range(0..mesh.vertex_count());
                        let loc = mesh.vertex_surface_point(v).expect("validated mesh");
                        DipoleState::new(loc, cfg.amplitude_prior.sample(&mut rng))
                    })
                    .collect()
            })
            .collect();
        Ok(Self {
            mesh,
            model,
            sigma,
            cfg,
            rng,
            particles,
        })
    }

    pub fn step(&mut self, y: &Measurement) -> Result<StepDiagnostics, FilterError> {
        if y.values.len() != self.model.sensors() {
            return Err(FilterError::ShapeMismatch {
                expected: self.model.sensors(),
                found: y.values.len(),
            });
        }
        let seed: u64 = self.rng.random();
        let count = self.particles.len();
        let inv = 1.0 / (2.0 * self.sigma * self.sigma);
        let (mesh, model, transition) = (self.mesh, self.model, self.cfg.transition);
        let prev = &self.particles;
        let blocks: Vec<(Vec<Vec<DipoleState>>, Vec<f64>)> = (0..count.div_ceil(BLOCK_SIZE))
            .into_par_iter()
            .map(|b| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(b as u64);
                let lo = b * BLOCK_SIZE;
                let hi = (lo + BLOCK_SIZE).min(count);
                let mut states = Vec::with_capacity(hi - lo);
                let mut lw = Vec::with_capacity(hi - lo);
                let mut pred = vec![0.0; model.sensors()];
                for p in &prev[lo..hi] {
                    let next: Vec<DipoleState> = p.iter().map(|d| transition.propagate(d, mesh, &mut rng, 1.0)).collect();
                    pred.iter_mut().for_each(|v| *v = 0.0);
                    for d in &next {
                        model.add_response(&d.location, d.amplitude, &mut pred);
                    }
                    let r2: f64 = pred.iter().zip(y.values.iter()).map(|(a, b)| (b - a) * (b - a)).sum();
                    lw.push(-r2 * inv);
                    states.push(next);
                }
                (states, lw)
            })
            .collect();
        let mut states = Vec::with_capacity(count);
        let mut lw = Vec::with_capacity(count);
        for (s, w) in blocks {
            states.extend(s);
            lw.extend(w);
        }
        let max = lw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return Err(FilterError::NonFinite(y.time_index));
        }
        let best = lw.iter().position(|&w| w == max).expect("max is attained");
        let reference: Vec<Point3> = states[best].iter().map(|d| mesh.position(&d.location)).collect();
        let weights: Vec<f64> = lw.iter().map(|w| (w - max).exp()).collect();
        let idx = residual_resample(&weights, &mut self.rng);
        self.particles = idx.iter().map(|&i| states[i].clone()).collect();

        let estimates = self.aligned_mean(&reference);
        Ok(StepDiagnostics {
            k: y.time_index,
            winner: Hypothesis::Zero,
            n_hat: estimates.len(),
            estimates: estimates.iter().map(|d| EstimateRecord::new(d, mesh)).collect(),
            candidates: Vec::new(),
            particles: count,
            range_scale: 1.0,
            roi_count: None,
            e_k: None,
            flat_fallbacks: 0,
        })
    }

    /// Per-source mean after relabelling every particle's sources to match
    /// `reference` by minimum total distance.
    fn aligned_mean(&self, reference: &[Point3]) -> Vec<DipoleState> {
        let n = reference.len();
        let mut pos = vec![Point3::zeros(); n];
        let mut amp = vec![0.0; n];
        let mut faces: Vec<Vec<usize>> = vec![Vec::new(); n];
        for p in &self.particles {
            let points: Vec<Point3> = p.iter().map(|d| self.mesh.position(&d.location)).collect();
            let assignment = hungarian(&distance_matrix(reference, &points));
            for (slot, col) in assignment.into_iter().enumerate() {
                let col = col.expect("square assignment");
                pos[slot] += points[col];
                amp[slot] += p[col].amplitude;
                faces[slot].push(p[col].location.face);
            }
        }
        let m = self.particles.len() as f64;
        (0..n)
            .map(|s| {
                let mut f = std::mem::take(&mut faces[s]);
                f.sort_unstable();
                f.dedup();
                let loc = self
                    .mesh
                    .closest_surface_point(f, &(pos[s] / m))
                    .expect("non-empty particle set");
                DipoleState::new(loc, amp[s] / m)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::LeadField;
    use crate::mesh::planar_grid;
    use nalgebra::DMatrix;

    #[test]
    fn requires_known_count_and_is_deterministic() {
        let mesh = planar_grid(6, 6, 4.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let lf = DMatrix::from_fn(20, mesh.vertex_count(), |_, _| rng.random_range(-1.0..1.0));
        let model = ForwardModel::new(&mesh, LeadField::new(lf).unwrap()).unwrap();
        assert!(SirFilter::new(&mesh, &model, 1.0, FilterConfig::default()).is_err());
        let cfg = FilterConfig {
            initial_particles: 400,
            min_particles: 1,
            known_n: Some(2),
            ..FilterConfig::default()
        };
        let truth = [
            DipoleState::new(mesh.vertex_surface_point(7).unwrap(), 1.0),
            DipoleState::new(mesh.vertex_surface_point(28).unwrap(), 1.0),
        ];
        let y = Measurement {
            values: model.predict_measurement(&truth),
            time_index: 1,
        };
        let run = || {
            let mut f = SirFilter::new(&mesh, &model, 0.5, cfg).unwrap();
            (f.step(&y).unwrap(), f.step(&y).unwrap())
        };
        let a = run();
        assert_eq!(a, run());
        assert_eq!(a.1.n_hat, 2);
    }
}
