use nalgebra::DVector;

use crate::dynamics::DipoleState;
use crate::forward::{dot, ForwardModel};

/// Unnormalised Gaussian log-likelihood of `y` given `p` and the other
/// sources: `-|y - predict(p, others)|^2 / (2 sigma^2)`.
pub fn compute_weight(p: &DipoleState, y: &DVector<f64>, others: &[DipoleState], model: &ForwardModel, sigma: f64) -> f64 {
    let mut all = Vec::with_capacity(others.len() + 1);
    all.push(*p);
    all.extend_from_slice(others);
    let r = y - model.predict_measurement(&all);
    -r.norm_squared() / (2.0 * sigma * sigma)
}

/// Likelihood of one source with the others held fixed.
///
/// The residual after removing the other sources is projected once on every
/// lead-field column, so each particle costs a few flops: with mapped corner
/// weights `c` on face `f`,
/// `|r - q L c|^2 = |r|^2 - 2 q c.(L^T r) + q^2 c^T G_f c`.
#[derive(Debug, Clone)]
pub struct ConditionalLikelihood {
    projections: Vec<f64>,
    residual_norm2: f64,
    inv_two_var: f64,
}

impl ConditionalLikelihood {
    pub fn new(y: &DVector<f64>, others: &[DipoleState], model: &ForwardModel, sigma: f64) -> Self {
        let mut residual = y.clone();
        for d in others {
            model.add_response(&d.location, -d.amplitude, residual.as_mut_slice());
        }
        let lf = model.leadfield();
        let projections = (0..lf.sources())
            .map(|v| dot(lf.column(v), residual.as_slice()))
            .collect();
        Self {
            projections,
            residual_norm2: residual.norm_squared(),
            inv_two_var: 1.0 / (2.0 * sigma * sigma),
        }
    }

    /// Log-likelihood with no source beyond the fixed ones.
    pub fn empty(&self) -> f64 {
        -self.residual_norm2 * self.inv_two_var
    }

    pub fn log_weight(&self, p: &DipoleState, model: &ForwardModel) -> f64 {
        let c = model.corner_weights(&p.location);
        let tri = model.face_vertices(p.location.face);
        let g = model.face_gram(p.location.face);
        let lin = c[0] * self.projections[tri[0]] + c[1] * self.projections[tri[1]] + c[2] * self.projections[tri[2]];
        let mut quad = 0.0;
        for a in 0..3 {
            for b in 0..3 {
                quad += c[a] * g[a][b] * c[b];
            }
        }
        let q = p.amplitude;
        let r2 = (self.residual_norm2 - 2.0 * q * lin + q * q * quad).max(0.0);
        -r2 * self.inv_two_var
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::LeadField;
    use crate::mesh::{planar_grid, SurfacePoint};
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn model(m: usize, seed: u64) -> (crate::mesh::CorticalMesh, ForwardModel) {
        let mesh = planar_grid(4, 5, 5.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lf = DMatrix::from_fn(m, mesh.vertex_count(), |_, _| rng.random_range(-1.0..1.0));
        let model = ForwardModel::new(&mesh, LeadField::new(lf).unwrap()).unwrap();
        (mesh, model)
    }

    #[test]
    fn fast_path_matches_direct_evaluation() {
        let (mesh, model) = model(7, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let y = DVector::from_fn(7, |_, _| rng.random_range(-2.0..2.0));
        let others = vec![
            DipoleState::new(mesh.sample_uniform_surface_point(&mut rng), 0.7),
            DipoleState::new(mesh.sample_uniform_surface_point(&mut rng), -1.3),
        ];
        let lik = ConditionalLikelihood::new(&y, &others, &model, 0.8);
        for _ in 0..200 {
            let p = DipoleState::new(mesh.sample_uniform_surface_point(&mut rng), rng.random_range(-2.0..2.0));
            let direct = compute_weight(&p, &y, &others, &model, 0.8);
            assert!((lik.log_weight(&p, &model) - direct).abs() < 1e-9 * (1.0 + direct.abs()));
        }
    }

    #[test]
    fn exact_prediction_has_the_highest_weight() {
        let (mesh, model) = model(5, 3);
        let truth = DipoleState::new(SurfacePoint::new(4, 0.2, 0.3), 1.0);
        let y = model.predict_measurement(&[truth]);
        let best = compute_weight(&truth, &y, &[], &model, 1.0);
        assert_eq!(best, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let p = DipoleState::new(mesh.sample_uniform_surface_point(&mut rng), 1.0);
            assert!(compute_weight(&p, &y, &[], &model, 1.0) <= best);
        }
    }

    #[test]
    fn single_sensor_weight_ratio() {
        let mesh = planar_grid(2, 2, 1.0).unwrap();
        let lf = LeadField::new(DMatrix::from_element(1, 4, 1.0)).unwrap();
        let model = ForwardModel::new(&mesh, lf).unwrap();
        let at = |q: f64| DipoleState::new(SurfacePoint::new(0, 0.0, 0.0), q);
        let y = DVector::from_element(1, 1.0);
        // Residuals 0 and 1 with sigma = 1.
        let w0 = compute_weight(&at(1.0), &y, &[], &model, 1.0);
        let w1 = compute_weight(&at(0.0), &y, &[], &model, 1.0);
        assert!(((w0 - w1).exp() - 0.5f64.exp()).abs() < 1e-12);
        let near = compute_weight(&at(0.9), &y, &[], &model, 1.0);
        assert!(w0 > near && near > w1);
    }
}
