//! Regions of interest from a minimum-norm estimate.
//!
//! Each step the measurement is inverted with a Tikhonov-regularised
//! minimum-norm solve, grid vertices are drawn with probability proportional
//! to the estimated amplitude magnitude, and the draws are grouped by
//! single-linkage clustering. The clusters seed dipole births and the dipole
//! count, and their centres drive the adaptive particle budget.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::forward::LeadField;
use crate::mesh::{CorticalMesh, Point3};

#[derive(Debug, Error, PartialEq)]
pub enum MneError {
    #[error("regularisation parameter must be positive, got {0}")]
    BadLambda(f64),
    #[error("measurement has {found} channels, lead field has {expected}")]
    ShapeMismatch { expected: usize, found: usize },
    #[error("regularised gram matrix is not positive definite")]
    NotPositiveDefinite,
}

/// Estimated amplitude per grid vertex (signed).
#[derive(Debug, Clone, PartialEq)]
pub struct AmplitudeField {
    pub values: DVector<f64>,
}

/// Multiset of sampled grid-vertex indices.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointSet {
    pub points: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Roi {
    /// Sampled vertices in the cluster, with repeats, sorted.
    pub members: Vec<usize>,
    pub centre: Point3,
}

/// Minimum-norm inverse with the sensor-space gram `L L^T` cached.
#[derive(Debug, Clone)]
pub struct MneInverse {
    leadfield: DMatrix<f64>,
    gram: DMatrix<f64>,
    gram_trace: f64,
}

impl MneInverse {
    pub fn new(leadfield: &LeadField) -> Self {
        let l = leadfield.matrix().clone();
        let gram = &l * l.transpose();
        let gram_trace = gram.trace();
        Self {
            leadfield: l,
            gram,
            gram_trace,
        }
    }

    pub fn sensors(&self) -> usize {
        self.gram.nrows()
    }

    /// `L^T (L L^T + lambda I)^{-1} y`, through a Cholesky solve.
    pub fn solve(&self, y: &DVector<f64>, lambda: f64) -> Result<AmplitudeField, MneError> {
        if lambda.is_nan() || lambda <= 0.0 || !lambda.is_finite() {
            return Err(MneError::BadLambda(lambda));
        }
        if y.len() != self.sensors() {
            return Err(MneError::ShapeMismatch {
                expected: self.sensors(),
                found: y.len(),
            });
        }
        let mut a = self.gram.clone();
        for i in 0..a.nrows() {
            a[(i, i)] += lambda;
        }
        let chol: Cholesky<f64, Dyn> = Cholesky::new(a).ok_or(MneError::NotPositiveDefinite)?;
        let z = chol.solve(y);
        Ok(AmplitudeField {
            values: self.leadfield.tr_mul(&z),
        })
    }

    /// Noise-normalised regularisation: `sigma^2 tr(L L^T) / (M P)` where
    /// `P` is the mean squared measurement.
    pub fn default_lambda(&self, noise_sigma: f64, y: &DVector<f64>) -> f64 {
        let m = self.sensors() as f64;
        let power = y.norm_squared() / m;
        let lambda = noise_sigma * noise_sigma * self.gram_trace / (m * power);
        if lambda.is_finite() && lambda > 0.0 {
            lambda
        } else {
            // Silent or noiseless data: fall back to a tiny relative ridge.
            1e-9 * self.gram_trace / m
        }
    }
}

/// One-off minimum-norm solve.
pub fn mne_solve(leadfield: &LeadField, y: &DVector<f64>, lambda: f64) -> Result<AmplitudeField, MneError> {
    MneInverse::new(leadfield).solve(y, lambda)
}

/// `count` i.i.d. vertex draws with probability proportional to `|q|`;
/// uniform when the field is identically zero.
pub fn probabilistic_sample<R: Rng + ?Sized>(field: &AmplitudeField, count: usize, rng: &mut R) -> PointSet {
    let g = field.values.len();
    if g == 0 {
        return PointSet::default();
    }
    let points = match WeightedIndex::new(field.values.iter().map(|q| q.abs())) {
        Ok(dist) => (0..count).map(|_| dist.sample(rng)).collect(),
        Err(_) => {
            log::warn!("amplitude field is all zero; sampling vertices uniformly");
            (0..count).map(|_| rng.random_range(0..g)).collect()
        }
    };
    PointSet { points }
}

/// Single-linkage clusters of the sampled vertices, cut at link distance
/// `cutoff_mm`. Clusters with fewer than `min_size` draws (repeats count)
/// are dropped. Output is ordered by each cluster's lowest vertex index.
pub fn cluster_rois(points: &PointSet, mesh: &CorticalMesh, cutoff_mm: f64, min_size: usize) -> Vec<Roi> {
    let mut unique = points.points.clone();
    unique.sort_unstable();
    unique.dedup();
    let n = unique.len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut [usize], mut i: usize) -> usize {
        while parent[i] != i {
            parent[i] = parent[parent[i]];
            i = parent[i];
        }
        i
    }
    let pos: Vec<Point3> = unique.iter().map(|&v| mesh.vertex(v)).collect();
    let cut2 = cutoff_mm * cutoff_mm;
    for a in 0..n {
        for b in a + 1..n {
            if (pos[a] - pos[b]).norm_squared() <= cut2 {
                let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
                if ra != rb {
                    parent[ra.max(rb)] = ra.min(rb);
                }
            }
        }
    }
    let mut label = vec![usize::MAX; n];
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for i in 0..n {
        let r = find(&mut parent, i);
        if label[r] == usize::MAX {
            label[r] = groups.len();
            groups.push(Vec::new());
        }
        label[i] = label[r];
    }
    for &v in &points.points {
        let i = unique.binary_search(&v).expect("vertex is in the unique list");
        groups[label[i]].push(v);
    }
    groups
        .into_iter()
        .filter(|g| g.len() >= min_size.max(1))
        .map(|mut members| {
            members.sort_unstable();
            let centre = members.iter().map(|&v| mesh.vertex(v)).sum::<Point3>() / members.len() as f64;
            Roi { members, centre }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MneConfig {
    /// Fixed regularisation; the noise-normalised default when absent.
    pub lambda: Option<f64>,
    pub cutoff_mm: f64,
    pub min_cluster_size: usize,
    /// Vertex draws per step; a tenth of the grid when absent.
    pub sample_count: Option<usize>,
}

impl Default for MneConfig {
    fn default() -> Self {
        Self {
            lambda: None,
            cutoff_mm: 8.0,
            min_cluster_size: 3,
            sample_count: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoiEstimate {
    pub points: PointSet,
    pub rois: Vec<Roi>,
    pub lambda: f64,
}

impl RoiEstimate {
    pub fn centres(&self) -> Vec<Point3> {
        self.rois.iter().map(|r| r.centre).collect()
    }
}

/// Per-step ROI pipeline.
#[derive(Debug, Clone)]
pub struct RoiEstimator {
    inverse: MneInverse,
    config: MneConfig,
    noise_sigma: f64,
}

impl RoiEstimator {
    pub fn new(leadfield: &LeadField, config: MneConfig, noise_sigma: f64) -> Self {
        Self {
            inverse: MneInverse::new(leadfield),
            config,
            noise_sigma,
        }
    }

    pub fn config(&self) -> &MneConfig {
        &self.config
    }

    pub fn estimate<R: Rng + ?Sized>(
        &self,
        y: &DVector<f64>,
        mesh: &CorticalMesh,
        rng: &mut R,
    ) -> Result<RoiEstimate, MneError> {
        let lambda = self
            .config
            .lambda
            .unwrap_or_else(|| self.inverse.default_lambda(self.noise_sigma, y));
        let field = self.inverse.solve(y, lambda)?;
        let count = self
            .config
            .sample_count
            .unwrap_or(mesh.vertex_count() / 10)
            .max(1);
        let points = probabilistic_sample(&field, count, rng);
        let rois = cluster_rois(&points, mesh, self.config.cutoff_mm, self.config.min_cluster_size);
        Ok(RoiEstimate { points, rois, lambda })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_leadfield(m: usize, g: usize, seed: u64) -> LeadField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        LeadField::new(DMatrix::from_fn(m, g, |_, _| rng.random_range(-1.0..1.0))).unwrap()
    }

    #[test]
    fn matches_push_through_lu_oracle() {
        let lf = random_leadfield(10, 20, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let y = DVector::from_fn(10, |_, _| rng.random_range(-1.0..1.0));
        let x = mne_solve(&lf, &y, 1.0).unwrap();
        let l = lf.matrix();
        let a = l.tr_mul(l) + DMatrix::identity(20, 20);
        let oracle = a.lu().solve(&l.tr_mul(&y)).unwrap();
        assert!((x.values - oracle).amax() < 1e-8);
    }

    #[test]
    fn orthonormal_leadfield_recovers_measurement() {
        let lf = LeadField::new(DMatrix::identity(6, 6)).unwrap();
        let y = DVector::from_vec(vec![1.0, -2.0, 0.5, 3.0, 0.0, 1.5]);
        let x = mne_solve(&lf, &y, 1e-12).unwrap();
        assert!((x.values - &y).amax() < 1e-10);
        let zero = mne_solve(&lf, &DVector::zeros(6), 1.0).unwrap();
        assert_eq!(zero.values.amax(), 0.0);
    }

    #[test]
    fn solution_minimises_regularised_objective() {
        let lf = random_leadfield(8, 15, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let y = DVector::from_fn(8, |_, _| rng.random_range(-1.0..1.0));
        let lambda = 0.3;
        let x = mne_solve(&lf, &y, lambda).unwrap().values;
        let obj = |x: &DVector<f64>| (&y - lf.matrix() * x).norm_squared() + lambda * x.norm_squared();
        let best = obj(&x);
        for _ in 0..200 {
            let d = DVector::from_fn(15, |_, _| rng.random_range(-1e-3..1e-3));
            assert!(obj(&(&x + d)) > best);
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let lf = random_leadfield(4, 5, 5);
        assert_eq!(mne_solve(&lf, &DVector::zeros(4), 0.0), Err(MneError::BadLambda(0.0)));
        assert!(matches!(
            mne_solve(&lf, &DVector::zeros(3), 1.0),
            Err(MneError::ShapeMismatch { expected: 4, found: 3 })
        ));
    }

    #[test]
    fn sampling_follows_magnitudes() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let one = AmplitudeField {
            values: DVector::from_vec(vec![0.0, 0.0, -2.0, 0.0]),
        };
        assert!(probabilistic_sample(&one, 100, &mut rng).points.iter().all(|&p| p == 2));

        let two = AmplitudeField {
            values: DVector::from_vec(vec![1.0, -3.0]),
        };
        let s = probabilistic_sample(&two, 10_000, &mut rng);
        let frac = s.points.iter().filter(|&&p| p == 1).count() as f64 / 1e4;
        assert!((frac - 0.75).abs() < 0.02, "{frac}");

        let zero = AmplitudeField {
            values: DVector::zeros(10),
        };
        let s = probabilistic_sample(&zero, 10_000, &mut rng);
        for v in 0..10 {
            let c = s.points.iter().filter(|&&p| p == v).count();
            assert!((c as f64 - 1000.0).abs() < 150.0);
        }
    }

    fn line_mesh() -> CorticalMesh {
        // Two well-separated patches of a 2 mm grid: x in [0, 4] and [64, 68].
        let mut vertices = Vec::new();
        let mut faces = Vec::new();
        for x0 in [0.0, 64.0] {
            let base = vertices.len();
            for j in 0..3 {
                for i in 0..3 {
                    vertices.push(Point3::new(x0 + 2.0 * i as f64, 2.0 * j as f64, 0.0));
                }
            }
            for j in 0..2 {
                for i in 0..2 {
                    let a = base + j * 3 + i;
                    faces.push([a, a + 1, a + 4]);
                    faces.push([a, a + 4, a + 3]);
                }
            }
        }
        CorticalMesh::new(vertices, faces).unwrap()
    }

    #[test]
    fn separated_groups_form_two_rois() {
        let mesh = line_mesh();
        let points = PointSet {
            points: vec![0, 1, 4, 4, 8, 9, 10, 13, 17, 12],
        };
        let rois = cluster_rois(&points, &mesh, 20.0, 3);
        assert_eq!(rois.len(), 2);
        for roi in &rois {
            let mean = roi.members.iter().map(|&v| mesh.vertex(v)).sum::<Point3>() / roi.members.len() as f64;
            assert!((mean - roi.centre).norm() < 1e-12);
        }
        assert_eq!(rois[0].members, vec![0, 1, 4, 4, 8]);
    }

    #[test]
    fn identical_points_form_one_roi() {
        let mesh = line_mesh();
        let rois = cluster_rois(&PointSet { points: vec![7; 5] }, &mesh, 20.0, 3);
        assert_eq!(rois.len(), 1);
        assert_eq!(rois[0].centre, mesh.vertex(7));
    }

    #[test]
    fn small_clusters_are_dropped() {
        let mesh = line_mesh();
        let rois = cluster_rois(&PointSet { points: vec![0, 1, 2, 9] }, &mesh, 20.0, 3);
        assert_eq!(rois.len(), 1);
        assert_eq!(rois[0].members, vec![0, 1, 2]);
    }

    #[test]
    fn clustering_ignores_input_order() {
        let mesh = line_mesh();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let points: Vec<usize> = (0..40).map(|_| rng.random_range(0..18)).collect();
        let base = cluster_rois(&PointSet { points: points.clone() }, &mesh, 5.0, 2);
        for _ in 0..20 {
            let mut p = points.clone();
            use rand::seq::SliceRandom;
            p.shuffle(&mut rng);
            assert_eq!(cluster_rois(&PointSet { points: p }, &mesh, 5.0, 2), base);
        }
    }
}
