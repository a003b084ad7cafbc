//! Synthetic MEG forward model.
//!
//! The lead field is the field of a current dipole in a homogeneous
//! conducting sphere (Sarvas' closed form), evaluated at every mesh vertex
//! with the dipole along the vertex normal and projected on each
//! magnetometer axis. Off-grid responses are interpolated over the face
//! holding the dipole, with each corner column scaled by the cosine between
//! the face normal and that vertex's normal.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{DipoleState, JointState};
use crate::mesh::{CorticalMesh, MeshError, Point3, SurfacePoint};

/// mu_0 / 4 pi in T m / A.
const MU0_OVER_4PI: f64 = 1e-7;
/// One unit of dipole moment, in A m (10 nAm).
const MOMENT_UNIT: f64 = 1e-8;
/// Output unit: femtotesla.
const FIELD_UNIT: f64 = 1e15;

#[derive(Debug, Error)]
pub enum ForwardError {
    #[error("sensor {0} lies inside the conductor sphere")]
    SensorInsideSphere(usize),
    #[error("lead field has a non-finite entry at ({0}, {1})")]
    NonFinite(usize, usize),
    #[error("lead-field column {0} is identically zero")]
    ZeroColumn(usize),
    #[error("lead field has {found} columns, mesh has {expected} vertices")]
    ShapeMismatch { expected: usize, found: usize },
    #[error("sensor orientation {0} is not a unit vector")]
    BadOrientation(usize),
    #[error("lead-field file, line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error("scenario needs at least one time step")]
    EmptyScenario,
    #[error("cannot place {wanted} sources at least {separation} mm apart")]
    Placement { wanted: usize, separation: f64 },
}

/// Homogeneous spherical conductor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadSphere {
    pub centre: Point3,
    pub radius: f64,
}

impl HeadSphere {
    /// Centre at the vertex centroid, radius just past the furthest vertex.
    pub fn fit(mesh: &CorticalMesh, margin_mm: f64) -> Self {
        let centre = mesh.centroid();
        let radius = mesh
            .vertices()
            .iter()
            .map(|v| (v - centre).norm())
            .fold(0.0, f64::max)
            + margin_mm;
        Self { centre, radius }
    }
}

/// Field (fT) at `sensor` of a dipole with moment `moment` (in units of
/// 10 nAm) at `source`, inside the sphere. Positions in mm.
pub fn sphere_dipole_field(sphere: &HeadSphere, source: &Point3, moment: &Point3, sensor: &Point3) -> Point3 {
    let r0 = (source - sphere.centre) * 1e-3;
    let r = (sensor - sphere.centre) * 1e-3;
    let q = moment * MOMENT_UNIT;
    let a_vec = r - r0;
    let a = a_vec.norm();
    let rn = r.norm();
    let ar = a_vec.dot(&r);
    let f = a * (rn * a + rn * rn - r0.dot(&r));
    let grad_f = r * (a * a / rn + ar / a + 2.0 * a + 2.0 * rn) - r0 * (a + 2.0 * rn + ar / a);
    let qxr0 = q.cross(&r0);
    (qxr0 * f - grad_f * qxr0.dot(&r)) * (MU0_OVER_4PI * FIELD_UNIT / (f * f))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorArray {
    pub positions: Vec<Point3>,
    pub orientations: Vec<Point3>,
}

impl SensorArray {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// `count` radial magnetometers spread evenly (Fibonacci spiral) over a
    /// spherical cap of radius `radius` about `centre`, from the top down to
    /// polar angle `max_polar_deg`.
    pub fn cap(centre: Point3, radius: f64, count: usize, max_polar_deg: f64) -> Self {
        let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
        let z_min = max_polar_deg.to_radians().cos();
        let mut positions = Vec::with_capacity(count);
        let mut orientations = Vec::with_capacity(count);
        for i in 0..count {
            let z = 1.0 - (1.0 - z_min) * (i as f64 + 0.5) / count as f64;
            let rho = (1.0 - z * z).max(0.0).sqrt();
            let theta = golden * i as f64;
            let dir = Point3::new(rho * theta.cos(), rho * theta.sin(), z);
            positions.push(centre + dir * radius);
            orientations.push(dir);
        }
        Self {
            positions,
            orientations,
        }
    }

    fn validate(&self, sphere: &HeadSphere) -> Result<(), ForwardError> {
        for (i, (p, o)) in self.positions.iter().zip(&self.orientations).enumerate() {
            if (p - sphere.centre).norm() <= sphere.radius {
                return Err(ForwardError::SensorInsideSphere(i));
            }
            if ((o.norm()) - 1.0).abs() > 1e-9 {
                return Err(ForwardError::BadOrientation(i));
            }
        }
        Ok(())
    }
}

/// `M x G` matrix of unit responses, column `v` for a dipole at vertex `v`.
#[derive(Debug, Clone, PartialEq)]
pub struct LeadField {
    matrix: DMatrix<f64>,
}

impl LeadField {
    pub fn new(matrix: DMatrix<f64>) -> Result<Self, ForwardError> {
        for (c, col) in matrix.column_iter().enumerate() {
            if let Some(r) = col.iter().position(|x| !x.is_finite()) {
                return Err(ForwardError::NonFinite(r, c));
            }
            if col.iter().all(|&x| x == 0.0) {
                return Err(ForwardError::ZeroColumn(c));
            }
        }
        Ok(Self { matrix })
    }

    pub fn sensors(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn sources(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn column(&self, v: usize) -> &[f64] {
        let m = self.matrix.nrows();
        &self.matrix.as_slice()[v * m..(v + 1) * m]
    }

    /// CSV dump: an `M,G` header then `M` rows of `G` values.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{},{}", self.sensors(), self.sources());
        for r in 0..self.sensors() {
            let row: Vec<String> = (0..self.sources())
                .map(|c| format!("{}", self.matrix[(r, c)]))
                .collect();
            let _ = writeln!(out, "{}", row.join(","));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self, ForwardError> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let parse_err = |line: usize, msg: String| ForwardError::Parse { line: line + 1, msg };
        let (hl, header) = lines.next().ok_or_else(|| parse_err(0, "empty file".into()))?;
        let dims: Vec<usize> = header
            .split(',')
            .map(|s| s.trim().parse::<usize>())
            .collect::<Result<_, _>>()
            .map_err(|_| parse_err(hl, "header must be `M,G`".into()))?;
        if dims.len() != 2 {
            return Err(parse_err(hl, "header must be `M,G`".into()));
        }
        let (m, g) = (dims[0], dims[1]);
        let mut matrix = DMatrix::zeros(m, g);
        for r in 0..m {
            let (ln, line) = lines
                .next()
                .ok_or_else(|| parse_err(hl, format!("expected {m} rows")))?;
            let vals: Vec<f64> = line
                .split(',')
                .map(|s| s.trim().parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|_| parse_err(ln, "non-numeric value".into()))?;
            if vals.len() != g {
                return Err(parse_err(ln, format!("expected {g} values, found {}", vals.len())));
            }
            for (c, v) in vals.into_iter().enumerate() {
                matrix[(r, c)] = v;
            }
        }
        Self::new(matrix)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ForwardError> {
        Self::from_csv(&std::fs::read_to_string(path)?)
    }
}

/// Analytic lead field for the mesh vertices, each dipole along its vertex
/// normal.
pub fn synth_lead_field(mesh: &CorticalMesh, sensors: &SensorArray, sphere: &HeadSphere) -> Result<LeadField, ForwardError> {
    sensors.validate(sphere)?;
    let m = sensors.len();
    let g = mesh.vertex_count();
    let mut matrix = DMatrix::zeros(m, g);
    for v in 0..g {
        let src = mesh.vertex(v);
        let q = mesh.vertex_normal(v);
        for s in 0..m {
            let b = sphere_dipole_field(sphere, &src, &q, &sensors.positions[s]);
            matrix[(s, v)] = b.dot(&sensors.orientations[s]);
        }
    }
    LeadField::new(matrix)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Measurement {
    pub values: DVector<f64>,
    pub time_index: usize,
}

/// Lead field plus the per-face interpolation data needed to evaluate
/// responses anywhere on the surface.
#[derive(Debug, Clone)]
pub struct ForwardModel {
    leadfield: LeadField,
    faces: Vec<[usize; 3]>,
    cosines: Vec<[f64; 3]>,
    grams: Vec<[[f64; 3]; 3]>,
    clamped_corners: usize,
}

impl ForwardModel {
    pub fn new(mesh: &CorticalMesh, leadfield: LeadField) -> Result<Self, ForwardError> {
        if leadfield.sources() != mesh.vertex_count() {
            return Err(ForwardError::ShapeMismatch {
                expected: mesh.vertex_count(),
                found: leadfield.sources(),
            });
        }
        let faces = mesh.faces().to_vec();
        let mut clamped = 0;
        let cosines: Vec<[f64; 3]> = faces
            .iter()
            .enumerate()
            .map(|(f, tri)| {
                let n = mesh.face_normal(f);
                tri.map(|v| {
                    let c = n.dot(&mesh.vertex_normal(v));
                    if c < 0.0 {
                        clamped += 1;
                    }
                    c.clamp(0.0, 1.0)
                })
            })
            .collect();
        if clamped > 0 {
            log::warn!("{clamped} face corners have a vertex normal facing away from the face; their responses are clamped to zero");
        }
        let grams = faces
            .iter()
            .map(|tri| {
                let mut gm = [[0.0; 3]; 3];
                for a in 0..3 {
                    for b in a..3 {
                        let d = dot(leadfield.column(tri[a]), leadfield.column(tri[b]));
                        gm[a][b] = d;
                        gm[b][a] = d;
                    }
                }
                gm
            })
            .collect();
        Ok(Self {
            leadfield,
            faces,
            cosines,
            grams,
            clamped_corners: clamped,
        })
    }

    pub fn leadfield(&self) -> &LeadField {
        &self.leadfield
    }

    pub fn sensors(&self) -> usize {
        self.leadfield.sensors()
    }

    pub fn clamped_corners(&self) -> usize {
        self.clamped_corners
    }

    pub fn face_vertices(&self, face: usize) -> [usize; 3] {
        self.faces[face]
    }

    /// Orientation-mapping factors `cos(theta)` of a face's corners.
    pub fn corner_cosines(&self, face: usize) -> [f64; 3] {
        self.cosines[face]
    }

    /// Weights on the three raw lead-field columns of `p.face`, corner order.
    pub fn corner_weights(&self, p: &SurfacePoint) -> [f64; 3] {
        let c = self.cosines[p.face];
        [p.varphi * c[0], p.phi * c[1], p.third() * c[2]]
    }

    /// Gram matrix of the raw lead-field columns at a face's corners.
    pub fn face_gram(&self, face: usize) -> &[[f64; 3]; 3] {
        &self.grams[face]
    }

    /// Unit response of a dipole at `p` along the face normal.
    pub fn unit_response(&self, p: &SurfacePoint) -> DVector<f64> {
        let mut out = DVector::zeros(self.sensors());
        self.add_response(p, 1.0, out.as_mut_slice());
        out
    }

    /// `out += amplitude * unit_response(p)`.
    pub fn add_response(&self, p: &SurfacePoint, amplitude: f64, out: &mut [f64]) {
        let w = self.corner_weights(p);
        let tri = self.faces[p.face];
        for (k, &v) in tri.iter().enumerate() {
            let scale = w[k] * amplitude;
            if scale != 0.0 {
                for (o, l) in out.iter_mut().zip(self.leadfield.column(v)) {
                    *o += scale * l;
                }
            }
        }
    }

    /// Noiseless measurement of a set of dipoles.
    pub fn predict_measurement(&self, x: &[DipoleState]) -> DVector<f64> {
        let mut out = DVector::zeros(self.sensors());
        for d in x {
            self.add_response(&d.location, d.amplitude, out.as_mut_slice());
        }
        out
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Geometry of the synthetic two-hemisphere cortex.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DeskMeshSpec {
    /// Icosphere subdivision level (4 gives 2562 vertices).
    pub subdivisions: u32,
    /// Left-right extent in mm.
    pub width_mm: f64,
    /// Relative front-back and vertical extents.
    pub aspect_y: f64,
    pub aspect_z: f64,
    /// Relative amplitude and angular frequency of the gyral folding.
    pub fold_amplitude: f64,
    pub fold_frequency: f64,
    /// Relative depth and half-width of the longitudinal fissure.
    pub fissure_depth: f64,
    pub fissure_width: f64,
}

impl Default for DeskMeshSpec {
    fn default() -> Self {
        Self {
            subdivisions: 4,
            width_mm: 136.0,
            aspect_y: 1.2,
            aspect_z: 0.9,
            fold_amplitude: 0.04,
            fold_frequency: 14.0,
            fissure_depth: 0.12,
            fissure_width: 0.1,
        }
    }
}

impl DeskMeshSpec {
    pub fn expected_counts(&self) -> (usize, usize) {
        let p = 4usize.pow(self.subdivisions);
        (10 * p + 2, 20 * p)
    }
}

/// Folded, two-hemisphere surface built by deforming an icosphere.
pub fn desk_mesh(spec: &DeskMeshSpec) -> Result<CorticalMesh, MeshError> {
    let (dirs, faces) = icosphere(spec.subdivisions);
    let w = spec.fold_frequency;
    let raw: Vec<Point3> = dirs
        .iter()
        .map(|u| {
            let fold = ((w * u.x).sin() + (w * u.y).sin() + (w * u.z).sin()) / 3.0;
            let fissure = spec.fissure_depth * (-(u.x / spec.fissure_width).powi(2)).exp();
            let r = (1.0 + spec.fold_amplitude * fold) * (1.0 - fissure);
            Point3::new(u.x * r, u.y * r * spec.aspect_y, u.z * r * spec.aspect_z)
        })
        .collect();
    let (lo, hi) = raw
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p.x), hi.max(p.x)));
    let scale = spec.width_mm / (hi - lo);
    CorticalMesh::new(raw.into_iter().map(|p| p * scale).collect(), faces)
}

fn icosphere(level: u32) -> (Vec<Point3>, Vec<[usize; 3]>) {
    use std::collections::HashMap;
    let t = (1.0 + 5f64.sqrt()) / 2.0;
    let mut verts: Vec<Point3> = [
        (-1.0, t, 0.0),
        (1.0, t, 0.0),
        (-1.0, -t, 0.0),
        (1.0, -t, 0.0),
        (0.0, -1.0, t),
        (0.0, 1.0, t),
        (0.0, -1.0, -t),
        (0.0, 1.0, -t),
        (t, 0.0, -1.0),
        (t, 0.0, 1.0),
        (-t, 0.0, -1.0),
        (-t, 0.0, 1.0),
    ]
    .iter()
    .map(|&(x, y, z)| Point3::new(x, y, z).normalize())
    .collect();
    let mut faces: Vec<[usize; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    for _ in 0..level {
        let mut mid: HashMap<(usize, usize), usize> = HashMap::new();
        let mut midpoint = |a: usize, b: usize, verts: &mut Vec<Point3>| {
            *mid.entry((a.min(b), a.max(b))).or_insert_with(|| {
                verts.push(((verts[a] + verts[b]) * 0.5).normalize());
                verts.len() - 1
            })
        };
        let mut next = Vec::with_capacity(faces.len() * 4);
        for [a, b, c] in faces {
            let ab = midpoint(a, b, &mut verts);
            let bc = midpoint(b, c, &mut verts);
            let ca = midpoint(c, a, &mut verts);
            next.extend([[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
        }
        faces = next;
    }
    (verts, faces)
}

/// Sensor layout used with the desk mesh.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SensorSpec {
    pub count: usize,
    /// Distance of the sensor shell beyond the furthest vertex, in mm.
    pub standoff_mm: f64,
    /// Lowest sensor, as a polar angle from the vertex in degrees.
    pub max_polar_deg: f64,
    /// Gap between the furthest vertex and the conductor boundary, in mm.
    pub sphere_margin_mm: f64,
}

impl Default for SensorSpec {
    fn default() -> Self {
        Self {
            count: 204,
            standoff_mm: 20.0,
            max_polar_deg: 120.0,
            sphere_margin_mm: 1.0,
        }
    }
}

impl SensorSpec {
    pub fn build(&self, mesh: &CorticalMesh) -> (HeadSphere, SensorArray) {
        let sphere = HeadSphere::fit(mesh, self.sphere_margin_mm);
        let shell = sphere.radius - self.sphere_margin_mm + self.standoff_mm;
        let sensors = SensorArray::cap(sphere.centre, shell, self.count, self.max_polar_deg);
        (sphere, sensors)
    }
}

/// Noise level of a simulated recording.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseSpec {
    /// Noise variance set so mean signal power over noise power equals this.
    Snr(f64),
    /// Explicit noise standard deviation.
    Sigma(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    /// Ground truth per step; `script[k - 1]` is step `k`.
    pub script: Vec<JointState>,
    pub noise: NoiseSpec,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedData {
    pub measurements: Vec<Measurement>,
    pub truth: Vec<JointState>,
    pub noise_sigma: f64,
}

/// Noisy measurements for a scripted ground truth. Reproducible given the
/// seed.
pub fn simulate_scenario(model: &ForwardModel, scenario: &Scenario) -> Result<SimulatedData, ForwardError> {
    if scenario.script.is_empty() {
        return Err(ForwardError::EmptyScenario);
    }
    let clean: Vec<DVector<f64>> = scenario
        .script
        .iter()
        .map(|x| model.predict_measurement(&x.dipoles))
        .collect();
    let noise_sigma = match scenario.noise {
        NoiseSpec::Sigma(s) => s,
        NoiseSpec::Snr(snr) => {
            let count = (clean.len() * model.sensors()) as f64;
            let power = clean.iter().map(|y| y.norm_squared()).sum::<f64>() / count;
            (power / snr).sqrt()
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(scenario.seed);
    let measurements = clean
        .into_iter()
        .zip(&scenario.script)
        .map(|(mut y, x)| {
            if noise_sigma > 0.0 {
                for v in y.iter_mut() {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    *v += noise_sigma * z;
                }
            }
            Measurement {
                values: y,
                time_index: x.time_index,
            }
        })
        .collect();
    Ok(SimulatedData {
        measurements,
        truth: scenario.script.clone(),
        noise_sigma,
    })
}

/// Activity window of one scripted source (steps are 1-based, inclusive).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SourceWindow {
    pub vertex: usize,
    pub onset: usize,
    pub offset: usize,
    pub amplitude: f64,
}

/// Ground truth of semi-static sources: each stays on the face nearest its
/// home vertex and, with `jitter`, is redrawn uniformly within that face
/// every step.
pub fn scripted_truth<R: Rng + ?Sized>(
    mesh: &CorticalMesh,
    sources: &[SourceWindow],
    horizon: usize,
    jitter: bool,
    rng: &mut R,
) -> Result<Vec<JointState>, ForwardError> {
    if horizon == 0 {
        return Err(ForwardError::EmptyScenario);
    }
    let homes: Vec<SurfacePoint> = sources
        .iter()
        .map(|s| mesh.vertex_surface_point(s.vertex))
        .collect::<Result<_, _>>()?;
    Ok((1..=horizon)
        .map(|k| {
            let dipoles = sources
                .iter()
                .zip(&homes)
                .filter(|(s, _)| s.onset <= k && k <= s.offset)
                .map(|(s, home)| {
                    let location = if jitter {
                        let (phi, varphi) = crate::mesh::sample_simplex(rng);
                        SurfacePoint::new(home.face, phi, varphi)
                    } else {
                        *home
                    };
                    DipoleState::new(location, s.amplitude)
                })
                .collect();
            JointState::new(dipoles, k)
        })
        .collect())
}

/// Picks well-visible, well-separated source vertices, alternating between
/// the left (`x < 0`) and right hemispheres. Candidates are vertices whose
/// lead-field column norm is in the top half.
pub fn pick_source_vertices<R: Rng + ?Sized>(
    mesh: &CorticalMesh,
    leadfield: &LeadField,
    count: usize,
    min_separation_mm: f64,
    rng: &mut R,
) -> Result<Vec<usize>, ForwardError> {
    let norms: Vec<f64> = (0..mesh.vertex_count())
        .map(|v| dot(leadfield.column(v), leadfield.column(v)).sqrt())
        .collect();
    let mut sorted = norms.clone();
    sorted.sort_by(f64::total_cmp);
    let median = sorted[sorted.len() / 2];
    let cx = mesh.centroid().x;
    let mut chosen: Vec<usize> = Vec::with_capacity(count);
    for i in 0..count {
        let left = i % 2 == 0;
        let pool: Vec<usize> = (0..mesh.vertex_count())
            .filter(|&v| norms[v] >= median && ((mesh.vertex(v).x < cx) == left))
            .filter(|&v| {
                chosen
                    .iter()
                    .all(|&c| (mesh.vertex(c) - mesh.vertex(v)).norm() >= min_separation_mm)
            })
            .collect();
        if pool.is_empty() {
            return Err(ForwardError::Placement {
                wanted: count,
                separation: min_separation_mm,
            });
        }
        chosen.push(pool[rng.random_range(0..pool.len())]);
    }
    Ok(chosen)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_setup() -> (CorticalMesh, HeadSphere, SensorArray, ForwardModel) {
        let spec = DeskMeshSpec {
            subdivisions: 2,
            ..DeskMeshSpec::default()
        };
        let mesh = desk_mesh(&spec).unwrap();
        let sspec = SensorSpec {
            count: 60,
            ..SensorSpec::default()
        };
        let (sphere, sensors) = sspec.build(&mesh);
        let lf = synth_lead_field(&mesh, &sensors, &sphere).unwrap();
        let model = ForwardModel::new(&mesh, lf).unwrap();
        (mesh, sphere, sensors, model)
    }

    #[test]
    fn desk_mesh_counts_match_generator() {
        for level in 0..=3 {
            let spec = DeskMeshSpec {
                subdivisions: level,
                ..DeskMeshSpec::default()
            };
            let mesh = desk_mesh(&spec).unwrap();
            assert_eq!((mesh.vertex_count(), mesh.face_count()), spec.expected_counts());
            let xs = mesh.vertices().iter().map(|v| v.x);
            let width = xs.clone().fold(f64::NEG_INFINITY, f64::max) - xs.fold(f64::INFINITY, f64::min);
            assert!((width - 136.0).abs() < 1e-9);
            for f in 0..mesh.face_count() {
                assert_eq!(mesh.adjacency(f).len(), 3);
            }
        }
    }

    #[test]
    fn radial_dipole_is_silent() {
        let (_, sphere, sensors, _) = small_setup();
        let top = sphere.centre + Point3::new(0.0, 0.0, 50.0);
        let radial = Point3::new(0.0, 0.0, 1.0);
        let tangential = Point3::new(1.0, 0.0, 0.0);
        let mut rad = 0.0f64;
        let mut tan = 0.0f64;
        for (p, o) in sensors.positions.iter().zip(&sensors.orientations) {
            rad = rad.max(sphere_dipole_field(&sphere, &top, &radial, p).dot(o).abs());
            tan = tan.max(sphere_dipole_field(&sphere, &top, &tangential, p).dot(o).abs());
        }
        assert!(tan > 0.0);
        assert!(rad < 1e-10 * tan, "{rad} vs {tan}");
    }

    #[test]
    fn sensor_inside_sphere_errors() {
        let (mesh, sphere, _, _) = small_setup();
        let sensors = SensorArray {
            positions: vec![sphere.centre],
            orientations: vec![Point3::new(0.0, 0.0, 1.0)],
        };
        assert!(matches!(
            synth_lead_field(&mesh, &sensors, &sphere),
            Err(ForwardError::SensorInsideSphere(0))
        ));
    }

    #[test]
    fn prediction_is_linear_and_additive() {
        let (mesh, _, _, model) = small_setup();
        let a = DipoleState::new(SurfacePoint::new(3, 0.2, 0.5), 1.0);
        let b = DipoleState::new(SurfacePoint::new(40, 0.1, 0.1), -0.4);
        assert_eq!(model.predict_measurement(&[]).norm(), 0.0);
        let ya = model.predict_measurement(&[a]);
        let a2 = DipoleState { amplitude: 2.0, ..a };
        assert!((model.predict_measurement(&[a2]) - &ya * 2.0).norm() < 1e-12 * ya.norm());
        let yb = model.predict_measurement(&[b]);
        let yab = model.predict_measurement(&[a, b]);
        assert!((yab - ya - yb).norm() < 1e-12);
        let _ = mesh;
    }

    #[test]
    fn centroid_response_is_mean_of_mapped_columns() {
        let (_, _, _, model) = small_setup();
        let f = 17;
        let [i1, i2, i3] = model.face_vertices(f);
        let c = model.corner_cosines(f);
        let lf = model.leadfield();
        let y = model.unit_response(&SurfacePoint::new(f, 1.0 / 3.0, 1.0 / 3.0));
        for s in 0..model.sensors() {
            let expected = (c[0] * lf.column(i1)[s] + c[1] * lf.column(i2)[s] + c[2] * lf.column(i3)[s]) / 3.0;
            assert!((y[s] - expected).abs() < 1e-12 * (1.0 + expected.abs()));
        }
    }

    #[test]
    fn lead_field_csv_round_trip() {
        let (_, _, _, model) = small_setup();
        let text = model.leadfield().to_csv();
        let back = LeadField::from_csv(&text).unwrap();
        assert_eq!(&back, model.leadfield());
        assert!(matches!(
            LeadField::from_csv("2,2\n1,2\n3\n"),
            Err(ForwardError::Parse { line: 3, .. })
        ));
    }

    #[test]
    fn snr_sets_noise_level() {
        let (mesh, _, _, model) = small_setup();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let srcs = pick_source_vertices(&mesh, model.leadfield(), 2, 30.0, &mut rng).unwrap();
        let windows: Vec<SourceWindow> = srcs
            .iter()
            .map(|&v| SourceWindow {
                vertex: v,
                onset: 1,
                offset: 50,
                amplitude: 1.0,
            })
            .collect();
        let script = scripted_truth(&mesh, &windows, 50, true, &mut rng).unwrap();
        let scen = Scenario {
            script: script.clone(),
            noise: NoiseSpec::Snr(10.0),
            seed: 4,
        };
        let data = simulate_scenario(&model, &scen).unwrap();
        let mut sig = 0.0;
        let mut noise = 0.0;
        for (m, x) in data.measurements.iter().zip(&script) {
            let clean = model.predict_measurement(&x.dipoles);
            sig += clean.norm_squared();
            noise += (&m.values - clean).norm_squared();
        }
        assert!((sig / noise - 10.0).abs() < 1.5);
        assert_eq!(simulate_scenario(&model, &scen).unwrap(), data);

        let quiet = Scenario {
            noise: NoiseSpec::Sigma(0.0),
            ..scen
        };
        let data = simulate_scenario(&model, &quiet).unwrap();
        for (m, x) in data.measurements.iter().zip(&script) {
            assert_eq!(m.values, model.predict_measurement(&x.dipoles));
        }
    }

    #[test]
    fn radial_sensor_columns_match_primary_field() {
        // For radial sensors the volume currents cancel and only the primary
        // dipole field remains: B_r = mu0/4pi (q x (r - r0)) . r_hat / |r - r0|^3.
        let (mesh, sphere, sensors, model) = small_setup();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..5 {
            let v = rng.random_range(0..mesh.vertex_count());
            let r0 = (mesh.vertex(v) - sphere.centre) * 1e-3;
            let q = mesh.vertex_normal(v) * 1e-8;
            for (s, p) in sensors.positions.iter().enumerate() {
                let r = (p - sphere.centre) * 1e-3;
                let d = (r - r0).norm();
                let expected = 1e-7 * q.cross(&(r - r0)).dot(&r.normalize()) / d.powi(3) * 1e15;
                let got = model.leadfield().column(v)[s];
                assert!((got - expected).abs() <= 1e-9 * expected.abs().max(1e-3), "{got} vs {expected}");
            }
        }
    }

    fn flat_model(lf: DMatrix<f64>) -> (CorticalMesh, ForwardModel) {
        let mesh = crate::mesh::planar_grid(4, 5, 7.0).unwrap();
        let model = ForwardModel::new(&mesh, LeadField::new(lf).unwrap()).unwrap();
        (mesh, model)
    }

    #[test]
    fn vertex_point_reproduces_lead_field_column() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let lf = DMatrix::from_fn(6, 20, |_, _| rng.random_range(-1.0..1.0));
        let (mesh, model) = flat_model(lf);
        for f in 0..mesh.face_count() {
            let [g1, g2, g3] = mesh.face(f);
            for (p, v) in [((0.0, 0.0), g3), ((1.0, 0.0), g2), ((0.0, 1.0), g1)] {
                let y = model.unit_response(&SurfacePoint::new(f, p.0, p.1));
                assert_eq!(y.as_slice(), model.leadfield().column(v));
                let x = DipoleState::new(SurfacePoint::new(f, p.0, p.1), 1.0);
                assert_eq!(model.predict_measurement(&[x]).as_slice(), model.leadfield().column(v));
            }
        }
    }

    #[test]
    fn affine_field_is_interpolated_exactly() {
        let mesh = crate::mesh::planar_grid(4, 5, 7.0).unwrap();
        let a = DMatrix::from_row_slice(3, 3, &[0.3, -1.2, 0.7, 2.0, 0.1, -0.4, -0.6, 0.9, 1.5]);
        let b = DVector::from_vec(vec![5.0, -3.0, 0.25]);
        let lf = DMatrix::from_fn(3, mesh.vertex_count(), |r, c| {
            let g = mesh.vertex(c);
            a[(r, 0)] * g.x + a[(r, 1)] * g.y + a[(r, 2)] * g.z + b[r]
        });
        let (_, model) = flat_model(lf);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let p = mesh.sample_uniform_surface_point(&mut rng);
            let x = mesh.position(&p);
            let expected = &a * DVector::from_column_slice(x.as_slice()) + &b;
            assert!((model.unit_response(&p) - expected).amax() < 1e-10);
        }
    }

    #[test]
    fn response_is_continuous_across_shared_edges() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let lf = DMatrix::from_fn(8, 20, |_, _| rng.random_range(-1.0..1.0));
        let (mesh, model) = flat_model(lf);
        for f in 0..mesh.face_count() {
            for &h in mesh.adjacency(f) {
                let shared: Vec<usize> = mesh.face(f).into_iter().filter(|v| mesh.face(h).contains(v)).collect();
                let t: f64 = rng.random();
                let point = mesh.vertex(shared[0]) * t + mesh.vertex(shared[1]) * (1.0 - t);
                let (p1, v1) = mesh.barycentric_coeffs(f, &point).unwrap();
                let (p2, v2) = mesh.barycentric_coeffs(h, &point).unwrap();
                let y1 = model.unit_response(&SurfacePoint::new(f, p1, v1));
                let y2 = model.unit_response(&SurfacePoint::new(h, p2, v2));
                assert!((y1 - y2).amax() < 1e-8);
            }
        }
    }

    #[test]
    fn face_gram_matches_columns() {
        let (_, _, _, model) = small_setup();
        let [a, b, _] = model.face_vertices(5);
        let g = model.face_gram(5);
        let direct = dot(model.leadfield().column(a), model.leadfield().column(b));
        assert!((g[0][1] - direct).abs() < 1e-9 * direct.abs());
        assert_eq!(g[0][1], g[1][0]);
    }
}
