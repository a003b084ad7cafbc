//! Triangulated cortical surface and its barycentric geometry.
//!
//! A [`CorticalMesh`] is the state space for dipole locations. Every location
//! is a [`SurfacePoint`]: a face index plus two barycentric coefficients
//! `(phi, varphi)` with the interpolation roles
//!
//! ```text
//! r = (1 - phi - varphi) * g3 + phi * g2 + varphi * g1
//! ```
//!
//! where `(g1, g2, g3)` are the face's vertices in file order. Face normals,
//! vertex normals, areas and the edge adjacency table are computed once at
//! construction and never change afterwards.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::Vector3;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Point3 = Vector3<f64>;

/// Maximum distance (mm) a point may sit off a face plane and still be
/// accepted by [`CorticalMesh::barycentric_coeffs`].
pub const PLANE_TOLERANCE_MM: f64 = 1e-6;

/// Slack allowed on the simplex constraints of a [`SurfacePoint`].
const SIMPLEX_SLACK: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum MeshError {
    #[error("io error reading mesh: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("face {face} references vertex {vertex}, but the mesh has {count} vertices")]
    BadIndex {
        face: usize,
        vertex: usize,
        count: usize,
    },
    #[error("face {0} is degenerate (zero area)")]
    DegenerateFace(usize),
    #[error("edge ({0}, {1}) is shared by more than two faces")]
    NonManifoldEdge(usize, usize),
    #[error("vertex {0} has no incident face")]
    IsolatedVertex(usize),
    #[error("vertex index {0} out of range")]
    NoSuchVertex(usize),
    #[error("face index {0} out of range")]
    NoSuchFace(usize),
    #[error("point is {distance:e} mm off the plane of face {face}")]
    OffPlane { face: usize, distance: f64 },
    #[error("mesh has no faces")]
    Empty,
}

/// A location on the cortical surface.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurfacePoint {
    pub face: usize,
    pub phi: f64,
    pub varphi: f64,
}

impl SurfacePoint {
    pub fn new(face: usize, phi: f64, varphi: f64) -> Self {
        Self { face, phi, varphi }
    }

    /// Weight carried by the third vertex of the face.
    pub fn third(&self) -> f64 {
        1.0 - self.phi - self.varphi
    }

    /// True when the coefficients lie on the unit simplex.
    pub fn is_valid(&self) -> bool {
        self.phi.is_finite()
            && self.varphi.is_finite()
            && self.phi >= -SIMPLEX_SLACK
            && self.varphi >= -SIMPLEX_SLACK
            && self.phi + self.varphi <= 1.0 + SIMPLEX_SLACK
    }
}

#[derive(Debug, Clone)]
pub struct CorticalMesh {
    vertices: Vec<Point3>,
    faces: Vec<[usize; 3]>,
    face_normals: Vec<Point3>,
    vertex_normals: Vec<Point3>,
    face_areas: Vec<f64>,
    cumulative_area: Vec<f64>,
    adjacency: Vec<Vec<usize>>,
    vertex_faces: Vec<Vec<usize>>,
}

impl CorticalMesh {
    /// Builds and validates a mesh. Normals, areas and adjacency are derived
    /// here; face winding decides the normal direction.
    pub fn new(vertices: Vec<Point3>, faces: Vec<[usize; 3]>) -> Result<Self, MeshError> {
        if faces.is_empty() {
            return Err(MeshError::Empty);
        }
        let count = vertices.len();
        let scale = bounding_diagonal(&vertices).max(f64::MIN_POSITIVE);
        let mut face_normals = Vec::with_capacity(faces.len());
        let mut face_areas = Vec::with_capacity(faces.len());
        for (fi, f) in faces.iter().enumerate() {
            for &v in f {
                if v >= count {
                    return Err(MeshError::BadIndex {
                        face: fi,
                        vertex: v,
                        count,
                    });
                }
            }
            let (a, b, c) = (vertices[f[0]], vertices[f[1]], vertices[f[2]]);
            let cross = (b - a).cross(&(c - a));
            let area = 0.5 * cross.norm();
            if f[0] == f[1] || f[1] == f[2] || f[0] == f[2] || area <= 1e-12 * scale * scale {
                return Err(MeshError::DegenerateFace(fi));
            }
            face_normals.push(cross / (2.0 * area));
            face_areas.push(area);
        }

        let mut edge_faces: HashMap<(usize, usize), Vec<usize>> = HashMap::new();
        let mut vertex_faces = vec![Vec::new(); count];
        for (fi, f) in faces.iter().enumerate() {
            for e in 0..3 {
                let (u, v) = (f[e], f[(e + 1) % 3]);
                let key = (u.min(v), u.max(v));
                let entry = edge_faces.entry(key).or_default();
                entry.push(fi);
                if entry.len() > 2 {
                    return Err(MeshError::NonManifoldEdge(key.0, key.1));
                }
            }
            for &v in f {
                vertex_faces[v].push(fi);
            }
        }
        let mut adjacency = vec![Vec::new(); faces.len()];
        for shared in edge_faces.values() {
            if let [a, b] = shared[..] {
                adjacency[a].push(b);
                adjacency[b].push(a);
            }
        }
        for list in &mut adjacency {
            list.sort_unstable();
            list.dedup();
        }

        let mut vertex_normals = vec![Point3::zeros(); count];
        for (fi, f) in faces.iter().enumerate() {
            for &v in f {
                vertex_normals[v] += face_normals[fi] * face_areas[fi];
            }
        }
        for n in &mut vertex_normals {
            let len = n.norm();
            if len > 0.0 {
                *n /= len;
            }
        }

        let mut acc = 0.0;
        let cumulative_area = face_areas
            .iter()
            .map(|a| {
                acc += a;
                acc
            })
            .collect();

        Ok(Self {
            vertices,
            faces,
            face_normals,
            vertex_normals,
            face_areas,
            cumulative_area,
            adjacency,
            vertex_faces,
        })
    }

    /// Reads the text mesh format: a `G F` header, `G` lines of `x y z`
    /// and `F` lines of zero-based `i j k`.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, MeshError> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, MeshError> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));

        let (hline, header) = lines.next().ok_or(MeshError::Parse {
            line: 1,
            msg: "missing `G F` header".into(),
        })?;
        let counts = parse_fields::<usize>(header, 2, hline)?;
        let (g, f) = (counts[0], counts[1]);

        let mut vertices = Vec::with_capacity(g);
        let mut faces = Vec::with_capacity(f);
        for _ in 0..g {
            let (ln, l) = lines.next().ok_or(MeshError::Parse {
                line: hline,
                msg: format!("expected {g} vertex lines"),
            })?;
            let xyz = parse_fields::<f64>(l, 3, ln)?;
            if xyz.iter().any(|c| !c.is_finite()) {
                return Err(MeshError::Parse {
                    line: ln,
                    msg: "non-finite coordinate".into(),
                });
            }
            vertices.push(Point3::new(xyz[0], xyz[1], xyz[2]));
        }
        for _ in 0..f {
            let (ln, l) = lines.next().ok_or(MeshError::Parse {
                line: hline,
                msg: format!("expected {f} face lines"),
            })?;
            let ijk = parse_fields::<usize>(l, 3, ln)?;
            faces.push([ijk[0], ijk[1], ijk[2]]);
        }
        if let Some((ln, _)) = lines.next() {
            return Err(MeshError::Parse {
                line: ln,
                msg: "trailing content after the last face".into(),
            });
        }
        Self::new(vertices, faces)
    }

    /// Serialises to the text mesh format. Coordinates round-trip exactly.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{} {}", self.vertices.len(), self.faces.len());
        for v in &self.vertices {
            let _ = writeln!(out, "{} {} {}", v.x, v.y, v.z);
        }
        for f in &self.faces {
            let _ = writeln!(out, "{} {} {}", f[0], f[1], f[2]);
        }
        out
    }

    pub fn vertex_count(&self) -> usize {
        self.vertices.len()
    }

    pub fn face_count(&self) -> usize {
        self.faces.len()
    }

    pub fn vertices(&self) -> &[Point3] {
        &self.vertices
    }

    pub fn vertex(&self, v: usize) -> Point3 {
        self.vertices[v]
    }

    pub fn faces(&self) -> &[[usize; 3]] {
        &self.faces
    }

    pub fn face(&self, f: usize) -> [usize; 3] {
        self.faces[f]
    }

    pub fn face_normal(&self, f: usize) -> Point3 {
        self.face_normals[f]
    }

    pub fn vertex_normal(&self, v: usize) -> Point3 {
        self.vertex_normals[v]
    }

    pub fn face_area(&self, f: usize) -> f64 {
        self.face_areas[f]
    }

    pub fn total_area(&self) -> f64 {
        *self.cumulative_area.last().unwrap_or(&0.0)
    }

    /// Edge-neighbouring faces, sorted ascending.
    pub fn adjacency(&self, f: usize) -> &[usize] {
        &self.adjacency[f]
    }

    pub fn incident_faces(&self, v: usize) -> &[usize] {
        &self.vertex_faces[v]
    }

    pub fn face_centroid(&self, f: usize) -> Point3 {
        let [a, b, c] = self.faces[f];
        (self.vertices[a] + self.vertices[b] + self.vertices[c]) / 3.0
    }

    /// Longest edge of a face.
    pub fn face_diameter(&self, f: usize) -> f64 {
        let [a, b, c] = self.faces[f].map(|i| self.vertices[i]);
        (a - b).norm().max((b - c).norm()).max((c - a).norm())
    }

    pub fn mean_face_diameter(&self) -> f64 {
        (0..self.faces.len())
            .map(|f| self.face_diameter(f))
            .sum::<f64>()
            / self.faces.len() as f64
    }

    /// Mean of the vertex positions.
    pub fn centroid(&self) -> Point3 {
        self.vertices.iter().sum::<Point3>() / self.vertices.len().max(1) as f64
    }

    /// Coefficients `(phi, varphi)` of `r` in `face` (see module docs for
    /// the roles). Returns [`MeshError::OffPlane`] if `r` is further than
    /// [`PLANE_TOLERANCE_MM`] from the face plane; closer points are
    /// projected orthogonally, which the normal-equation form does
    /// implicitly.
    pub fn barycentric_coeffs(&self, face: usize, r: &Point3) -> Result<(f64, f64), MeshError> {
        let [i1, i2, i3] = *self.faces.get(face).ok_or(MeshError::NoSuchFace(face))?;
        let (g1, g2, g3) = (self.vertices[i1], self.vertices[i2], self.vertices[i3]);
        let distance = (r - g3).dot(&self.face_normals[face]).abs();
        if distance > PLANE_TOLERANCE_MM {
            return Err(MeshError::OffPlane { face, distance });
        }
        barycentric_from_vertices(&g1, &g2, &g3, r).ok_or(MeshError::DegenerateFace(face))
    }

    pub fn point_from_coeffs(&self, face: usize, phi: f64, varphi: f64) -> Point3 {
        let [i1, i2, i3] = self.faces[face];
        self.vertices[i3] * (1.0 - phi - varphi)
            + self.vertices[i2] * phi
            + self.vertices[i1] * varphi
    }

    pub fn position(&self, p: &SurfacePoint) -> Point3 {
        self.point_from_coeffs(p.face, p.phi, p.varphi)
    }

    /// Incident face whose centroid is closest to the vertex; ties go to the
    /// lowest face index.
    pub fn nearest_face_for_vertex(&self, v: usize) -> Result<usize, MeshError> {
        let incident = self.vertex_faces.get(v).ok_or(MeshError::NoSuchVertex(v))?;
        let p = self.vertices[v];
        let tol = 1e-9 * self.mean_edge_hint(v);
        let mut best: Option<(usize, f64)> = None;
        for &f in incident {
            let d = (self.face_centroid(f) - p).norm();
            let better = match best {
                None => true,
                Some((bf, bd)) => d < bd - tol || ((d - bd).abs() <= tol && f < bf),
            };
            if better {
                best = Some((f, d));
            }
        }
        best.map(|(f, _)| f).ok_or(MeshError::IsolatedVertex(v))
    }

    fn mean_edge_hint(&self, v: usize) -> f64 {
        self.vertex_faces[v]
            .first()
            .map(|&f| self.face_diameter(f))
            .unwrap_or(1.0)
    }

    /// Surface point sitting exactly on vertex `v`, attached to its nearest
    /// incident face.
    pub fn vertex_surface_point(&self, v: usize) -> Result<SurfacePoint, MeshError> {
        let face = self.nearest_face_for_vertex(v)?;
        let [i1, i2, _] = self.faces[face];
        let (phi, varphi) = if v == i2 {
            (1.0, 0.0)
        } else if v == i1 {
            (0.0, 1.0)
        } else {
            (0.0, 0.0)
        };
        Ok(SurfacePoint::new(face, phi, varphi))
    }

    /// Face drawn with probability proportional to area, coefficients uniform
    /// on the simplex.
    pub fn sample_uniform_surface_point<R: Rng + ?Sized>(&self, rng: &mut R) -> SurfacePoint {
        let target = rng.random::<f64>() * self.total_area();
        let face = self
            .cumulative_area
            .partition_point(|&c| c <= target)
            .min(self.faces.len() - 1);
        let (phi, varphi) = sample_simplex(rng);
        SurfacePoint::new(face, phi, varphi)
    }

    /// Closest point to `p` on a single face, clamped to the triangle.
    pub fn closest_point_on_face(&self, face: usize, p: &Point3) -> SurfacePoint {
        let [i1, i2, i3] = self.faces[face];
        let (g1, g2, g3) = (self.vertices[i1], self.vertices[i2], self.vertices[i3]);
        let (phi, varphi) = closest_on_triangle(&g1, &g2, &g3, p);
        SurfacePoint::new(face, phi, varphi)
    }

    /// Closest point to `p` among a set of candidate faces.
    pub fn closest_surface_point<I>(&self, faces: I, p: &Point3) -> Option<SurfacePoint>
    where
        I: IntoIterator<Item = usize>,
    {
        let mut best: Option<(SurfacePoint, f64)> = None;
        for f in faces {
            let sp = self.closest_point_on_face(f, p);
            let d = (self.position(&sp) - p).norm_squared();
            if best.is_none_or(|(_, bd)| d < bd) {
                best = Some((sp, d));
            }
        }
        best.map(|(sp, _)| sp)
    }
}

fn parse_fields<T: std::str::FromStr>(line: &str, n: usize, ln: usize) -> Result<Vec<T>, MeshError> {
    let parts: Vec<&str> = line.split_whitespace().collect();
    if parts.len() != n {
        return Err(MeshError::Parse {
            line: ln,
            msg: format!("expected {n} fields, found {}", parts.len()),
        });
    }
    parts
        .iter()
        .map(|p| {
            p.parse::<T>().map_err(|_| MeshError::Parse {
                line: ln,
                msg: format!("cannot parse `{p}`"),
            })
        })
        .collect()
}

fn bounding_diagonal(vertices: &[Point3]) -> f64 {
    let mut lo = Point3::repeat(f64::INFINITY);
    let mut hi = Point3::repeat(f64::NEG_INFINITY);
    for v in vertices {
        lo = lo.inf(v);
        hi = hi.sup(v);
    }
    if vertices.is_empty() {
        0.0
    } else {
        (hi - lo).norm()
    }
}

/// Flat `nx` by `ny` vertex grid in the `z = 0` plane with spacing
/// `spacing` mm, each cell split into two triangles facing `+z`.
pub fn planar_grid(nx: usize, ny: usize, spacing: f64) -> Result<CorticalMesh, MeshError> {
    let mut vertices = Vec::with_capacity(nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            vertices.push(Point3::new(i as f64 * spacing, j as f64 * spacing, 0.0));
        }
    }
    let id = |i: usize, j: usize| j * nx + i;
    let mut faces = Vec::new();
    for j in 0..ny.saturating_sub(1) {
        for i in 0..nx.saturating_sub(1) {
            faces.push([id(i, j), id(i + 1, j), id(i + 1, j + 1)]);
            faces.push([id(i, j), id(i + 1, j + 1), id(i, j + 1)]);
        }
    }
    CorticalMesh::new(vertices, faces)
}

/// Uniform draw on the unit simplex `{phi, varphi >= 0, phi + varphi <= 1}`.
pub fn sample_simplex<R: Rng + ?Sized>(rng: &mut R) -> (f64, f64) {
    let a: f64 = rng.random();
    let b: f64 = rng.random();
    if a + b > 1.0 {
        (1.0 - a, 1.0 - b)
    } else {
        (a, b)
    }
}

/// With `alpha = g1 - g3`, `beta = g2 - g3`, `gamma = r - g3`, solves the
/// normal equations of `gamma = varphi * alpha + phi * beta`.
pub fn barycentric_from_vertices(g1: &Point3, g2: &Point3, g3: &Point3, r: &Point3) -> Option<(f64, f64)> {
    let alpha = g1 - g3;
    let beta = g2 - g3;
    let gamma = r - g3;
    let ab = alpha.dot(&beta);
    let aa = alpha.dot(&alpha);
    let bb = beta.dot(&beta);
    let ga = gamma.dot(&alpha);
    let gb = gamma.dot(&beta);
    let denom = ab * ab - aa * bb;
    if denom.abs() <= f64::EPSILON * aa * bb {
        return None;
    }
    let phi = (ab * ga - aa * gb) / denom;
    let varphi = (ab * gb - bb * ga) / denom;
    Some((phi, varphi))
}

/// Closest point on triangle `(g1, g2, g3)` to `p`, as `(phi, varphi)`.
fn closest_on_triangle(g1: &Point3, g2: &Point3, g3: &Point3, p: &Point3) -> (f64, f64) {
    if let Some((phi, varphi)) = barycentric_from_vertices(g1, g2, g3, p) {
        if phi >= 0.0 && varphi >= 0.0 && phi + varphi <= 1.0 {
            return (phi, varphi);
        }
    }
    // Outside the triangle: the answer lies on one of the edges.
    let edges = [
        ((0.0, 0.0), (1.0, 0.0)), // g3 -> g2
        ((0.0, 0.0), (0.0, 1.0)), // g3 -> g1
        ((1.0, 0.0), (0.0, 1.0)), // g2 -> g1
    ];
    let at = |c: (f64, f64)| g3 * (1.0 - c.0 - c.1) + g2 * c.0 + g1 * c.1;
    let mut best = (0.0, 0.0);
    let mut best_d = f64::INFINITY;
    for (s, e) in edges {
        let (ps, pe) = (at(s), at(e));
        let d = pe - ps;
        let t = ((p - ps).dot(&d) / d.norm_squared()).clamp(0.0, 1.0);
        let c = (s.0 + t * (e.0 - s.0), s.1 + t * (e.1 - s.1));
        let dist = (at(c) - p).norm_squared();
        if dist < best_d {
            best_d = dist;
            best = c;
        }
    }
    best
}
