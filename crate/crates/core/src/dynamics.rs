//! Dipole state, the surface-constrained transition kernel, and the
//! birth/death dynamics of the dipole count.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mesh::{sample_simplex, CorticalMesh, Point3, SurfacePoint};

#[derive(Debug, Error, PartialEq)]
pub enum DynamicsError {
    #[error("cannot remove a dipole from an empty state")]
    EmptyState,
    #[error("transition rates must be finite and non-negative (p_b = {p_b}, p_d = {p_d})")]
    NegativeRate { p_b: f64, p_d: f64 },
}

/// One dipole: a surface location and a signed amplitude along the face normal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DipoleState {
    pub location: SurfacePoint,
    pub amplitude: f64,
}

impl DipoleState {
    pub fn new(location: SurfacePoint, amplitude: f64) -> Self {
        Self { location, amplitude }
    }
}

/// All active dipoles at one time step.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct JointState {
    pub dipoles: Vec<DipoleState>,
    pub time_index: usize,
}

impl JointState {
    pub fn new(dipoles: Vec<DipoleState>, time_index: usize) -> Self {
        Self { dipoles, time_index }
    }

    pub fn len(&self) -> usize {
        self.dipoles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dipoles.is_empty()
    }

    pub fn positions(&self, mesh: &CorticalMesh) -> Vec<Point3> {
        self.dipoles.iter().map(|d| mesh.position(&d.location)).collect()
    }
}

/// How locations move between time steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LocationMode {
    /// Anywhere on the chosen face.
    #[default]
    Continuous,
    /// Only at the corners of the chosen face (discrete grid model).
    Vertex,
}

/// Amplitude prior used for freshly initialised dipoles.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AmplitudePrior {
    pub mean: f64,
    pub std: f64,
}

impl Default for AmplitudePrior {
    fn default() -> Self {
        Self {
            mean: 1.0,
            std: 0.5,
        }
    }
}

impl AmplitudePrior {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if self.std > 0.0 {
            let z: f64 = StandardNormal.sample(rng);
            self.mean + self.std * z
        } else {
            self.mean
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransitionModel {
    /// Standard deviation of the amplitude random walk.
    pub amplitude_sigma: f64,
    pub mode: LocationMode,
}

impl Default for TransitionModel {
    fn default() -> Self {
        Self {
            amplitude_sigma: 0.1,
            mode: LocationMode::Continuous,
        }
    }
}

impl TransitionModel {
    /// One transition of a single dipole.
    ///
    /// The candidate faces are the current face and its edge neighbours,
    /// each picked with probability `1 / (F + 1)`. With `range_scale < 1` a
    /// jump to a neighbour is only accepted with probability `range_scale`,
    /// and the new coefficients are pulled toward the previous location by
    /// the same factor (on a neighbour face the anchor is the closest point
    /// to the previous position).
    pub fn propagate<R: Rng + ?Sized>(
        &self,
        x: &DipoleState,
        mesh: &CorticalMesh,
        rng: &mut R,
        range_scale: f64,
    ) -> DipoleState {
        let s = range_scale.clamp(0.0, 1.0);
        let current = x.location.face;
        let neighbours = mesh.adjacency(current);
        let pick = rng.random_range(0..=neighbours.len());
        let mut face = if pick == 0 {
            current
        } else {
            neighbours[pick - 1]
        };
        if face != current && s < 1.0 && rng.random::<f64>() >= s {
            face = current;
        }

        let location = match self.mode {
            LocationMode::Vertex => {
                let (phi, varphi) = [(0.0, 0.0), (1.0, 0.0), (0.0, 1.0)][rng.random_range(0..3)];
                SurfacePoint::new(face, phi, varphi)
            }
            LocationMode::Continuous => {
                let (u, v) = sample_simplex(rng);
                if s >= 1.0 {
                    SurfacePoint::new(face, u, v)
                } else {
                    let anchor = if face == current {
                        x.location
                    } else {
                        mesh.closest_point_on_face(face, &mesh.position(&x.location))
                    };
                    SurfacePoint::new(
                        face,
                        anchor.phi + s * (u - anchor.phi),
                        anchor.varphi + s * (v - anchor.varphi),
                    )
                }
            }
        };

        let amplitude = if self.amplitude_sigma > 0.0 {
            let z: f64 = StandardNormal.sample(rng);
            x.amplitude + self.amplitude_sigma * z
        } else {
            x.amplitude
        };
        DipoleState { location, amplitude }
    }
}

/// Probabilities of the dipole count moving up, staying, or moving down.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NumberTransition {
    pub plus: f64,
    pub zero: f64,
    pub minus: f64,
}

impl NumberTransition {
    fn normalised(plus: f64, zero: f64, minus: f64) -> Self {
        let total = plus + zero + minus;
        Self {
            plus: plus / total,
            zero: zero / total,
            minus: minus / total,
        }
    }

    /// Probability of moving by `offset` in {-1, 0, +1}.
    pub fn prob(&self, offset: i32) -> f64 {
        match offset {
            1 => self.plus,
            0 => self.zero,
            -1 => self.minus,
            _ => 0.0,
        }
    }
}

/// Mass retained on "no change" before renormalisation.
pub const STAY_MASS: f64 = 0.5;

/// Builds the count transition from birth and death rates: unnormalised
/// masses `(p_b, STAY_MASS, p_d / n_prev)`, renormalised. With no dipoles
/// the death term is zero.
pub fn number_transition_probs(n_prev: usize, p_b: f64, p_d: f64) -> Result<NumberTransition, DynamicsError> {
    if !(p_b >= 0.0 && p_d >= 0.0 && p_b.is_finite() && p_d.is_finite()) {
        return Err(DynamicsError::NegativeRate { p_b, p_d });
    }
    let minus = if n_prev == 0 { 0.0 } else { p_d / n_prev as f64 };
    Ok(NumberTransition::normalised(p_b, STAY_MASS, minus))
}

/// Prior over count changes used by the selection step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NumberPrior {
    /// Fixed probabilities, the death term zeroed (and the rest renormalised)
    /// when no dipole is active.
    Fixed { plus: f64, zero: f64, minus: f64 },
    /// `p_i ~ U(0, 1)` each step with `p_b = p_d = p_i / 2`, or `p_b = p_i`
    /// and `p_d = 0` when no dipole is active.
    RandomBirthDeath,
}

impl Default for NumberPrior {
    fn default() -> Self {
        NumberPrior::Fixed {
            plus: 0.25,
            zero: 0.5,
            minus: 0.25,
        }
    }
}

impl NumberPrior {
    pub fn transition<R: Rng + ?Sized>(&self, n_prev: usize, rng: &mut R) -> NumberTransition {
        match *self {
            NumberPrior::Fixed { plus, zero, minus } => {
                let minus = if n_prev == 0 { 0.0 } else { minus };
                NumberTransition::normalised(plus, zero, minus)
            }
            NumberPrior::RandomBirthDeath => {
                let p_i: f64 = rng.random();
                let (p_b, p_d) = if n_prev == 0 {
                    (p_i, 0.0)
                } else {
                    (p_i / 2.0, p_i / 2.0)
                };
                number_transition_probs(n_prev, p_b, p_d).expect("rates are in [0, 1]")
            }
        }
    }
}

/// Appends a dipole at a uniformly chosen grid point from `candidates`
/// (vertex indices), or anywhere on the surface when there are none.
pub fn sample_birth<R: Rng + ?Sized>(
    x: &JointState,
    candidates: &[usize],
    mesh: &CorticalMesh,
    prior: &AmplitudePrior,
    rng: &mut R,
) -> JointState {
    let location = if candidates.is_empty() {
        mesh.sample_uniform_surface_point(rng)
    } else {
        let v = candidates[rng.random_range(0..candidates.len())];
        mesh.vertex_surface_point(v)
            .unwrap_or_else(|_| mesh.sample_uniform_surface_point(rng))
    };
    let mut out = x.clone();
    out.dipoles.push(DipoleState::new(location, prior.sample(rng)));
    out
}

/// Removes one uniformly chosen dipole. Returns the new state and the index
/// that was deleted; the order of the others is preserved.
pub fn apply_death<R: Rng + ?Sized>(x: &JointState, rng: &mut R) -> Result<(JointState, usize), DynamicsError> {
    if x.is_empty() {
        return Err(DynamicsError::EmptyState);
    }
    let idx = rng.random_range(0..x.len());
    let mut out = x.clone();
    out.dipoles.remove(idx);
    Ok((out, idx))
}
