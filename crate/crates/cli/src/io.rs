//! Plain-text data files exchanged between subcommands.

use std::fmt::Write as _;
use std::path::Path;

use gmpf_core::dynamics::{DipoleState, JointState};
use gmpf_core::eval::StepSummary;
use gmpf_core::filter::{EstimateRecord, StepDiagnostics};
use gmpf_core::forward::{Measurement, SourceWindow};
use gmpf_core::mesh::{CorticalMesh, Point3, SurfacePoint};
use gmpf_core::mne::RoiEstimate;
use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const MEASUREMENTS: &str = "measurements.csv";
pub const TRUTH: &str = "truth.csv";
pub const LEADFIELD: &str = "leadfield.csv";
pub const MESH: &str = "mesh.txt";
pub const SIMULATION: &str = "simulation.json";
pub const ESTIMATES: &str = "estimates.csv";
pub const STEPS: &str = "steps.csv";
pub const ROIS: &str = "rois.csv";
pub const DIAGNOSTICS: &str = "diagnostics.jsonl";
pub const METADATA: &str = "metadata.json";
pub const EFFECTIVE_CONFIG: &str = "config.toml";

const DIPOLE_HEADER: &str = "k,source,face,phi,varphi,x,y,z,amplitude";

/// Facts about a simulated recording that the data files do not carry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationInfo {
    pub seed: u64,
    pub horizon: usize,
    pub sensors: usize,
    pub noise_sigma: f64,
    pub sources: Vec<SourceWindow>,
}

pub fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    std::fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

pub fn read_file(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

fn parse_err(path: &Path, line: usize, msg: impl std::fmt::Display) -> CliError {
    CliError::Data(format!("{}:{line}: {msg}", path.display()))
}

/// Splits a numeric CSV body (after the header) into rows of fields,
/// checking the column count.
fn rows<'a>(path: &'a Path, text: &'a str, header: &str) -> Result<Vec<(usize, Vec<&'a str>)>, CliError> {
    let mut lines = text.lines().enumerate();
    let (_, first) = lines.next().ok_or_else(|| parse_err(path, 1, "empty file"))?;
    if first.trim() != header {
        return Err(parse_err(path, 1, format!("expected header {header:?}")));
    }
    let cols = header.split(',').count();
    let mut out = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != cols {
            return Err(parse_err(path, i + 1, format!("expected {cols} fields, found {}", fields.len())));
        }
        out.push((i + 1, fields));
    }
    Ok(out)
}

fn field<T: std::str::FromStr>(path: &Path, line: usize, s: &str) -> Result<T, CliError> {
    s.parse().map_err(|_| parse_err(path, line, format!("cannot parse {s:?}")))
}

pub fn measurements_csv(ms: &[Measurement]) -> String {
    let m = ms.first().map_or(0, |y| y.values.len());
    let mut out = String::from("k");
    for i in 0..m {
        let _ = write!(out, ",m{i}");
    }
    out.push('\n');
    for y in ms {
        let _ = write!(out, "{}", y.time_index);
        for v in y.values.iter() {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

pub fn read_measurements(path: &Path) -> Result<Vec<Measurement>, CliError> {
    let text = read_file(path)?;
    let header = text.lines().next().unwrap_or("").trim().to_string();
    let m = header.split(',').count().saturating_sub(1);
    if !header.starts_with('k') || m == 0 {
        return Err(parse_err(path, 1, "expected header \"k,m0,m1,...\""));
    }
    rows(path, &text, &header)?
        .into_iter()
        .map(|(line, f)| {
            let k = field(path, line, f[0])?;
            let values = f[1..].iter().map(|s| field(path, line, s)).collect::<Result<Vec<f64>, _>>()?;
            Ok(Measurement {
                values: DVector::from_vec(values),
                time_index: k,
            })
        })
        .collect()
}

fn dipole_row(out: &mut String, k: usize, i: usize, d: &EstimateRecord) {
    let _ = writeln!(
        out,
        "{k},{i},{},{},{},{},{},{},{}",
        d.face, d.phi, d.varphi, d.x, d.y, d.z, d.amplitude
    );
}

pub fn truth_csv(truth: &[JointState], mesh: &CorticalMesh) -> String {
    let mut out = format!("{DIPOLE_HEADER}\n");
    for t in truth {
        for (i, d) in t.dipoles.iter().enumerate() {
            dipole_row(&mut out, t.time_index, i, &EstimateRecord::new(d, mesh));
        }
    }
    out
}

pub fn estimates_csv(steps: &[StepDiagnostics]) -> String {
    let mut out = format!("{DIPOLE_HEADER}\n");
    for s in steps {
        for (i, d) in s.estimates.iter().enumerate() {
            dipole_row(&mut out, s.k, i, d);
        }
    }
    out
}

fn read_dipoles(path: &Path, horizon: usize) -> Result<Vec<Vec<EstimateRecord>>, CliError> {
    let text = read_file(path)?;
    let mut out = vec![Vec::new(); horizon];
    for (line, f) in rows(path, &text, DIPOLE_HEADER)? {
        let k: usize = field(path, line, f[0])?;
        if k == 0 || k > horizon {
            return Err(parse_err(path, line, format!("step {k} outside 1..={horizon}")));
        }
        out[k - 1].push(EstimateRecord {
            face: field(path, line, f[2])?,
            phi: field(path, line, f[3])?,
            varphi: field(path, line, f[4])?,
            x: field(path, line, f[5])?,
            y: field(path, line, f[6])?,
            z: field(path, line, f[7])?,
            amplitude: field(path, line, f[8])?,
        });
    }
    Ok(out)
}

pub fn read_truth(path: &Path, horizon: usize, mesh: &CorticalMesh) -> Result<Vec<JointState>, CliError> {
    read_dipoles(path, horizon)?
        .into_iter()
        .enumerate()
        .map(|(i, recs)| {
            let dipoles = recs
                .iter()
                .map(|r| {
                    let loc = SurfacePoint::new(r.face, r.phi, r.varphi);
                    if r.face >= mesh.face_count() || !loc.is_valid() {
                        return Err(CliError::Data(format!(
                            "{}: step {} has an invalid surface point",
                            path.display(),
                            i + 1
                        )));
                    }
                    Ok(DipoleState::new(loc, r.amplitude))
                })
                .collect::<Result<_, _>>()?;
            Ok(JointState::new(dipoles, i + 1))
        })
        .collect()
}

pub fn steps_csv(steps: &[StepDiagnostics]) -> String {
    let mut out = String::from("k,n_hat,particles,range_scale,roi_count,e_k\n");
    for s in steps {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            s.k,
            s.n_hat,
            s.particles,
            s.range_scale,
            s.roi_count.map_or(String::new(), |v| v.to_string()),
            s.e_k.map_or(String::new(), |v| v.to_string()),
        );
    }
    out
}

/// Reads a localisation run back into per-step summaries.
pub fn read_run(dir: &Path) -> Result<Vec<StepSummary>, CliError> {
    let path = dir.join(STEPS);
    let text = read_file(&path)?;
    let parsed = rows(&path, &text, "k,n_hat,particles,range_scale,roi_count,e_k")?;
    let estimates = read_dipoles(&dir.join(ESTIMATES), parsed.len())?;
    parsed
        .into_iter()
        .zip(estimates)
        .enumerate()
        .map(|(i, ((line, f), est))| {
            let k: usize = field(&path, line, f[0])?;
            if k != i + 1 {
                return Err(parse_err(&path, line, format!("expected step {}, found {k}", i + 1)));
            }
            let opt = |s: &str| -> Result<Option<f64>, CliError> {
                if s.is_empty() {
                    Ok(None)
                } else {
                    field(&path, line, s).map(Some)
                }
            };
            Ok(StepSummary {
                k,
                n_hat: field(&path, line, f[1])?,
                particles: field(&path, line, f[2])?,
                estimates: est.iter().map(EstimateRecord::position).collect::<Vec<Point3>>(),
                roi_count: opt(f[4])?.map(|v| v as usize),
                e_k: opt(f[5])?,
            })
        })
        .collect()
}

pub fn roi_rows(out: &mut String, k: usize, roi: &RoiEstimate) {
    for (i, r) in roi.rois.iter().enumerate() {
        let _ = writeln!(out, "{k},{i},{},{},{},{}", r.members.len(), r.centre.x, r.centre.y, r.centre.z);
    }
}

pub const ROI_HEADER: &str = "k,roi,members,x,y,z";

#[cfg(test)]
mod tests {
    use super::*;
    use gmpf_core::mesh::planar_grid;

    #[test]
    fn measurements_round_trip_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let ms: Vec<Measurement> = (1..=3)
            .map(|k| Measurement {
                values: DVector::from_vec(vec![0.1 * k as f64, -1e-17, 3.0e8 / 7.0]),
                time_index: k,
            })
            .collect();
        let path = dir.path().join(MEASUREMENTS);
        write_file(&path, &measurements_csv(&ms)).unwrap();
        assert_eq!(read_measurements(&path).unwrap(), ms);
    }

    #[test]
    fn truth_round_trips() {
        let mesh = planar_grid(4, 4, 5.0).unwrap();
        let truth = vec![
            JointState::new(vec![DipoleState::new(SurfacePoint::new(2, 0.2, 0.3), 1.0)], 1),
            JointState::new(Vec::new(), 2),
            JointState::new(
                vec![
                    DipoleState::new(SurfacePoint::new(0, 0.1, 0.1), 0.9),
                    DipoleState::new(SurfacePoint::new(5, 1.0 / 3.0, 0.5), -1.2),
                ],
                3,
            ),
        ];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(TRUTH);
        write_file(&path, &truth_csv(&truth, &mesh)).unwrap();
        assert_eq!(read_truth(&path, 3, &mesh).unwrap(), truth);
    }

    #[test]
    fn malformed_rows_report_their_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(MEASUREMENTS);
        write_file(&path, "k,m0,m1\n1,0.5,0.25\n2,0.5\n").unwrap();
        let msg = read_measurements(&path).unwrap_err().to_string();
        assert!(msg.contains(":3:"), "{msg}");
        write_file(&path, "k,m0\n1,abc\n").unwrap();
        assert!(read_measurements(&path).is_err());
    }
}
