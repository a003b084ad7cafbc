//! Declarative run configuration (TOML).

use std::path::{Path, PathBuf};

use gmpf_core::eval::{Algorithm, EvalConfig, Experiment};
use gmpf_core::filter::FilterConfig;
use gmpf_core::forward::{
    desk_mesh, pick_source_vertices, synth_lead_field, DeskMeshSpec, ForwardModel, LeadField, NoiseSpec, SensorSpec,
    SourceWindow,
};
use gmpf_core::mesh::CorticalMesh;
use gmpf_core::mne::MneConfig;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Base seed; trial `r` of a multi-trial run uses `seed + r` unless
    /// `trials.seeds` lists them.
    pub seed: u64,
    pub output_dir: PathBuf,
    /// `SIR`, `MPF` or `GMPF-<l>`.
    pub algorithm: String,
    pub mesh: MeshSource,
    pub sensors: SensorSpec,
    /// Precomputed lead field (CSV); synthesised from the sensor spec when absent.
    pub leadfield: Option<PathBuf>,
    pub scenario: ScenarioConfig,
    pub filter: FilterConfig,
    pub mne: MneConfig,
    pub eval: EvalConfig,
    pub trials: TrialsConfig,
    pub sweep: Option<SweepConfig>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            output_dir: PathBuf::from("out"),
            algorithm: "GMPF-5".into(),
            mesh: MeshSource::default(),
            sensors: SensorSpec::default(),
            leadfield: None,
            scenario: ScenarioConfig::default(),
            filter: FilterConfig::default(),
            mne: MneConfig::default(),
            eval: EvalConfig::default(),
            trials: TrialsConfig::default(),
            sweep: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MeshSource {
    Desk(DeskMeshSpec),
    /// Mesh in the plain-text vertex/face format.
    File { path: PathBuf },
}

impl Default for MeshSource {
    fn default() -> Self {
        MeshSource::Desk(DeskMeshSpec::default())
    }
}

/// Scripted ground truth: which sources are active when, and how noisy the
/// recording is.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    /// Explicit source windows; when empty, `source_count` sources are
    /// placed automatically.
    pub sources: Vec<SourceWindow>,
    pub source_count: usize,
    /// Per-source `[onset, offset]` for placed sources (1-based, inclusive);
    /// missing entries are active over the whole horizon.
    pub windows: Vec<[usize; 2]>,
    pub min_separation_mm: f64,
    pub placement_seed: u64,
    pub snr: f64,
    /// Explicit noise standard deviation (fT), overriding `snr`.
    pub noise_sigma: Option<f64>,
    pub horizon: usize,
    /// Redraw each source's position within its face every step.
    pub jitter: bool,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            sources: Vec::new(),
            source_count: 3,
            windows: Vec::new(),
            min_separation_mm: 30.0,
            placement_seed: 2024,
            snr: 10.0,
            noise_sigma: None,
            horizon: 50,
            jitter: true,
        }
    }
}

impl ScenarioConfig {
    pub fn noise(&self) -> NoiseSpec {
        match self.noise_sigma {
            Some(s) => NoiseSpec::Sigma(s),
            None => NoiseSpec::Snr(self.snr),
        }
    }

    /// Number of distinct sources in the script.
    pub fn source_total(&self) -> usize {
        if self.sources.is_empty() {
            self.source_count
        } else {
            self.sources.len()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrialsConfig {
    pub count: usize,
    /// Explicit trial seeds; `seed .. seed + count` when empty.
    pub seeds: Vec<u64>,
}

impl Default for TrialsConfig {
    fn default() -> Self {
        Self {
            count: 30,
            seeds: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Particles,
    Gibbs,
    Snr,
}

impl SweepAxis {
    pub fn name(&self) -> &'static str {
        match self {
            SweepAxis::Particles => "particles",
            SweepAxis::Gibbs => "gibbs",
            SweepAxis::Snr => "snr",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub axis: SweepAxis,
    pub values: Vec<f64>,
    /// Algorithms compared at every axis value; the run's algorithm when empty.
    #[serde(default)]
    pub algorithms: Vec<String>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        // Relative paths in the file are relative to the file.
        let base = path.parent().unwrap_or(Path::new(""));
        if let MeshSource::File { path: p } = &mut cfg.mesh {
            *p = base.join(&*p);
        }
        if let Some(p) = &mut cfg.leadfield {
            *p = base.join(&*p);
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config is always representable in TOML")
    }

    pub fn algorithm(&self) -> Result<Algorithm, CliError> {
        Algorithm::parse(&self.algorithm)
            .ok_or_else(|| CliError::Config(format!("unknown algorithm {:?} (use SIR, MPF or GMPF-<l>)", self.algorithm)))
    }

    pub fn trial_seeds(&self) -> Vec<u64> {
        if self.trials.seeds.is_empty() {
            (0..self.trials.count as u64).map(|r| self.seed + r).collect()
        } else {
            self.trials.seeds.clone()
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.filter.validate()?;
        let alg = self.algorithm()?;
        if matches!(alg, Algorithm::Sir) && self.filter.known_n.is_none() {
            return Err(CliError::Config("SIR needs filter.known_n".into()));
        }
        if let MeshSource::File { path } = &self.mesh {
            if !path.exists() {
                return Err(CliError::Config(format!("mesh file {} does not exist", path.display())));
            }
        }
        if let Some(p) = &self.leadfield {
            if !p.exists() {
                return Err(CliError::Config(format!("lead field {} does not exist", p.display())));
            }
        }
        let s = &self.scenario;
        if s.horizon == 0 {
            return Err(CliError::Config("scenario.horizon must be at least 1".into()));
        }
        if s.noise_sigma.is_none() && !(s.snr > 0.0 && s.snr.is_finite()) {
            return Err(CliError::Config(format!("scenario.snr must be positive, got {}", s.snr)));
        }
        if let Some(sig) = s.noise_sigma {
            if !(sig >= 0.0 && sig.is_finite()) {
                return Err(CliError::Config(format!("scenario.noise_sigma must be non-negative, got {sig}")));
            }
        }
        if s.sources.is_empty() && s.windows.len() > s.source_count {
            return Err(CliError::Config(format!(
                "{} windows given for {} sources",
                s.windows.len(),
                s.source_count
            )));
        }
        for w in s.windows.iter().chain(s.sources.iter().map(|w| [w.onset, w.offset]).collect::<Vec<_>>().iter()) {
            if w[0] < 1 || w[0] > w[1] {
                return Err(CliError::Config(format!("bad activity window {w:?}")));
            }
        }
        if self.trials.count == 0 && self.trials.seeds.is_empty() {
            return Err(CliError::Config("trials.count must be at least 1".into()));
        }
        if self.mne.cutoff_mm <= 0.0 || self.mne.min_cluster_size == 0 {
            return Err(CliError::Config("mne.cutoff_mm and mne.min_cluster_size must be positive".into()));
        }
        if let Some(l) = self.mne.lambda {
            if l.is_nan() || l <= 0.0 {
                return Err(CliError::Config(format!("mne.lambda must be positive, got {l}")));
            }
        }
        if let Some(sw) = &self.sweep {
            if sw.values.is_empty() {
                return Err(CliError::Config("sweep.values is empty".into()));
            }
            for a in &sw.algorithms {
                Algorithm::parse(a).ok_or_else(|| CliError::Config(format!("unknown algorithm {a:?} in sweep")))?;
            }
        }
        Ok(())
    }

    /// Builds the mesh and forward model this config describes.
    pub fn build_model(&self) -> Result<(CorticalMesh, ForwardModel), CliError> {
        let mesh = match &self.mesh {
            MeshSource::Desk(spec) => desk_mesh(spec)?,
            MeshSource::File { path } => CorticalMesh::load(path)?,
        };
        let lf = match &self.leadfield {
            Some(p) => LeadField::load(p)?,
            None => {
                let (sphere, sensors) = self.sensors.build(&mesh);
                synth_lead_field(&mesh, &sensors, &sphere)?
            }
        };
        let model = ForwardModel::new(&mesh, lf)?;
        Ok((mesh, model))
    }

    /// Source windows of the scenario, placing sources automatically when
    /// none are listed.
    pub fn source_windows(&self, mesh: &CorticalMesh, model: &ForwardModel) -> Result<Vec<SourceWindow>, CliError> {
        let s = &self.scenario;
        if !s.sources.is_empty() {
            return Ok(s.sources.clone());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(s.placement_seed);
        let verts = pick_source_vertices(mesh, model.leadfield(), s.source_count, s.min_separation_mm, &mut rng)?;
        Ok(verts
            .iter()
            .enumerate()
            .map(|(i, &vertex)| {
                let [onset, offset] = s.windows.get(i).copied().unwrap_or([1, s.horizon]);
                SourceWindow {
                    vertex,
                    onset,
                    offset,
                    amplitude: 1.0,
                }
            })
            .collect())
    }

    pub fn experiment<'a>(&self, mesh: &'a CorticalMesh, model: &'a ForwardModel) -> Result<Experiment<'a>, CliError> {
        Ok(Experiment {
            mesh,
            model,
            sources: self.source_windows(mesh, model)?,
            horizon: self.scenario.horizon,
            noise: self.scenario.noise(),
            jitter: self.scenario.jitter,
            mne: self.mne,
            eval: self.eval,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml();
        let back = RunConfig::from_toml(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_toml(), text);
    }

    #[test]
    fn populated_config_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.mesh = MeshSource::File {
            path: PathBuf::from("mesh.txt"),
        };
        cfg.leadfield = Some(PathBuf::from("lf.csv"));
        cfg.filter.known_n = Some(3);
        cfg.filter.noise_sigma = Some(12.5);
        cfg.filter.number_prior = gmpf_core::dynamics::NumberPrior::RandomBirthDeath;
        cfg.mne.lambda = Some(0.3);
        cfg.scenario.windows = vec![[1, 50], [13, 50]];
        cfg.scenario.noise_sigma = Some(4.0);
        cfg.trials.seeds = vec![4, 8, 15];
        cfg.sweep = Some(SweepConfig {
            axis: SweepAxis::Particles,
            values: vec![2000.0, 5000.0],
            algorithms: vec!["SIR".into(), "GMPF-5".into()],
        });
        let back = RunConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn partial_file_takes_defaults() {
        let cfg = RunConfig::from_toml("seed = 9\n[filter]\ninitial_particles = 2000\n").unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.filter.initial_particles, 2000);
        assert_eq!(cfg.filter.min_particles, FilterConfig::default().min_particles);
        assert_eq!(cfg.scenario.horizon, 50);
        assert_eq!(cfg.trial_seeds().len(), 30);
        assert_eq!(cfg.trial_seeds()[0], 9);
    }

    #[test]
    fn parse_errors_name_the_line() {
        let err = RunConfig::from_toml("seed = 1\n[filter]\ninitial_particles = \"many\"\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 3"), "{msg}");
        assert_eq!(err.exit_code(), 1);
        assert!(RunConfig::from_toml("sed = 1\n").is_err());
    }

    #[test]
    fn validation_rejects_bad_values() {
        let mut cfg = RunConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.algorithm = "SIR".into();
        assert!(cfg.validate().is_err());
        cfg.filter.known_n = Some(3);
        assert!(cfg.validate().is_ok());
        cfg.mesh = MeshSource::File {
            path: PathBuf::from("/nonexistent/mesh.txt"),
        };
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.scenario.windows = vec![[5, 2]];
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.algorithm = "GMPF-0".into();
        assert!(cfg.validate().is_err());
    }
}
