use std::path::Path;

use gmpf_core::eval::EvalError;
use gmpf_core::filter::FilterError;
use gmpf_core::forward::ForwardError;
use gmpf_core::mesh::MeshError;
use gmpf_core::mne::MneError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }

    pub(crate) fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Data(format!("{}: {e}", path.display()))
    }
}

impl From<FilterError> for CliError {
    fn from(e: FilterError) -> Self {
        match e {
            FilterError::Config(_) => CliError::Config(e.to_string()),
            FilterError::ShapeMismatch { .. } => CliError::Data(e.to_string()),
            FilterError::Mne(MneError::ShapeMismatch { .. }) => CliError::Data(e.to_string()),
            _ => CliError::Numerical(e.to_string()),
        }
    }
}

impl From<ForwardError> for CliError {
    fn from(e: ForwardError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<MeshError> for CliError {
    fn from(e: MeshError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Filter(f) => f.into(),
            EvalError::Forward(f) => f.into(),
            EvalError::Invalid(m) => CliError::Data(m),
        }
    }
}
