use std::fmt;

use spp_cascade::cascade::CascadeError;
use spp_cascade::dataset::DatasetError;
use spp_cascade::nncore::NnError;
use spp_cascade::physics::PhysicsError;
use spp_cascade::pipeline::PipelineError;

/// Failure categories with stable process exit codes.
#[derive(Debug)]
pub enum CliError {
    /// Bad flags, config values or incompatible inputs.
    Usage(String),
    /// Divergence or other numerical failure.
    Numerical(String),
    /// Unreadable or unwritable files, malformed input files.
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Numerical(_) => 2,
            CliError::Io(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "error: {m}"),
            CliError::Numerical(m) => write!(f, "numerical failure: {m}"),
            CliError::Io(m) => write!(f, "i/o error: {m}"),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        match e {
            DatasetError::Io(_) | DatasetError::Parse { .. } => CliError::Io(e.to_string()),
            DatasetError::TooManyFailures { .. } => CliError::Numerical(e.to_string()),
            _ => CliError::Usage(e.to_string()),
        }
    }
}

impl From<PhysicsError> for CliError {
    fn from(e: PhysicsError) -> Self {
        match e {
            PhysicsError::Table(_) => CliError::Io(e.to_string()),
            PhysicsError::Domain(_) => CliError::Usage(e.to_string()),
            _ => CliError::Numerical(e.to_string()),
        }
    }
}

impl From<CascadeError> for CliError {
    fn from(e: CascadeError) -> Self {
        match e {
            CascadeError::Nn(NnError::Io(_) | NnError::Format { .. })
            | CascadeError::Topology { .. } => CliError::Io(format!("model file: {e}")),
            CascadeError::NonFinite { .. } | CascadeError::Nn(NnError::NonFinite(_)) => {
                CliError::Numerical(e.to_string())
            }
            _ => CliError::Usage(e.to_string()),
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Config(_) => CliError::Usage(e.to_string()),
            PipelineError::Dataset(d) => d.into(),
            _ => CliError::Numerical(e.to_string()),
        }
    }
}
