use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid topology: {0}")]
    InvalidTopology(String),
    #[error("record {index} is outside the mesh domain: {detail}")]
    OutOfDomain { index: usize, detail: String },
    #[error("degenerate mesh: {0}")]
    DegenerateMesh(String),
    #[error("singular system: {0}")]
    SingularSystem(String),
    #[error("vertex {vertex} has non-positive depth (inverse depth {value})")]
    NonPositiveDepth { vertex: usize, value: f64 },
    #[error("face {face} crosses the camera plane")]
    BehindCamera { face: usize },
    #[error("empty input: {0}")]
    EmptyInput(String),
    #[error("no pixel is valid in both rasters")]
    NoOverlap,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },
    #[error("registration failed: {0}")]
    RegistrationFailed(String),
    #[error("invalid constraints: {0}")]
    InvalidConstraints(String),
    #[error("footprint leaves the scene: {0}")]
    OutOfScene(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("training diverged at epoch {epoch}")]
    TrainingDiverged { epoch: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Failures of a numerical routine rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::SingularSystem(_)
                | Error::NonPositiveDepth { .. }
                | Error::RegistrationFailed(_)
                | Error::TrainingDiverged { .. }
                | Error::DegenerateMesh(_)
        )
    }

    /// Short machine-readable identifier used by the command line tool.
    pub fn code(&self) -> &'static str {
        match self {
            Error::InvalidArgument(_) => "invalid-argument",
            Error::InvalidTopology(_) => "invalid-topology",
            Error::OutOfDomain { .. } => "out-of-domain",
            Error::DegenerateMesh(_) => "degenerate-mesh",
            Error::SingularSystem(_) => "singular-system",
            Error::NonPositiveDepth { .. } => "non-positive-depth",
            Error::BehindCamera { .. } => "behind-camera",
            Error::EmptyInput(_) => "empty-input",
            Error::NoOverlap => "no-overlap",
            Error::DimensionMismatch(_) => "dimension-mismatch",
            Error::Validation(_) => "validation-error",
            Error::Parse { .. } => "parse-error",
            Error::RegistrationFailed(_) => "registration-failed",
            Error::InvalidConstraints(_) => "invalid-constraints",
            Error::OutOfScene(_) => "out-of-scene",
            Error::InvalidConfig(_) => "invalid-config",
            Error::TrainingDiverged { .. } => "training-diverged",
            Error::Io(_) => "io-error",
        }
    }
}
