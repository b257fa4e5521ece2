use std::path::PathBuf;

/// Errors raised by the reconstruction library.
#[derive(thiserror::Error, Debug)]
pub enum Error {
    #[error("degenerate projection: point has camera-frame depth {depth:e}")]
    DegenerateProjection { depth: f64 },
    #[error("degenerate baseline: camera centers coincide")]
    DegenerateBaseline,
    #[error("ill-conditioned triangulation: {0}")]
    IllConditioned(&'static str),
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("invalid pose: {0}")]
    InvalidPose(String),
    #[error("invalid camera view: {0}")]
    InvalidView(String),
    #[error("invalid anchor: {0}")]
    InvalidAnchor(String),
    #[error("value cannot be represented by the grid encoding: {0}")]
    Unrepresentable(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("insufficient views: track {track} has {available} observation(s)")]
    InsufficientViews { track: usize, available: usize },
    #[error("singular damped system")]
    SingularSystem,
    #[error("invalid problem: {0}")]
    InvalidProblem(String),
    #[error("start of root {root} at ({u:.2}, {v:.2}) is more than 3 px from the foreground")]
    StartOffMask { root: usize, u: f64, v: f64 },
    #[error("invalid spec: {0}")]
    InvalidSpec(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("missing input: {}", .0.display())]
    MissingInput(PathBuf),
    #[error("malformed file {}: {msg}", path.display())]
    Malformed { path: PathBuf, msg: String },
    #[error("stage `{stage}` failed on {entity}: {source}")]
    Stage {
        stage: &'static str,
        entity: String,
        #[source]
        source: Box<Error>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Wraps the error with the name of the pipeline stage and the entity it was processing.
    pub fn in_stage(self, stage: &'static str, entity: impl Into<String>) -> Self {
        Error::Stage {
            stage,
            entity: entity.into(),
            source: Box::new(self),
        }
    }

    /// Coarse classification used by the command-line front end for exit codes.
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Stage { source, .. } => source.kind(),
            Error::DegenerateProjection { .. }
            | Error::DegenerateBaseline
            | Error::IllConditioned(_)
            | Error::SingularSystem => ErrorKind::Numerical,
            Error::Io(_) | Error::MissingInput(_) => ErrorKind::Io,
            _ => ErrorKind::Validation,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Validation,
    Numerical,
    Io,
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
