use thiserror::Error;

/// Every failure the toolkit can report.
///
/// [`AcrError::kind`] gives a stable kebab-case identifier that the CLI and
/// the C interface expose to callers.
#[derive(Debug, Error)]
pub enum AcrError {
    #[error("insufficient data: need at least {needed}, got {got}")]
    InsufficientData { needed: usize, got: usize },

    #[error("degenerate model: {0}")]
    DegenerateModel(String),

    #[error("no decomposition places the points in front of both cameras")]
    CheiralityFailure,

    #[error(
        "ambiguous nullspace: smallest singular values {sigma1:e} and {sigma2:e} are not separated"
    )]
    AmbiguousNullspace { sigma1: f64, sigma2: f64 },

    #[error("degenerate direction: zero-norm vector")]
    DegenerateDirection,

    #[error("point lies behind the camera (depth {depth})")]
    BehindCamera { depth: f64 },

    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),

    #[error("executed initialization translation is zero")]
    DegenerateInit,

    #[error("no depth available for track {0}")]
    MissingDepth(u32),

    #[error("plane {0} is not present in the segment map")]
    MissingPlane(u32),

    #[error("reference graph has {h} planes but current graph only {m}; swap the inputs")]
    Orientation { h: usize, m: usize },

    #[error("exact matching would enumerate {count} assignments, over the budget of {budget}")]
    BudgetExceeded { count: u128, budget: u128 },

    #[error("pose estimation failed: {0}")]
    EstimationFailure(String),

    #[error("weighted direction sum vanishes")]
    AmbiguousDirection,

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid scene: {0}")]
    InvalidScene(String),

    #[error("no scene point is visible from the camera")]
    EmptyObservation,

    #[error("missing input: {0}")]
    MissingInput(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("malformed PGM: {0}")]
    Pgm(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl AcrError {
    pub fn kind(&self) -> &'static str {
        match self {
            AcrError::InsufficientData { .. } => "insufficient-data",
            AcrError::DegenerateModel(_) => "degenerate-model",
            AcrError::CheiralityFailure => "cheirality-failure",
            AcrError::AmbiguousNullspace { .. } => "ambiguous-nullspace",
            AcrError::DegenerateDirection => "degenerate-direction",
            AcrError::BehindCamera { .. } => "behind-camera",
            AcrError::InvalidIntrinsics(_) => "invalid-intrinsics",
            AcrError::DegenerateInit => "degenerate-init",
            AcrError::MissingDepth(_) => "missing-depth",
            AcrError::MissingPlane(_) => "missing-plane",
            AcrError::Orientation { .. } => "orientation",
            AcrError::BudgetExceeded { .. } => "budget-exceeded",
            AcrError::EstimationFailure(_) => "estimation-failure",
            AcrError::AmbiguousDirection => "ambiguous-direction",
            AcrError::InvalidInput(_) => "invalid-input",
            AcrError::InvalidScene(_) => "invalid-scene",
            AcrError::EmptyObservation => "empty-observation",
            AcrError::MissingInput(_) => "missing-input",
            AcrError::Config(_) => "config",
            AcrError::Pgm(_) => "invalid-pgm",
            AcrError::Io(_) => "io",
            AcrError::Json(_) => "parse",
        }
    }
}

pub type Result<T, E = AcrError> = std::result::Result<T, E>;
