use thiserror::Error;

/// Errors produced by the toolkit.
///
/// Variants split into two families that the CLI maps onto exit codes:
/// input errors (bad presets, parameters, configs) and solver refusals
/// (gates that fired, iterations that stalled).
#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown preset `{0}` (expected Robin31, Functional32 or Neumann33)")]
    UnknownPreset(String),

    #[error("missing required parameter `{0}`")]
    MissingParam(String),

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParam { name: String, reason: String },

    #[error("age grid needs at least 8 intervals, got {0}")]
    AgeGridTooCoarse(usize),

    #[error("{what} must be positive, got {value}")]
    NonPositive { what: &'static str, value: f64 },

    #[error("boundary weight nu0 must be nonnegative, got {0}")]
    NegativeRobinWeight(f64),

    #[error("diffusion coefficient must be positive, got {value} at space node {node}")]
    NonPositiveDiffusion { node: usize, value: f64 },

    #[error("singular age step matrix at age node {0}")]
    SingularStep(usize),

    #[error("power iteration stalled: residual {residual:.3e} after {iterations} iterations")]
    EigenStalled { residual: f64, iterations: usize },

    #[error("spectral radius {0:.3e} is effectively zero; no principal pair")]
    QuasiNilpotent(f64),

    #[error("spectral radius {0:.3e} is too small; birth normalization impossible")]
    NoReproduction(f64),

    #[error("left/right eigenvector pairing degenerate: |<psi,B>| = {0:.3e}")]
    DegeneratePairing(f64),

    #[error("kernel of I - Q0 has dimension {dim}, expected 1; expansion refused")]
    SimplicityGate { dim: usize },

    #[error("model is not normalized: r(Q0) = {0}")]
    NotNormalized(f64),

    #[error("bordered expansion system is singular")]
    SingularBordered,

    #[error("expansion projection inconsistent: |tau| = {0:.3e} exceeds tolerance")]
    TauResidual(f64),

    #[error("coefficient self-consistency stalled after {sweeps} sweeps (last change {diff:.3e})")]
    InnerLoopStalled { sweeps: usize, diff: f64 },

    #[error("branch truncated at eps = {eps}: {reason}")]
    BranchTruncated { eps: f64, reason: String },

    #[error("time step {dt} must equal the age step {da}")]
    TimeStepMismatch { dt: f64, da: f64 },

    #[error("renewal step ill-posed: 1 - n*w0*b reached {0:.3e}")]
    RenewalIllPosed(f64),

    #[error("transient validation failed: steady residual reached {0:.3e}")]
    ValidationFailed(f64),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for errors caused by user input (bad config, preset, bounds).
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            Error::UnknownPreset(_)
                | Error::MissingParam(_)
                | Error::InvalidParam { .. }
                | Error::AgeGridTooCoarse(_)
                | Error::NonPositive { .. }
                | Error::NegativeRobinWeight(_)
                | Error::Config(_)
                | Error::Io(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
