use thiserror::Error;

/// Every failure the toolkit can report.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    // -- input --
    #[error("missing column `{0}`")]
    MissingColumn(String),
    #[error("row {row}: treatment arm must be 0 or 1, got `{value}`")]
    NonBinaryArm { row: usize, value: String },
    #[error("row {row}: field `{field}` is not a finite number")]
    NonFiniteValue { row: usize, field: String },
    #[error("row {row}: field `{field}` is missing")]
    MissingValue { row: usize, field: String },
    #[error("arm {arm} has {count} subjects; at least 2 are required")]
    ArmTooSmall { arm: u8, count: usize },
    #[error("malformed input: {0}")]
    Malformed(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid simulation parameters: {0}")]
    InvalidParameters(String),

    // -- numeric --
    #[error("sample has no spread; bandwidth is undefined")]
    DegenerateSample,
    #[error("no kernel mass near s = {0}")]
    EmptyNeighborhood(f64),
    #[error("surrogate supports of the two arms do not overlap")]
    NoOverlap,
    #[error("control-arm support extends beyond the treated-arm support on both sides")]
    TwoSidedD0,
    #[error("K2 = {0} is not positive")]
    DegenerateK2(f64),
    #[error("s = {0} lies outside the estimated support")]
    OutOfSupport(f64),
    #[error("linear system is singular: {0}")]
    SingularSystem(String),
    #[error("{excluded} of {total} subjects fall outside the transform support")]
    TooManyExcluded { excluded: usize, total: usize },
    #[error("primary effect is indistinguishable from zero (|z| = {z:.3})")]
    NullPrimaryEffect { z: f64 },
    #[error("design matrix is singular")]
    SingularDesign,
    #[error("marginal treatment coefficient is zero")]
    NullMarginalEffect,
    #[error("{failed} of {total} perturbation replicates failed")]
    EstimatorFailure { failed: usize, total: usize },
    #[error("fold {fold}, arm {arm}: {count} subjects is below the minimum of {min}")]
    FoldTooSmall { fold: usize, arm: u8, count: usize, min: usize },
    #[error("{failed} of {total} study replicates failed; last error: {last}")]
    StudyFailed { failed: usize, total: usize, last: String },
    #[error("calibration failed: {0}")]
    Calibration(String),

    // -- infeasible --
    #[error("target power {0} is not attainable")]
    InfeasibleTarget(f64),
    #[error("surrogate effect size must be positive, got {0}")]
    NonpositiveSurrogateEffect(f64),
    #[error("no sample size up to {max_n} reaches the lower-bound threshold {kappa}")]
    NoFeasibleN { max_n: u64, kappa: f64 },
}

/// Coarse classification used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Input,
    Numeric,
    Infeasible,
}

impl ErrorClass {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorClass::Input => 1,
            ErrorClass::Numeric => 2,
            ErrorClass::Infeasible => 3,
        }
    }
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        use Error::*;
        match self {
            MissingColumn(_)
            | NonBinaryArm { .. }
            | NonFiniteValue { .. }
            | MissingValue { .. }
            | ArmTooSmall { .. }
            | Malformed(_)
            | InvalidConfig(_)
            | InvalidParameters(_) => ErrorClass::Input,
            InfeasibleTarget(_) | NonpositiveSurrogateEffect(_) | NoFeasibleN { .. } => ErrorClass::Infeasible,
            _ => ErrorClass::Numeric,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
