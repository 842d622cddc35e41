use std::fmt;

/// Workspace-wide error type.
///
/// Numerical preconditions are checked eagerly and violations are reported
/// through these variants rather than by returning polluted results; every
/// solver in this crate either returns a solution that passed its own
/// residual checks or an `Error` saying why it could not.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// A matrix that must be symmetric is not, beyond the stated tolerance.
    NotSymmetric { context: &'static str, defect: f64 },
    /// A matrix that must be symmetric positive definite has an eigenvalue
    /// at or below the acceptance threshold.
    NotPositiveDefinite { context: &'static str, min_eig: f64 },
    /// A matrix that must be positive semidefinite has an eigenvalue below
    /// the clamp window.
    NotPsd { context: &'static str, min_eig: f64 },
    /// Operand shapes do not conform.
    DimensionMismatch {
        context: &'static str,
        expected: (usize, usize),
        got: (usize, usize),
    },
    /// A matrix that must have full column rank does not.
    RankDeficient {
        context: &'static str,
        rank: usize,
        expected: usize,
    },
    /// An input contains NaN or infinite entries.
    NonFinite { context: &'static str },
    /// An eigenvalue or sign-function iteration failed to converge.
    EigenFailure { context: &'static str },
    /// The Riccati equation has no stabilizing solution for the given data,
    /// or the computed candidate failed its residual / definiteness /
    /// closed-loop checks.
    NoStabilizingSolution { detail: String },
    /// A shifted solve `(gamma I - M) v = c` hit a (near-)singular shift:
    /// `-gamma` is an eigenvalue of `-M` to working precision.
    SingularShift { gamma: f64 },
    /// A matrix exponential overflowed the representable range.
    Overflow { context: &'static str },
    /// The state transformation matrix is numerically singular.
    SingularTransform { detail: String },
    /// A transformed quantity does not have the block structure it is
    /// required to have (beyond tolerance), or a structural precondition on
    /// problem data fails.
    StructureViolation { detail: String },
    /// A named standing assumption failed; solvers that require it refuse
    /// to run. `witness` is the numerical quantity that failed the test.
    AssumptionFailed { id: &'static str, witness: f64 },
    /// The regularization parameter is outside `(0, max]`.
    EpsilonOutOfRange { value: f64, max: f64 },
    /// The adaptive integrator's step size collapsed below 1e-14.
    StepUnderflow { t: f64, step: f64 },
    /// The integrator hit its step budget before reaching the horizon.
    StepLimitExceeded { t: f64 },
    /// The simulated state left the trust region (norm above 1e12).
    Divergence { t: f64, norm: f64 },
    /// The cost integrand is not decaying over the final decade of the
    /// simulation grid, so no exponential tail bound can be attached.
    TailNotDecaying { rate: f64 },
    /// Even after one horizon doubling the tail bound is not small relative
    /// to the integrated cost.
    HorizonTooShort { tail_ratio: f64 },
    /// A problem file could not be parsed; `field` names the offending entry.
    Parse { field: String, detail: String },
    /// An I/O failure while reading or writing artifacts.
    Io { path: String, detail: String },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::NotSymmetric { context, defect } => {
                write!(
                    f,
                    "{context}: matrix is not symmetric (relative defect {defect:.3e})"
                )
            }
            Error::NotPositiveDefinite { context, min_eig } => {
                write!(
                    f,
                    "{context}: matrix is not positive definite (min eigenvalue {min_eig:.3e})"
                )
            }
            Error::NotPsd { context, min_eig } => {
                write!(
                    f,
                    "{context}: matrix is not positive semidefinite (min eigenvalue {min_eig:.3e})"
                )
            }
            Error::DimensionMismatch {
                context,
                expected,
                got,
            } => {
                write!(
                    f,
                    "{context}: expected a {}x{} operand, got {}x{}",
                    expected.0, expected.1, got.0, got.1
                )
            }
            Error::RankDeficient {
                context,
                rank,
                expected,
            } => {
                write!(f, "{context}: rank {rank} < required {expected}")
            }
            Error::NonFinite { context } => write!(f, "{context}: non-finite entries"),
            Error::EigenFailure { context } => {
                write!(f, "eigenvalue computation failed: {context}")
            }
            Error::NoStabilizingSolution { detail } => {
                write!(f, "no stabilizing Riccati solution: {detail}")
            }
            Error::SingularShift { gamma } => {
                write!(
                    f,
                    "shifted system (gamma I - M) is singular at gamma = {gamma}"
                )
            }
            Error::Overflow { context } => write!(f, "{context}: overflow"),
            Error::SingularTransform { detail } => {
                write!(f, "singular state transformation: {detail}")
            }
            Error::StructureViolation { detail } => write!(f, "structure violation: {detail}"),
            Error::AssumptionFailed { id, witness } => {
                write!(f, "assumption {id} fails (witness {witness:.3e})")
            }
            Error::EpsilonOutOfRange { value, max } => {
                write!(f, "epsilon {value} outside (0, {max}]")
            }
            Error::StepUnderflow { t, step } => {
                write!(f, "integrator step underflow at t = {t} (step {step:.3e})")
            }
            Error::StepLimitExceeded { t } => {
                write!(f, "integrator exceeded its step budget at t = {t}")
            }
            Error::Divergence { t, norm } => {
                write!(f, "simulated state diverged at t = {t} (norm {norm:.3e})")
            }
            Error::TailNotDecaying { rate } => {
                write!(
                    f,
                    "cost integrand tail is not decaying (fitted rate {rate:.3e})"
                )
            }
            Error::HorizonTooShort { tail_ratio } => {
                write!(
                    f,
                    "horizon too short: tail bound is {tail_ratio:.3e} of the integrated cost"
                )
            }
            Error::Parse { field, detail } => write!(f, "parse error in `{field}`: {detail}"),
            Error::Io { path, detail } => write!(f, "i/o error on {path}: {detail}"),
        }
    }
}

impl std::error::Error for Error {}

pub type Result<T> = std::result::Result<T, Error>;
