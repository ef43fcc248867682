use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("grid mismatch: {0}")]
    GridMismatch(String),
    #[error("degenerate region: zero discrete measure")]
    DegenerateRegion,
    #[error("degenerate split of node [{lo}, {hi})")]
    DegenerateSplit { lo: usize, hi: usize },
    #[error("kernel evaluated on the diagonal x = y = {0}")]
    DiagonalSingularity(f64),
    #[error("quadrature did not converge: estimate {value}, error {residual}")]
    QuadratureNonConvergence { value: f64, residual: f64 },
    #[error("kernel entry ({row}, {col}): {source}")]
    KernelEntry {
        row: usize,
        col: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("power iteration did not converge; last Rayleigh quotient {rayleigh}")]
    NormNonConvergence { rayleigh: f64 },
    #[error("kernel constant calibration failed: {0}")]
    CalibrationFailure(String),
    #[error("shift coefficient exceeds size bound: |a| = {value} > {bound}")]
    ShiftCoefficient { value: f64, bound: f64 },
    #[error("unknown paraproduct family '{0}'")]
    UnknownFamily(String),
    #[error("open set covers the whole domain")]
    NoComplement,
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("property {property} violated at level {level}: {detail}")]
    InvariantViolation {
        property: String,
        level: usize,
        detail: String,
    },
    #[error("function is not in h1: cancellation {mean} exceeds tolerance")]
    NotInH1 { mean: f64 },
    #[error("denominator {value} below degeneracy floor {floor}")]
    DenominatorDegeneracy { value: f64, floor: f64 },
    #[error("contraction factor {0} is not below 1")]
    NonContraction(f64),
    #[error("usage: {0}")]
    Usage(String),
    #[error("config: {0}")]
    Config(String),
    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn param(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }

    /// True for errors caused by bad input or configuration rather than numerics.
    pub fn is_config(&self) -> bool {
        match self {
            Error::Context { source, .. } => source.is_config(),
            e => matches!(
                e,
                Error::InvalidParameter(_) | Error::Usage(_) | Error::Config(_) | Error::UnknownFamily(_)
            ),
        }
    }
}

pub trait Context<T> {
    fn context(self, what: impl FnOnce() -> String) -> Result<T>;
}

impl<T> Context<T> for Result<T> {
    fn context(self, what: impl FnOnce() -> String) -> Result<T> {
        self.map_err(|e| Error::Context {
            context: what(),
            source: Box::new(e),
        })
    }
}
