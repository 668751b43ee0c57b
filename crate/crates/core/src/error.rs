use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("non-finite value")]
    NonFinite,
    #[error("variable `{0}` is not bound in this context")]
    Unbound(String),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ExprError {
    #[error("column {col}: {msg}")]
    Syntax { col: usize, msg: String },
    #[error("column {col}: unknown function `{name}`")]
    UnknownFunction { col: usize, name: String },
    #[error("column {col}: unknown identifier `{name}`")]
    UnknownIdentifier { col: usize, name: String },
}

impl ExprError {
    pub fn col(&self) -> usize {
        match self {
            ExprError::Syntax { col, .. }
            | ExprError::UnknownFunction { col, .. }
            | ExprError::UnknownIdentifier { col, .. } => *col,
        }
    }
}

/// Parse and structural errors for problem files, located by line and column.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProblemError {
    #[error("{line}:{col}: syntax error: {msg}")]
    Syntax { line: usize, col: usize, msg: String },
    #[error("{line}:{col}: dimension mismatch: {msg}")]
    Dimension { line: usize, col: usize, msg: String },
    #[error("{line}:{col}: unknown function `{name}`")]
    UnknownFunction { line: usize, col: usize, name: String },
    #[error("{line}:{col}: duplicate field: {msg}")]
    Duplicate { line: usize, col: usize, msg: String },
    #[error("{line}:{col}: {msg}")]
    Invalid { line: usize, col: usize, msg: String },
    #[error("strict hyperbolicity (ordering lambda_1 < .. < lambda_k < 0 < lambda_k+1 < .. < lambda_n) violated at x={x}, t={t}: {detail}")]
    Hyperbolicity { x: f64, t: f64, detail: String },
    #[error("evaluation failed at x={x}, t={t}: {source}")]
    Eval { x: f64, t: f64, source: EvalError },
    #[error("{0}")]
    Structure(String),
}

impl ProblemError {
    pub fn code(&self) -> &'static str {
        match self {
            ProblemError::Syntax { .. } => "E_SYNTAX",
            ProblemError::Dimension { .. } => "E_DIMENSION",
            ProblemError::UnknownFunction { .. } => "E_UNKNOWN_FUNCTION",
            ProblemError::Duplicate { .. } => "E_DUPLICATE",
            ProblemError::Invalid { .. } => "E_INVALID",
            ProblemError::Hyperbolicity { .. } => "E_HYPERBOLICITY",
            ProblemError::Eval { .. } => "E_EVAL",
            ProblemError::Structure(_) => "E_STRUCTURE",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TraceError {
    #[error("characteristic of component {component} is tangent to the boundary near t={t}")]
    Tangency { component: usize, t: f64 },
    #[error("max steps ({steps}) exceeded while tracing component {component}")]
    MaxSteps { component: usize, steps: usize },
    #[error("anchor ({x}, {t}) outside the closed strip")]
    BadAnchor { x: f64, t: f64 },
    #[error("step must be positive")]
    BadStep,
    #[error("time {tau} outside the curve range [{lo}, {hi}]")]
    OutOfRange { tau: f64, lo: f64, hi: f64 },
    #[error(transparent)]
    Eval(#[from] EvalError),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SolveError {
    #[error("spec has not passed validation")]
    NotValidated,
    #[error("incompatible data: {0}")]
    Incompatible(String),
    #[error("bad grid: {0}")]
    Grid(String),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("non-finite value at x={x}, t={t} in component {component}")]
    NonFinite { x: f64, t: f64, component: usize },
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PathError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("verdict is not Holds at T={0}")]
    NotHolds(f64),
    #[error("enumeration inconclusive at T={0}")]
    Inconclusive(f64),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DeltaError {
    #[error("singular data are only supported with linear boundary laws (affine-plus-bounded form)")]
    UnsupportedBoundary,
    #[error("mollifier width {eps} is below two grid cells ({cell})")]
    UnderResolved { eps: f64, cell: f64 },
    #[error("epsilon list must be strictly decreasing with at least 3 entries")]
    BadEpsList,
    #[error("atom generation overflow (more than {0} reflections)")]
    GenerationOverflow(usize),
    #[error("crossing of components {i} and {j} is tangential at t={t}")]
    Tangency { i: usize, j: usize, t: f64 },
    #[error("spec has no singular atoms")]
    NoAtoms,
    #[error(transparent)]
    Solve(#[from] SolveError),
    #[error(transparent)]
    Path(#[from] PathError),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RegularityError {
    #[error("slab [{lo}, {hi}] lies outside the solution domain [{t0}, {t1}]")]
    SlabOutside { lo: f64, hi: f64, t0: f64, t1: f64 },
    #[error("ladder grids must have matching domains and decreasing spacing")]
    BadLadder,
    #[error(transparent)]
    Solve(#[from] SolveError),
    #[error(transparent)]
    Path(#[from] PathError),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum WaveError {
    #[error("wave speed must be a positive constant, got {0}")]
    BadSpeed(f64),
    #[error("initial displacement is not differentiable: {0}")]
    NotDifferentiable(String),
    #[error("solution is not tagged as wave-reduced")]
    NotWave,
    #[error("incompatible wave data: {0}")]
    Incompatible(String),
    #[error(transparent)]
    Problem(#[from] ProblemError),
}
