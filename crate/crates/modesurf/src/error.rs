use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("tensor magnitude {0:.3e} below tolerance; mode is undefined")]
    NearZeroTensor(f64),
    #[error("argument out of domain: {0}")]
    DomainError(String),
    #[error("coefficient tensors are rank-deficient (rank gap {0:.3e}); no unique characteristic tensor")]
    DegenerateField(f64),
    #[error("mode value within {0:.3e} of the bifurcation value; perturb the requested mode")]
    AtBifurcation(f64),
    #[error("characteristic tensor has repeated eigenvalues; singular directions undefined")]
    DegenerateCharacteristic,
    #[error("linear solve residual {0:.3e} exceeds tolerance; point not realizable in the field")]
    NoSolution(f64),
    #[error("tensor span on the plane has rank {0} < 3")]
    NonGenericPlane(usize),
    #[error("polynomial system solver residual {0:.3e} after refinement")]
    SolverFailure(f64),
    #[error("curve tracing stalled: step collapsed below {0:.3e}")]
    TraceStall(f64),
    #[error("face curves do not assemble into closed loops: {0}")]
    AssemblyError(String),
    #[error("region boundary fails to close on the sphere: {0}")]
    NonClosedBoundary(String),
    #[error("boundary polylines disagree across a shared face: {0}")]
    SeamDetected(String),
    #[error("mesh is empty")]
    EmptyMesh,
    #[error("parse error at {path}:{line}: {msg}")]
    ParseError {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("dataset validation failed:\n{}", .0.join("\n"))]
    ValidationError(Vec<String>),
    #[error("i/o error: {0}")]
    IoError(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
