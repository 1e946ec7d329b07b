use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("matrix is singular to working precision (pivot {pivot})")]
    Singular { pivot: usize },
    #[error("matrix is not positive definite (pivot {pivot} = {value:e})")]
    Indefinite { pivot: usize, value: f64 },
    #[error("all vectors were dropped during orthonormalization")]
    EmptyBasis,
    #[error("shift {shift} is not below the first deflated coarse eigenvalue {bound}")]
    ShiftOutOfRange { shift: f64, bound: f64 },
    #[error("cluster upper index {upper} exceeds the {dofs} dofs of the initial mesh")]
    ClusterTooLarge { upper: usize, dofs: usize },
    #[error("dense reference limited to {limit} dofs, pencil has {dofs}")]
    TooLarge { dofs: usize, limit: usize },
    #[error("trial subspace stagnated at iteration {iteration}")]
    Stagnation { iteration: usize },
    #[error("dense eigensolver failed: {0}")]
    EigenFailure(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
