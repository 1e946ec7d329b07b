//! Interior eigenvalues of the Dirichlet Laplacian on the square and the
//! L-shaped domain with a two-level additive Schwarz preconditioned block
//! Jacobi–Davidson method on P1 finite elements.
//!
//! ```no_run
//! use schwarz_eig::{assemble, build_decomposition, build_hierarchy, solve, ClusterSpec, DomainShape, SolverConfig};
//!
//! let hier = build_hierarchy(DomainShape::Square, 3, 6).unwrap();
//! let pencil = assemble(&hier.fine);
//! let decomp = build_decomposition(&hier, 0.25).unwrap();
//! let cluster = ClusterSpec::new(99, 108).unwrap();
//! let report = solve(&hier, &pencil, &decomp, cluster, &SolverConfig::default()).unwrap();
//! println!("{:?} after {} iterations", report.values, report.iterations);
//! ```

pub mod eigensolver;
pub mod error;
pub mod fem;
pub mod linalg;
pub mod mesh;
pub mod oracle;
pub mod parallel;
pub mod schwarz;
pub mod sparse;

pub use eigensolver::{
    correction_step, initialize, residual_dual, solve, stop_norm, ClusterSpec, IterationState, SolverConfig,
    SolverReport, TraceRecord,
};
pub use error::{Error, Result};
pub use fem::{assemble, rayleigh_quotient, SparsePencil};
pub use linalg::{factorize, factorize_symmetric, FactorKind, Factorization};
pub use mesh::{
    build_decomposition, build_hierarchy, build_hierarchy_with_initial, build_mesh, Decomposition, DomainShape, Mesh,
    MeshHierarchy,
};
pub use parallel::Parallelism;
pub use schwarz::{prepare, CoarsePiece, SchwarzPreconditioner};
pub use sparse::CsrMatrix;
