//! Initialization-free bundle adjustment.
//!
//! The pipeline is stratified:
//!
//! 1. **Stage 1** minimizes the pseudo object space error (pOSE) over
//!    projective 3×4 cameras and affine landmarks, with landmarks eliminated
//!    in closed form (variable projection). The reduced camera system is
//!    solved with a truncated power series of the inverse Schur complement
//!    ([`solvers::power_schur_solve`]).
//! 2. **Stage 2** refines the projective reconstruction with the standard
//!    reprojection error. Cameras and landmarks live on unit spheres, so the
//!    normal equations are projected onto tangent spaces
//!    ([`riemannian`]) before the same power-series solver is applied.
//! 3. An optional **metric upgrade** estimates the plane at infinity and
//!    extracts Euclidean rotations ([`metric_upgrade`]).
//!
//! Baselines (joint damping, Schur-Jacobi preconditioned CG, direct
//! factorization) share the same outer Levenberg–Marquardt loop, and
//! [`evaluation`] turns convergence traces into performance profiles.

pub mod bal_io;
pub mod evaluation;
pub mod metric_upgrade;
pub mod normal_eq;
pub mod numeric;
pub mod objective;
pub mod riemannian;
pub mod solvers;
pub mod synth;

pub use bal_io::{parse_bal, random_init, read_bal_file, write_bal, BaProblem, BalError, Observation, ProjectiveState};
pub use evaluation::{ConvergenceTrace, ProfileResult, TraceRecord};
pub use normal_eq::{assemble, DampingMode, LandmarkBlockStore, SchurSystem};
pub use objective::{PoseConfig, Stage};
pub use solvers::{lm_minimize, InnerSolver, LmOutcome, SolverConfig, SolverMode, StepReport};
