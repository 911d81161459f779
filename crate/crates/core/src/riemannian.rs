//! Stage-2 machinery on the product of unit spheres.
//!
//! Every camera (as a 12-vector) and every homogeneous landmark lives on a
//! unit sphere. Steps are computed in the tangent space: Jacobians are
//! multiplied by an orthonormal basis `B` of `v^⊥`, the damped projected
//! system is solved, and updates are mapped back with `Δv = B Δx` before
//! renormalizing.

use nalgebra::{DMatrix, DVector, DVectorView, Vector4};
use rayon::prelude::*;
use thiserror::Error;

use crate::bal_io::{camera_from_vec, camera_to_vec, BaProblem, ProjectiveState};
use crate::normal_eq::{assemble, DampingMode, LandmarkBlock, LandmarkBlockStore, SchurSystem};
use crate::objective::{linearize_projective, DegenerateProjection};
use crate::solvers::{solve_step, SolverConfig, StepReport};

/// Allowed deviation of `‖v‖` from 1 when building a basis.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ManifoldError {
    #[error("vector norm {0} is not 1; retract before building a tangent basis")]
    NotUnit(f64),
    #[error("{kind} {index} has zero norm and cannot be retracted")]
    ZeroNorm { kind: &'static str, index: usize },
    #[error(transparent)]
    Degenerate(#[from] DegenerateProjection),
}

/// Orthonormal basis of the orthogonal complement of a unit vector.
///
/// Built from the Householder reflection `H = I - 2 w wᵀ / wᵀw` with
/// `w = v + sign(v₀) e₀`, which maps `v` to `∓e₀`; the remaining columns of
/// `H` are orthonormal and orthogonal to `v`. For `v = e₀` the basis is
/// `e₁, …, e_{n-1}`.
pub fn tangent_basis(v: DVectorView<'_, f64>) -> Result<DMatrix<f64>, ManifoldError> {
    let n = v.len();
    let norm = v.norm();
    if (norm - 1.0).abs() > UNIT_NORM_TOLERANCE {
        return Err(ManifoldError::NotUnit(norm));
    }
    let sign = if v[0] >= 0.0 { 1.0 } else { -1.0 };
    let mut w = v.into_owned();
    w[0] += sign;
    let scale = 2.0 / w.norm_squared();
    Ok(DMatrix::from_fn(n, n - 1, |r, c| {
        let col = c + 1;
        let delta = if r == col { 1.0 } else { 0.0 };
        delta - scale * w[r] * w[col]
    }))
}

/// Tangent bases at one point: 12×11 per camera, 4×3 per landmark.
#[derive(Debug, Clone, PartialEq)]
pub struct TangentBases {
    pub cameras: Vec<DMatrix<f64>>,
    pub landmarks: Vec<DMatrix<f64>>,
}

impl TangentBases {
    pub fn at(state: &ProjectiveState) -> Result<Self, ManifoldError> {
        let cameras = state
            .cameras
            .par_iter()
            .map(|c| tangent_basis(DVector::from_column_slice(camera_to_vec(c).as_slice()).column(0)))
            .collect::<Result<Vec<_>, _>>()?;
        let landmarks = state
            .landmarks
            .par_iter()
            .map(|l| tangent_basis(DVector::from_column_slice(l.as_slice()).column(0)))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { cameras, landmarks })
    }
}

/// Right-multiplies every pose Jacobian by its camera basis and every
/// landmark Jacobian by its landmark basis. Residual rows are copied.
pub fn project_blocks(blocks: &LandmarkBlockStore, bases: &TangentBases) -> LandmarkBlockStore {
    let rd = blocks.residual_dim();
    let pd = bases.cameras.first().map_or(blocks.pose_dim().saturating_sub(1), |b| b.ncols());
    let ld = bases.landmarks.first().map_or(blocks.landmark_dim().saturating_sub(1), |b| b.ncols());
    let projected = blocks
        .blocks()
        .par_iter()
        .map(|blk| {
            let j = blk.landmark();
            let mut out = LandmarkBlock::zeros(j, rd, pd, ld, blk.num_observations());
            let bl = &bases.landmarks[j];
            for (k, &cam) in blk.cameras().iter().enumerate() {
                let jp = blk.pose_jacobian(k) * &bases.cameras[cam];
                let jl = blk.landmark_jacobian(k) * bl;
                let r = blk.residual(k).into_owned();
                out.set_observation(k, cam, jp.as_slice(), jl.as_slice(), r.as_slice());
            }
            out
        })
        .collect();
    LandmarkBlockStore::new(blocks.num_cameras(), rd, pd, ld, projected)
}

/// Normalizes every camera 12-vector and every landmark to unit norm.
pub fn retract(state: &ProjectiveState) -> Result<ProjectiveState, ManifoldError> {
    let cameras = state
        .cameras
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let n = c.norm();
            if n == 0.0 || !n.is_finite() {
                Err(ManifoldError::ZeroNorm { kind: "camera", index: i })
            } else {
                Ok(c / n)
            }
        })
        .collect::<Result<_, _>>()?;
    let landmarks = state
        .landmarks
        .iter()
        .enumerate()
        .map(|(j, l)| {
            let n = l.norm();
            if n == 0.0 || !n.is_finite() {
                Err(ManifoldError::ZeroNorm { kind: "landmark", index: j })
            } else {
                Ok(l / n)
            }
        })
        .collect::<Result<_, _>>()?;
    Ok(ProjectiveState { cameras, landmarks })
}

/// Hands a Stage-1 result to Stage 2 by normalizing all parameter vectors.
/// Zero-norm cameras are left untouched; the Stage-2 cost then reports them
/// as degenerate.
pub fn lift_stage1_to_stage2(state: &ProjectiveState) -> ProjectiveState {
    let normalize4 = |l: &Vector4<f64>| {
        let n = l.norm();
        if n > 0.0 {
            l / n
        } else {
            *l
        }
    };
    ProjectiveState {
        cameras: state
            .cameras
            .iter()
            .map(|c| {
                let n = c.norm();
                if n > 0.0 {
                    c / n
                } else {
                    *c
                }
            })
            .collect(),
        landmarks: state.landmarks.iter().map(normalize4).collect(),
    }
}

/// `v + B Δx` for every camera and landmark, without retraction.
pub fn apply_tangent_step(state: &ProjectiveState, bases: &TangentBases, pose_update: &DVector<f64>, landmark_update: &DVector<f64>) -> ProjectiveState {
    let pd = bases.cameras.first().map_or(11, |b| b.ncols());
    let ld = bases.landmarks.first().map_or(3, |b| b.ncols());
    let cameras = state
        .cameras
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let delta = &bases.cameras[i] * pose_update.rows(i * pd, pd);
            let v = camera_to_vec(c) + nalgebra::SVector::<f64, 12>::from_column_slice(delta.as_slice());
            camera_from_vec(&v)
        })
        .collect();
    let landmarks = state
        .landmarks
        .iter()
        .enumerate()
        .map(|(j, l)| {
            let delta = &bases.landmarks[j] * landmark_update.rows(j * ld, ld);
            l + Vector4::from_column_slice(delta.as_slice())
        })
        .collect();
    ProjectiveState { cameras, landmarks }
}

/// One tangent-space step at a normalized state.
#[derive(Debug, Clone)]
pub struct RiemannianStep {
    pub report: StepReport,
    pub system: SchurSystem,
    /// Back-projected homogeneous updates `B Δx`, cameras then landmarks.
    pub camera_updates: Vec<DVector<f64>>,
    pub landmark_updates: Vec<DVector<f64>>,
}

/// Linearizes the reprojection error, projects onto the tangent spaces,
/// assembles with damping on both blocks and runs the configured inner
/// solver (power series for RiPoBA, PCG for RiPCG).
pub fn riemannian_step(problem: &BaProblem, state: &ProjectiveState, lambda: f64, config: &SolverConfig) -> Result<RiemannianStep, ManifoldError> {
    let bases = TangentBases::at(state)?;
    let blocks = project_blocks(&linearize_projective(state, problem)?, &bases);
    let system = assemble(&blocks, lambda, DampingMode::Both);
    let report = solve_step(&system, config);
    let camera_updates = bases
        .cameras
        .iter()
        .enumerate()
        .map(|(i, b)| b * report.pose_update.rows(i * 11, 11))
        .collect();
    let landmark_updates = bases
        .landmarks
        .iter()
        .enumerate()
        .map(|(j, b)| b * report.landmark_update.rows(j * 3, 3))
        .collect();
    Ok(RiemannianStep {
        report,
        system,
        camera_updates,
        landmark_updates,
    })
}
