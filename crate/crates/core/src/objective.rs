//! Stage objectives: the pseudo object space error (pOSE) of Stage 1 and the
//! projective reprojection error of Stage 2.
//!
//! Cameras are 3×4 matrices vectorized row-major (see
//! [`camera_to_vec`](crate::bal_io::camera_to_vec)). Stage-1 landmarks keep
//! their homogeneous coordinate at 1 and are parametrized by the three free
//! coordinates; Stage-2 landmarks are full homogeneous 4-vectors.

use nalgebra::{DMatrix, DVector, Matrix2x3, Matrix2x4, Matrix3x4, Matrix4x3, SMatrix, Vector2, Vector3, Vector4};
use rayon::prelude::*;
use thiserror::Error;

use crate::bal_io::{BaProblem, ProjectiveState};
use crate::normal_eq::{LandmarkBlock, LandmarkBlockStore};
use crate::numeric::pairwise_sum;

/// Guard on the projective depth below which `π` is considered undefined.
pub const DEPTH_EPSILON: f64 = 1e-12;

/// Singular values below this fraction of the largest are treated as zero in
/// the closed-form landmark solve.
pub const LANDMARK_RANK_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Error)]
#[error("projective depth {depth:e} too close to zero")]
pub struct DegenerateProjection {
    pub depth: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Error)]
#[error("pOSE weight eta = {0} outside [0, 1]")]
pub struct InvalidEta(pub f64);

/// pOSE trade-off between the object space error (`eta = 0`) and the affine
/// error (`eta = 1`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseConfig {
    eta: f64,
}

impl PoseConfig {
    pub fn new(eta: f64) -> Result<Self, InvalidEta> {
        if (0.0..=1.0).contains(&eta) {
            Ok(Self { eta })
        } else {
            Err(InvalidEta(eta))
        }
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    fn weights(&self) -> (f64, f64) {
        ((1.0 - self.eta).sqrt(), self.eta.sqrt())
    }
}

impl Default for PoseConfig {
    fn default() -> Self {
        Self { eta: 0.1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stage {
    /// Stage 1: pOSE with landmarks fixed to `w = 1`.
    PseudoObjectSpace,
    /// Stage 2: reprojection error on unit-norm homogeneous parameters.
    Projective,
}

impl Stage {
    pub fn label(&self) -> &'static str {
        match self {
            Stage::PseudoObjectSpace => "stage1",
            Stage::Projective => "stage2",
        }
    }
}

/// Stage-1 residual
/// `[√(1-η) (P₁₂ x − (P₃ x) m) ; √η (P₁₂ x − m)]`.
pub fn pose_residual(camera: &Matrix3x4<f64>, landmark: &Vector4<f64>, measurement: &Vector2<f64>, config: &PoseConfig) -> Vector4<f64> {
    let (a, b) = config.weights();
    let q = camera * landmark;
    let proj = q.xy();
    let ose = (proj - measurement * q.z) * a;
    let affine = (proj - measurement) * b;
    Vector4::new(ose.x, ose.y, affine.x, affine.y)
}

/// Analytic Jacobians of [`pose_residual`] with respect to the vectorized
/// camera (4×12) and the three free landmark coordinates (4×3).
pub fn pose_jacobians(
    camera: &Matrix3x4<f64>,
    landmark: &Vector4<f64>,
    measurement: &Vector2<f64>,
    config: &PoseConfig,
) -> (SMatrix<f64, 4, 12>, Matrix4x3<f64>) {
    let (a, b) = config.weights();
    let (mx, my) = (measurement.x, measurement.y);
    let mut jp = SMatrix::<f64, 4, 12>::zeros();
    for c in 0..4 {
        let x = landmark[c];
        jp[(0, c)] = a * x;
        jp[(0, 8 + c)] = -a * mx * x;
        jp[(1, 4 + c)] = a * x;
        jp[(1, 8 + c)] = -a * my * x;
        jp[(2, c)] = b * x;
        jp[(3, 4 + c)] = b * x;
    }
    let mut jl = Matrix4x3::zeros();
    for c in 0..3 {
        let (p0, p1, p2) = (camera[(0, c)], camera[(1, c)], camera[(2, c)]);
        jl[(0, c)] = a * (p0 - mx * p2);
        jl[(1, c)] = a * (p1 - my * p2);
        jl[(2, c)] = b * p0;
        jl[(3, c)] = b * p1;
    }
    (jp, jl)
}

/// Result of [`solve_landmarks`].
#[derive(Debug, Clone)]
pub struct LandmarkSolve {
    pub landmarks: Vec<Vector4<f64>>,
    /// Landmarks whose stacked system was rank deficient; they keep their
    /// previous value.
    pub degenerate: Vec<usize>,
}

/// Closed-form Stage-1 landmarks for fixed cameras.
///
/// Each landmark's residuals are affine in its free coordinates, `r = G x - z`,
/// so the optimum is `G⁺ z`, computed by SVD with singular values below
/// [`LANDMARK_RANK_TOLERANCE`] relative to the largest one discarded.
pub fn solve_landmarks(state: &ProjectiveState, problem: &BaProblem, config: &PoseConfig) -> LandmarkSolve {
    let results: Vec<Option<Vector4<f64>>> = (0..problem.num_landmarks())
        .into_par_iter()
        .map(|j| solve_one_landmark(state, problem, config, j))
        .collect();
    let mut degenerate = Vec::new();
    let landmarks = results
        .into_iter()
        .enumerate()
        .map(|(j, sol)| match sol {
            Some(x) => x,
            None => {
                degenerate.push(j);
                state.landmarks[j]
            }
        })
        .collect();
    if !degenerate.is_empty() {
        log::warn!("{} landmark systems rank deficient, left unchanged", degenerate.len());
    }
    LandmarkSolve { landmarks, degenerate }
}

fn solve_one_landmark(state: &ProjectiveState, problem: &BaProblem, config: &PoseConfig, j: usize) -> Option<Vector4<f64>> {
    let track = problem.track(j);
    if track.is_empty() {
        return None;
    }
    let origin = Vector4::new(0.0, 0.0, 0.0, 1.0);
    let mut g = DMatrix::zeros(4 * track.len(), 3);
    let mut z = DVector::zeros(4 * track.len());
    for (k, &o) in track.iter().enumerate() {
        let obs = &problem.observations()[o];
        let camera = &state.cameras[obs.camera_index];
        let (_, jl) = pose_jacobians(camera, &origin, &obs.measurement, config);
        g.fixed_view_mut::<4, 3>(4 * k, 0).copy_from(&jl);
        z.fixed_rows_mut::<4>(4 * k)
            .copy_from(&(-pose_residual(camera, &origin, &obs.measurement, config)));
    }
    let svd = g.svd(true, true);
    let sigma_max = svd.singular_values.max();
    let cutoff = LANDMARK_RANK_TOLERANCE * sigma_max;
    if sigma_max <= 0.0 || svd.singular_values.iter().any(|&s| s <= cutoff) {
        return None;
    }
    let x = svd.solve(&z, cutoff).ok()?;
    Some(Vector4::new(x[0], x[1], x[2], 1.0))
}

/// Stage-2 residual `π(P x) - m`.
pub fn projective_residual(
    camera: &Matrix3x4<f64>,
    landmark: &Vector4<f64>,
    measurement: &Vector2<f64>,
) -> Result<Vector2<f64>, DegenerateProjection> {
    let q = camera * landmark;
    if q.z.abs() <= DEPTH_EPSILON {
        return Err(DegenerateProjection { depth: q.z });
    }
    Ok(q.xy() / q.z - measurement)
}

/// Jacobians of [`projective_residual`] with respect to the vectorized
/// camera (2×12) and the homogeneous landmark (2×4).
pub fn projective_jacobians(
    camera: &Matrix3x4<f64>,
    landmark: &Vector4<f64>,
    measurement: &Vector2<f64>,
) -> Result<(SMatrix<f64, 2, 12>, Matrix2x4<f64>), DegenerateProjection> {
    let _ = measurement;
    let q: Vector3<f64> = camera * landmark;
    if q.z.abs() <= DEPTH_EPSILON {
        return Err(DegenerateProjection { depth: q.z });
    }
    let iz = 1.0 / q.z;
    let dpi = Matrix2x3::new(iz, 0.0, -q.x * iz * iz, 0.0, iz, -q.y * iz * iz);
    let mut jp = SMatrix::<f64, 2, 12>::zeros();
    for r in 0..3 {
        for c in 0..4 {
            jp.set_column(4 * r + c, &(dpi.column(r) * landmark[c]));
        }
    }
    Ok((jp, dpi * camera))
}

/// Sum of squared residual norms over all observations. Stage-2 cost is
/// `+∞` as soon as one projection is degenerate.
pub fn total_cost(state: &ProjectiveState, problem: &BaProblem, stage: Stage, config: &PoseConfig) -> f64 {
    let terms: Vec<f64> = problem
        .observations()
        .par_iter()
        .map(|obs| {
            let camera = &state.cameras[obs.camera_index];
            let landmark = &state.landmarks[obs.landmark_index];
            match stage {
                Stage::PseudoObjectSpace => pose_residual(camera, landmark, &obs.measurement, config).norm_squared(),
                Stage::Projective => projective_residual(camera, landmark, &obs.measurement)
                    .map(|r| r.norm_squared())
                    .unwrap_or(f64::INFINITY),
            }
        })
        .collect();
    pairwise_sum(&terms)
}

/// Stage-1 linearization in dense landmark blocks (4 rows per observation,
/// 12 pose columns, 3 landmark columns).
pub fn linearize_pose(state: &ProjectiveState, problem: &BaProblem, config: &PoseConfig) -> LandmarkBlockStore {
    let blocks = (0..problem.num_landmarks())
        .into_par_iter()
        .map(|j| {
            let track = problem.track(j);
            let mut block = LandmarkBlock::zeros(j, 4, 12, 3, track.len());
            for (k, &o) in track.iter().enumerate() {
                let obs = &problem.observations()[o];
                let camera = &state.cameras[obs.camera_index];
                let landmark = &state.landmarks[j];
                let (jp, jl) = pose_jacobians(camera, landmark, &obs.measurement, config);
                let r = pose_residual(camera, landmark, &obs.measurement, config);
                block.set_observation(k, obs.camera_index, jp.as_slice(), jl.as_slice(), r.as_slice());
            }
            block
        })
        .collect();
    LandmarkBlockStore::new(problem.num_cameras(), 4, 12, 3, blocks)
}

/// Stage-2 linearization (2 rows per observation, 12 pose columns, 4
/// landmark columns), before tangent-space projection.
pub fn linearize_projective(state: &ProjectiveState, problem: &BaProblem) -> Result<LandmarkBlockStore, DegenerateProjection> {
    let blocks = (0..problem.num_landmarks())
        .into_par_iter()
        .map(|j| {
            let track = problem.track(j);
            let mut block = LandmarkBlock::zeros(j, 2, 12, 4, track.len());
            for (k, &o) in track.iter().enumerate() {
                let obs = &problem.observations()[o];
                let camera = &state.cameras[obs.camera_index];
                let landmark = &state.landmarks[j];
                let (jp, jl) = projective_jacobians(camera, landmark, &obs.measurement)?;
                let r = projective_residual(camera, landmark, &obs.measurement)?;
                block.set_observation(k, obs.camera_index, jp.as_slice(), jl.as_slice(), r.as_slice());
            }
            Ok(block)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(LandmarkBlockStore::new(problem.num_cameras(), 2, 12, 4, blocks))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bal_io::{camera_from_vec, camera_to_vec, Observation};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_camera(rng: &mut ChaCha8Rng) -> Matrix3x4<f64> {
        Matrix3x4::from_fn(|_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn pose_residual_hand_example() {
        let cam = Matrix3x4::new(1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0);
        let x = Vector4::new(1.0, 2.0, 4.0, 1.0);
        let m = Vector2::new(0.25, 0.5);
        let r = pose_residual(&cam, &x, &m, &PoseConfig::new(0.1).unwrap());
        let s = 0.1f64.sqrt();
        let expected = Vector4::new(0.0, 0.0, s * 0.75, s * 1.5);
        assert!((r - expected).norm() < 1e-15);
    }

    #[test]
    fn pose_residual_consistency_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cam = rand_camera(&mut rng);
        let x = Vector4::new(0.3, -0.1, 0.7, 1.0);
        let q = cam * x;
        // object space consistency: m = P12 x / P3 x, eta = 0
        let m = q.xy() / q.z;
        assert!(pose_residual(&cam, &x, &m, &PoseConfig::new(0.0).unwrap()).norm() < 1e-14);
        // affine consistency: m = P12 x, eta = 1
        let m = q.xy();
        assert!(pose_residual(&cam, &x, &m, &PoseConfig::new(1.0).unwrap()).norm() < 1e-14);
    }

    #[test]
    fn eta_outside_unit_interval_is_rejected() {
        assert!(PoseConfig::new(-0.1).is_err());
        assert!(PoseConfig::new(1.5).is_err());
        assert_eq!(PoseConfig::default().eta(), 0.1);
    }

    #[test]
    fn pose_jacobians_are_value_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = PoseConfig::default();
        let cam = rand_camera(&mut rng);
        let m = Vector2::new(0.4, -0.2);
        let (jp_a, jl_a) = pose_jacobians(&cam, &Vector4::new(1.0, 2.0, 3.0, 1.0), &m, &cfg);
        let (jp_b, jl_b) = pose_jacobians(&cam, &Vector4::new(-4.0, 0.5, 9.0, 1.0), &m, &cfg);
        assert_eq!(jl_a, jl_b);
        assert_ne!(jp_a, jp_b);
        let x = Vector4::new(1.0, 2.0, 3.0, 1.0);
        let (jp_c, _) = pose_jacobians(&rand_camera(&mut rng), &x, &m, &cfg);
        assert_eq!(jp_a, jp_c);
    }

    #[test]
    fn zero_landmark_zero_camera_jacobians() {
        let cfg = PoseConfig::default();
        let (jp, jl) = pose_jacobians(&Matrix3x4::zeros(), &Vector4::new(0.0, 0.0, 0.0, 1.0), &Vector2::new(0.3, 0.6), &cfg);
        assert_eq!(jl, Matrix4x3::zeros());
        // only columns multiplying the homogeneous 1 survive
        for c in 0..12 {
            if c % 4 != 3 {
                assert!(jp.column(c).iter().all(|&v| v == 0.0));
            }
        }
        assert!(jp.column(3).norm() > 0.0);
    }

    #[test]
    fn projective_residual_examples() {
        // P x = (2, 4, 2)
        let cam = Matrix3x4::new(1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0);
        let r = projective_residual(&cam, &Vector4::new(2.0, 4.0, 2.0, 7.0), &Vector2::new(1.0, 2.0)).unwrap();
        assert_eq!(r, Vector2::zeros());
        let r = projective_residual(&cam, &Vector4::new(1.0, 1.0, 1.0, 0.0), &Vector2::zeros()).unwrap();
        assert_eq!(r, Vector2::new(1.0, 1.0));
        let err = projective_residual(&cam, &Vector4::new(1.0, 1.0, 0.0, 0.0), &Vector2::zeros());
        assert!(err.is_err());
        let err = projective_jacobians(&cam, &Vector4::new(1.0, 1.0, 0.0, 0.0), &Vector2::zeros());
        assert!(err.is_err());
    }

    #[test]
    fn projective_landmark_jacobian_scales_inversely() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cam = rand_camera(&mut rng) + Matrix3x4::new(0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 5.0);
        let x = Vector4::new(0.2, 0.1, -0.3, 1.0);
        let m = Vector2::new(0.1, 0.2);
        let (_, jl1) = projective_jacobians(&cam, &x, &m).unwrap();
        let (_, jl2) = projective_jacobians(&cam, &(x * 2.0), &m).unwrap();
        let r1 = projective_residual(&cam, &x, &m).unwrap();
        let r2 = projective_residual(&cam, &(x * 2.0), &m).unwrap();
        assert!((r1 - r2).norm() < 1e-14);
        assert!((jl1 * 0.5 - jl2).norm() < 1e-14);
    }

    #[test]
    fn projective_jacobian_chain_rule_when_depth_row_is_orthogonal() {
        // third camera row orthogonal to e0: perturbing x0 leaves z fixed
        let cam = Matrix3x4::new(1.0, 2.0, 0.0, 1.0, 0.5, -1.0, 1.0, 0.0, 0.0, 0.3, 0.2, 2.0);
        let x = Vector4::new(0.3, 0.4, 0.5, 1.0);
        let z = (cam * x).z;
        let (_, jl) = projective_jacobians(&cam, &x, &Vector2::zeros()).unwrap();
        let expected = Vector2::new(cam[(0, 0)], cam[(1, 0)]) / z;
        assert!((jl.column(0) - expected).norm() < 1e-14);
    }

    fn observation(c: usize, l: usize, m: Vector2<f64>) -> Observation {
        Observation {
            camera_index: c,
            landmark_index: l,
            measurement: m,
        }
    }

    #[test]
    fn solve_landmarks_recovers_ground_truth() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let truth = Vector4::new(0.4, -0.8, 1.3, 1.0);
        let cameras: Vec<_> = (0..3).map(|_| rand_camera(&mut rng)).collect();
        // pOSE residual vanishes iff P₁₂x = m and P₃x = 1; make that hold
        let cameras: Vec<_> = cameras
            .into_iter()
            .map(|mut c| {
                let d = (c * truth).z;
                c[(2, 3)] += 1.0 - d;
                c
            })
            .collect();
        let obs = cameras
            .iter()
            .enumerate()
            .map(|(i, c)| observation(i, 0, (c * truth).xy()))
            .collect();
        let problem = BaProblem::new(3, 1, obs).unwrap();
        let state = ProjectiveState {
            cameras,
            landmarks: vec![Vector4::new(0.0, 0.0, 0.0, 1.0)],
        };
        for eta in [0.0, 0.1, 0.7] {
            let sol = solve_landmarks(&state, &problem, &PoseConfig::new(eta).unwrap());
            assert!((sol.landmarks[0] - truth).norm() < 1e-10, "eta {eta}");
        }
    }

    #[test]
    fn solve_landmarks_zero_rhs_gives_origin() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cameras: Vec<_> = (0..2)
            .map(|_| {
                let mut c = rand_camera(&mut rng);
                c.set_column(3, &Vector3::zeros());
                c
            })
            .collect();
        let obs = (0..2).map(|i| observation(i, 0, Vector2::zeros())).collect();
        let problem = BaProblem::new(2, 1, obs).unwrap();
        let state = ProjectiveState {
            cameras,
            landmarks: vec![Vector4::new(5.0, 5.0, 5.0, 1.0)],
        };
        let sol = solve_landmarks(&state, &problem, &PoseConfig::default());
        assert!(sol.landmarks[0].xyz().norm() < 1e-15);
        assert_eq!(sol.landmarks[0].w, 1.0);
    }

    #[test]
    fn solve_landmarks_flags_rank_deficiency() {
        let obs = (0..2).map(|i| observation(i, 0, Vector2::new(1.0, 1.0))).collect();
        let problem = BaProblem::new(2, 1, obs).unwrap();
        let state = ProjectiveState {
            cameras: vec![Matrix3x4::zeros(); 2],
            landmarks: vec![Vector4::new(1.0, 2.0, 3.0, 1.0)],
        };
        let sol = solve_landmarks(&state, &problem, &PoseConfig::default());
        assert_eq!(sol.degenerate, vec![0]);
        assert_eq!(sol.landmarks[0], Vector4::new(1.0, 2.0, 3.0, 1.0));
    }

    #[test]
    fn total_cost_single_observation() {
        // P = [I | 0], x = (3, 4, 1, 1) → π = (3, 4), m = 0 → cost 25
        let cam = Matrix3x4::new(1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0);
        let problem = BaProblem::new(1, 1, vec![observation(0, 0, Vector2::zeros())]).unwrap();
        let state = ProjectiveState {
            cameras: vec![cam],
            landmarks: vec![Vector4::new(3.0, 4.0, 1.0, 1.0)],
        };
        assert_eq!(total_cost(&state, &problem, Stage::Projective, &PoseConfig::default()), 25.0);
        let flat = ProjectiveState {
            cameras: vec![cam],
            landmarks: vec![Vector4::new(3.0, 4.0, 0.0, 1.0)],
        };
        assert_eq!(total_cost(&flat, &problem, Stage::Projective, &PoseConfig::default()), f64::INFINITY);
    }

    #[test]
    fn camera_roundtrip_through_vec_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cam = rand_camera(&mut rng);
        assert_eq!(camera_from_vec(&camera_to_vec(&cam)), cam);
    }
}
