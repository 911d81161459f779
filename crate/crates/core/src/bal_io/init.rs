use nalgebra::{Matrix3x4, SVector, Vector4};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};

use super::BaProblem;
use crate::objective::{solve_landmarks, PoseConfig};

/// Projective cameras and homogeneous landmarks, the unknowns of both
/// projective stages.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectiveState {
    pub cameras: Vec<Matrix3x4<f64>>,
    pub landmarks: Vec<Vector4<f64>>,
}

impl ProjectiveState {
    pub fn num_cameras(&self) -> usize {
        self.cameras.len()
    }

    pub fn num_landmarks(&self) -> usize {
        self.landmarks.len()
    }
}

/// Row-major vectorization: entry `(r, c)` maps to index `4 r + c`.
pub fn camera_to_vec(camera: &Matrix3x4<f64>) -> SVector<f64, 12> {
    SVector::from_iterator(camera.transpose().iter().copied())
}

pub fn camera_from_vec(v: &SVector<f64, 12>) -> Matrix3x4<f64> {
    Matrix3x4::from_row_slice(v.as_slice())
}

/// Random starting point: camera entries i.i.d. standard normal, landmarks
/// from the closed-form pOSE solve given those cameras.
///
/// The generator is ChaCha20 seeded from `seed` (a counter-based stream, so
/// the draws are identical on every platform). Entries are drawn camera by
/// camera in row-major order.
pub fn random_init(problem: &BaProblem, seed: u64, config: &PoseConfig) -> ProjectiveState {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let cameras = (0..problem.num_cameras())
        .map(|_| Matrix3x4::from_row_iterator((0..12).map(|_| StandardNormal.sample(&mut rng))))
        .collect();
    let mut state = ProjectiveState {
        cameras,
        landmarks: vec![Vector4::new(0.0, 0.0, 0.0, 1.0); problem.num_landmarks()],
    };
    let solved = solve_landmarks(&state, problem, config);
    state.landmarks = solved.landmarks;
    state
}
