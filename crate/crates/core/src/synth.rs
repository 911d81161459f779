//! Small synthetic scenes with ground truth: cameras on a ring looking at a
//! Gaussian cloud of points.

use nalgebra::{Matrix3, Rotation3, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use thiserror::Error;

use crate::bal_io::{BaProblem, BalError, MetricCamera, Observation};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("need at least 2 cameras, got {0}")]
    TooFewCameras(usize),
    #[error("need at least 1 landmark")]
    NoLandmarks,
    #[error("invalid {name}: {value}")]
    InvalidParameter { name: &'static str, value: f64 },
    #[error("landmark {landmark} is seen by {cameras} camera(s); every landmark needs 2")]
    UnderObserved { landmark: usize, cameras: usize },
    #[error(transparent)]
    Problem(#[from] BalError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthConfig {
    pub num_cameras: usize,
    pub num_landmarks: usize,
    /// Standard deviation of the pixel noise.
    pub noise: f64,
    pub seed: u64,
    pub ring_radius: f64,
    pub cloud_std: f64,
    pub focal_length: f64,
}

impl SynthConfig {
    pub fn new(num_cameras: usize, num_landmarks: usize, noise: f64, seed: u64) -> Self {
        Self {
            num_cameras,
            num_landmarks,
            noise,
            seed,
            ring_radius: 10.0,
            cloud_std: 1.0,
            focal_length: 500.0,
        }
    }
}

/// Camera at `center` looking at the origin in the Bundler convention
/// (viewing direction `-z`).
fn look_at_origin(center: &Vector3<f64>) -> MetricCamera {
    let z = center.normalize();
    let up = Vector3::y();
    let x = up.cross(&z).normalize();
    let y = z.cross(&x);
    let r = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
    let rotation = Rotation3::from_matrix_unchecked(r);
    MetricCamera {
        rotation: rotation.scaled_axis(),
        translation: -(r * center),
        focal_length: 0.0,
        k1: 0.0,
        k2: 0.0,
    }
}

/// Generates a scene and its measurements. Points that land behind or too
/// close to a camera are not observed by it.
pub fn generate(config: &SynthConfig) -> Result<BaProblem, SynthError> {
    if config.num_cameras < 2 {
        return Err(SynthError::TooFewCameras(config.num_cameras));
    }
    if config.num_landmarks == 0 {
        return Err(SynthError::NoLandmarks);
    }
    for (name, value) in [
        ("noise", config.noise),
        ("ring_radius", config.ring_radius),
        ("cloud_std", config.cloud_std),
        ("focal_length", config.focal_length),
    ] {
        if !value.is_finite() || value < 0.0 || (name != "noise" && value == 0.0) {
            return Err(SynthError::InvalidParameter { name, value });
        }
    }

    let mut rng = ChaCha20Rng::seed_from_u64(config.seed);
    let n = config.num_cameras;
    let cameras: Vec<MetricCamera> = (0..n)
        .map(|i| {
            let theta = std::f64::consts::TAU * i as f64 / n as f64;
            let height = 0.2 * config.ring_radius * (3.0 * theta).sin();
            let center = Vector3::new(config.ring_radius * theta.cos(), height, config.ring_radius * theta.sin());
            let mut cam = look_at_origin(&center);
            cam.focal_length = config.focal_length * (1.0 + 0.05 * rng.random_range(-1.0..1.0));
            cam
        })
        .collect();
    let points: Vec<Vector3<f64>> = (0..config.num_landmarks)
        .map(|_| {
            Vector3::from_fn(|_, _| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * config.cloud_std
            })
        })
        .collect();

    let noise = Normal::new(0.0, config.noise).map_err(|_| SynthError::InvalidParameter {
        name: "noise",
        value: config.noise,
    })?;
    let min_depth = 1e-3 * config.ring_radius;
    let mut observations = Vec::with_capacity(n * config.num_landmarks);
    for (j, x) in points.iter().enumerate() {
        let mut seen = 0;
        for (i, cam) in cameras.iter().enumerate() {
            let depth = -(cam.rotation_matrix() * x + cam.translation).z;
            if depth <= min_depth {
                continue;
            }
            let mut m = cam.project(x);
            if config.noise > 0.0 {
                m += Vector2::new(noise.sample(&mut rng), noise.sample(&mut rng));
            }
            observations.push(Observation {
                camera_index: i,
                landmark_index: j,
                measurement: m,
            });
            seen += 1;
        }
        if seen < 2 {
            return Err(SynthError::UnderObserved { landmark: j, cameras: seen });
        }
    }
    log::info!(
        "synthesized {} cameras, {} landmarks, {} observations",
        n,
        config.num_landmarks,
        observations.len()
    );
    Ok(BaProblem::new(n, config.num_landmarks, observations)?.with_metric(cameras, points)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noise_free_measurements_match_ground_truth() {
        let problem = generate(&SynthConfig::new(5, 30, 0.0, 3)).unwrap();
        let cams = problem.metric_cameras().unwrap();
        let pts = problem.metric_points().unwrap();
        for obs in problem.observations() {
            let m = cams[obs.camera_index].project(&pts[obs.landmark_index]);
            assert!((m - obs.measurement).norm() <= 1e-9);
        }
        assert_eq!(problem.num_observations(), 5 * 30);
    }

    #[test]
    fn cameras_face_the_cloud() {
        let problem = generate(&SynthConfig::new(4, 1, 0.0, 0)).unwrap();
        for cam in problem.metric_cameras().unwrap() {
            let origin_cam = cam.translation;
            assert!(origin_cam.z < 0.0);
            assert!(origin_cam.xy().norm() < 1e-9);
        }
    }

    #[test]
    fn rejects_single_camera() {
        assert!(matches!(generate(&SynthConfig::new(1, 10, 0.0, 0)), Err(SynthError::TooFewCameras(1))));
    }

    #[test]
    fn same_seed_same_scene() {
        let a = generate(&SynthConfig::new(3, 10, 0.5, 9)).unwrap();
        let b = generate(&SynthConfig::new(3, 10, 0.5, 9)).unwrap();
        assert_eq!(a, b);
    }
}
