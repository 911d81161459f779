//! Metric upgrade of a projective reconstruction with known intrinsics.
//!
//! We look for `H = [A 0; cᵀ 1]` such that `P_i H ≈ s_i K_i [R_i | t_i]`.
//! With `H̃ = [A; cᵀ]` (the three left columns of `H`) and
//! `Q_i = K_i⁻¹ P_i`, the rotation constraint reads
//! `α_i Q_i H̃ H̃ᵀ Q_iᵀ ≈ I`. The gauge is fixed to `A = I`, so the unknowns
//! are the plane at infinity `c` and the per-camera scales `α_i`. The scales
//! enter linearly and are eliminated in closed form; `c` is refined with a
//! small Levenberg–Marquardt loop on the reduced residual.
//!
//! The `A = I` gauge holds once the first camera reads `K₀[I | 0]`.
//! [`upgrade`] moves an arbitrary projective frame there before solving;
//! [`upgrade_with_intrinsics`] takes the frame as given.
//!
//! Only the upper triangle of the symmetric 3×3 residual is kept, with
//! off-diagonal entries weighted by `√2` so the squared norm equals the
//! squared Frobenius norm.

use log::{debug, warn};
use nalgebra::{DMatrix, DVector, Matrix3, Matrix3x4, Matrix4, SMatrix, Vector3, Vector4, Vector6};
use rayon::prelude::*;
use thiserror::Error;

use crate::bal_io::{BaProblem, ProjectiveState};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricError {
    #[error("camera {0} has singular intrinsics")]
    SingularIntrinsics(usize),
    #[error("the problem carries no intrinsics; a metric upgrade needs focal lengths")]
    MissingIntrinsics,
    #[error("{cameras} cameras but {intrinsics} intrinsics")]
    CountMismatch { cameras: usize, intrinsics: usize },
}

/// `H̃ = [A; cᵀ]` plus the eliminated camera scales.
#[derive(Debug, Clone, PartialEq)]
pub struct AmbiguityState {
    pub c: Vector3<f64>,
    pub alphas: Vec<f64>,
    /// Kept at the identity.
    pub a: Matrix3<f64>,
}

impl AmbiguityState {
    pub fn identity(num_cameras: usize) -> Self {
        Self {
            c: Vector3::zeros(),
            alphas: vec![1.0; num_cameras],
            a: Matrix3::identity(),
        }
    }

    pub fn h_tilde(&self) -> SMatrix<f64, 4, 3> {
        h_tilde(&self.a, &self.c)
    }

    /// Full 4×4 ambiguity `[A 0; cᵀ 1]`.
    pub fn h(&self) -> Matrix4<f64> {
        let mut h = Matrix4::zeros();
        h.fixed_view_mut::<4, 3>(0, 0).copy_from(&self.h_tilde());
        h[(3, 3)] = 1.0;
        h
    }
}

fn h_tilde(a: &Matrix3<f64>, c: &Vector3<f64>) -> SMatrix<f64, 4, 3> {
    let mut h = SMatrix::<f64, 4, 3>::zeros();
    h.fixed_view_mut::<3, 3>(0, 0).copy_from(a);
    h.set_row(3, &c.transpose());
    h
}

const SQRT2: f64 = std::f64::consts::SQRT_2;
/// `(row, col, weight)` of the kept residual entries.
const UPPER: [(usize, usize, f64); 6] = [(0, 0, 1.0), (1, 1, 1.0), (2, 2, 1.0), (0, 1, SQRT2), (0, 2, SQRT2), (1, 2, SQRT2)];

fn upper_triangle(m: &Matrix3<f64>) -> Vector6<f64> {
    Vector6::from_fn(|k, _| {
        let (r, c, w) = UPPER[k];
        w * m[(r, c)]
    })
}

fn normalized_camera(camera: &Matrix3x4<f64>, intrinsics: &Matrix3<f64>, index: usize) -> Result<Matrix3x4<f64>, MetricError> {
    let scale = intrinsics.abs().max();
    if scale.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) || intrinsics.determinant().abs() <= 1e-12 * scale.powi(3) {
        return Err(MetricError::SingularIntrinsics(index));
    }
    let inv = intrinsics.try_inverse().ok_or(MetricError::SingularIntrinsics(index))?;
    Ok(inv * camera)
}

/// `M = Q H̃ H̃ᵀ Qᵀ` with `Q = K⁻¹ P`.
fn gram(q: &Matrix3x4<f64>, ht: &SMatrix<f64, 4, 3>) -> Matrix3<f64> {
    let qh = q * ht;
    qh * qh.transpose()
}

/// `α K⁻¹P H̃ H̃ᵀ (K⁻¹P)ᵀ - I` as a weighted upper-triangle 6-vector.
pub fn metric_residual(camera: &Matrix3x4<f64>, intrinsics: &Matrix3<f64>, c: &Vector3<f64>, alpha: f64) -> Result<Vector6<f64>, MetricError> {
    let q = normalized_camera(camera, intrinsics, 0)?;
    let m = gram(&q, &h_tilde(&Matrix3::identity(), c));
    Ok(upper_triangle(&(m * alpha - Matrix3::identity())))
}

/// `⟨M, I⟩ / ⟨M, M⟩`, or 1 when `M` vanishes.
fn closed_form_alpha(m: &Matrix3<f64>, index: usize) -> f64 {
    let mm = m.norm_squared();
    if mm == 0.0 {
        warn!("camera {index}: zero metric Gram matrix, using unit scale");
        return 1.0;
    }
    m.trace() / mm
}

/// Per-camera scales minimizing `‖α_i M_i - I‖_F` for fixed `c`.
pub fn optimal_alphas(cameras: &[Matrix3x4<f64>], intrinsics: &[Matrix3<f64>], c: &Vector3<f64>) -> Result<Vec<f64>, MetricError> {
    check_counts(cameras, intrinsics)?;
    let ht = h_tilde(&Matrix3::identity(), c);
    cameras
        .par_iter()
        .zip(intrinsics.par_iter())
        .enumerate()
        .map(|(i, (p, k))| {
            let q = normalized_camera(p, k, i)?;
            Ok(closed_form_alpha(&gram(&q, &ht), i))
        })
        .collect()
}

fn check_counts(cameras: &[Matrix3x4<f64>], intrinsics: &[Matrix3<f64>]) -> Result<(), MetricError> {
    if cameras.len() != intrinsics.len() {
        return Err(MetricError::CountMismatch {
            cameras: cameras.len(),
            intrinsics: intrinsics.len(),
        });
    }
    Ok(())
}

/// Permutation `T` with `T vec(X) = vec(Xᵀ)` for an `m×n` matrix `X`
/// (column-major `vec`).
pub fn vec_transpose_permutation(m: usize, n: usize) -> DMatrix<f64> {
    let mut t = DMatrix::zeros(m * n, m * n);
    for i in 0..m {
        for j in 0..n {
            t[(j + n * i, i + m * j)] = 1.0;
        }
    }
    t
}

/// Jacobian of `vec(H̃ H̃ᵀ)` with respect to `vec(H̃)`:
/// `(H̃ ⊗ I₄) + (I₄ ⊗ H̃) T`.
pub fn dhht_dh(h: &SMatrix<f64, 4, 3>) -> SMatrix<f64, 16, 12> {
    let eye = Matrix4::<f64>::identity();
    let t = vec_transpose_permutation(4, 3);
    let left = h.kronecker(&eye);
    let right = eye.kronecker(h);
    let right_t = DMatrix::from_column_slice(16, 12, right.as_slice()) * t;
    left + SMatrix::<f64, 16, 12>::from_column_slice(right_t.as_slice())
}

/// Jacobian (6×3) of the VarPro-reduced residual `α*(c) M(c) - I` of one
/// camera, together with the residual and `α*`.
fn reduced_camera_terms(q: &Matrix3x4<f64>, c: &Vector3<f64>, index: usize) -> (Vector6<f64>, SMatrix<f64, 6, 3>, f64) {
    let ht = h_tilde(&Matrix3::identity(), c);
    let m = gram(q, &ht);
    let alpha = closed_form_alpha(&m, index);
    let residual = upper_triangle(&(m * alpha - Matrix3::identity()));

    // d vec(M) / d c: vec(M) = (Q ⊗ Q) vec(H̃H̃ᵀ) and c_k sits at vec index 4k+3.
    let dg = dhht_dh(&ht);
    let qq = q.kronecker(q);
    let mm = m.norm_squared();
    let mut jac = SMatrix::<f64, 6, 3>::zeros();
    if mm == 0.0 {
        return (residual, jac, alpha);
    }
    let tr = m.trace();
    for k in 0..3 {
        let dvec_m = qq * dg.column(4 * k + 3);
        let dm = Matrix3::from_column_slice(dvec_m.as_slice());
        let dalpha = (dm.trace() * mm - tr * 2.0 * m.dot(&dm)) / (mm * mm);
        jac.set_column(k, &upper_triangle(&(m * dalpha + dm * alpha)));
    }
    (residual, jac, alpha)
}

type CameraTerms = (Vector6<f64>, SMatrix<f64, 6, 3>, f64);

/// Levenberg–Marquardt on `c` from `start`.
fn refine(qs: &[Matrix3x4<f64>], start: Vector3<f64>, config: &MetricUpgradeConfig) -> (Vector3<f64>, f64, Vec<CameraTerms>, usize) {
    let evaluate = |c: &Vector3<f64>| {
        let terms: Vec<_> = qs
            .par_iter()
            .enumerate()
            .map(|(i, q)| reduced_camera_terms(q, c, i))
            .collect();
        let cost: f64 = terms.iter().map(|(r, _, _)| r.norm_squared()).sum();
        (cost, terms)
    };

    let mut c = start;
    let (mut cost, mut terms) = evaluate(&c);
    let mut lambda = config.initial_lambda;
    let mut iterations = 0;
    while iterations < config.max_iterations && cost > 0.0 {
        iterations += 1;
        let mut jtj = Matrix3::zeros();
        let mut jtr = Vector3::zeros();
        for (r, j, _) in &terms {
            jtj += j.transpose() * j;
            jtr += j.transpose() * r;
        }
        let mut accepted = false;
        while lambda < 1e16 {
            let mut damped = jtj;
            for d in 0..3 {
                damped[(d, d)] += lambda * jtj[(d, d)].max(1e-12);
            }
            let Some(chol) = damped.cholesky() else {
                lambda *= 10.0;
                continue;
            };
            let trial = c - chol.solve(&jtr);
            let (trial_cost, trial_terms) = evaluate(&trial);
            if trial_cost < cost {
                let decrease = (cost - trial_cost) / cost;
                c = trial;
                cost = trial_cost;
                terms = trial_terms;
                lambda = (lambda / 10.0).max(1e-12);
                accepted = true;
                if decrease < config.function_tolerance {
                    lambda = f64::INFINITY;
                }
                break;
            }
            lambda *= 10.0;
        }
        debug!("metric upgrade iteration {iterations}: cost {cost:e}");
        if !accepted || lambda.is_infinite() {
            break;
        }
    }

    (c, cost, terms, iterations)
}

/// Linear estimate of `c` from `Q_i Ω Q_iᵀ ∝ I` with `Ω = [I c; cᵀ d]`,
/// treating `d` as free. Five equations per camera: the off-diagonal
/// entries and the differences of diagonal entries vanish.
fn linear_plane_estimate(qs: &[Matrix3x4<f64>]) -> Option<Vector3<f64>> {
    if qs.len() < 2 {
        return None;
    }
    let mut a = DMatrix::zeros(5 * qs.len(), 4);
    let mut rhs = DVector::zeros(5 * qs.len());
    type Entry = ((usize, usize), Option<(usize, usize)>);
    const ENTRIES: [Entry; 5] = [((0, 1), None), ((0, 2), None), ((1, 2), None), ((0, 0), Some((1, 1))), ((0, 0), Some((2, 2)))];
    for (i, q) in qs.iter().enumerate() {
        let scale = q.norm_squared().max(f64::MIN_POSITIVE);
        let b = q.fixed_view::<3, 3>(0, 0).into_owned();
        let v = q.column(3).into_owned();
        let bbt = b * b.transpose();
        let vvt = v * v.transpose();
        // M = BBᵀ + Σ_k c_k (B e_k vᵀ + v e_kᵀ Bᵀ) + d vvᵀ
        let dk: Vec<Matrix3<f64>> = (0..3)
            .map(|k| {
                let bk = b.column(k) * v.transpose();
                bk + bk.transpose()
            })
            .collect();
        for (e, (first, second)) in ENTRIES.iter().enumerate() {
            let pick = |m: &Matrix3<f64>| m[*first] - second.map_or(0.0, |s| m[s]);
            let row = 5 * i + e;
            for k in 0..3 {
                a[(row, k)] = pick(&dk[k]) / scale;
            }
            a[(row, 3)] = pick(&vvt) / scale;
            rhs[row] = -pick(&bbt) / scale;
        }
    }
    let x = a.svd(true, true).solve(&rhs, 1e-12).ok()?;
    let c = Vector3::new(x[0], x[1], x[2]);
    c.iter().all(|v| v.is_finite()).then_some(c)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricUpgradeConfig {
    pub max_iterations: usize,
    pub initial_lambda: f64,
    /// Stop when the relative cost decrease of an accepted step falls below
    /// this value.
    pub function_tolerance: f64,
    /// Largest per-camera orthogonality error accepted without flagging
    /// the output.
    pub quality_threshold: f64,
}

impl Default for MetricUpgradeConfig {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            initial_lambda: 1e-3,
            function_tolerance: 1e-14,
            quality_threshold: 1e-6,
        }
    }
}

/// Euclidean reconstruction produced by [`upgrade`].
#[derive(Debug, Clone, PartialEq)]
pub struct MetricUpgrade {
    pub ambiguity: AmbiguityState,
    /// Projective change of frame applied before the solve; the full
    /// ambiguity is `frame · ambiguity.h()`.
    pub frame: Matrix4<f64>,
    pub rotations: Vec<Matrix3<f64>>,
    pub translations: Vec<Vector3<f64>>,
    /// `H⁻¹ X` dehomogenized; points at infinity become non-finite.
    pub points: Vec<Vector3<f64>>,
    pub cost: f64,
    pub iterations: usize,
    /// `max_i ‖α_i M_i - I‖_F` before rotations are projected.
    pub orthogonality_error: f64,
    /// Set when the orthogonality error stays above the quality threshold;
    /// the output is still usable for illustration.
    pub flagged: bool,
}

/// Runs the upgrade on a Stage-2 state with intrinsics from the problem's
/// metric camera block (radial distortion ignored).
pub fn upgrade(problem: &BaProblem, state: &ProjectiveState, config: &MetricUpgradeConfig) -> Result<MetricUpgrade, MetricError> {
    let metric = problem.metric_cameras().ok_or(MetricError::MissingIntrinsics)?;
    let intrinsics: Vec<Matrix3<f64>> = metric.iter().map(|m| m.intrinsics()).collect();
    upgrade_projective(&state.cameras, &intrinsics, &state.landmarks, config)
}

/// Change of frame `G` with `K₀⁻¹ P₀ G = [I | 0]`.
pub fn first_camera_frame(camera: &Matrix3x4<f64>, intrinsics: &Matrix3<f64>) -> Result<Matrix4<f64>, MetricError> {
    let q = normalized_camera(camera, intrinsics, 0)?;
    let mut full = q.insert_row(3, 0.0);
    let svd = full.svd(false, true);
    let v_t = svd.v_t.expect("requested Vᵀ");
    let smallest = svd.singular_values.imin();
    full.set_row(3, &v_t.row(smallest));
    full.try_inverse().ok_or(MetricError::SingularIntrinsics(0))
}

/// Metric upgrade from an arbitrary projective frame: the reconstruction is
/// first moved so camera 0 becomes `K₀[I | 0]`, then solved in the `A = I`
/// gauge.
pub fn upgrade_projective(
    cameras: &[Matrix3x4<f64>],
    intrinsics: &[Matrix3<f64>],
    landmarks: &[Vector4<f64>],
    config: &MetricUpgradeConfig,
) -> Result<MetricUpgrade, MetricError> {
    check_counts(cameras, intrinsics)?;
    let Some((p0, k0)) = cameras.first().zip(intrinsics.first()) else {
        return upgrade_with_intrinsics(cameras, intrinsics, landmarks, config);
    };
    let g = first_camera_frame(p0, k0)?;
    let g_inv = g.try_inverse().ok_or(MetricError::SingularIntrinsics(0))?;
    let moved_cameras: Vec<Matrix3x4<f64>> = cameras.iter().map(|p| p * g).collect();
    let moved_points: Vec<Vector4<f64>> = landmarks.iter().map(|x| g_inv * x).collect();
    let mut out = upgrade_with_intrinsics(&moved_cameras, intrinsics, &moved_points, config)?;
    out.frame = g;
    Ok(out)
}

pub fn upgrade_with_intrinsics(
    cameras: &[Matrix3x4<f64>],
    intrinsics: &[Matrix3<f64>],
    landmarks: &[Vector4<f64>],
    config: &MetricUpgradeConfig,
) -> Result<MetricUpgrade, MetricError> {
    check_counts(cameras, intrinsics)?;
    let qs = cameras
        .iter()
        .zip(intrinsics)
        .enumerate()
        .map(|(i, (p, k))| normalized_camera(p, k, i))
        .collect::<Result<Vec<_>, _>>()?;

    let mut best = refine(&qs, Vector3::zeros(), config);
    if let Some(c0) = linear_plane_estimate(&qs) {
        let candidate = refine(&qs, c0, config);
        debug!("metric upgrade: zero start cost {:e}, linear start cost {:e}", best.1, candidate.1);
        if candidate.1 < best.1 {
            best = candidate;
        }
    }
    let (c, cost, terms, iterations) = best;

    let alphas: Vec<f64> = terms.iter().map(|(_, _, a)| *a).collect();
    let orthogonality_error = terms.iter().map(|(r, _, _)| r.norm()).fold(0.0, f64::max);
    let ambiguity = AmbiguityState {
        c,
        alphas,
        a: Matrix3::identity(),
    };
    let h = ambiguity.h();
    let h_inv = h.try_inverse().expect("[I 0; cᵀ 1] is always invertible");

    let mut rotations = Vec::with_capacity(qs.len());
    let mut translations = Vec::with_capacity(qs.len());
    for (q, alpha) in qs.iter().zip(&ambiguity.alphas) {
        let mut n = q * h * alpha.abs().sqrt();
        if n.fixed_view::<3, 3>(0, 0).determinant() < 0.0 {
            n = -n;
        }
        rotations.push(nearest_rotation(&n.fixed_view::<3, 3>(0, 0).into_owned()));
        translations.push(n.column(3).into_owned());
    }
    let points = landmarks
        .iter()
        .map(|x| {
            let y = h_inv * x;
            y.xyz() / y[3]
        })
        .collect();

    let flagged = orthogonality_error > config.quality_threshold;
    if flagged {
        warn!("metric upgrade stalled: orthogonality error {orthogonality_error:e}, output is approximate");
    }
    Ok(MetricUpgrade {
        ambiguity,
        frame: Matrix4::identity(),
        rotations,
        translations,
        points,
        cost,
        iterations,
        orthogonality_error,
        flagged,
    })
}

/// Orthogonal Procrustes: the rotation closest to `m` in Frobenius norm.
pub fn nearest_rotation(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let u = svd.u.expect("requested U");
    let v_t = svd.v_t.expect("requested Vᵀ");
    let mut r = u * v_t;
    if r.determinant() < 0.0 {
        let mut flip = Matrix3::identity();
        flip[(2, 2)] = -1.0;
        r = u * flip * v_t;
    }
    r
}
