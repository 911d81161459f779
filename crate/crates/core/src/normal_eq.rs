//! Block-sparse damped normal equations.
//!
//! Linearizations are stored per landmark in dense blocks: each observation
//! of the landmark contributes `residual_dim` rows laid out as
//! `[pose Jacobian | landmark Jacobian | residual]`, with a side array
//! holding the camera index of every observation. From these blocks the
//! [`SchurSystem`] keeps the per-camera blocks `U`, per-landmark blocks `V`,
//! the coupling blocks `W`, and the gradients `b_p`, `b_l`. The Schur
//! complement `S = U - W V⁻¹ Wᵀ` is never formed except by the direct
//! baseline; everything else is matrix-free.

use nalgebra::{DMatrix, DMatrixView, DVector, DVectorView};
use rayon::prelude::*;

use crate::numeric::symmetric_pinv;

/// Bounds applied to the Jacobi scaling `D = sqrt(diag(JᵀJ))`.
pub const JACOBI_CLAMP: (f64, f64) = (1e-6, 1e6);

/// Relative (to the trace) eigenvalue cutoff when inverting `V` blocks.
pub const V_PINV_TOLERANCE: f64 = 1e-10;

/// Relative cutoff for `U` blocks. Only reached without damping.
const U_PINV_TOLERANCE: f64 = 1e-14;

/// Which Jacobian blocks receive Levenberg–Marquardt damping.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DampingMode {
    /// Variable projection: only poses are damped, `V = V₀`.
    PoseOnly,
    /// Joint optimization and the Riemannian stage: poses and landmarks.
    Both,
}

/// Dense linearization of one landmark and all its observations.
#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkBlock {
    landmark: usize,
    cameras: Vec<usize>,
    residual_dim: usize,
    pose_dim: usize,
    landmark_dim: usize,
    storage: DMatrix<f64>,
}

impl LandmarkBlock {
    pub fn zeros(landmark: usize, residual_dim: usize, pose_dim: usize, landmark_dim: usize, num_observations: usize) -> Self {
        Self {
            landmark,
            cameras: vec![0; num_observations],
            residual_dim,
            pose_dim,
            landmark_dim,
            storage: DMatrix::zeros(residual_dim * num_observations, pose_dim + landmark_dim + 1),
        }
    }

    /// Fills the rows of observation `k`. Slices are column-major.
    pub fn set_observation(&mut self, k: usize, camera: usize, pose_jacobian: &[f64], landmark_jacobian: &[f64], residual: &[f64]) {
        let (rd, pd, ld) = (self.residual_dim, self.pose_dim, self.landmark_dim);
        assert_eq!(pose_jacobian.len(), rd * pd);
        assert_eq!(landmark_jacobian.len(), rd * ld);
        assert_eq!(residual.len(), rd);
        self.cameras[k] = camera;
        let row0 = k * rd;
        let mut rows = self.storage.rows_mut(row0, rd);
        rows.columns_mut(0, pd)
            .copy_from(&DMatrixView::from_slice(pose_jacobian, rd, pd));
        rows.columns_mut(pd, ld)
            .copy_from(&DMatrixView::from_slice(landmark_jacobian, rd, ld));
        rows.column_mut(pd + ld).copy_from(&DVectorView::from_slice(residual, rd));
    }

    pub fn landmark(&self) -> usize {
        self.landmark
    }

    pub fn cameras(&self) -> &[usize] {
        &self.cameras
    }

    pub fn num_observations(&self) -> usize {
        self.cameras.len()
    }

    pub fn residual_dim(&self) -> usize {
        self.residual_dim
    }

    pub fn pose_dim(&self) -> usize {
        self.pose_dim
    }

    pub fn landmark_dim(&self) -> usize {
        self.landmark_dim
    }

    pub fn pose_jacobian(&self, k: usize) -> DMatrixView<'_, f64> {
        self.storage.view((k * self.residual_dim, 0), (self.residual_dim, self.pose_dim))
    }

    pub fn landmark_jacobian(&self, k: usize) -> DMatrixView<'_, f64> {
        self.storage
            .view((k * self.residual_dim, self.pose_dim), (self.residual_dim, self.landmark_dim))
    }

    pub fn residual(&self, k: usize) -> DMatrixView<'_, f64> {
        self.storage
            .view((k * self.residual_dim, self.pose_dim + self.landmark_dim), (self.residual_dim, 1))
    }

    /// All rows of the landmark Jacobian stacked.
    pub fn stacked_landmark_jacobian(&self) -> DMatrixView<'_, f64> {
        self.storage.columns(self.pose_dim, self.landmark_dim)
    }

    pub fn stacked_residual(&self) -> DMatrixView<'_, f64> {
        self.storage.columns(self.pose_dim + self.landmark_dim, 1)
    }

    pub fn storage(&self) -> &DMatrix<f64> {
        &self.storage
    }
}

/// All landmark blocks of one linearization.
#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkBlockStore {
    num_cameras: usize,
    residual_dim: usize,
    pose_dim: usize,
    landmark_dim: usize,
    blocks: Vec<LandmarkBlock>,
}

impl LandmarkBlockStore {
    pub fn new(num_cameras: usize, residual_dim: usize, pose_dim: usize, landmark_dim: usize, blocks: Vec<LandmarkBlock>) -> Self {
        for (j, b) in blocks.iter().enumerate() {
            assert_eq!(b.landmark, j, "blocks must be ordered by landmark");
            assert_eq!((b.residual_dim, b.pose_dim, b.landmark_dim), (residual_dim, pose_dim, landmark_dim));
            assert!(b.cameras.windows(2).all(|w| w[0] < w[1]), "camera indices must increase");
        }
        Self {
            num_cameras,
            residual_dim,
            pose_dim,
            landmark_dim,
            blocks,
        }
    }

    pub fn num_cameras(&self) -> usize {
        self.num_cameras
    }

    pub fn num_landmarks(&self) -> usize {
        self.blocks.len()
    }

    pub fn residual_dim(&self) -> usize {
        self.residual_dim
    }

    pub fn pose_dim(&self) -> usize {
        self.pose_dim
    }

    pub fn landmark_dim(&self) -> usize {
        self.landmark_dim
    }

    pub fn blocks(&self) -> &[LandmarkBlock] {
        &self.blocks
    }
}

/// Reduced-camera system and everything needed to apply it.
#[derive(Debug, Clone)]
pub struct SchurSystem {
    pub num_cameras: usize,
    pub pose_dim: usize,
    pub landmark_dim: usize,
    pub lambda: f64,
    pub damping_mode: DampingMode,
    /// Damped per-camera blocks `U_λ`.
    pub u_blocks: Vec<DMatrix<f64>>,
    /// Per-landmark blocks, `V₀` or `V_λ` depending on the damping mode.
    pub v_blocks: Vec<DMatrix<f64>>,
    /// Coupling blocks `W_ij` grouped by landmark, camera indices increasing.
    pub w_blocks: Vec<Vec<(usize, DMatrix<f64>)>>,
    pub b_p: DVector<f64>,
    pub b_l: DVector<f64>,
    u_inverses: Vec<DMatrix<f64>>,
    v_inverses: Vec<DMatrix<f64>>,
    degenerate: Vec<bool>,
    /// Per camera: `(landmark, position in w_blocks[landmark])`, landmark order.
    camera_links: Vec<Vec<(usize, usize)>>,
}

impl SchurSystem {
    /// Builds a system from explicit blocks and precomputes the block inverses.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        num_cameras: usize,
        pose_dim: usize,
        landmark_dim: usize,
        lambda: f64,
        damping_mode: DampingMode,
        u_blocks: Vec<DMatrix<f64>>,
        v_blocks: Vec<DMatrix<f64>>,
        w_blocks: Vec<Vec<(usize, DMatrix<f64>)>>,
        b_p: DVector<f64>,
        b_l: DVector<f64>,
    ) -> Self {
        assert_eq!(u_blocks.len(), num_cameras);
        assert_eq!(v_blocks.len(), w_blocks.len());
        assert_eq!(b_p.len(), num_cameras * pose_dim);
        assert_eq!(b_l.len(), v_blocks.len() * landmark_dim);
        let u_inverses = u_blocks
            .par_iter()
            .map(|u| symmetric_pinv(u, U_PINV_TOLERANCE).0)
            .collect();
        let (v_inverses, degenerate): (Vec<_>, Vec<_>) = v_blocks
            .par_iter()
            .map(|v| symmetric_pinv(v, V_PINV_TOLERANCE))
            .collect::<Vec<_>>()
            .into_iter()
            .unzip();
        let num_degenerate = degenerate.iter().filter(|&&d| d).count();
        if num_degenerate > 0 {
            log::debug!("{num_degenerate} landmark blocks inverted by pseudo-inverse");
        }
        let mut camera_links = vec![Vec::new(); num_cameras];
        for (j, ws) in w_blocks.iter().enumerate() {
            for (k, (i, _)) in ws.iter().enumerate() {
                camera_links[*i].push((j, k));
            }
        }
        Self {
            num_cameras,
            pose_dim,
            landmark_dim,
            lambda,
            damping_mode,
            u_blocks,
            v_blocks,
            w_blocks,
            b_p,
            b_l,
            u_inverses,
            v_inverses,
            degenerate,
            camera_links,
        }
    }

    pub fn num_landmarks(&self) -> usize {
        self.v_blocks.len()
    }

    pub fn pose_len(&self) -> usize {
        self.num_cameras * self.pose_dim
    }

    pub fn landmark_len(&self) -> usize {
        self.num_landmarks() * self.landmark_dim
    }

    /// Landmarks whose `V` block was rank deficient.
    pub fn is_degenerate(&self, landmark: usize) -> bool {
        self.degenerate[landmark]
    }

    pub fn v_inverse(&self, landmark: usize) -> &DMatrix<f64> {
        &self.v_inverses[landmark]
    }

    pub fn u_inverse(&self, camera: usize) -> &DMatrix<f64> {
        &self.u_inverses[camera]
    }

    fn pose_slice<'a>(&self, x: &'a DVector<f64>, i: usize) -> DVectorView<'a, f64> {
        x.rows(i * self.pose_dim, self.pose_dim)
    }

    /// `V_j⁻¹ (W_jᵀ x + extra_j)` for every landmark.
    fn landmark_solve(&self, x: &DVector<f64>, extra: Option<&DVector<f64>>) -> Vec<DVector<f64>> {
        (0..self.num_landmarks())
            .into_par_iter()
            .map(|j| {
                let mut y = match extra {
                    Some(e) => e.rows(j * self.landmark_dim, self.landmark_dim).into_owned(),
                    None => DVector::zeros(self.landmark_dim),
                };
                for (i, w) in &self.w_blocks[j] {
                    y += w.transpose() * self.pose_slice(x, *i);
                }
                &self.v_inverses[j] * y
            })
            .collect()
    }

    /// `Σ_j W_ij z_j` for every camera, summed in landmark order.
    fn coupling_gather(&self, z: &[DVector<f64>]) -> DVector<f64> {
        let parts: Vec<DVector<f64>> = (0..self.num_cameras)
            .into_par_iter()
            .map(|i| {
                let mut acc = DVector::zeros(self.pose_dim);
                for &(j, k) in &self.camera_links[i] {
                    acc += &self.w_blocks[j][k].1 * &z[j];
                }
                acc
            })
            .collect();
        concat(&parts, self.pose_len())
    }

    fn per_camera(&self, x: &DVector<f64>, blocks: &[DMatrix<f64>]) -> DVector<f64> {
        let parts: Vec<DVector<f64>> = (0..self.num_cameras)
            .into_par_iter()
            .map(|i| &blocks[i] * self.pose_slice(x, i))
            .collect();
        concat(&parts, self.pose_len())
    }

    pub fn apply_u(&self, x: &DVector<f64>) -> DVector<f64> {
        self.per_camera(x, &self.u_blocks)
    }

    pub fn apply_u_inverse(&self, x: &DVector<f64>) -> DVector<f64> {
        self.per_camera(x, &self.u_inverses)
    }

    /// `W V⁻¹ Wᵀ x`.
    pub fn apply_coupling(&self, x: &DVector<f64>) -> DVector<f64> {
        self.coupling_gather(&self.landmark_solve(x, None))
    }

    /// Power-series operator `U⁻¹ W V⁻¹ Wᵀ x`.
    pub fn apply_series_operator(&self, x: &DVector<f64>) -> DVector<f64> {
        self.apply_u_inverse(&self.apply_coupling(x))
    }

    /// Matrix-free Schur product `S x = (U - W V⁻¹ Wᵀ) x`.
    pub fn apply_schur(&self, x: &DVector<f64>) -> DVector<f64> {
        self.apply_u(x) - self.apply_coupling(x)
    }

    /// Reduced right-hand side `-(b_p - W V⁻¹ b_l)`; the pose step solves
    /// `S Δx_p = schur_rhs()`.
    pub fn schur_rhs(&self) -> DVector<f64> {
        let z: Vec<DVector<f64>> = (0..self.num_landmarks())
            .into_par_iter()
            .map(|j| &self.v_inverses[j] * self.b_l.rows(j * self.landmark_dim, self.landmark_dim))
            .collect();
        self.coupling_gather(&z) - &self.b_p
    }

    /// Landmark step `Δx_l = -V⁻¹ (b_l + Wᵀ Δx_p)`. Rank-deficient landmarks
    /// get a zero update.
    pub fn back_substitute(&self, pose_update: &DVector<f64>) -> DVector<f64> {
        assert_eq!(pose_update.len(), self.pose_len());
        let parts = self.landmark_solve(pose_update, Some(&self.b_l));
        let skipped = self.degenerate.iter().filter(|&&d| d).count();
        if skipped > 0 {
            log::debug!("zero landmark update for {skipped} degenerate blocks");
        }
        let parts: Vec<DVector<f64>> = parts
            .into_iter()
            .enumerate()
            .map(|(j, y)| if self.degenerate[j] { y * 0.0 } else { -y })
            .collect();
        concat(&parts, self.landmark_len())
    }

    /// Diagonal blocks of `S`, used by the Schur-Jacobi preconditioner.
    pub fn schur_block_diagonal(&self) -> Vec<DMatrix<f64>> {
        (0..self.num_cameras)
            .into_par_iter()
            .map(|i| {
                let mut s = self.u_blocks[i].clone();
                for &(j, k) in &self.camera_links[i] {
                    let w = &self.w_blocks[j][k].1;
                    s -= w * &self.v_inverses[j] * w.transpose();
                }
                s
            })
            .collect()
    }

    /// Explicit dense `S`. Only the direct baseline and tests use this.
    pub fn dense_schur(&self) -> DMatrix<f64> {
        let (pd, n) = (self.pose_dim, self.pose_len());
        let mut s = DMatrix::zeros(n, n);
        for (i, u) in self.u_blocks.iter().enumerate() {
            s.view_mut((i * pd, i * pd), (pd, pd)).copy_from(u);
        }
        for (j, ws) in self.w_blocks.iter().enumerate() {
            let vinv = &self.v_inverses[j];
            for (a, wa) in ws {
                let left = wa * vinv;
                for (b, wb) in ws {
                    let mut blk = s.view_mut((a * pd, b * pd), (pd, pd));
                    blk -= &left * wb.transpose();
                }
            }
        }
        s
    }
}

fn concat(parts: &[DVector<f64>], len: usize) -> DVector<f64> {
    let mut out = DVector::zeros(len);
    let mut offset = 0;
    for p in parts {
        out.rows_mut(offset, p.len()).copy_from(p);
        offset += p.len();
    }
    debug_assert_eq!(offset, len);
    out
}

fn jacobi_damping(gram: &DMatrix<f64>, lambda: f64) -> DMatrix<f64> {
    let d2 = gram
        .diagonal()
        .map(|g| g.max(0.0).sqrt().clamp(JACOBI_CLAMP.0, JACOBI_CLAMP.1).powi(2));
    DMatrix::from_diagonal(&(d2 * lambda))
}

struct LandmarkContribution {
    v: DMatrix<f64>,
    b_l: DVector<f64>,
    w: Vec<(usize, DMatrix<f64>)>,
    u: Vec<DMatrix<f64>>,
    b_p: Vec<DVector<f64>>,
}

/// Forms the damped normal equations from a linearization.
///
/// `U = J_pᵀJ_p + λ D_pᵀD_p`, `V = J_lᵀJ_l` (plus `λ D_lᵀD_l` when both are
/// damped), `W = J_pᵀJ_l`, `b = Jᵀ r`, with Jacobi scaling
/// `D = sqrt(diag(JᵀJ))` clamped to [`JACOBI_CLAMP`].
pub fn assemble(blocks: &LandmarkBlockStore, lambda: f64, damping_mode: DampingMode) -> SchurSystem {
    assert!(lambda >= 0.0, "damping must be non-negative");
    let (pd, ld) = (blocks.pose_dim, blocks.landmark_dim);
    let contributions: Vec<LandmarkContribution> = blocks
        .blocks
        .par_iter()
        .map(|blk| {
            let jl = blk.stacked_landmark_jacobian();
            let r = blk.stacked_residual();
            let mut v = jl.transpose() * jl;
            if damping_mode == DampingMode::Both {
                v += jacobi_damping(&v, lambda);
            }
            let b_l = (jl.transpose() * r).column(0).into_owned();
            let mut w = Vec::with_capacity(blk.num_observations());
            let mut u = Vec::with_capacity(blk.num_observations());
            let mut b_p = Vec::with_capacity(blk.num_observations());
            for (k, &cam) in blk.cameras.iter().enumerate() {
                let jp = blk.pose_jacobian(k);
                w.push((cam, jp.transpose() * blk.landmark_jacobian(k)));
                u.push(jp.transpose() * jp);
                b_p.push((jp.transpose() * blk.residual(k)).column(0).into_owned());
            }
            LandmarkContribution { v, b_l, w, u, b_p }
        })
        .collect();

    let mut u_blocks = vec![DMatrix::zeros(pd, pd); blocks.num_cameras];
    let mut b_p = DVector::zeros(blocks.num_cameras * pd);
    let mut b_l = DVector::zeros(blocks.num_landmarks() * ld);
    let mut v_blocks = Vec::with_capacity(contributions.len());
    let mut w_blocks = Vec::with_capacity(contributions.len());
    for (j, c) in contributions.into_iter().enumerate() {
        for ((cam, _), (u, bp)) in c.w.iter().zip(c.u.iter().zip(&c.b_p)) {
            u_blocks[*cam] += u;
            let mut slot = b_p.rows_mut(cam * pd, pd);
            slot += bp;
        }
        b_l.rows_mut(j * ld, ld).copy_from(&c.b_l);
        v_blocks.push(c.v);
        w_blocks.push(c.w);
    }
    for u in &mut u_blocks {
        let damping = jacobi_damping(u, lambda);
        *u += damping;
    }
    SchurSystem::from_parts(
        blocks.num_cameras,
        pd,
        ld,
        lambda,
        damping_mode,
        u_blocks,
        v_blocks,
        w_blocks,
        b_p,
        b_l,
    )
}
