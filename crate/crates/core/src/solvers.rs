//! Levenberg–Marquardt outer loop and the interchangeable reduced-camera
//! solvers.
//!
//! Every inner solver works on a [`SchurSystem`] and returns the pose step of
//! `S Δx_p = -(b_p - W V⁻¹ b_l)` together with the back-substituted landmark
//! step:
//!
//! * [`power_schur_solve`]: truncated power series
//!   `Δx_p ≈ Σᵢ (U⁻¹ W V⁻¹ Wᵀ)ⁱ U⁻¹ rhs`. With pose-only damping this is
//!   PoVar, with joint damping PoBA, and on the tangent-space system RiPoBA.
//! * [`pcg_schur_solve`]: conjugate gradients on `S`, preconditioned by the
//!   exact block diagonal of `S` (Schur-Jacobi).
//! * [`direct_schur_solve`]: explicit `S` and a Cholesky factorization.

use std::time::Instant;

use nalgebra::{DMatrix, DVector, Vector4};
use thiserror::Error;

use crate::bal_io::{BaProblem, ProjectiveState};
use crate::evaluation::ConvergenceTrace;
use crate::normal_eq::{assemble, DampingMode, LandmarkBlockStore, SchurSystem};
use crate::numeric::symmetric_pinv;
use crate::objective::{linearize_pose, solve_landmarks, total_cost, PoseConfig, Stage};
use crate::riemannian::{self, TangentBases};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum InnerSolver {
    Power,
    Pcg,
    Direct,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SolverMode {
    /// Variable projection: landmarks eliminated in closed form, poses damped.
    VarPro,
    /// Joint optimization over poses and landmarks, both damped.
    Joint,
}

#[derive(Debug, Error, PartialEq)]
pub enum SolverError {
    #[error("invalid solver configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid starting state: {0}")]
    InvalidState(String),
}

/// Outer and inner solver settings. `Default` gives the reference
/// experimental constants.
#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    pub max_outer_iterations: usize,
    /// Stop once an accepted step changes the cost by at most this fraction.
    pub function_tolerance: f64,
    pub initial_lambda: f64,
    pub max_power_order: usize,
    /// The series stops once a new term satisfies
    /// `‖tᵢ‖ ≤ power_threshold · ‖partial sum‖`; the term is then dropped.
    pub power_threshold: f64,
    pub max_inner_iterations: usize,
    /// PCG stops at `‖r‖ ≤ pcg_tolerance · ‖rhs‖`.
    pub pcg_tolerance: f64,
    pub lambda_increase: f64,
    pub lambda_decrease: f64,
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub inner_solver: InnerSolver,
    pub mode: SolverMode,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_outer_iterations: 50,
            function_tolerance: 1e-6,
            initial_lambda: 1e-4,
            max_power_order: 20,
            power_threshold: 0.01,
            max_inner_iterations: 500,
            pcg_tolerance: 1e-6,
            lambda_increase: 4.0,
            lambda_decrease: 2.0,
            lambda_min: 1e-12,
            lambda_max: 1e8,
            inner_solver: InnerSolver::Power,
            mode: SolverMode::VarPro,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<(), SolverError> {
        let positive = [
            ("function_tolerance", self.function_tolerance),
            ("initial_lambda", self.initial_lambda),
            ("pcg_tolerance", self.pcg_tolerance),
            ("lambda_min", self.lambda_min),
            ("lambda_max", self.lambda_max),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(SolverError::InvalidConfig(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.power_threshold.is_finite() && self.power_threshold >= 0.0) {
            return Err(SolverError::InvalidConfig(format!(
                "power_threshold must be non-negative, got {}",
                self.power_threshold
            )));
        }
        if self.max_outer_iterations == 0 || self.max_inner_iterations == 0 {
            return Err(SolverError::InvalidConfig("iteration limits must be positive".into()));
        }
        if self.lambda_increase <= 1.0 || self.lambda_decrease <= 1.0 {
            return Err(SolverError::InvalidConfig("lambda factors must exceed 1".into()));
        }
        if self.lambda_min > self.lambda_max {
            return Err(SolverError::InvalidConfig("lambda_min exceeds lambda_max".into()));
        }
        Ok(())
    }
}

/// How an inner solve ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepStatus {
    Converged,
    /// Iteration or order limit reached; the step is still usable.
    LimitReached,
    /// PCG met a direction of non-positive curvature; the step is the
    /// iterate at that point.
    Breakdown,
    /// Factorization failed; the step is zero.
    Singular,
}

#[derive(Debug, Clone)]
pub struct StepReport {
    pub pose_update: DVector<f64>,
    pub landmark_update: DVector<f64>,
    pub inner_iterations_used: usize,
    pub power_order_used: usize,
    /// Norm of the last series term considered (added or dropped).
    pub truncation_estimate: f64,
    pub status: StepStatus,
}

impl StepReport {
    fn finish(system: &SchurSystem, pose_update: DVector<f64>, iterations: usize, order: usize, truncation: f64, status: StepStatus) -> Self {
        let landmark_update = system.back_substitute(&pose_update);
        Self {
            pose_update,
            landmark_update,
            inner_iterations_used: iterations,
            power_order_used: order,
            truncation_estimate: truncation,
            status,
        }
    }
}

/// Truncated power series of the inverse Schur complement applied to the
/// reduced right-hand side.
pub fn power_schur_solve(system: &SchurSystem, config: &SolverConfig) -> StepReport {
    let rhs = system.schur_rhs();
    let mut term = system.apply_u_inverse(&rhs);
    let mut sum = term.clone();
    let mut order = 0;
    let mut truncation = term.norm();
    let mut status = StepStatus::LimitReached;
    if sum.norm() == 0.0 {
        return StepReport::finish(system, sum, 0, 0, 0.0, StepStatus::Converged);
    }
    for i in 1..=config.max_power_order {
        term = system.apply_series_operator(&term);
        truncation = term.norm();
        if truncation <= config.power_threshold * sum.norm() {
            status = StepStatus::Converged;
            break;
        }
        sum += &term;
        order = i;
    }
    StepReport::finish(system, sum, order, order, truncation, status)
}

/// Conjugate gradients on the reduced camera system with the Schur-Jacobi
/// preconditioner.
pub fn pcg_schur_solve(system: &SchurSystem, config: &SolverConfig) -> StepReport {
    let rhs = system.schur_rhs();
    let n = rhs.len();
    let rhs_norm = rhs.norm();
    if rhs_norm == 0.0 {
        return StepReport::finish(system, DVector::zeros(n), 0, 0, 0.0, StepStatus::Converged);
    }
    let preconditioner: Vec<DMatrix<f64>> = system
        .schur_block_diagonal()
        .iter()
        .map(|s| symmetric_pinv(s, 1e-14).0)
        .collect();
    let pd = system.pose_dim;
    let precondition = |r: &DVector<f64>| {
        let mut z = DVector::zeros(n);
        for (i, p) in preconditioner.iter().enumerate() {
            z.rows_mut(i * pd, pd).copy_from(&(p * r.rows(i * pd, pd)));
        }
        z
    };

    let mut x = DVector::zeros(n);
    let mut r = rhs.clone();
    let mut z = precondition(&r);
    let mut p = z.clone();
    let mut rz = r.dot(&z);
    let mut status = StepStatus::LimitReached;
    let mut iterations = 0;
    for it in 1..=config.max_inner_iterations {
        let sp = system.apply_schur(&p);
        let curvature = p.dot(&sp);
        if curvature <= 0.0 || !curvature.is_finite() {
            log::debug!("pcg breakdown at iteration {it}: curvature {curvature:e}");
            status = StepStatus::Breakdown;
            break;
        }
        let alpha = rz / curvature;
        x.axpy(alpha, &p, 1.0);
        r.axpy(-alpha, &sp, 1.0);
        iterations = it;
        if r.norm() <= config.pcg_tolerance * rhs_norm {
            status = StepStatus::Converged;
            break;
        }
        z = precondition(&r);
        let rz_next = r.dot(&z);
        let beta = rz_next / rz;
        rz = rz_next;
        p = &z + beta * p;
    }
    let residual = r.norm();
    StepReport::finish(system, x, iterations, 0, residual, status)
}

/// Explicit Schur complement and Cholesky; LU when `S` is not positive
/// definite.
pub fn direct_schur_solve(system: &SchurSystem, _config: &SolverConfig) -> StepReport {
    let rhs = system.schur_rhs();
    let s = system.dense_schur();
    if let Some(chol) = s.clone().cholesky() {
        return StepReport::finish(system, chol.solve(&rhs), 1, 0, 0.0, StepStatus::Converged);
    }
    log::debug!("Schur complement not positive definite, falling back to LU");
    match s.lu().solve(&rhs) {
        Some(x) if x.iter().all(|v| v.is_finite()) => StepReport::finish(system, x, 1, 0, 0.0, StepStatus::Converged),
        _ => StepReport::finish(system, DVector::zeros(rhs.len()), 1, 0, 0.0, StepStatus::Singular),
    }
}

/// Dispatches to the configured inner solver.
pub fn solve_step(system: &SchurSystem, config: &SolverConfig) -> StepReport {
    match config.inner_solver {
        InnerSolver::Power => power_schur_solve(system, config),
        InnerSolver::Pcg => pcg_schur_solve(system, config),
        InnerSolver::Direct => direct_schur_solve(system, config),
    }
}

/// Lanczos step cap of [`spectral_check`].
pub const SPECTRAL_LANCZOS_STEPS: usize = 300;

/// Largest eigenvalue of `U⁻¹ W V⁺ Wᵀ`.
///
/// The operator is similar to the positive-semidefinite
/// `A = U^{-1/2} W V⁺ Wᵀ U^{-1/2}` (`U` is block diagonal, so its inverse
/// square root is formed per camera). The estimate is the largest Ritz value
/// of a Lanczos run on `A` with full reorthogonalization, at most
/// `SPECTRAL_LANCZOS_STEPS` steps. Ritz values never exceed the true
/// eigenvalue.
pub fn spectral_check(system: &SchurSystem) -> f64 {
    let n = system.pose_len();
    if n == 0 {
        return 0.0;
    }
    let pd = system.pose_dim;
    let inv_roots: Vec<DMatrix<f64>> = system
        .u_blocks
        .iter()
        .map(|u| {
            let eig = ((u + u.transpose()) * 0.5).symmetric_eigen();
            let d = eig.eigenvalues.map(|e| if e > 0.0 { 1.0 / e.sqrt() } else { 0.0 });
            &eig.eigenvectors * DMatrix::from_diagonal(&d) * eig.eigenvectors.transpose()
        })
        .collect();
    let scale = |x: &DVector<f64>| {
        let mut y = DVector::zeros(n);
        for (i, r) in inv_roots.iter().enumerate() {
            y.rows_mut(i * pd, pd).copy_from(&(r * x.rows(i * pd, pd)));
        }
        y
    };
    let apply = |x: &DVector<f64>| scale(&system.apply_coupling(&scale(x)));

    let steps = n.min(SPECTRAL_LANCZOS_STEPS);
    // Fixed, non-symmetric start so no eigenvector is missed by construction.
    let mut q = DVector::from_fn(n, |i, _| 1.0 + ((i * 7919) % 101) as f64 / 101.0);
    q /= q.norm();
    let mut basis: Vec<DVector<f64>> = Vec::with_capacity(steps);
    let mut alphas = Vec::with_capacity(steps);
    let mut betas: Vec<f64> = Vec::with_capacity(steps);
    for _ in 0..steps {
        let mut w = apply(&q);
        let alpha = q.dot(&w);
        basis.push(q.clone());
        alphas.push(alpha);
        for _ in 0..2 {
            for b in &basis {
                let c = b.dot(&w);
                w.axpy(-c, b, 1.0);
            }
        }
        let beta = w.norm();
        if beta <= 1e-14 * alpha.abs().max(1e-300) || basis.len() == steps {
            break;
        }
        betas.push(beta);
        q = w / beta;
    }
    let k = alphas.len();
    let tri = DMatrix::from_fn(k, k, |r, c| {
        if r == c {
            alphas[r]
        } else if r + 1 == c {
            betas[r]
        } else if c + 1 == r {
            betas[c]
        } else {
            0.0
        }
    });
    tri.symmetric_eigen().eigenvalues.max().max(0.0)
}

/// Why the outer loop stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    FunctionTolerance,
    MaxIterations,
}

/// Identifiers attached to the produced trace.
#[derive(Debug, Clone, Default)]
pub struct TraceLabels {
    pub solver_id: String,
    pub problem_id: String,
}

#[derive(Debug, Clone)]
pub struct LmOutcome {
    pub state: ProjectiveState,
    pub trace: ConvergenceTrace,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub iterations: usize,
    pub accepted_steps: usize,
    pub final_lambda: f64,
    pub termination: Termination,
}

/// Linearization cached while the point does not move.
enum Linearization {
    Pose(LandmarkBlockStore),
    Projective { blocks: LandmarkBlockStore, bases: TangentBases },
}

/// Levenberg–Marquardt for either stage.
///
/// Each iteration linearizes (reusing the linearization after a rejected
/// step), assembles the damped system, runs the inner solver and evaluates
/// the trial point on the true cost. Stage-1 VarPro trials re-solve the
/// landmarks in closed form; Stage-2 trials are retracted to the unit
/// spheres. A step is accepted iff the cost strictly decreases; `λ` is then
/// divided by `lambda_decrease`, otherwise multiplied by `lambda_increase`.
///
/// The trace holds the starting cost at iteration 0 and one record per
/// iteration afterwards. Stage 2 ignores `config.mode` and always damps both
/// blocks.
pub fn lm_minimize(
    problem: &BaProblem,
    state: &ProjectiveState,
    stage: Stage,
    config: &SolverConfig,
    pose_config: &PoseConfig,
    labels: &TraceLabels,
) -> Result<LmOutcome, SolverError> {
    config.validate()?;
    if state.num_cameras() != problem.num_cameras() || state.num_landmarks() != problem.num_landmarks() {
        return Err(SolverError::InvalidState("state does not match problem dimensions".into()));
    }
    let mut state = match stage {
        Stage::PseudoObjectSpace => state.clone(),
        Stage::Projective => riemannian::retract(state).map_err(|e| SolverError::InvalidState(e.to_string()))?,
    };
    let mut cost = total_cost(&state, problem, stage, pose_config);
    if !cost.is_finite() {
        return Err(SolverError::InvalidState(format!("starting cost is {cost}")));
    }
    let initial_cost = cost;
    let mut trace = ConvergenceTrace::new(&labels.solver_id, &labels.problem_id, stage.label(), cost);
    let damping = match (stage, config.mode) {
        (Stage::PseudoObjectSpace, SolverMode::VarPro) => DampingMode::PoseOnly,
        _ => DampingMode::Both,
    };

    let start = Instant::now();
    let mut lambda = config.initial_lambda;
    let mut linearization: Option<Linearization> = None;
    let mut iterations = 0;
    let mut accepted_steps = 0;
    let mut termination = Termination::MaxIterations;
    for it in 1..=config.max_outer_iterations {
        iterations = it;
        if cost == 0.0 {
            termination = Termination::FunctionTolerance;
            break;
        }
        let lin = match linearization.take() {
            Some(lin) => lin,
            None => linearize(&state, problem, stage, pose_config)?,
        };
        let (system_blocks, bases) = match &lin {
            Linearization::Pose(blocks) => (blocks, None),
            Linearization::Projective { blocks, bases } => (blocks, Some(bases)),
        };
        let system = assemble(system_blocks, lambda, damping);
        let step = solve_step(&system, config);
        let trial = match bases {
            None => pose_trial(&state, problem, &step, config.mode, pose_config),
            Some(bases) => projective_trial(&state, bases, &step),
        };
        let trial_cost = trial
            .as_ref()
            .map(|t| total_cost(t, problem, stage, pose_config))
            .unwrap_or(f64::INFINITY);
        log::debug!(
            "{} it {it}: cost {cost:e} trial {trial_cost:e} lambda {lambda:e} inner {} order {}",
            stage.label(),
            step.inner_iterations_used,
            step.power_order_used
        );

        if trial_cost < cost {
            let decrease = (cost - trial_cost) / cost;
            state = trial.expect("finite cost implies a trial state");
            cost = trial_cost;
            lambda = (lambda / config.lambda_decrease).max(config.lambda_min);
            accepted_steps += 1;
            trace.push(it, cost, start.elapsed().as_secs_f64());
            if decrease <= config.function_tolerance {
                termination = Termination::FunctionTolerance;
                break;
            }
        } else {
            lambda = (lambda * config.lambda_increase).min(config.lambda_max);
            linearization = Some(lin);
            trace.push(it, cost, start.elapsed().as_secs_f64());
        }
    }
    Ok(LmOutcome {
        state,
        trace,
        initial_cost,
        final_cost: cost,
        iterations,
        accepted_steps,
        final_lambda: lambda,
        termination,
    })
}

fn linearize(state: &ProjectiveState, problem: &BaProblem, stage: Stage, pose_config: &PoseConfig) -> Result<Linearization, SolverError> {
    Ok(match stage {
        Stage::PseudoObjectSpace => Linearization::Pose(linearize_pose(state, problem, pose_config)),
        Stage::Projective => {
            let bases = TangentBases::at(state).map_err(|e| SolverError::InvalidState(e.to_string()))?;
            let raw = crate::objective::linearize_projective(state, problem)
                .map_err(|e| SolverError::InvalidState(e.to_string()))?;
            Linearization::Projective {
                blocks: riemannian::project_blocks(&raw, &bases),
                bases,
            }
        }
    })
}

fn pose_trial(state: &ProjectiveState, problem: &BaProblem, step: &StepReport, mode: SolverMode, pose_config: &PoseConfig) -> Option<ProjectiveState> {
    let mut trial = state.clone();
    for (i, cam) in trial.cameras.iter_mut().enumerate() {
        let d = step.pose_update.rows(12 * i, 12);
        for r in 0..3 {
            for c in 0..4 {
                cam[(r, c)] += d[4 * r + c];
            }
        }
    }
    match mode {
        SolverMode::VarPro => {
            trial.landmarks = solve_landmarks(&trial, problem, pose_config).landmarks;
        }
        SolverMode::Joint => {
            for (j, x) in trial.landmarks.iter_mut().enumerate() {
                let d = step.landmark_update.rows(3 * j, 3);
                *x += Vector4::new(d[0], d[1], d[2], 0.0);
            }
        }
    }
    trial
        .cameras
        .iter()
        .all(|c| c.iter().all(|v| v.is_finite()))
        .then_some(trial)
}

fn projective_trial(state: &ProjectiveState, bases: &TangentBases, step: &StepReport) -> Option<ProjectiveState> {
    let moved = riemannian::apply_tangent_step(state, bases, &step.pose_update, &step.landmark_update);
    riemannian::retract(&moved).ok()
}
