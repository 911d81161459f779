use std::collections::HashMap;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use povar::evaluation::{self, ConvergenceTrace};
use povar::metric_upgrade::{self, MetricError, MetricUpgradeConfig};
use povar::riemannian::lift_stage1_to_stage2;
use povar::solvers::{SolverError, TraceLabels};
use povar::synth::{self, SynthConfig};
use povar::{lm_minimize, random_init, read_bal_file, write_bal, InnerSolver, LmOutcome, PoseConfig, SolverConfig, SolverMode, Stage};

use crate::args::{ProfileArgs, SolveArgs, Stage1Solver, Stage2Solver, StageSelection, SynthArgs};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Parse(String),
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Numeric(String),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Parse(_) => 2,
            CliError::Config(_) => 3,
            CliError::Numeric(_) => 4,
            CliError::Io { .. } => 1,
        }
    }

    fn io(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> CliError {
        let context = context.into();
        move |source| CliError::Io { context, source }
    }
}

impl From<SolverError> for CliError {
    fn from(e: SolverError) -> Self {
        match e {
            SolverError::InvalidConfig(m) => CliError::Config(m),
            SolverError::InvalidState(m) => CliError::Numeric(m),
        }
    }
}

#[derive(Debug, Serialize)]
struct ConfigEcho {
    seed: u64,
    stages: &'static str,
    stage1_solver: &'static str,
    stage2_solver: &'static str,
    eta: f64,
    max_outer_iterations: usize,
    function_tolerance: f64,
    initial_lambda: f64,
    lambda_increase: f64,
    lambda_decrease: f64,
    lambda_min: f64,
    lambda_max: f64,
    max_power_order: usize,
    power_threshold: f64,
    max_inner_iterations: usize,
    pcg_tolerance: f64,
}

#[derive(Debug, Serialize)]
struct StageSummary {
    stage: &'static str,
    solver: &'static str,
    initial_cost: f64,
    final_cost: f64,
    iterations: usize,
    accepted_steps: usize,
    termination: String,
    seconds: f64,
}

#[derive(Debug, Serialize)]
struct MetricSummary {
    plane_at_infinity: [f64; 3],
    alphas: Vec<f64>,
    cost: f64,
    orthogonality_error: f64,
    iterations: usize,
    flagged: bool,
    seconds: f64,
}

#[derive(Debug, Serialize)]
struct RunSummary {
    schema_version: u32,
    input: String,
    num_cameras: usize,
    num_landmarks: usize,
    num_observations: usize,
    config: ConfigEcho,
    stages: Vec<StageSummary>,
    metric: Option<MetricSummary>,
    total_seconds: f64,
    error: Option<String>,
}

fn stage1_name(s: Stage1Solver) -> &'static str {
    match s {
        Stage1Solver::Povar => "povar",
        Stage1Solver::Poba => "poba",
        Stage1Solver::Iterative => "iterative",
        Stage1Solver::Direct => "direct",
    }
}

fn stage2_name(s: Stage2Solver) -> &'static str {
    match s {
        Stage2Solver::Ripoba => "ripoba",
        Stage2Solver::Ripcg => "ripcg",
    }
}

fn selection_name(s: StageSelection) -> &'static str {
    match s {
        StageSelection::Stage1 => "stage1",
        StageSelection::Stage2 => "stage2",
        StageSelection::Full => "full",
        StageSelection::Metric => "metric",
    }
}

/// Base configuration with command-line overrides applied.
pub fn base_config(args: &SolveArgs) -> SolverConfig {
    let mut c = SolverConfig::default();
    if let Some(v) = args.lambda0 {
        c.initial_lambda = v;
    }
    if let Some(v) = args.max_iterations {
        c.max_outer_iterations = v;
    }
    if let Some(v) = args.power_order {
        c.max_power_order = v;
    }
    if let Some(v) = args.power_threshold {
        c.power_threshold = v;
    }
    if let Some(v) = args.inner_iterations {
        c.max_inner_iterations = v;
    }
    if let Some(v) = args.pcg_tolerance {
        c.pcg_tolerance = v;
    }
    c
}

fn stage1_config(base: &SolverConfig, solver: Stage1Solver) -> SolverConfig {
    let mut c = base.clone();
    match solver {
        Stage1Solver::Povar => {}
        Stage1Solver::Poba => c.mode = SolverMode::Joint,
        Stage1Solver::Iterative => c.inner_solver = InnerSolver::Pcg,
        Stage1Solver::Direct => c.inner_solver = InnerSolver::Direct,
    }
    c
}

fn stage2_config(base: &SolverConfig, solver: Stage2Solver) -> SolverConfig {
    let mut c = base.clone();
    c.inner_solver = match solver {
        Stage2Solver::Ripoba => InnerSolver::Power,
        Stage2Solver::Ripcg => InnerSolver::Pcg,
    };
    c
}

fn stage_summary(stage: &'static str, solver: &'static str, out: &LmOutcome, seconds: f64) -> StageSummary {
    StageSummary {
        stage,
        solver,
        initial_cost: out.initial_cost,
        final_cost: out.final_cost,
        iterations: out.iterations,
        accepted_steps: out.accepted_steps,
        termination: format!("{:?}", out.termination),
        seconds,
    }
}

/// Directory name per input: file stem without `.gz`/`.txt`, made unique.
fn output_names(inputs: &[PathBuf]) -> Vec<String> {
    let mut seen: HashMap<String, usize> = HashMap::new();
    inputs
        .iter()
        .map(|p| {
            let name = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "problem".into());
            let stem = name.trim_end_matches(".gz").trim_end_matches(".txt").to_owned();
            let count = seen.entry(stem.clone()).or_insert(0);
            *count += 1;
            if *count == 1 {
                stem
            } else {
                format!("{stem}-{count}")
            }
        })
        .collect()
}

pub fn solve(args: &SolveArgs) -> Result<(), CliError> {
    let pose = PoseConfig::new(args.eta.unwrap_or(PoseConfig::default().eta())).map_err(|e| CliError::Config(e.to_string()))?;
    let base = base_config(args);
    base.validate()?;
    if args.jobs == 0 {
        return Err(CliError::Config("--jobs must be at least 1".into()));
    }
    fs::create_dir_all(&args.output).map_err(CliError::io(format!("creating {}", args.output.display())))?;

    let names = output_names(&args.inputs);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(args.jobs)
        .build()
        .map_err(|e| CliError::Config(e.to_string()))?;
    let results: Vec<Result<(), CliError>> = pool.install(|| {
        args.inputs
            .par_iter()
            .zip(names.par_iter())
            .map(|(input, name)| solve_one(args, &base, &pose, input, &args.output.join(name)))
            .collect()
    });
    let mut first_error = None;
    for (input, r) in args.inputs.iter().zip(results) {
        if let Err(e) = r {
            log::error!("{}: {e}", input.display());
            first_error.get_or_insert(e);
        }
    }
    first_error.map_or(Ok(()), Err)
}

fn solve_one(args: &SolveArgs, base: &SolverConfig, pose: &PoseConfig, input: &Path, dir: &Path) -> Result<(), CliError> {
    let total = Instant::now();
    let raw = read_bal_file(input).map_err(|e| CliError::Parse(format!("{}: {e}", input.display())))?;
    let (problem, pruned) = raw.prune(2);
    if pruned.removed_landmarks > 0 {
        info!("{}: dropped {} landmarks seen by fewer than 2 cameras", input.display(), pruned.removed_landmarks);
    }
    fs::create_dir_all(dir).map_err(CliError::io(format!("creating {}", dir.display())))?;

    let selection = args.selection();
    let problem_id = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let mut summary = RunSummary {
        schema_version: SCHEMA_VERSION,
        input: input.display().to_string(),
        num_cameras: problem.num_cameras(),
        num_landmarks: problem.num_landmarks(),
        num_observations: problem.num_observations(),
        config: ConfigEcho {
            seed: args.seed,
            stages: selection_name(selection),
            stage1_solver: stage1_name(args.solver),
            stage2_solver: stage2_name(args.stage2_solver),
            eta: pose.eta(),
            max_outer_iterations: base.max_outer_iterations,
            function_tolerance: base.function_tolerance,
            initial_lambda: base.initial_lambda,
            lambda_increase: base.lambda_increase,
            lambda_decrease: base.lambda_decrease,
            lambda_min: base.lambda_min,
            lambda_max: base.lambda_max,
            max_power_order: base.max_power_order,
            power_threshold: base.power_threshold,
            max_inner_iterations: base.max_inner_iterations,
            pcg_tolerance: base.pcg_tolerance,
        },
        stages: Vec::new(),
        metric: None,
        total_seconds: 0.0,
        error: None,
    };
    let mut traces: Vec<ConvergenceTrace> = Vec::new();

    let outcome = run_stages(args, base, pose, &problem, &problem_id, selection, &mut summary, &mut traces, dir);
    if let Err(e) = &outcome {
        summary.error = Some(e.to_string());
    }
    summary.total_seconds = total.elapsed().as_secs_f64();

    let trace_path = dir.join("trace.csv");
    let file = File::create(&trace_path).map_err(CliError::io(format!("creating {}", trace_path.display())))?;
    evaluation::write_traces_csv(&traces, BufWriter::new(file)).map_err(|e| CliError::Io {
        context: format!("writing {}", trace_path.display()),
        source: std::io::Error::other(e.to_string()),
    })?;
    let summary_path = dir.join("summary.json");
    let file = File::create(&summary_path).map_err(CliError::io(format!("creating {}", summary_path.display())))?;
    serde_json::to_writer_pretty(BufWriter::new(file), &summary).map_err(|e| CliError::Io {
        context: format!("writing {}", summary_path.display()),
        source: e.into(),
    })?;
    outcome
}

#[allow(clippy::too_many_arguments)]
fn run_stages(
    args: &SolveArgs,
    base: &SolverConfig,
    pose: &PoseConfig,
    problem: &povar::BaProblem,
    problem_id: &str,
    selection: StageSelection,
    summary: &mut RunSummary,
    traces: &mut Vec<ConvergenceTrace>,
    dir: &Path,
) -> Result<(), CliError> {
    if selection == StageSelection::Metric && problem.metric_cameras().is_none() {
        return Err(CliError::Config("the metric stage needs the camera block of the BAL file (focal lengths)".into()));
    }
    let start = random_init(problem, args.seed, pose);
    let s1_name = stage1_name(args.solver);
    let s2_name = stage2_name(args.stage2_solver);

    let mut state = start;
    let mut pipeline_start: Option<(f64, f64)> = None;
    if matches!(selection, StageSelection::Stage1 | StageSelection::Full | StageSelection::Metric) {
        let t = Instant::now();
        let labels = TraceLabels {
            solver_id: s1_name.into(),
            problem_id: problem_id.into(),
        };
        let out = lm_minimize(problem, &state, Stage::PseudoObjectSpace, &stage1_config(base, args.solver), pose, &labels)?;
        let seconds = t.elapsed().as_secs_f64();
        info!("{problem_id}: stage 1 cost {:e} -> {:e} in {} iterations", out.initial_cost, out.final_cost, out.iterations);
        summary.stages.push(stage_summary("stage1", s1_name, &out, seconds));
        pipeline_start = Some((out.initial_cost, out.trace.records.last().map_or(0.0, |r| r.elapsed_seconds)));
        traces.push(out.trace);
        state = out.state;
        write_state_file(&state, dir)?;
    }
    if selection == StageSelection::Stage1 {
        return Ok(());
    }

    let t = Instant::now();
    let labels = TraceLabels {
        solver_id: s2_name.into(),
        problem_id: problem_id.into(),
    };
    let lifted = lift_stage1_to_stage2(&state);
    let out = lm_minimize(problem, &lifted, Stage::Projective, &stage2_config(base, args.stage2_solver), pose, &labels)?;
    let seconds = t.elapsed().as_secs_f64();
    info!("{problem_id}: stage 2 cost {:e} -> {:e} in {} iterations", out.initial_cost, out.final_cost, out.iterations);
    summary.stages.push(stage_summary("stage2", s2_name, &out, seconds));
    let trace = match pipeline_start {
        Some((f0, offset)) => out.trace.with_pipeline_prefix("stage2", f0, offset),
        None => out.trace.clone(),
    };
    traces.push(trace);
    state = out.state;
    write_state_file(&state, dir)?;
    if selection != StageSelection::Metric {
        return Ok(());
    }

    let t = Instant::now();
    let metric = metric_upgrade::upgrade(problem, &state, &MetricUpgradeConfig::default()).map_err(|e| match e {
        MetricError::MissingIntrinsics | MetricError::CountMismatch { .. } => CliError::Config(e.to_string()),
        MetricError::SingularIntrinsics(_) => CliError::Numeric(e.to_string()),
    })?;
    if metric.flagged {
        warn!("{problem_id}: metric upgrade did not reach the quality threshold");
    }
    let path = dir.join("metric.txt");
    let file = File::create(&path).map_err(CliError::io(format!("creating {}", path.display())))?;
    crate::output::write_metric(&metric, BufWriter::new(file)).map_err(CliError::io(format!("writing {}", path.display())))?;
    summary.metric = Some(MetricSummary {
        plane_at_infinity: [metric.ambiguity.c.x, metric.ambiguity.c.y, metric.ambiguity.c.z],
        alphas: metric.ambiguity.alphas.clone(),
        cost: metric.cost,
        orthogonality_error: metric.orthogonality_error,
        iterations: metric.iterations,
        flagged: metric.flagged,
        seconds: t.elapsed().as_secs_f64(),
    });
    Ok(())
}

fn write_state_file(state: &povar::ProjectiveState, dir: &Path) -> Result<(), CliError> {
    let path = dir.join("state.txt");
    let file = File::create(&path).map_err(CliError::io(format!("creating {}", path.display())))?;
    crate::output::write_state(state, BufWriter::new(file)).map_err(CliError::io(format!("writing {}", path.display())))
}

pub fn profile(args: &ProfileArgs) -> Result<(), CliError> {
    for tau in &args.tau {
        if !(tau.is_finite() && (0.0..=1.0).contains(tau)) {
            return Err(CliError::Config(format!("tau must lie in [0, 1], got {tau}")));
        }
    }
    let mut traces = Vec::new();
    for path in &args.traces {
        let file = File::open(path).map_err(CliError::io(format!("opening {}", path.display())))?;
        let mut read = evaluation::read_traces_csv(file).map_err(|e| CliError::Parse(format!("{}: {e}", path.display())))?;
        traces.append(&mut read);
    }
    if let Some(stage) = &args.stage {
        traces.retain(|t| &t.stage == stage);
    }
    if traces.is_empty() {
        return Err(CliError::Parse("no traces to profile".into()));
    }
    let grid = evaluation::default_alpha_grid();
    let mut profiles = Vec::new();
    for tau in &args.tau {
        let mut p = evaluation::performance_profile(&traces, *tau, &grid).map_err(|e| CliError::Parse(e.to_string()))?;
        profiles.append(&mut p);
    }
    let to_io = |e: evaluation::EvaluationError| CliError::Io {
        context: "writing profile".into(),
        source: std::io::Error::other(e.to_string()),
    };
    match &args.output {
        Some(path) => {
            let file = File::create(path).map_err(CliError::io(format!("creating {}", path.display())))?;
            evaluation::write_profiles_csv(&profiles, BufWriter::new(file)).map_err(to_io)
        }
        None => evaluation::write_profiles_csv(&profiles, std::io::stdout().lock()).map_err(to_io),
    }
}

pub fn synth(args: &SynthArgs) -> Result<(), CliError> {
    let config = SynthConfig::new(args.cameras, args.landmarks, args.noise, args.seed);
    let problem = synth::generate(&config).map_err(|e| CliError::Config(e.to_string()))?;
    let file = File::create(&args.output).map_err(CliError::io(format!("creating {}", args.output.display())))?;
    write_bal(&problem, BufWriter::new(file)).map_err(CliError::io(format!("writing {}", args.output.display())))
}
