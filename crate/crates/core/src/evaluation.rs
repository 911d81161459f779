//! Convergence traces and Dolan–Moré performance profiles.
//!
//! For a problem `p`, `f⁰(p)` is the shared starting cost and `f*(p)` the
//! smallest cost reached by any solver. The threshold for tolerance `τ` is
//! `f_τ(p) = f*(p) + τ (f⁰(p) - f*(p))`, and `T_τ(p, s)` is the first time
//! solver `s` reaches it. The profile
//! `ρ(s, α) = 100 / |P| · |{p : T_τ(p, s) ≤ α min_s T_τ(p, s)}|`
//! counts problems solved within a factor `α` of the fastest solver.
//! Problems no solver reaches stay in `|P|`.
//!
//! CSV schemas (one header row, reals with 17 significant digits):
//!
//! * traces: `problem,solver,stage,iteration,cost,elapsed_seconds`
//! * profiles: `tau,solver,alpha,percentage`

use std::collections::BTreeMap;
use std::io::{Read, Write};

use thiserror::Error;

pub const TRACE_HEADER: [&str; 6] = ["problem", "solver", "stage", "iteration", "cost", "elapsed_seconds"];
pub const PROFILE_HEADER: [&str; 4] = ["tau", "solver", "alpha", "percentage"];

#[derive(Debug, Error)]
pub enum EvaluationError {
    #[error("no traces given")]
    Empty,
    #[error("problem {problem}: traces disagree on the initial cost ({a} vs {b})")]
    InitialCostMismatch { problem: String, a: f64, b: f64 },
    #[error("trace {solver}/{problem} has no records")]
    EmptyTrace { solver: String, problem: String },
    #[error("{context}: {source}")]
    Csv {
        context: String,
        #[source]
        source: csv::Error,
    },
    #[error("{context}: {message}")]
    Format { context: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRecord {
    pub iteration: usize,
    pub cost: f64,
    pub elapsed_seconds: f64,
}

/// Cost over time for one solver on one problem.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceTrace {
    pub solver_id: String,
    pub problem_id: String,
    pub stage: String,
    pub records: Vec<TraceRecord>,
}

impl ConvergenceTrace {
    /// Starts a trace with the record `(0, initial_cost, 0 s)`.
    pub fn new(solver_id: &str, problem_id: &str, stage: &str, initial_cost: f64) -> Self {
        Self {
            solver_id: solver_id.to_owned(),
            problem_id: problem_id.to_owned(),
            stage: stage.to_owned(),
            records: vec![TraceRecord {
                iteration: 0,
                cost: initial_cost,
                elapsed_seconds: 0.0,
            }],
        }
    }

    /// Appends a record; elapsed time is clamped to stay non-decreasing.
    pub fn push(&mut self, iteration: usize, cost: f64, elapsed_seconds: f64) {
        let last = self.records.last().map_or(0.0, |r| r.elapsed_seconds);
        self.records.push(TraceRecord {
            iteration,
            cost,
            elapsed_seconds: elapsed_seconds.max(last),
        });
    }

    pub fn initial_cost(&self) -> f64 {
        self.records[0].cost
    }

    pub fn final_cost(&self) -> f64 {
        self.records.last().map_or(f64::NAN, |r| r.cost)
    }

    pub fn min_cost(&self) -> f64 {
        self.records.iter().map(|r| r.cost).fold(f64::INFINITY, f64::min)
    }

    /// Pipeline view of a later-stage trace: starts from `initial_cost`
    /// (the cost before the first stage) at time 0, then this trace's
    /// records shifted by `time_offset` seconds of earlier stages.
    pub fn with_pipeline_prefix(&self, stage: &str, initial_cost: f64, time_offset: f64) -> Self {
        let mut out = ConvergenceTrace::new(&self.solver_id, &self.problem_id, stage, initial_cost);
        for (k, r) in self.records.iter().enumerate() {
            out.push(k + 1, r.cost, r.elapsed_seconds + time_offset);
        }
        out
    }
}

/// `f_τ(p)` over all traces of one problem.
pub fn cost_threshold(traces: &[&ConvergenceTrace], tau: f64) -> Result<f64, EvaluationError> {
    let first = traces.first().ok_or(EvaluationError::Empty)?;
    for t in traces {
        if t.records.is_empty() {
            return Err(EvaluationError::EmptyTrace {
                solver: t.solver_id.clone(),
                problem: t.problem_id.clone(),
            });
        }
    }
    let f0 = first.initial_cost();
    for t in traces {
        if t.initial_cost() != f0 {
            return Err(EvaluationError::InitialCostMismatch {
                problem: t.problem_id.clone(),
                a: f0,
                b: t.initial_cost(),
            });
        }
    }
    let best = traces.iter().map(|t| t.min_cost()).fold(f64::INFINITY, f64::min);
    Ok(best + tau * (f0 - best))
}

/// Elapsed time of the first record at or below `threshold`.
pub fn time_to_threshold(trace: &ConvergenceTrace, threshold: f64) -> Option<f64> {
    trace
        .records
        .iter()
        .find(|r| r.cost <= threshold)
        .map(|r| r.elapsed_seconds)
}

/// `ρ(s, ·)` for one solver, sampled as a step function.
#[derive(Debug, Clone, PartialEq)]
pub struct ProfileResult {
    pub solver_id: String,
    pub tau: f64,
    /// `(α, percentage)` pairs, `α` increasing.
    pub curve: Vec<(f64, f64)>,
}

impl ProfileResult {
    /// `ρ(s, α)` read off the sampled curve.
    pub fn at(&self, alpha: f64) -> f64 {
        self.curve
            .iter()
            .take_while(|(a, _)| *a <= alpha)
            .last()
            .map_or(0.0, |(_, p)| *p)
    }
}

/// Log-spaced α grid on `[1, 32]`, eight samples per doubling.
pub fn default_alpha_grid() -> Vec<f64> {
    (0..=40).map(|k| 2f64.powf(k as f64 / 8.0)).collect()
}

/// Performance profiles of every solver found in `traces`.
///
/// The curve of each solver is evaluated at the union of its exact
/// breakpoints `T_τ(p, s) / min_s T_τ(p, s)` and `alpha_grid`.
pub fn performance_profile(traces: &[ConvergenceTrace], tau: f64, alpha_grid: &[f64]) -> Result<Vec<ProfileResult>, EvaluationError> {
    if traces.is_empty() {
        return Err(EvaluationError::Empty);
    }
    let mut by_problem: BTreeMap<&str, Vec<&ConvergenceTrace>> = BTreeMap::new();
    let mut solvers: Vec<&str> = Vec::new();
    for t in traces {
        by_problem.entry(t.problem_id.as_str()).or_default().push(t);
        if !solvers.contains(&t.solver_id.as_str()) {
            solvers.push(&t.solver_id);
        }
    }
    let num_problems = by_problem.len() as f64;

    // Per solver: for each problem, (T, T_min) when both exist.
    let mut timings: BTreeMap<&str, Vec<Option<(f64, f64)>>> = solvers.iter().map(|s| (*s, Vec::new())).collect();
    for group in by_problem.values() {
        let threshold = cost_threshold(group, tau)?;
        let times: Vec<(&str, Option<f64>)> = group
            .iter()
            .map(|t| (t.solver_id.as_str(), time_to_threshold(t, threshold)))
            .collect();
        let best = times.iter().filter_map(|(_, t)| *t).fold(f64::INFINITY, f64::min);
        for s in &solvers {
            let entry = times
                .iter()
                .find(|(id, _)| id == s)
                .and_then(|(_, t)| *t)
                .map(|t| (t, best));
            timings.get_mut(s).expect("solver registered").push(entry);
        }
    }

    let mut results = Vec::with_capacity(solvers.len());
    for s in &solvers {
        let entries = &timings[s];
        let solved_within = |alpha: f64| entries.iter().flatten().filter(|(t, best)| *t <= alpha * best).count();
        let mut alphas: Vec<f64> = entries
            .iter()
            .flatten()
            .map(|(t, best)| if *t == *best { 1.0 } else { t / best })
            .filter(|a| a.is_finite())
            .chain(alpha_grid.iter().copied())
            .filter(|a| *a >= 1.0)
            .collect();
        alphas.push(1.0);
        alphas.sort_by(f64::total_cmp);
        alphas.dedup();
        let curve = alphas
            .into_iter()
            .map(|a| (a, 100.0 * solved_within(a) as f64 / num_problems))
            .collect();
        results.push(ProfileResult {
            solver_id: s.to_string(),
            tau,
            curve,
        });
    }
    Ok(results)
}

fn format_real(v: f64) -> String {
    format!("{v:.16e}")
}

fn csv_err(context: &str) -> impl Fn(csv::Error) -> EvaluationError + '_ {
    move |source| EvaluationError::Csv {
        context: context.to_owned(),
        source,
    }
}

pub fn write_traces_csv<W: Write>(traces: &[ConvergenceTrace], out: W) -> Result<(), EvaluationError> {
    let err = csv_err("writing trace CSV");
    let mut w = csv::Writer::from_writer(out);
    w.write_record(TRACE_HEADER).map_err(&err)?;
    for t in traces {
        for r in &t.records {
            w.write_record([
                t.problem_id.as_str(),
                t.solver_id.as_str(),
                t.stage.as_str(),
                &r.iteration.to_string(),
                &format_real(r.cost),
                &format_real(r.elapsed_seconds),
            ])
            .map_err(&err)?;
        }
    }
    w.flush().map_err(|e| err(e.into()))?;
    Ok(())
}

fn parse_field<T: std::str::FromStr>(record: &csv::StringRecord, idx: usize, context: &str) -> Result<T, EvaluationError> {
    let raw = record.get(idx).unwrap_or("");
    raw.parse().map_err(|_| EvaluationError::Format {
        context: context.to_owned(),
        message: format!("cannot parse `{raw}` in column {idx}"),
    })
}

fn check_header(reader: &mut csv::Reader<impl Read>, expected: &[&str], context: &str) -> Result<(), EvaluationError> {
    let header = reader.headers().map_err(csv_err(context))?;
    if header.iter().ne(expected.iter().copied()) {
        return Err(EvaluationError::Format {
            context: context.to_owned(),
            message: format!("expected header {}", expected.join(",")),
        });
    }
    Ok(())
}

/// Reads traces back; consecutive rows with the same (problem, solver,
/// stage) form one trace.
pub fn read_traces_csv<R: Read>(input: R) -> Result<Vec<ConvergenceTrace>, EvaluationError> {
    let context = "reading trace CSV";
    let mut reader = csv::Reader::from_reader(input);
    check_header(&mut reader, &TRACE_HEADER, context)?;
    let mut traces: Vec<ConvergenceTrace> = Vec::new();
    for row in reader.records() {
        let row = row.map_err(csv_err(context))?;
        let (problem, solver, stage) = (&row[0], &row[1], &row[2]);
        let record = TraceRecord {
            iteration: parse_field(&row, 3, context)?,
            cost: parse_field(&row, 4, context)?,
            elapsed_seconds: parse_field(&row, 5, context)?,
        };
        match traces.last_mut() {
            Some(t) if t.problem_id == problem && t.solver_id == solver && t.stage == stage => t.records.push(record),
            _ => traces.push(ConvergenceTrace {
                solver_id: solver.to_owned(),
                problem_id: problem.to_owned(),
                stage: stage.to_owned(),
                records: vec![record],
            }),
        }
    }
    Ok(traces)
}

pub fn write_profiles_csv<W: Write>(profiles: &[ProfileResult], out: W) -> Result<(), EvaluationError> {
    let err = csv_err("writing profile CSV");
    let mut w = csv::Writer::from_writer(out);
    w.write_record(PROFILE_HEADER).map_err(&err)?;
    for p in profiles {
        for (alpha, pct) in &p.curve {
            w.write_record([format_real(p.tau), p.solver_id.clone(), format_real(*alpha), format_real(*pct)])
                .map_err(&err)?;
        }
    }
    w.flush().map_err(|e| err(e.into()))?;
    Ok(())
}

pub fn read_profiles_csv<R: Read>(input: R) -> Result<Vec<ProfileResult>, EvaluationError> {
    let context = "reading profile CSV";
    let mut reader = csv::Reader::from_reader(input);
    check_header(&mut reader, &PROFILE_HEADER, context)?;
    let mut profiles: Vec<ProfileResult> = Vec::new();
    for row in reader.records() {
        let row = row.map_err(csv_err(context))?;
        let tau: f64 = parse_field(&row, 0, context)?;
        let solver = &row[1];
        let point = (parse_field(&row, 2, context)?, parse_field(&row, 3, context)?);
        match profiles.last_mut() {
            Some(p) if p.tau == tau && p.solver_id == solver => p.curve.push(point),
            _ => profiles.push(ProfileResult {
                solver_id: solver.to_owned(),
                tau,
                curve: vec![point],
            }),
        }
    }
    Ok(profiles)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trace(solver: &str, problem: &str, points: &[(f64, f64)]) -> ConvergenceTrace {
        let mut t = ConvergenceTrace::new(solver, problem, "stage1", points[0].0);
        for (k, (cost, time)) in points.iter().enumerate().skip(1) {
            t.push(k, *cost, *time);
        }
        t
    }

    #[test]
    fn threshold_direct_cases() {
        let t = trace("a", "p", &[(100.0, 0.0), (0.0, 1.0)]);
        assert_eq!(cost_threshold(&[&t], 0.01).unwrap(), 1.0);
        let flat = trace("a", "p", &[(7.0, 0.0), (7.0, 1.0)]);
        for tau in [0.0, 0.01, 0.5] {
            assert_eq!(cost_threshold(&[&flat], tau).unwrap(), 7.0);
        }
    }

    #[test]
    fn mismatched_initial_costs_are_rejected() {
        let a = trace("a", "p", &[(10.0, 0.0)]);
        let b = trace("b", "p", &[(11.0, 0.0)]);
        assert!(matches!(
            cost_threshold(&[&a, &b], 0.1),
            Err(EvaluationError::InitialCostMismatch { .. })
        ));
        assert!(matches!(cost_threshold(&[], 0.1), Err(EvaluationError::Empty)));
    }

    #[test]
    fn time_to_threshold_cases() {
        let t = trace("a", "p", &[(10.0, 0.0), (8.0, 0.5), (5.0, 1.5), (2.0, 2.5), (1.0, 4.0)]);
        assert_eq!(time_to_threshold(&t, 20.0), Some(0.0));
        assert_eq!(time_to_threshold(&t, 0.5), None);
        assert_eq!(time_to_threshold(&t, 3.0), Some(2.5));
    }

    #[test]
    fn single_solver_profile_starts_at_full_credit() {
        let traces = vec![
            trace("a", "p1", &[(10.0, 0.0), (1.0, 2.0)]),
            trace("a", "p2", &[(10.0, 0.0), (1.0, 3.0)]),
        ];
        let prof = performance_profile(&traces, 0.01, &default_alpha_grid()).unwrap();
        assert_eq!(prof.len(), 1);
        assert_eq!(prof[0].at(1.0), 100.0);
    }

    #[test]
    fn solver_that_never_reaches_threshold_scores_zero() {
        let mut traces = Vec::new();
        for p in ["p1", "p2", "p3", "p4"] {
            traces.push(trace("good", p, &[(10.0, 0.0), (0.0, 1.0)]));
            traces.push(trace("bad", p, &[(10.0, 0.0), (9.0, 1.0)]));
        }
        let prof = performance_profile(&traces, 0.01, &default_alpha_grid()).unwrap();
        let bad = prof.iter().find(|p| p.solver_id == "bad").unwrap();
        assert!(bad.curve.iter().all(|(_, pct)| *pct == 0.0));
    }

    #[test]
    fn empty_profile_input_is_an_error() {
        assert!(matches!(performance_profile(&[], 0.1, &[1.0]), Err(EvaluationError::Empty)));
    }

    #[test]
    fn empty_profile_list_writes_header_only() {
        let mut buf = Vec::new();
        write_profiles_csv(&[], &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "tau,solver,alpha,percentage\n");
    }

    #[test]
    fn trace_csv_golden_sample() {
        let t = trace("povar", "ladybug", &[(2.5, 0.0), (0.125, 0.5)]);
        let mut buf = Vec::new();
        write_traces_csv(&[t], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text,
            "problem,solver,stage,iteration,cost,elapsed_seconds\n\
             ladybug,povar,stage1,0,2.5000000000000000e0,0.0000000000000000e0\n\
             ladybug,povar,stage1,1,1.2500000000000000e-1,5.0000000000000000e-1\n"
        );
    }

    #[test]
    fn pipeline_prefix_shifts_times() {
        let t = trace("ripoba", "p", &[(50.0, 0.0), (10.0, 1.0)]);
        let full = t.with_pipeline_prefix("pipeline", 1000.0, 3.0);
        assert_eq!(full.initial_cost(), 1000.0);
        assert_eq!(full.records[1].cost, 50.0);
        assert_eq!(full.records[1].elapsed_seconds, 3.0);
        assert_eq!(full.records[2].elapsed_seconds, 4.0);
    }
}
