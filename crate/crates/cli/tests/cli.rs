use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use povar::evaluation::{read_profiles_csv, read_traces_csv};

fn povar() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_povar"));
    cmd.env_remove("POVAR_OUTPUT_DIR").env("RUST_LOG", "warn");
    cmd
}

fn run(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("binary runs");
    if !out.status.success() {
        eprintln!("{}", String::from_utf8_lossy(&out.stderr));
    }
    out
}

fn synth(dir: &Path, cameras: usize, landmarks: usize, seed: u64) -> PathBuf {
    let path = dir.join("synthetic.txt");
    let out = run(povar().args(["synth", "--cameras", &cameras.to_string(), "--landmarks", &landmarks.to_string(), "--seed", &seed.to_string(), "-o"]).arg(&path));
    assert!(out.status.success());
    path
}

fn summary(dir: &Path) -> serde_json::Value {
    let text = std::fs::read_to_string(dir.join("summary.json")).unwrap();
    serde_json::from_str(&text).unwrap()
}

#[test]
fn synth_output_parses_back() {
    let tmp = tempfile::tempdir().unwrap();
    let path = synth(tmp.path(), 6, 40, 2);
    let problem = povar::read_bal_file(&path).unwrap();
    assert_eq!(problem.num_cameras(), 6);
    assert!(problem.num_landmarks() <= 40 && problem.num_landmarks() > 0);
    assert!(problem.metric_cameras().is_some());
}

#[test]
fn stage1_run_writes_bounded_trace() {
    let tmp = tempfile::tempdir().unwrap();
    let input = synth(tmp.path(), 5, 30, 1);
    let out_dir = tmp.path().join("out");
    let out = run(povar().args(["solve", "--stage1", "--solver", "povar", "--seed", "1", "-o"]).arg(&out_dir).arg(&input));
    assert!(out.status.success());
    let problem_dir = out_dir.join("synthetic");
    let traces = read_traces_csv(std::fs::File::open(problem_dir.join("trace.csv")).unwrap()).unwrap();
    assert_eq!(traces.len(), 1);
    assert_eq!(traces[0].stage, "stage1");
    assert!(traces[0].records.len() <= 51);
    assert!(problem_dir.join("state.txt").exists());
    let s = summary(&problem_dir);
    assert_eq!(s["schema_version"], 1);
    assert_eq!(s["stages"].as_array().unwrap().len(), 1);
    assert!(s["error"].is_null());
}

#[test]
fn repeated_runs_are_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let input = synth(tmp.path(), 5, 30, 4);
    let costs = |name: &str| {
        let dir = tmp.path().join(name);
        assert!(run(povar().args(["solve", "--full", "--seed", "7", "-o"]).arg(&dir).arg(&input)).status.success());
        let traces = read_traces_csv(std::fs::File::open(dir.join("synthetic/trace.csv")).unwrap()).unwrap();
        traces.iter().flat_map(|t| t.records.iter().map(|r| r.cost.to_bits())).collect::<Vec<_>>()
    };
    assert_eq!(costs("a"), costs("b"));
}

#[test]
fn full_pipeline_prefixes_stage2_trace() {
    let tmp = tempfile::tempdir().unwrap();
    let input = synth(tmp.path(), 5, 30, 5);
    let dir = tmp.path().join("out");
    assert!(run(povar().args(["solve", "--metric", "-o"]).arg(&dir).arg(&input)).status.success());
    let traces = read_traces_csv(std::fs::File::open(dir.join("synthetic/trace.csv")).unwrap()).unwrap();
    assert_eq!(traces.len(), 2);
    assert_eq!(traces[1].stage, "stage2");
    assert_eq!(traces[1].initial_cost(), traces[0].initial_cost());
    let s = summary(&dir.join("synthetic"));
    assert_eq!(s["metric"]["flagged"], false);
    assert!(dir.join("synthetic/metric.txt").exists());
}

#[test]
fn profile_of_hand_traces() {
    let tmp = tempfile::tempdir().unwrap();
    let traces = tmp.path().join("traces.csv");
    std::fs::write(
        &traces,
        "problem,solver,stage,iteration,cost,elapsed_seconds\n\
         p1,a,stage1,0,100,0\np1,a,stage1,1,1,1\n\
         p1,b,stage1,0,100,0\np1,b,stage1,1,1,2\n\
         p2,a,stage1,0,100,0\np2,a,stage1,1,1,4\n\
         p2,b,stage1,0,100,0\np2,b,stage1,1,1,2\n",
    )
    .unwrap();
    let csv = tmp.path().join("profile.csv");
    let out = run(povar().args(["profile", "--tau", "0.01", "-o"]).arg(&csv).arg(&traces));
    assert!(out.status.success());
    let profiles = read_profiles_csv(std::fs::File::open(&csv).unwrap()).unwrap();
    assert_eq!(profiles.len(), 2);
    for p in &profiles {
        assert_eq!(p.at(1.0), 50.0);
        assert_eq!(p.at(2.0), 100.0);
    }
}

#[test]
fn malformed_input_exits_with_parse_code() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.txt");
    std::fs::write(&bad, "2 3 not-a-number\n").unwrap();
    let out = run(povar().args(["solve", "-o"]).arg(tmp.path().join("out")).arg(&bad));
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn invalid_config_exits_with_config_code() {
    let tmp = tempfile::tempdir().unwrap();
    let input = synth(tmp.path(), 4, 20, 6);
    let out = run(povar().args(["solve", "--eta=-1", "-o"]).arg(tmp.path().join("out")).arg(&input));
    assert_eq!(out.status.code(), Some(3));
    let out = run(povar().args(["solve", "--lambda0", "0", "-o"]).arg(tmp.path().join("out")).arg(&input));
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn output_directory_from_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let input = synth(tmp.path(), 4, 20, 8);
    let dir = tmp.path().join("from-env");
    let out = run(povar().env("POVAR_OUTPUT_DIR", &dir).args(["solve", "--stage1"]).arg(&input));
    assert!(out.status.success());
    assert!(dir.join("synthetic/summary.json").exists());
}

#[test]
fn summary_echoes_defaults() {
    let tmp = tempfile::tempdir().unwrap();
    let input = synth(tmp.path(), 4, 20, 3);
    let dir = tmp.path().join("out");
    assert!(run(povar().args(["solve", "--stage1", "-o"]).arg(&dir).arg(&input)).status.success());
    let c = &summary(&dir.join("synthetic"))["config"];
    let defaults = povar::SolverConfig::default();
    assert_eq!(c["eta"], 0.1);
    assert_eq!(c["seed"], 0);
    assert_eq!(c["initial_lambda"], defaults.initial_lambda);
    assert_eq!(c["max_outer_iterations"], defaults.max_outer_iterations);
    assert_eq!(c["max_power_order"], defaults.max_power_order);
    assert_eq!(c["power_threshold"], defaults.power_threshold);
    assert_eq!(c["stage1_solver"], "povar");
}
