use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn vecot(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vecot")).args(args).output().expect("vecot runs")
}

fn document(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout)
        .unwrap_or_else(|e| panic!("stdout is not JSON ({e}); stderr: {}", String::from_utf8_lossy(&out.stderr)))
}

fn write_two_points(dir: &Path) -> String {
    let path = dir.join("two.json");
    fs::write(&path, r#"{"n": 2, "m": 1, "points": [[0, 0], [3, 4]], "weights": [[1], [-1]]}"#).unwrap();
    path.display().to_string()
}

#[test]
fn two_point_solve_costs_the_distance() {
    let dir = tempfile::tempdir().unwrap();
    let input = write_two_points(dir.path());
    let out = vecot(&["solve", "--input", &input]);
    assert_eq!(out.status.code(), Some(0));
    let doc = document(&out);
    assert_eq!(doc["schema"], "vecot/1");
    assert_eq!(doc["command"], "solve");
    let report = &doc["result"]["report"];
    assert!((report["primal_value"].as_f64().unwrap() - 5.0).abs() < 1e-9);
    assert!((report["dual_value"].as_f64().unwrap() - 5.0).abs() < 1e-6);
    assert_eq!(report["status"], "Converged");
}

#[test]
fn certify_reads_back_a_solution() {
    let dir = tempfile::tempdir().unwrap();
    let solution = dir.path().join("s.json");
    let s = solution.to_str().unwrap();
    let out = vecot(&["solve", "--random", "7", "--seed", "3", "--output", s]);
    assert_eq!(out.status.code(), Some(0));
    let out = vecot(&["certify", "--random", "7", "--seed", "3", "--solution", s]);
    assert_eq!(out.status.code(), Some(0));
    let doc = document(&out);
    assert_eq!(doc["result"]["certificate"]["verdict"], "Optimal");
    assert!(doc["result"]["solver_report"].is_null());
}

#[test]
fn counterexample_fails_balance() {
    let out = vecot(&["counterexample", "--n", "2", "--m", "2", "--preset", "paper"]);
    assert_eq!(out.status.code(), Some(0));
    let doc = document(&out);
    let text = doc["result"]["report"]["mass_balance"].to_string();
    assert!(text.contains("BalanceFails"), "{text}");
}

#[test]
fn leaves_and_massbalance_run() {
    for cmd in ["leaves", "massbalance"] {
        let out = vecot(&[cmd, "--random", "6", "--seed", "1"]);
        assert_eq!(out.status.code(), Some(0), "{cmd}: {}", String::from_utf8_lossy(&out.stderr));
        assert_eq!(document(&out)["command"], cmd);
    }
}

#[test]
fn slice_disintegration_reassembles() {
    let out = vecot(&["disintegrate", "--family", "gaussian", "--resolution", "33"]);
    assert_eq!(out.status.code(), Some(0));
    let result = &document(&out)["result"];
    assert!(result["reassembly_l1"].as_f64().unwrap() < 1e-12);
    assert_eq!(result["cd"]["failed"], 0);
    assert_eq!(result["weights"].as_array().unwrap().len(), 33);
}

#[test]
fn selftest_passes() {
    let out = vecot(&["selftest"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert_eq!(stderr.lines().filter(|l| l.contains(": PASS in")).count(), 10, "{stderr}");
    assert_eq!(document(&out)["result"]["pass"], true);
}

#[test]
fn bad_input_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.json");
    assert_eq!(vecot(&["solve", "--input", missing.to_str().unwrap()]).status.code(), Some(2));

    let unbalanced = dir.path().join("unbalanced.json");
    fs::write(&unbalanced, r#"{"n": 1, "m": 1, "points": [[0], [1]], "weights": [[1], [1]]}"#).unwrap();
    let out = vecot(&["solve", "--input", unbalanced.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(out.stdout.is_empty());

    assert_eq!(vecot(&["disintegrate", "--family", "gaussian", "--cd-n", "lots"]).status.code(), Some(2));
}

#[test]
fn iteration_limit_exits_3_with_a_document() {
    let out = vecot(&["solve", "--random", "6", "--max-iters", "3"]);
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(document(&out)["result"]["report"]["status"], "IterLimit");
}

#[test]
fn output_is_deterministic() {
    let args = ["solve", "--random", "9", "--seed", "5"];
    let first = vecot(&args);
    assert_eq!(first.stdout, vecot(&args).stdout);
    let mut sequential = args.to_vec();
    sequential.push("--sequential");
    let seq = document(&vecot(&sequential));
    let par = document(&first);
    assert_eq!(seq["result"], par["result"]);
}

#[test]
fn instance_file_round_trips_through_solve() {
    let dir = tempfile::tempdir().unwrap();
    let input = write_two_points(dir.path());
    let a = document(&vecot(&["solve", "--input", &input]));
    let text = vecot_core::Instance::from_json(&fs::read_to_string(&input).unwrap()).unwrap().to_json().unwrap();
    let copy = dir.path().join("copy.json");
    fs::write(&copy, text).unwrap();
    let b = document(&vecot(&["solve", "--input", copy.to_str().unwrap()]));
    assert_eq!(a["result"], b["result"]);
}

#[test]
fn csv_sidecars_replace_inline_arrays() {
    let dir = tempfile::tempdir().unwrap();
    let csv_dir = dir.path().join("csv");
    let out = vecot(&["solve", "--random", "5", "--csv-dir", csv_dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    let result = &document(&out)["result"];
    assert!(result.get("coupling").is_none());
    let coupling = fs::read_to_string(csv_dir.join("coupling.csv")).unwrap();
    let mut lines = coupling.lines();
    assert_eq!(lines.next(), Some("i,j,flow0,flow1"));
    assert!(lines.count() > 0);
    let potential = fs::read_to_string(csv_dir.join("potential.csv")).unwrap();
    assert_eq!(potential.lines().count(), 6);

    let out =
        vecot(&["disintegrate", "--family", "uniform", "--resolution", "9", "--csv-dir", csv_dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    let needles = fs::read_to_string(csv_dir.join("needles.csv")).unwrap();
    assert_eq!(needles.lines().next(), Some("needle,k,t0,density,x0,x1"));
    assert_eq!(needles.lines().count(), 1 + 81);
}

#[test]
fn bad_thread_count_is_rejected() {
    let out = Command::new(env!("CARGO_BIN_EXE_vecot"))
        .args(["solve", "--random", "4"])
        .env("VECOT_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}
