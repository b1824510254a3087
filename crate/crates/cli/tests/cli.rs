use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use nalgebra::{Matrix2, Vector2};
use riskstack::dynamics::{Gaussian2, VehicleState};
use riskstack::pft::{write_trajectory_csv, Pft, Trajectory, TubeFrame};
use riskstack::risk::{pft_collision_risk, Aggregation};

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_riskstack"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn scenario(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join(format!("../../scenarios/{name}.json"))
}

fn stdout_json(out: &Output) -> serde_json::Value {
    serde_json::from_slice(&out.stdout).expect("stdout is json")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn simulate_writes_outputs_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let sc = scenario("follow_and_pass");
    for out in [&a, &b] {
        let o = bin(&["simulate", "--scenario", s(&sc), "--seed", "4", "--out", s(out)]);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
        assert_eq!(stdout_json(&o)["episode"], 4);
    }
    let trace = fs::read_to_string(a.join("trace.jsonl")).unwrap();
    assert_eq!(trace, fs::read_to_string(b.join("trace.jsonl")).unwrap());
    for line in trace.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v["kind"].is_string());
    }
    let csv = fs::read_to_string(a.join("summary.csv")).unwrap();
    assert!(csv.starts_with("episode,outcome,reward,collisions,planning_ms\n4,"));
    // the echoed scenario loads back
    riskstack::sim::load_scenario(&fs::read_to_string(a.join("scenario.json")).unwrap()).unwrap();
}

#[test]
fn input_errors_exit_with_two() {
    let sc = scenario("empty_road");
    let o = bin(&["simulate", "--scenario", s(&sc), "--seed", "0", "--delta", "1.5"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("planner.delta"));
    let o = bin(&["simulate", "--scenario", "/nonexistent.json", "--seed", "0"]);
    assert_eq!(o.status.code(), Some(2));
    let o = bin(&["simulate", "--scenario", s(&sc)]);
    assert_eq!(o.status.code(), Some(2));
    let o = bin(&["batch", "--scenario", s(&sc), "--episodes", "0", "--base-seed", "0"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn batch_reports_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let sc = scenario("empty_road");
    let o = bin(&["batch", "--scenario", s(&sc), "--episodes", "3", "--base-seed", "10", "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let m = stdout_json(&o);
    assert_eq!(m["episodes"], 3);
    assert_eq!(m["collision_rate"], 0.0);
    let csv = fs::read_to_string(dir.path().join("summary.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
    assert!(dir.path().join("traces/12.jsonl").exists());
}

#[test]
fn stn_check_verdicts() {
    let dir = tempfile::tempdir().unwrap();
    let ok = dir.path().join("ok.json");
    fs::write(
        &ok,
        r#"{ "events": ["origin", "a", "b"], "constraints": [
            { "from": "origin", "to": "a", "lower": 1.0, "upper": 5.0 },
            { "from": "a", "to": "b", "lower": 2.0, "upper": null } ] }"#,
    )
    .unwrap();
    let o = bin(&["stn-check", "--file", s(&ok)]);
    assert_eq!(o.status.code(), Some(0));
    let v = stdout_json(&o);
    assert_eq!(v["feasible"], true);
    assert_eq!(v["schedule"]["earliest"], serde_json::json!([0.0, 1.0, 3.0]));

    let bad = dir.path().join("bad.json");
    fs::write(
        &bad,
        r#"{ "events": ["origin", "a"], "constraints": [
            { "from": "origin", "to": "a", "lower": 10.0, "upper": 20.0 },
            { "from": "origin", "to": "a", "lower": 0.0, "upper": 5.0 } ] }"#,
    )
    .unwrap();
    let o = bin(&["stn-check", "--file", s(&bad)]);
    assert_eq!(o.status.code(), Some(1));
    let v = stdout_json(&o);
    assert_eq!(v["feasible"], false);
    assert!(v["conflict"].as_array().is_some_and(|c| !c.is_empty()));
    assert!(v["relaxed"].is_object());
}

fn line_tube(y: f64, var: f64) -> Pft {
    let steps = (1..=10)
        .map(|k| Gaussian2::new(Vector2::new(k as f64, y), Matrix2::identity() * var).unwrap())
        .collect();
    Pft::new(0.1, steps, vec![10.0; 10], TubeFrame::World).unwrap()
}

#[test]
fn risk_matches_library() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (line_tube(0.0, 0.3), line_tube(1.5, 0.5));
    let (pa, pb) = (dir.path().join("a.json"), dir.path().join("b.json"));
    fs::write(&pa, serde_json::to_string(&a).unwrap()).unwrap();
    fs::write(&pb, serde_json::to_string(&b).unwrap()).unwrap();
    let o = bin(&["risk", "--tube-a", s(&pa), "--tube-b", s(&pb), "--radii", "1.0,1.2"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let expected = pft_collision_risk(&a, &b, 1.0, 1.2, Aggregation::Independent).unwrap();
    let v = stdout_json(&o);
    assert_eq!(v["total"].as_f64().unwrap(), expected.total);
    assert_eq!(v["per_step"].as_array().unwrap().len(), 10);
    let o = bin(&["risk", "--tube-a", s(&pa), "--tube-b", s(&pb), "--radii", "1.0"]);
    assert_eq!(o.status.code(), Some(2));
}

fn demo(lateral: f64, jitter: f64) -> Trajectory {
    let states: Vec<VehicleState> = (0..=20)
        .map(|k| {
            let t = k as f64 / 20.0;
            VehicleState::new(10.0 * t * 2.0, lateral * t + jitter * (k as f64 * 1.7).sin(), 0.0, 10.0)
        })
        .collect();
    Trajectory::from_states(&states, 0.1).unwrap()
}

#[test]
fn learn_then_classify() {
    let dir = tempfile::tempdir().unwrap();
    let demos = dir.path().join("demos");
    for (id, lateral) in [("keep", 0.0), ("left", 3.5), ("right", -3.5)] {
        let d = demos.join(id);
        fs::create_dir_all(&d).unwrap();
        for i in 0..8 {
            let jitter = 0.05 * (i as f64 - 3.5);
            write_trajectory_csv(&d.join(format!("{i}.csv")), &demo(lateral, jitter)).unwrap();
        }
    }
    let lib = dir.path().join("lib.json");
    let o = bin(&["learn-pft", "--demos", s(&demos), "--steps", "20", "--out", s(&lib)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(stdout_json(&o)["maneuvers"], serde_json::json!(["keep", "left", "right"]));

    let prefix: Vec<[f64; 2]> = (1..=12).map(|k| [k as f64, 3.5 * k as f64 / 20.0]).collect();
    let pf = dir.path().join("prefix.json");
    fs::write(&pf, serde_json::to_string(&prefix).unwrap()).unwrap();
    let o = bin(&["classify", "--library", s(&lib), "--prefix", s(&pf)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let v = stdout_json(&o);
    assert_eq!(v["argmax"], "left");
    assert!(v["posterior"]["probs"]["left"].as_f64().unwrap() > 0.95);
}

#[test]
fn plan_reproduces_a_recorded_decision() {
    let dir = tempfile::tempdir().unwrap();
    let sc = scenario("fig2_occluded_overtake");
    let o = bin(&["simulate", "--scenario", s(&sc), "--seed", "0", "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let trace = fs::read_to_string(dir.path().join("trace.jsonl")).unwrap();
    let record = trace
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap())
        .find_map(|v| v.get("decision").filter(|d| !d.is_null()).cloned())
        .expect("a decision was recorded");
    let snap = dir.path().join("snapshot.json");
    fs::write(&snap, record.to_string()).unwrap();
    let o = bin(&["plan", "--scenario", s(&sc), "--snapshot", s(&snap)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let d = stdout_json(&o);
    assert_eq!(d["action"], record["action"]);
    assert_eq!(d["value"], record["value"]);
    assert_eq!(d["exec_risk"], record["exec_risk"]);
}
