use std::path::PathBuf;
use std::process::{Command, Output};

fn fixture(name: &str) -> String {
    let p: PathBuf = [env!("CARGO_MANIFEST_DIR"), "fixtures", name].iter().collect();
    p.to_str().unwrap().to_string()
}

fn delq(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_delq")).args(args).output().expect("spawn delq")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn json(o: &Output) -> serde_json::Value {
    serde_json::from_slice(&o.stdout).unwrap_or_else(|e| panic!("bad JSON ({e}): {}", stdout(o)))
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

#[test]
fn scalar_solve_reports_quarter() {
    let o = delq(&["--format", "json", "solve", "--problem", &fixture("scalar_delay.json")]);
    assert_eq!(code(&o), 0);
    let v = json(&o);
    assert_eq!(v["classification"], "UniquelySolvable");
    let p = v["solution"]["P"]["0,0"][0][0].as_f64().unwrap();
    assert!((p - 0.25).abs() < 1e-14, "{p}");
}

#[test]
fn value_at_later_time() {
    let o = delq(&["--format", "json", "value", "--problem", &fixture("scalar_delay.json"), "--k", "1", "--x", "1"]);
    assert_eq!(code(&o), 0);
    let v = json(&o)["value"].as_f64().unwrap();
    assert!((v - 1.0 / 3.0).abs() < 1e-14, "{v}");
}

#[test]
fn solution_file_round_trip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sol.json");
    let out = out.to_str().unwrap();
    let p = fixture("four_step.json");
    assert_eq!(code(&delq(&["solve", "--problem", &p, "--output", out])), 0);
    let direct = stdout(&delq(&["value", "--problem", &p, "--x", "0.3,-1.7"]));
    let loaded = stdout(&delq(&["value", "--solution", out, "--x", "0.3,-1.7"]));
    assert_eq!(direct, loaded);
    let gains_direct = stdout(&delq(&["--format", "json", "gains", "--problem", &p]));
    let gains_loaded = stdout(&delq(&["--format", "json", "gains", "--solution", out]));
    assert_eq!(gains_direct, gains_loaded);
}

#[test]
fn unsolvable_instance_is_refused() {
    let p = fixture("unsolvable.json");
    let o = delq(&["solve", "--problem", &p]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("NotConvex"));
    assert_eq!(code(&delq(&["value", "--problem", &p, "--x", "1"])), 3);
    assert_eq!(code(&delq(&["gains", "--problem", &p])), 3);
    assert_eq!(code(&delq(&["oracle", "--problem", &p, "--x", "1"])), 3);
    assert_eq!(code(&delq(&["simulate", "--problem", &p, "--x", "1", "--mode", "exact"])), 3);
}

#[test]
fn invalid_inputs_exit_with_expected_codes() {
    let p = fixture("four_step.json");
    assert_eq!(code(&delq(&["value", "--problem", &p, "--x", "1"])), 2);
    assert_eq!(code(&delq(&["value", "--problem", &p, "--x", "1,abc"])), 1);
    assert_eq!(code(&delq(&["solve"])), 1);
    assert_eq!(code(&delq(&["--psd-tol", "0", "solve", "--problem", &p])), 1);
    assert_eq!(code(&delq(&["value", "--problem", &p, "--solution", &p, "--x", "1,0"])), 1);
    assert_eq!(code(&delq(&["--help"])), 0);

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"n":1,"m":1,"N":2,"d":3,"A":[[[1]],[[1]]],"B":[[[1]],[[1]]],"C":[[[0]],[[0]]],"D":[[[0]],[[0]]],"Q":[[[0]],[[0]]],"R":[[[1]],[[1]]],"G":[[1]]}"#).unwrap();
    let o = delq(&["solve", "--problem", bad.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("delay"));

    std::fs::write(&bad, "{not json").unwrap();
    assert_eq!(code(&delq(&["solve", "--problem", bad.to_str().unwrap()])), 1);
}

#[test]
fn oracle_agrees_on_four_step() {
    let o = delq(&["--format", "json", "oracle", "--problem", &fixture("four_step.json"), "--x", "1,0"]);
    assert_eq!(code(&o), 0);
    let v = json(&o);
    assert_eq!(v["oracle"]["status"], "Bounded");
    let r = v["riccati_value"].as_f64().unwrap();
    let d = v["difference"].as_f64().unwrap();
    assert!(d.abs() <= 1e-8 * r.abs().max(1.0));
}

#[test]
fn lmei_check_zero_and_certificate() {
    let p = fixture("four_step.json");
    let o = delq(&["--format", "json", "lmei", "check", "--problem", &p, "--certificate"]);
    assert_eq!(code(&o), 0);
    assert_eq!(json(&o)["feasible"], true);

    let o = delq(&["--format", "json", "lmei", "check", "--problem", &p, "--zero"]);
    assert_eq!(code(&o), 3);
    assert_eq!(json(&o)["feasible"], false);

    let o = delq(&["lmei", "check", "--problem", &fixture("scalar_delay.json"), "--zero"]);
    assert_eq!(code(&o), 0);
}

#[test]
fn lmei_construct_from_solution_file() {
    let dir = tempfile::tempdir().unwrap();
    let sol = dir.path().join("sol.json");
    let built = dir.path().join("built.json");
    let p = fixture("four_step.json");
    assert_eq!(code(&delq(&["solve", "--problem", &p, "--output", sol.to_str().unwrap()])), 0);
    let o = delq(&[
        "--format",
        "json",
        "lmei",
        "construct",
        "--problem",
        &p,
        "--candidate",
        sol.to_str().unwrap(),
        "--output",
        built.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0);
    let v = json(&o);
    assert!(v["deviation_from_direct"].as_f64().unwrap() < 1e-9);
    let a = stdout(&delq(&["value", "--solution", sol.to_str().unwrap(), "--x", "1,1"]));
    let b = stdout(&delq(&["value", "--solution", built.to_str().unwrap(), "--x", "1,1"]));
    let (a, b): (f64, f64) = (
        a.trim().rsplit(' ').next().unwrap().parse().unwrap(),
        b.trim().rsplit(' ').next().unwrap().parse().unwrap(),
    );
    assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0));
}

#[test]
fn four_step_example_reports_w3_and_flags_w0() {
    let o = delq(&["--format", "json", "example", "paper"]);
    assert_eq!(code(&o), 0);
    let v = json(&o);
    assert!(v["steps"][3]["W_max_deviation"].as_f64().unwrap() < 1e-4);
    assert!(v["steps"][3]["K_max_deviation"].as_f64().unwrap() < 1e-4);
    assert_eq!(v["printed_W0_inconsistent"], true);
    assert_eq!(v["all_W_positive_definite"], true);
    assert_eq!(v["classification"], "UniquelySolvable");
    let value = v["value_at_e1"].as_f64().unwrap();
    let oracle = v["oracle_value_at_e1"].as_f64().unwrap();
    assert!((value - oracle).abs() <= 1e-8 * value.abs());

    let human = stdout(&delq(&["example", "paper"]));
    assert!(human.contains("W_3 computed"));
}

#[test]
fn simulate_seed_is_reproducible() {
    let p = fixture("four_step.json");
    let args = ["--format", "json", "simulate", "--problem", &p, "--x", "1,0", "--samples", "2000", "--seed", "7"];
    let a = delq(&args);
    let b = delq(&args);
    assert_eq!(code(&a), 0);
    assert_eq!(stdout(&a), stdout(&b));
    let v = json(&a);
    assert_eq!(v["result"]["samples"], 2000);

    let o = delq(&["--format", "json", "simulate", "--problem", &p, "--x", "1,0", "--mode", "exact"]);
    let v = json(&o);
    let exact = v["result"]["mean"].as_f64().unwrap();
    let opt = v["optimal_value"].as_f64().unwrap();
    assert!((exact - opt).abs() <= 1e-9 * opt.abs());
}

#[test]
fn scalar_oracle_and_exact_simulation() {
    let p = fixture("scalar_delay.json");
    let v = json(&delq(&["--format", "json", "oracle", "--problem", &p, "--x", "1"]));
    assert!(v["difference"].as_f64().unwrap().abs() <= 1e-10);
    let o = delq(&["--format", "json", "simulate", "--problem", &p, "--x", "1", "--mode", "exact"]);
    assert_eq!(code(&o), 0);
    let v = json(&o);
    assert!((v["result"]["mean"].as_f64().unwrap() - 0.25).abs() < 1e-14);
    assert_eq!(v["result"]["std_error"], 0.0);
    assert_eq!(v["result"]["samples"], 8);
}
