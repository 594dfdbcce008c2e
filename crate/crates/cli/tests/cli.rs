use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn models() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../models")
}

fn mjp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mjp")).args(args).output().expect("binary runs")
}

fn model(name: &str) -> String {
    models().join(name).display().to_string()
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn data_rows(path: &Path) -> usize {
    fs::read_to_string(path).unwrap().lines().count() - 1
}

#[test]
fn missing_model_file_exits_with_one() {
    let out = mjp(&["bridge", "/nonexistent/model.mjp"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("cannot read model file"));
}

#[test]
fn parse_errors_exit_with_one_and_name_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.mjp");
    fs::write(&path, "species X\nreaction r: 0 -> Y @ mass_action(1)\n").unwrap();
    let out = mjp(&["bridge", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"));
}

#[test]
fn rare_needs_thresholds() {
    let out = mjp(&["rare", &model("parallel_poisson.mjp")]);
    assert_eq!(out.status.code(), Some(1));
    let out = mjp(&["rare", &model("parallel_poisson.mjp"), "--deltas", ""]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn numerical_failure_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    // the goal lies outside the bounds, so nothing can reach it
    let path = dir.path().join("m.mjp");
    fs::write(
        &path,
        "species X\nreaction r: 0 -> X @ mass_action(1)\ninit point (0)\nterminal point (5) at 1\noptions bounds=(3)\n",
    )
    .unwrap();
    let out = mjp(&["bridge", path.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()]);
    assert_ne!(out.status.code(), Some(0));
    assert!(!out.stderr.is_empty());
}

#[test]
fn bridge_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("out");
    let dump = dir.path().join("q.txt");
    let out = mjp(&[
        "bridge",
        &model("birth_death.mjp"),
        "--out",
        out_dir.to_str().unwrap(),
        "--time-points",
        "11",
        "--dump-generator",
        dump.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary = json(&out_dir.join("summary.json"));
    assert_eq!(summary["schema_version"], 1);
    assert_eq!(summary["duality_ok"], true);
    assert_eq!(summary["options"]["time_points"], 11);
    let trace = json(&out_dir.join("trace.json"));
    let size = trace["final_states"].as_u64().unwrap() as usize;
    for k in 0..11 {
        assert_eq!(data_rows(&out_dir.join(format!("gamma_t{k}.csv"))), size);
    }
    assert!(!out_dir.join("gamma_t11.csv").exists());
    let header = fs::read_to_string(out_dir.join("gamma_t0.csv")).unwrap();
    assert!(header.starts_with("X,probability\n"));
    for line in header.lines().skip(1) {
        let p: f64 = line.split(',').nth(1).unwrap().parse().unwrap();
        assert!((0.0..=1.0 + 1e-9).contains(&p));
    }
    assert_eq!(fs::read_to_string(&dump).unwrap().lines().count(), 3 * 201 - 2 + 1);
}

#[test]
fn arrivals_bridge_records_five_truncations() {
    let dir = tempfile::tempdir().unwrap();
    let out = mjp(&["bridge", &model("arrivals_bridge.mjp"), "--out", dir.path().to_str().unwrap()]);
    assert!(out.status.success());
    for i in 0..5 {
        assert!(dir.path().join(format!("snapshot_{i}.csv")).exists());
    }
    assert!(!dir.path().join("snapshot_5.csv").exists());
}

#[test]
fn rare_table_has_one_row_per_threshold() {
    let dir = tempfile::tempdir().unwrap();
    let args = ["rare", &model("parallel_poisson.mjp"), "--deltas", "1e-2,1e-3", "--out", dir.path().to_str().unwrap()];
    let out = mjp(&args);
    assert!(out.status.success());
    let table = fs::read_to_string(dir.path().join("table.csv")).unwrap();
    let rows: Vec<&str> = table.lines().collect();
    assert_eq!(rows[0], "delta,truncation_size,overall_states,estimate,relative_error");
    assert_eq!(rows.len(), 3);
    assert!(rows[1].ends_with(','), "no reference, empty error column: {}", rows[1]);

    let mut with_ref = args.to_vec();
    with_ref.extend(["--reference", "1.8625e-29"]);
    let out = mjp(&with_ref);
    assert!(out.status.success());
    let table = fs::read_to_string(dir.path().join("table.csv")).unwrap();
    for row in table.lines().skip(1) {
        let rel: f64 = row.rsplit(',').next().unwrap().parse().unwrap();
        assert!(rel > 0.0 && rel < 1.0);
    }
}

#[test]
fn identical_runs_write_identical_files() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        let out = Command::new(env!("CARGO_BIN_EXE_mjp"))
            .args(["occupation", &model("two_state.mjp"), "--out", d.path().to_str().unwrap()])
            .env("MJP_THREADS", "2")
            .output()
            .unwrap();
        assert!(out.status.success());
    }
    for name in ["summary.json", "trace.json", "occupation.csv", "snapshot_0.csv"] {
        assert_eq!(fs::read(a.path().join(name)).unwrap(), fs::read(b.path().join(name)).unwrap(), "{name}");
    }
    assert!(a.path().join("timing.json").exists());
}

#[test]
fn bad_thread_count_is_a_usage_error() {
    let out = Command::new(env!("CARGO_BIN_EXE_mjp"))
        .args(["bridge", &model("two_state.mjp")])
        .env("MJP_THREADS", "many")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn flags_override_model_options() {
    let dir = tempfile::tempdir().unwrap();
    let out = mjp(&[
        "bridge",
        &model("two_state.mjp"),
        "--out",
        dir.path().to_str().unwrap(),
        "--rtol",
        "1e-7",
        "--atol",
        "1e-13",
        "--delta",
        "0.01",
        "--grid-exponent",
        "0",
        "--solver",
        "rk45",
    ]);
    assert!(out.status.success());
    let o = &json(&dir.path().join("summary.json"))["options"];
    assert_eq!(o["rtol"], 1e-7);
    assert_eq!(o["atol"], 1e-13);
    assert_eq!(o["delta"], 0.01);
    assert_eq!(o["solver"], "rk45");
}

#[test]
fn constant_likelihood_posterior_is_the_normalized_prior() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("flat.mjp");
    fs::write(
        &path,
        "species S E I
reaction infection: S + I -> E + I @ mass_action(0.5)
reaction onset: E -> I @ mass_action(3)
reaction removal: I -> 0 @ mass_action(3)
init point (14, 0, 1)
terminal observe binary_test(sensitivity=0.3, fpr=0.3, observed=4, species=I) at 0.3
options bounds=(14, 14, 15) delta=1e-6
",
    )
    .unwrap();
    let out_dir = dir.path().join("out");
    let out = mjp(&["smooth", path.to_str().unwrap(), "--out", out_dir.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(out_dir.join("posterior.csv")).unwrap();
    assert!(text.starts_with("I,prior,likelihood,posterior\n"));
    let rows: Vec<Vec<f64>> = text
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    let mass: f64 = rows.iter().map(|r| r[1]).sum();
    for r in &rows {
        assert!((r[3] - r[1] / mass).abs() <= 1e-12, "{r:?}");
    }
    let marg = fs::read_to_string(out_dir.join("marginals.csv")).unwrap();
    assert!(marg.starts_with("S,E,prior,posterior\n"));
    let trace = json(&out_dir.join("trace.json"));
    assert_eq!(data_rows(&out_dir.join("gamma_t0.csv")), trace["final_states"].as_u64().unwrap() as usize);
}

#[test]
fn occupation_rows_match_the_truncation() {
    let dir = tempfile::tempdir().unwrap();
    let out = mjp(&["occupation", &model("two_state.mjp"), "--out", dir.path().to_str().unwrap()]);
    assert!(out.status.success());
    let trace = json(&dir.path().join("trace.json"));
    assert_eq!(data_rows(&dir.path().join("occupation.csv")), trace["final_states"].as_u64().unwrap() as usize);
    let text = fs::read_to_string(dir.path().join("occupation.csv")).unwrap();
    assert!(text.starts_with("A,B,occupation,endpoint\n"));
    assert!(text.contains("\n1,0,4.18"));
}
