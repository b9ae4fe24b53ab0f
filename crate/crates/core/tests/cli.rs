use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dpm-ope"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_config(dir: &Path, body: &str) -> String {
    let path = dir.join("experiment.toml");
    let out = dir.join("out").join("nested");
    fs::write(&path, format!("output_dir = {:?}\n{body}", out.display().to_string())).unwrap();
    path.display().to_string()
}

const SIM: &str = r#"
[simulation]
n_auctions = 30000
base_ctr = 0.05
policies = [
  { name = "up", sigma = 0.5 },
  { name = "down", sigma = 4.0 },
]
"#;

fn run_ok(args: &[&str]) -> Output {
    let o = cli(args);
    assert!(o.status.success(), "{args:?}: {}", stderr(&o));
    o
}

#[test]
fn full_pipeline_is_deterministic_and_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SIM);
    let out = dir.path().join("out/nested");
    run_ok(&["simulate", "--config", &cfg]);
    let logs = fs::read(out.join("logs.csv")).unwrap();
    run_ok(&["simulate", "--config", &cfg]);
    assert_eq!(fs::read(out.join("logs.csv")).unwrap(), logs);

    let printed = run_ok(&["evaluate", "--config", &cfg]);
    let summary = String::from_utf8(printed.stdout).unwrap();
    for needle in ["MDA(%)", "RMSE(pp)", "Pearson", "DPM-OPE", "Parametric-OPE", "winner_proxy", "global"] {
        assert!(summary.contains(needle), "{needle} missing from summary");
    }
    let metrics = fs::read(out.join("metrics.csv")).unwrap();

    run_ok(&["report", "--config", &cfg]);
    let report = fs::read(out.join("report.md")).unwrap();
    let trend = fs::read(out.join("daily_trend.csv")).unwrap();
    run_ok(&["report", "--config", &cfg]);
    assert_eq!(fs::read(out.join("report.md")).unwrap(), report);
    assert_eq!(fs::read(out.join("daily_trend.csv")).unwrap(), trend);
    let trend = String::from_utf8(trend).unwrap();
    assert!(trend.starts_with("policy,day,truth_lift,dpm_lift,baseline_lift\n"));
    assert_eq!(trend.lines().count(), 1 + 2 * 14);

    // The echoed config reproduces the evaluation.
    let echo = out.join("effective_config.toml").display().to_string();
    run_ok(&["evaluate", "--config", &echo]);
    assert_eq!(fs::read(out.join("metrics.csv")).unwrap(), metrics);
    for f in ["models/dpm_logging.json", "models/dpm_up.json", "models/parametric_down.json", "estimates.csv"] {
        assert!(out.join(f).exists(), "{f}");
    }
}

#[test]
fn baseline_can_be_disabled() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SIM);
    let out = dir.path().join("out/nested");
    run_ok(&["simulate", "--config", &cfg]);
    run_ok(&["evaluate", "--config", &cfg, "--set", "baseline.enabled=false"]);
    run_ok(&["report", "--config", &cfg, "--set", "baseline.enabled=false"]);
    let trend = fs::read_to_string(out.join("daily_trend.csv")).unwrap();
    assert!(trend.starts_with("policy,day,truth_lift,dpm_lift\n"));
    let report = fs::read_to_string(out.join("report.md")).unwrap();
    assert!(!report.contains("Parametric"));
    assert!(!out.join("baseline_estimates.csv").exists());
}

#[test]
fn missing_artifacts_name_the_producer() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SIM);
    let o = cli(&["evaluate", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("logs.csv") && stderr(&o).contains("`simulate`"), "{}", stderr(&o));
    run_ok(&["simulate", "--config", &cfg]);
    let o = cli(&["report", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("daily_estimates.csv") && stderr(&o).contains("`evaluate`"));
}

#[test]
fn invalid_keys_are_validation_failures() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[simulation]\nn_auctions = 100\nbase_ctr = 2.0\n");
    let o = cli(&["simulate", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("simulation.base_ctr"), "{}", stderr(&o));

    let cfg = write_config(dir.path(), "[simulation]\n[dpm]\nbins = 5\n");
    let o = cli(&["simulate", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("bins") && stderr(&o).contains("static_bins"), "{}", stderr(&o));

    let o = cli(&["simulate", "--config", "/nonexistent/x.toml"]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn ablation_presets_give_one_row_per_cell() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SIM);
    let out = dir.path().join("out/nested");
    let o = run_ok(&[
        "ablate", "--config", &cfg, "--bins", "100,1000,10000,adaptive", "--replications", "2",
    ]);
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("10000") && text.contains("adaptive"));
    let csv = fs::read_to_string(out.join("ablation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 4);

    run_ok(&[
        "ablate", "--config", &cfg, "--estimators", "ips,snips,capped", "--replications", "2",
    ]);
    let csv = fs::read_to_string(out.join("ablation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 3);
    assert!(fs::read_to_string(out.join("ablation.txt")).unwrap().contains("paired t-test"));

    let o = cli(&["ablate", "--config", &cfg, "--bins", "zero"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn external_logs_with_bad_rows_are_quarantined() {
    let dir = tempfile::tempdir().unwrap();
    let logs = dir.path().join("external.csv");
    let mut csv = String::from("id,ts,seg,click,s0,m.alt\n");
    for i in 0..400 {
        let s0 = 1.0 + (i * 37 % 101) as f64 / 10.0;
        let alt = 1.0 + (i * 53 % 97) as f64 / 10.0;
        csv.push_str(&format!("r{i},{},s{},{},{s0},{alt}\n", 1_704_067_200_000i64 + i * 600_000, i % 2, u8::from(i % 7 == 0)));
    }
    csv.push_str("bad,1704067200000,s0,0,-3.0,1.0\n");
    fs::write(&logs, csv).unwrap();
    let cfg = write_config(
        dir.path(),
        &format!(
            r#"
[data]
logs = {:?}
[data.columns]
impression_id = "id"
timestamp_ms = "ts"
segment_key = "seg"
reward = "click"
score_logging = "s0"
score_eval_prefix = "m."
"#,
            logs.display().to_string()
        ),
    );
    let out = dir.path().join("out/nested");
    let o = run_ok(&["evaluate", "--config", &cfg]);
    let summary = String::from_utf8(o.stdout).unwrap();
    assert!(summary.contains("deterministic IPS skipped"), "{summary}");
    assert!(summary.contains("no ground truth"));
    let rejected = fs::read_to_string(out.join("rejected_rows.csv")).unwrap();
    assert_eq!(rejected.lines().count(), 2);
    assert!(rejected.contains("score_logging"));
    run_ok(&["report", "--config", &cfg]);
    let report = fs::read_to_string(out.join("report.md")).unwrap();
    assert!(report.contains("| alt |"));

    // Runner-up mode needs market prices the file does not have.
    let o = cli(&["evaluate", "--config", &cfg, "--set", "dpm.market_price_mode=runner_up"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("mode mismatch"), "{}", stderr(&o));
}

#[test]
fn identical_policy_reports_zero_lift_and_low_separability() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "[simulation]\nn_auctions = 20000\nbase_ctr = 0.05\npolicies = [{ name = \"twin\", sigma = 2.5, stream = \"logging\" }]\n",
    );
    let out = dir.path().join("out/nested");
    run_ok(&["simulate", "--config", &cfg]);
    run_ok(&["evaluate", "--config", &cfg]);
    run_ok(&["report", "--config", &cfg]);
    let lifts = fs::read_to_string(out.join("lifts.csv")).unwrap();
    for line in lifts.lines().skip(1) {
        let est: f64 = line.split(',').nth(5).unwrap().parse().unwrap();
        assert_eq!(est, 0.0, "{line}");
    }
    let report = fs::read_to_string(out.join("report.md")).unwrap();
    assert!(report.contains("low separability"));
    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert!(metrics.lines().skip(1).all(|l| l.ends_with(",false")));
}
