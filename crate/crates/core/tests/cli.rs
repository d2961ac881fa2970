use std::process::{Command, Output};

use coflow_switch::analysis::{csv_header, read_csv};
use coflow_switch::engine::{PolicyConfig, SimConfig};
use coflow_switch::traffic::CoflowModel;

fn coflowsim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_coflowsim"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

#[test]
fn simulate_prints_one_row() {
    let o = coflowsim(&[
        "simulate", "--policy", "cab", "--n", "16", "--lambda", "0.3", "--beta", "2.5",
        "--horizon", "1000000", "--seed", "1",
    ]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0], csv_header().join(","));
    let rows = read_csv(text.as_bytes()).unwrap();
    assert_eq!(rows[0].policy, "cab");
    assert_eq!(rows[0].n, 16);
    assert_eq!(rows[0].status, "ok");
    assert_eq!(rows[0].stable, Some(true));
}

#[test]
fn tune_prints_consistent_parameters() {
    let o = coflowsim(&["tune", "--n", "200", "--lambda", "0.3", "--beta", "2.5"]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    let get = |key: &str| -> f64 {
        text.lines()
            .find_map(|l| l.strip_prefix(&format!("{key}=")))
            .unwrap()
            .parse()
            .unwrap()
    };
    let (gamma, delta, t) = (get("gamma"), get("delta"), get("frame_size"));
    let n = 200.0;
    let rho = 0.75;
    assert!((delta * n * t * (rho + 1.0) * (1.0 + n * t) - 0.5).abs() <= 1e-6);
    assert_eq!(t, ((2.0 * n / delta).ln() / gamma).ceil());
}

#[test]
fn usage_errors_exit_one() {
    let o = coflowsim(&[]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
    for args in [
        vec!["frobnicate"],
        vec!["simulate", "--no-such-flag"],
        vec!["simulate", "--policy", "fastest"],
        vec!["sweep-rho", "--grid", "0.5,abc"],
        vec!["simulate", "--horizon", "100", "--warmup", "100"],
    ] {
        assert_eq!(coflowsim(&args).status.code(), Some(1), "{args:?}");
    }
    assert_eq!(coflowsim(&["--help"]).status.code(), Some(0));
}

#[test]
fn runtime_errors_exit_two() {
    // rho = 1.25 with stationary metrics.
    let o = coflowsim(&["simulate", "--lambda", "0.5", "--horizon", "100"]);
    assert_eq!(o.status.code(), Some(2));
    let o = coflowsim(&["simulate", "--config", "/nonexistent/run.toml"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn config_file_and_flag_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.toml");
    let cfg = SimConfig::new(
        CoflowModel::uniform_geometric(4, 0.2, 2.5),
        PolicyConfig::Mwm,
        5000,
        3,
    );
    std::fs::write(&path, toml::to_string(&cfg).unwrap()).unwrap();
    let p = path.to_str().unwrap();

    let rows = read_csv(stdout(&coflowsim(&["simulate", "--config", p])).as_bytes()).unwrap();
    assert_eq!((rows[0].policy.as_str(), rows[0].n, rows[0].seed), ("mwm", 4, 3));
    assert!((rows[0].lambda - 0.2).abs() < 1e-12);

    let rows = read_csv(
        stdout(&coflowsim(&["simulate", "--config", p, "--seed", "9", "--n", "6"])).as_bytes(),
    )
    .unwrap();
    assert_eq!((rows[0].n, rows[0].seed), (6, 9));
    assert!((rows[0].beta - 2.5).abs() < 1e-12);
}

#[test]
fn out_flag_appends_under_one_header() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("rows.csv");
    let o = out.to_str().unwrap();
    for seed in ["1", "2"] {
        let r = coflowsim(&["simulate", "--policy", "randomized", "--n", "4", "--horizon", "2000", "--seed", seed, "--out", o]);
        assert_eq!(r.status.code(), Some(0));
    }
    let text = std::fs::read_to_string(&out).unwrap();
    assert_eq!(text.lines().count(), 3);
    let rows = read_csv(text.as_bytes()).unwrap();
    assert_eq!(rows[1].seed, 2);
}

#[test]
fn sweeps_emit_rows_in_plan_order() {
    let o = coflowsim(&[
        "sweep-n", "--grid", "4,8", "--policies", "randomized,mwm", "--replications", "2",
        "--horizon", "2000",
    ]);
    assert_eq!(o.status.code(), Some(0));
    let rows = read_csv(stdout(&o).as_bytes()).unwrap();
    let keys: Vec<(usize, &str, u64)> = rows.iter().map(|r| (r.n, r.policy.as_str(), r.seed)).collect();
    assert_eq!(
        keys,
        vec![
            (4, "randomized", 1),
            (4, "randomized", 2),
            (4, "mwm", 1),
            (4, "mwm", 2),
            (8, "randomized", 1),
            (8, "randomized", 2),
            (8, "mwm", 1),
            (8, "mwm", 2),
        ]
    );

    // The overloaded point becomes an error row; the sweep carries on.
    let o = coflowsim(&["sweep-rho", "--grid", "0.5,1.2", "--policy", "mwm", "--n", "4", "--horizon", "2000"]);
    assert_eq!(o.status.code(), Some(0));
    let rows = read_csv(stdout(&o).as_bytes()).unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!((rows[0].status.as_str(), rows[1].status.as_str()), ("ok", "error"));
}

#[test]
fn scaling_and_oracle_check_report() {
    let o = coflowsim(&["scaling", "--family", "deterministic", "--param", "3", "--grid", "4,8,16", "--samples", "1000"]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    assert!(text.lines().nth(1).unwrap().starts_with("4,3,0"));
    assert!(text.contains("slope=0 "));

    let o = coflowsim(&["oracle-check", "--horizon", "100000", "--customers", "100000"]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    assert!(text.contains("mg1_voq_batch_wait,"));
    assert!(text.contains("gig1_sojourn_frames,"));
}
