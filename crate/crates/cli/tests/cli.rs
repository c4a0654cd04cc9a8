use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn alfg(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_alfg"))
        .args(args)
        .current_dir(dir)
        .env_remove("CFG_SOLVER_THREADS")
        .output()
        .expect("binary runs")
}

fn read(dir: &Path, name: &str) -> String {
    std::fs::read_to_string(dir.join(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

fn column(csv: &str, name: &str) -> Vec<String> {
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let idx = header.iter().position(|h| *h == name).unwrap();
    lines.map(|l| l.split(',').nth(idx).unwrap().to_string()).collect()
}

#[test]
fn pose_est_writes_one_row_per_trial() {
    let dir = TempDir::new().unwrap();
    let out = alfg(dir.path(), &["pose-est", "--trials", "10", "--seed", "1", "--out", "o.csv"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = read(dir.path(), "o.csv");
    assert_eq!(csv.lines().count(), 11);
    assert_eq!(
        csv.lines().next().unwrap(),
        "trial,e_t_free,e_rot_free,e_t_constrained,e_rot_constrained"
    );
    let manifest: serde_json::Value = serde_json::from_str(&read(dir.path(), "o.csv.manifest.json")).unwrap();
    assert_eq!(manifest["seed"], 1);
    assert_eq!(manifest["config"]["trials"], 10);
    assert_eq!(manifest["outputs"]["csv"], "o.csv");
    assert!(manifest["wall_time_s"].as_f64().unwrap() >= 0.0);
    assert!(manifest["version"].is_string());
}

#[test]
fn rot_sync_constraints_hold_on_a_small_ring() {
    let dir = TempDir::new().unwrap();
    let out = alfg(dir.path(), &["rot-sync", "--n", "8", "--omega", "1e4", "--seed", "1"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = read(dir.path(), "rot-sync.csv");
    for name in ["orthogonality", "determinant"] {
        for v in column(&csv, name) {
            assert!(v.parse::<f64>().unwrap() <= 1e-4, "{name} = {v}");
        }
    }
    assert!(dir.path().join("rot-sync.csv.manifest.json").exists());
}

#[test]
fn rot_sync_reads_measurement_files() {
    let dir = TempDir::new().unwrap();
    // A noiseless triangle of rotations about z.
    let rz = |a: f64| {
        let (s, c) = a.sin_cos();
        [c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0]
    };
    let mut text = String::from("# i j z ω\n");
    for (i, j, a) in [(0, 1, 0.3), (1, 2, -0.2), (0, 2, 0.1)] {
        let z: Vec<String> = rz(a).iter().map(|v| v.to_string()).collect();
        text.push_str(&format!("{i} {j} {} 1000\n", z.join(" ")));
    }
    std::fs::write(dir.path().join("edges.txt"), text).unwrap();
    let out = alfg(dir.path(), &["rot-sync", "--input", "edges.txt"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = read(dir.path(), "rot-sync.csv");
    assert_eq!(column(&csv, "n"), vec!["3"]);
    assert_eq!(column(&csv, "err_x_svd"), vec![""]);
    assert_eq!(column(&csv, "converged_constrained"), vec!["true"]);
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = TempDir::new().unwrap();
    assert_eq!(alfg(dir.path(), &["pose-est", "--bogus"]).status.code(), Some(2));
    assert_eq!(alfg(dir.path(), &["frobnicate"]).status.code(), Some(2));
    assert_eq!(alfg(dir.path(), &["pose-est", "--trials", "ten"]).status.code(), Some(2));
    assert_eq!(alfg(dir.path(), &["pose-est", "--trials", "3", "--v", "-1"]).status.code(), Some(2));
    assert_eq!(alfg(dir.path(), &["mpc", "--goals", "missing.txt"]).status.code(), Some(2));
    let threads = Command::new(env!("CARGO_BIN_EXE_alfg"))
        .args(["pose-est", "--trials", "1"])
        .current_dir(dir.path())
        .env("CFG_SOLVER_THREADS", "many")
        .output()
        .unwrap();
    assert_eq!(threads.status.code(), Some(2));
}

#[test]
fn help_and_version_succeed() {
    let dir = TempDir::new().unwrap();
    let help = alfg(dir.path(), &["mpc", "--help"]);
    assert!(help.status.success());
    assert!(String::from_utf8_lossy(&help.stdout).contains("--formulation"));
    assert!(alfg(dir.path(), &["--version"]).status.success());
}

#[test]
fn config_file_sets_defaults_and_flags_win() {
    let dir = TempDir::new().unwrap();
    std::fs::write(dir.path().join("run.cfg"), "# pose settings\ntrials = 4\nseed = 3\nomega_gps = 30\n").unwrap();
    let out = alfg(dir.path(), &["--config", "run.cfg", "pose-est", "--seed", "5"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let manifest: serde_json::Value = serde_json::from_str(&read(dir.path(), "pose-est.csv.manifest.json")).unwrap();
    assert_eq!(manifest["config"]["trials"], 4);
    assert_eq!(manifest["config"]["omega_gps"], 30.0);
    assert_eq!(manifest["seed"], 5);
    assert_eq!(manifest["config_file"], "run.cfg");
    assert_eq!(read(dir.path(), "pose-est.csv").lines().count(), 5);

    std::fs::write(dir.path().join("bad.cfg"), "trials = 4\nspeed = 2\n").unwrap();
    let bad = alfg(dir.path(), &["--config", "bad.cfg", "pose-est"]);
    assert_eq!(bad.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("speed"));
    assert_eq!(alfg(dir.path(), &["--config", "nowhere.cfg", "pose-est"]).status.code(), Some(2));
}

#[test]
fn identical_seeds_give_identical_bytes() {
    let dir = TempDir::new().unwrap();
    let args = ["pose-est", "--trials", "40", "--seed", "8"];
    assert!(alfg(dir.path(), &[&args[..], &["--out", "a.csv"]].concat()).status.success());
    assert!(alfg(dir.path(), &[&args[..], &["--out", "b.csv"]].concat()).status.success());
    let parallel = Command::new(env!("CARGO_BIN_EXE_alfg"))
        .args([&args[..], &["--out", "c.csv"]].concat())
        .current_dir(dir.path())
        .env("CFG_SOLVER_THREADS", "3")
        .output()
        .unwrap();
    assert!(parallel.status.success());
    let a = read(dir.path(), "a.csv");
    assert_eq!(a, read(dir.path(), "b.csv"));
    assert_eq!(a, read(dir.path(), "c.csv"));
}

#[test]
fn mpc_runs_are_replayable_and_summarised() {
    let dir = TempDir::new().unwrap();
    std::fs::write(dir.path().join("goals.txt"), "0.3 0.1 0.2\n").unwrap();
    std::fs::write(dir.path().join("limits.txt"), "omega_max = 1.0\nd = 0.5\n").unwrap();
    let args = ["mpc", "--goals", "goals.txt", "--limits", "limits.txt", "--no-timing", "--seed", "2"];
    for out in ["a.csv", "b.csv"] {
        let run = alfg(dir.path(), &[&args[..], &["--out", out]].concat());
        assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    }
    let a = read(dir.path(), "a.csv");
    assert_eq!(a, read(dir.path(), "b.csv"));
    assert_eq!(
        a.lines().next().unwrap(),
        "epoch,time,x,y,theta,v,phi,omega,dv,dphi,domega,iterations,zeta,solve_ms,goal_index"
    );
    assert!(column(&a, "solve_ms").iter().all(|v| v == "0"));

    let plot = alfg(dir.path(), &["plot", "--input", "a.csv"]);
    assert!(plot.status.success(), "{}", String::from_utf8_lossy(&plot.stderr));
    let summary = read(dir.path(), "plot.csv");
    assert_eq!(column(&summary, "reached"), vec!["true"]);
    let manifest: serde_json::Value = serde_json::from_str(&read(dir.path(), "a.csv.manifest.json")).unwrap();
    let travel = manifest["results"]["travel_times"][0].as_f64().unwrap();
    assert_eq!(column(&summary, "travel_time")[0].parse::<f64>().unwrap(), travel);
    assert_eq!(column(&summary, "epochs")[0], (a.lines().count() - 1).to_string());
}

#[test]
fn unfinished_mpc_exits_with_one() {
    let dir = TempDir::new().unwrap();
    let out = alfg(dir.path(), &["mpc", "--max-epochs", "1", "--no-timing"]);
    assert_eq!(out.status.code(), Some(1));
    // The log of the partial run is still written.
    assert_eq!(read(dir.path(), "mpc.csv").lines().count(), 2);
    assert!(dir.path().join("mpc.csv.manifest.json").exists());
}

#[test]
fn selftest_passes_and_reports_every_suite() {
    let dir = TempDir::new().unwrap();
    let out = alfg(dir.path(), &["selftest", "--seed", "4"]);
    assert!(out.status.success());
    let stdout = String::from_utf8_lossy(&out.stdout);
    for suite in ["kkt-oracle", "finite-difference", "slack-grid-scan", "rk4-substep"] {
        assert!(stdout.lines().any(|l| l.starts_with(suite) && l.contains("PASS")), "{stdout}");
    }
    let again = alfg(dir.path(), &["selftest", "--seed", "4", "--out", "again.csv"]);
    assert_eq!(read(dir.path(), "selftest.csv"), read(dir.path(), "again.csv"));
    assert_eq!(stdout, String::from_utf8_lossy(&again.stdout));
}
