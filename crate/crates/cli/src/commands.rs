use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use alfg::InequalityFormulation;
use alfg_apps::mpc::{apply_limits, parse_goals, run_simulation, MpcConfig, PlatformState, SimulationConfig, GOALS_3};
use alfg_apps::pose::{run_monte_carlo, summarize, MonteCarloConfig};
use alfg_apps::rotsync::{initial_guess, parse_measurements, run_sync_batch, sync_solver_config, SyncConfig};
use alfg_apps::selftest::{run_selftest, SelftestConfig};
use serde_json::{json, Value};

use crate::error::{CliError, CliResult};
use crate::output::{manifest_path, num, CsvOut, Manifest};
use crate::{Formulation, MpcArgs, PlotArgs, PoseArgs, SelftestArgs, SyncArgs};

fn out_path(out: &Option<PathBuf>, subcommand: &str) -> PathBuf {
    out.clone().unwrap_or_else(|| PathBuf::from(format!("{subcommand}.csv")))
}

fn read_input(path: &Path) -> CliResult<String> {
    std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn snapshot<T: serde::Serialize>(args: &T) -> Value {
    serde_json::to_value(args).unwrap_or(Value::Null)
}

fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.sort_by(f64::total_cmp);
    let mid = values.len() / 2;
    if values.len() % 2 == 1 {
        values[mid]
    } else {
        0.5 * (values[mid - 1] + values[mid])
    }
}

pub fn pose_est(a: &PoseArgs, config_file: Option<&Path>, threads: usize) -> CliResult<()> {
    let clock = Instant::now();
    let cfg = MonteCarloConfig {
        trials: a.trials,
        seed: a.seed,
        theta0: a.theta0,
        v: a.v,
        travel_time: a.travel_time,
        omega_odom: a.omega_odom,
        omega_gps: a.omega_gps,
        gps_sigma: a.gps_sigma,
        threads,
        ..Default::default()
    };
    let records = run_monte_carlo(&cfg)?;
    let out = out_path(&a.out, "pose-est");
    let mut csv = CsvOut::new(&out, &["trial", "e_t_free", "e_rot_free", "e_t_constrained", "e_rot_constrained"])?;
    for r in &records {
        csv.row([
            r.trial.to_string(),
            num(r.e_t_free),
            num(r.e_rot_free),
            num(r.e_t_constrained),
            num(r.e_rot_constrained),
        ])?;
    }
    let csv = csv.finish()?;
    let s = summarize(&records);
    println!(
        "{} trials: translation free {:.4} constrained {:.4}; rotation free {:.4} constrained {:.4}",
        s.trials, s.mean_t_free, s.mean_t_constrained, s.mean_rot_free, s.mean_rot_constrained
    );
    println!(
        "constrained converged {}/{}, circle satisfied within 1e-3 in {}",
        s.converged_constrained, s.trials, s.satisfied_constrained
    );
    Manifest {
        subcommand: "pose-est",
        config: snapshot(a),
        config_file,
        seed: a.seed,
        threads,
        wall_time_s: clock.elapsed().as_secs_f64(),
        csv: &csv,
        results: json!({
            "trials": s.trials,
            "mean_t_free": s.mean_t_free,
            "mean_t_constrained": s.mean_t_constrained,
            "mean_rot_free": s.mean_rot_free,
            "mean_rot_constrained": s.mean_rot_constrained,
            "converged_constrained": s.converged_constrained,
            "satisfied_constrained": s.satisfied_constrained,
        }),
    }
    .write()?;
    Ok(())
}

const SYNC_HEADER: [&str; 15] = [
    "run",
    "seed",
    "omega",
    "n",
    "err_x_constrained",
    "err_y_constrained",
    "err_z_constrained",
    "err_x_svd",
    "err_y_svd",
    "err_z_svd",
    "converged_constrained",
    "converged_free",
    "iterations",
    "orthogonality",
    "determinant",
];

pub fn rot_sync(a: &SyncArgs, config_file: Option<&Path>, threads: usize) -> CliResult<()> {
    let clock = Instant::now();
    let out = out_path(&a.out, "rot-sync");
    let mut csv = CsvOut::new(&out, &SYNC_HEADER)?;
    let results = match &a.input {
        Some(input) => {
            let problem = parse_measurements(&read_input(input)?)?;
            let initial = initial_guess(&problem, a.random_init, a.seed);
            let solver = sync_solver_config();
            let free = problem.solve(&initial, false, &solver)?;
            let constrained = problem.solve(&initial, true, &solver)?;
            let (orthogonality, determinant) = constrained.constraint_violation();
            let omega = problem.measurements.first().map(|m| m.omega).unwrap_or(f64::NAN);
            let mut row = vec![a.seed.to_string(), a.seed.to_string(), num(omega), problem.n.to_string()];
            row.extend(std::iter::repeat_n(String::new(), 6));
            row.extend([
                constrained.report.converged.to_string(),
                free.report.converged.to_string(),
                constrained.report.outer_iterations.to_string(),
                num(orthogonality),
                num(determinant),
            ]);
            csv.row(row)?;
            println!(
                "{}: n = {}, constrained converged {} in {} iterations, orthogonality {:.2e}, determinant {:.2e}",
                input.display(),
                problem.n,
                constrained.report.converged,
                constrained.report.outer_iterations,
                orthogonality,
                determinant
            );
            json!({ "orthogonality": orthogonality, "determinant": determinant,
                    "converged_constrained": constrained.report.converged })
        }
        None => {
            let cfg = SyncConfig {
                n: a.n,
                omega: a.omega,
                seed: a.seed,
                random_init: a.random_init,
                ..Default::default()
            };
            let runs = run_sync_batch(&cfg, a.runs, threads)?;
            for (r, run) in runs.iter().enumerate() {
                csv.row([
                    r.to_string(),
                    run.seed.to_string(),
                    num(run.omega),
                    run.n.to_string(),
                    num(run.error_constrained[0]),
                    num(run.error_constrained[1]),
                    num(run.error_constrained[2]),
                    num(run.error_svd[0]),
                    num(run.error_svd[1]),
                    num(run.error_svd[2]),
                    run.converged_constrained.to_string(),
                    run.converged_free.to_string(),
                    run.iterations_constrained.to_string(),
                    num(run.orthogonality),
                    num(run.determinant),
                ])?;
            }
            let k = runs.len() as f64;
            let mean = |f: &dyn Fn(&alfg_apps::rotsync::SyncRun) -> f64| runs.iter().map(f).sum::<f64>() / k;
            let constrained = [0, 1, 2].map(|i| mean(&|r| r.error_constrained[i]));
            let svd = [0, 1, 2].map(|i| mean(&|r| r.error_svd[i]));
            let worst_orth = runs.iter().map(|r| r.orthogonality).fold(0.0, f64::max);
            let converged = runs.iter().filter(|r| r.converged_constrained).count();
            println!(
                "{} runs, n = {}, ω = {}: mean error constrained {:.3e} {:.3e} {:.3e}, svd {:.3e} {:.3e} {:.3e}",
                runs.len(),
                a.n,
                a.omega,
                constrained[0],
                constrained[1],
                constrained[2],
                svd[0],
                svd[1],
                svd[2]
            );
            println!("constrained converged {converged}/{}, worst orthogonality {worst_orth:.2e}", runs.len());
            json!({ "mean_error_constrained": constrained, "mean_error_svd": svd,
                    "converged_constrained": converged, "worst_orthogonality": worst_orth })
        }
    };
    let csv = csv.finish()?;
    Manifest {
        subcommand: "rot-sync",
        config: snapshot(a),
        config_file,
        seed: a.seed,
        threads,
        wall_time_s: clock.elapsed().as_secs_f64(),
        csv: &csv,
        results,
    }
    .write()?;
    Ok(())
}

const MPC_HEADER: [&str; 15] = [
    "epoch",
    "time",
    "x",
    "y",
    "theta",
    "v",
    "phi",
    "omega",
    "dv",
    "dphi",
    "domega",
    "iterations",
    "zeta",
    "solve_ms",
    "goal_index",
];

pub fn mpc(a: &MpcArgs, config_file: Option<&Path>) -> CliResult<()> {
    let clock = Instant::now();
    let goals_text = match &a.goals {
        Some(p) => read_input(p)?,
        None => GOALS_3.to_string(),
    };
    let goals = parse_goals(&goals_text)?;
    let mut mpc = MpcConfig {
        horizon: a.horizon,
        dt: a.dt,
        formulation: match a.formulation {
            Formulation::Slack => InequalityFormulation::SlackActive,
            Formulation::Maxpen => InequalityFormulation::MaxPenalty,
        },
        ..Default::default()
    };
    if let Some(p) = &a.limits {
        apply_limits(&read_input(p)?, &mut mpc)?;
    }
    if let Some(d) = a.d {
        mpc.d = d;
    }
    let sim = SimulationConfig {
        mpc,
        max_epochs: a.max_epochs,
        plant_noise: a.plant_noise,
        seed: a.seed,
        record_timing: !a.no_timing,
    };
    let result = run_simulation(PlatformState::default(), &goals, &sim)?;

    let out = out_path(&a.out, "mpc");
    let mut csv = CsvOut::new(&out, &MPC_HEADER)?;
    for e in &result.epochs {
        let mut row = vec![e.epoch.to_string(), num(e.time)];
        row.extend(e.state.to_vector().iter().map(|v| num(*v)));
        row.extend(e.control.to_vector().iter().map(|v| num(*v)));
        row.extend([e.iterations.to_string(), num(e.zeta), num(e.solve_ms), e.goal_index.to_string()]);
        csv.row(row)?;
    }
    let csv = csv.finish()?;

    let median_ms = median(&mut result.solve_times_ms());
    let unconverged = result.epochs.iter().filter(|e| e.converged != Some(true)).count();
    let rho = result.epochs.iter().filter_map(|e| e.rho_range).fold(None, |acc: Option<(f64, f64)>, (lo, hi)| {
        Some(acc.map_or((lo, hi), |(a, b)| (a.min(lo), b.max(hi))))
    });
    let zeta = result
        .epochs
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), e| (lo.min(e.zeta), hi.max(e.zeta)));
    println!(
        "reached {}/{} goals in {} epochs; travel times {:?} s",
        result.goals_reached,
        goals.len(),
        result.epochs.len(),
        result.travel_times
    );
    println!("unconverged epochs {unconverged}; median solve time {median_ms:.2} ms");
    Manifest {
        subcommand: "mpc",
        config: snapshot(a),
        config_file,
        seed: a.seed,
        threads: 0,
        wall_time_s: clock.elapsed().as_secs_f64(),
        csv: &csv,
        results: json!({
            "goals": goals.len(),
            "goals_reached": result.goals_reached,
            "travel_times": result.travel_times,
            "epochs": result.epochs.len(),
            "unconverged_epochs": unconverged,
            "median_solve_ms": median_ms,
            "rho_range": rho.map(|(lo, hi)| [lo, hi]),
            "zeta_range": (!result.epochs.is_empty()).then_some([zeta.0, zeta.1]),
            "dt": sim.mpc.dt,
        }),
    }
    .write()?;
    if !result.completed(goals.len()) {
        return Err(CliError::Failed(format!(
            "reached {} of {} goals within {} epochs",
            result.goals_reached,
            goals.len(),
            a.max_epochs
        )));
    }
    Ok(())
}

#[derive(Default)]
struct GoalStats {
    solve_ms: Vec<f64>,
    iterations: Vec<f64>,
    times: Vec<f64>,
}

pub fn plot(a: &PlotArgs, config_file: Option<&Path>) -> CliResult<()> {
    let clock = Instant::now();
    let csv_err = |source| CliError::Csv {
        path: a.input.clone(),
        source,
    };
    let mut reader = csv::Reader::from_path(&a.input).map_err(|e| match e.kind() {
        csv::ErrorKind::Io(_) => CliError::Usage(format!("{}: {e}", a.input.display())),
        _ => csv_err(e),
    })?;
    let headers = reader.headers().map_err(csv_err)?.clone();
    let column = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CliError::Usage(format!("{}: no `{name}` column", a.input.display())))
    };
    let (c_time, c_ms, c_it, c_goal) = (column("time")?, column("solve_ms")?, column("iterations")?, column("goal_index")?);
    let mut per_goal: BTreeMap<usize, GoalStats> = BTreeMap::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(csv_err)?;
        let bad = |what: &str| CliError::Usage(format!("{}: row {}: bad {what}", a.input.display(), line + 2));
        let field = |c: usize, what: &str| record.get(c).and_then(|s| s.parse::<f64>().ok()).ok_or_else(|| bad(what));
        let goal = record.get(c_goal).and_then(|s| s.parse::<usize>().ok()).ok_or_else(|| bad("goal_index"))?;
        let stats = per_goal.entry(goal).or_default();
        stats.times.push(field(c_time, "time")?);
        stats.solve_ms.push(field(c_ms, "solve_ms")?);
        stats.iterations.push(field(c_it, "iterations")?);
    }

    // The run's manifest knows which goals were reached and their exact
    // travel times; without it, a goal counts as reached once a later one
    // appears in the log.
    let manifest: Option<Value> = std::fs::read_to_string(manifest_path(&a.input))
        .ok()
        .and_then(|t| serde_json::from_str(&t).ok());
    let reached_count = manifest
        .as_ref()
        .and_then(|m| m["results"]["goals_reached"].as_u64())
        .map(|n| n as usize);
    let travel: Option<Vec<f64>> = manifest
        .as_ref()
        .and_then(|m| m["results"]["travel_times"].as_array().cloned())
        .map(|v| v.iter().filter_map(Value::as_f64).collect());
    let last_logged = per_goal.keys().next_back().map(|k| k + 1).unwrap_or(0);
    let rows = last_logged.max(reached_count.unwrap_or(0));

    let out = out_path(&a.out, "plot");
    let mut csv = CsvOut::new(
        &out,
        &[
            "goal_index",
            "reached",
            "travel_time",
            "epochs",
            "median_solve_ms",
            "mean_solve_ms",
            "max_solve_ms",
            "mean_iterations",
        ],
    )?;
    let mut all_ms = Vec::new();
    for goal in 0..rows {
        let empty = GoalStats::default();
        let stats = per_goal.get(&goal).unwrap_or(&empty);
        let reached = match reached_count {
            Some(n) => Some(goal < n),
            None if goal + 1 < last_logged => Some(true),
            None => None,
        };
        let travel_time = match (&travel, reached) {
            (Some(t), _) if goal < t.len() => Some(t[goal]),
            (None, Some(true)) => {
                let next = per_goal.get(&(goal + 1)).and_then(|s| s.times.first().copied());
                next.zip(stats.times.first().copied()).map(|(b, a)| b - a)
            }
            _ => None,
        };
        let n = stats.solve_ms.len();
        let mean = |v: &[f64]| if v.is_empty() { f64::NAN } else { v.iter().sum::<f64>() / v.len() as f64 };
        let max = stats.solve_ms.iter().copied().fold(f64::NAN, f64::max);
        all_ms.extend_from_slice(&stats.solve_ms);
        csv.row([
            goal.to_string(),
            reached.map(|r| r.to_string()).unwrap_or_default(),
            travel_time.map(num).unwrap_or_default(),
            n.to_string(),
            num(median(&mut stats.solve_ms.clone())),
            num(mean(&stats.solve_ms)),
            num(max),
            num(mean(&stats.iterations)),
        ])?;
    }
    let csv = csv.finish()?;
    println!("{} goals summarised; median solve time {:.2} ms", rows, median(&mut all_ms));
    Manifest {
        subcommand: "plot",
        config: snapshot(a),
        config_file,
        seed: 0,
        threads: 0,
        wall_time_s: clock.elapsed().as_secs_f64(),
        csv: &csv,
        results: json!({ "goals": rows, "input_manifest": manifest.is_some() }),
    }
    .write()?;
    Ok(())
}

pub fn selftest(a: &SelftestArgs, config_file: Option<&Path>) -> CliResult<()> {
    let clock = Instant::now();
    let report = run_selftest(&SelftestConfig {
        seed: a.seed,
        ..Default::default()
    });
    print!("{report}");
    let out = out_path(&a.out, "selftest");
    let mut csv = CsvOut::new(&out, &["suite", "passed", "cases", "failures", "worst", "tolerance"])?;
    for s in &report.suites {
        csv.row([
            s.name.to_string(),
            s.passed().to_string(),
            s.cases.to_string(),
            s.failures.to_string(),
            num(s.worst),
            num(s.tolerance),
        ])?;
    }
    let csv = csv.finish()?;
    Manifest {
        subcommand: "selftest",
        config: snapshot(a),
        config_file,
        seed: a.seed,
        threads: 0,
        wall_time_s: clock.elapsed().as_secs_f64(),
        csv: &csv,
        results: json!({ "passed": report.passed() }),
    }
    .write()?;
    if !report.passed() {
        return Err(CliError::Failed("selftest failed".into()));
    }
    Ok(())
}
