//! Release-gate property suites behind `alfg selftest`.
//!
//! Every suite compares a library route against an independent one: dense
//! KKT solves, central differences, a brute-force grid scan and a longhand
//! fine-step integrator. Reports carry no timings, so a fixed seed gives a
//! fixed report.

use std::fmt;

use alfg::{
    numeric_linearize, slack_qstar, AlSolver, FactorGraph, LinearFactor, ManifoldVariable, Residual,
    SolverConfig, VariableKey,
};
use nalgebra::{DMatrix, DVector, Matrix3, Vector2, Vector3, Vector6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::mpc::{
    rk4_step, AccelerationLimits, ControlInput, DynamicsConstraint, EffortFactor, Goal, GoalFactor, JerkFactor,
    MpcConfig, PlatformState, VelocityLimits,
};
use crate::pose::{GpsFactor, KinematicsConstraint, OdometryFactor};
use crate::rotsync::{random_rotation, RelativeRotationFactor, RotationConstraint};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SelftestConfig {
    pub seed: u64,
    pub kkt_problems: usize,
    pub fd_points: usize,
    pub slack_triples: usize,
    pub rk4_cases: usize,
}

impl Default for SelftestConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            kkt_problems: 100,
            fd_points: 20,
            slack_triples: 1000,
            rk4_cases: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteResult {
    pub name: &'static str,
    pub cases: usize,
    pub failures: usize,
    /// Largest error measured, in the suite's own units.
    pub worst: f64,
    pub tolerance: f64,
}

impl SuiteResult {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

impl fmt::Display for SuiteResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<18} {} {}/{} worst {:.3e} (tol {:.0e})",
            self.name,
            if self.passed() { "PASS" } else { "FAIL" },
            self.cases - self.failures,
            self.cases,
            self.worst,
            self.tolerance
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelftestReport {
    pub suites: Vec<SuiteResult>,
}

impl SelftestReport {
    pub fn passed(&self) -> bool {
        self.suites.iter().all(SuiteResult::passed)
    }
}

impl fmt::Display for SelftestReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for s in &self.suites {
            writeln!(f, "{s}")?;
        }
        Ok(())
    }
}

pub fn run_selftest(cfg: &SelftestConfig) -> SelftestReport {
    SelftestReport {
        suites: vec![
            kkt_suite(cfg.seed, cfg.kkt_problems),
            finite_difference_suite(&app_fd_cases(cfg.seed, cfg.fd_points)),
            slack_scan_suite(cfg.seed, cfg.slack_triples),
            rk4_substep_suite(cfg.seed, cfg.rk4_cases),
        ],
    }
}

/// `min ‖A x − z‖² s.t. C x = d` with `C` well away from rank deficiency.
struct EqualityQp {
    a: DMatrix<f64>,
    z: DVector<f64>,
    c: DMatrix<f64>,
    d: DVector<f64>,
}

fn random_qp(rng: &mut ChaCha8Rng) -> EqualityQp {
    let n = rng.random_range(2..=10);
    let m = rng.random_range(1..n);
    let rows = n + rng.random_range(0..3);
    let mut a = DMatrix::from_fn(rows, n, |_, _| rng.random_range(-1.0..1.0));
    for i in 0..n {
        a[(i, i)] += 3.0;
    }
    let c = loop {
        let mut c = DMatrix::from_fn(m, n, |_, _| rng.random_range(-1.0..1.0));
        for i in 0..m {
            c[(i, i)] += 2.0;
        }
        if c.clone().svd(false, false).singular_values.min() >= 0.5 {
            break c;
        }
    };
    EqualityQp {
        z: DVector::from_fn(rows, |_, _| rng.random_range(-2.0..2.0)),
        d: DVector::from_fn(m, |_, _| rng.random_range(-1.0..1.0)),
        a,
        c,
    }
}

/// Solves `[2AᵀA Cᵀ; C 0] [x; λ] = [2Aᵀz; d]` densely.
fn kkt_point(qp: &EqualityQp) -> Option<DVector<f64>> {
    let (n, m) = (qp.a.ncols(), qp.c.nrows());
    let mut k = DMatrix::zeros(n + m, n + m);
    k.view_mut((0, 0), (n, n)).copy_from(&(qp.a.transpose() * &qp.a * 2.0));
    k.view_mut((0, n), (n, m)).copy_from(&qp.c.transpose());
    k.view_mut((n, 0), (m, n)).copy_from(&qp.c);
    let mut rhs = DVector::zeros(n + m);
    rhs.rows_mut(0, n).copy_from(&(qp.a.transpose() * &qp.z * 2.0));
    rhs.rows_mut(n, m).copy_from(&qp.d);
    k.lu().solve(&rhs).map(|s| s.rows(0, n).into_owned())
}

/// Random equality-constrained QPs solved by the AL loop and by a dense KKT
/// solve; the error is `max(‖x − x*‖∞, ‖C x − d‖∞)`.
pub fn kkt_suite(seed: u64, problems: usize) -> SuiteResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tolerance = 1e-3;
    let mut result = SuiteResult {
        name: "kkt-oracle",
        cases: problems,
        failures: 0,
        worst: 0.0,
        tolerance,
    };
    let solver = AlSolver::new(SolverConfig {
        eps_f: 1e-4,
        ..Default::default()
    });
    for _ in 0..problems {
        let qp = random_qp(&mut rng);
        let mut g = FactorGraph::new();
        let x = g.add_variable(ManifoldVariable::euclidean(DVector::zeros(qp.a.ncols())));
        let identity = DMatrix::identity(qp.a.nrows(), qp.a.nrows());
        let built = LinearFactor::new(vec![(x, qp.a.clone())], qp.z.clone())
            .and_then(|f| g.add_error(f, identity))
            .and_then(|_| LinearFactor::new(vec![(x, qp.c.clone())], qp.d.clone()))
            .and_then(|f| g.add_equality(f));
        let error = match (built, kkt_point(&qp)) {
            (Ok(_), Some(x_star)) => match solver.solve(&mut g) {
                Ok(report) if report.converged => g
                    .variable(x)
                    .map(|v| (v.value() - &x_star).amax().max(report.max_eq_violation))
                    .unwrap_or(f64::INFINITY),
                _ => f64::INFINITY,
            },
            _ => f64::INFINITY,
        };
        record(&mut result, error);
    }
    result
}

/// One residual evaluated at fixed variable values; keys index `variables`.
pub struct FdCase {
    pub name: String,
    pub residual: Box<dyn Residual>,
    pub variables: Vec<ManifoldVariable>,
}

impl FdCase {
    fn new(name: &str, residual: impl Residual + 'static, variables: Vec<ManifoldVariable>) -> Self {
        Self {
            name: name.to_string(),
            residual: Box::new(residual),
            variables,
        }
    }
}

/// Analytic Jacobians against central differences over `⊞`, relative to
/// `max(1, ‖J‖∞)`.
pub fn finite_difference_suite(cases: &[FdCase]) -> SuiteResult {
    let tolerance = 1e-5;
    let mut result = SuiteResult {
        name: "finite-difference",
        cases: cases.len(),
        failures: 0,
        worst: 0.0,
        tolerance,
    };
    for case in cases {
        let vars: Option<Vec<&ManifoldVariable>> = case
            .residual
            .keys()
            .iter()
            .map(|k| case.variables.get(k.index()))
            .collect();
        let error = match vars {
            Some(vars) => {
                let analytic = case.residual.linearize(&vars).stacked_jacobian();
                let numeric = numeric_linearize(case.residual.as_ref(), &vars, 1e-6).stacked_jacobian();
                if analytic.shape() == numeric.shape() {
                    (&analytic - &numeric).amax() / analytic.amax().max(1.0)
                } else {
                    f64::INFINITY
                }
            }
            None => f64::INFINITY,
        };
        record(&mut result, error);
    }
    result
}

/// `points` random linearization points for every residual the applications
/// define.
pub fn app_fd_cases(seed: u64, points: usize) -> Vec<FdCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = VariableKey;
    let mpc = MpcConfig::default();
    let mut cases = Vec::with_capacity(points * 11);
    for _ in 0..points {
        let mut u = |lo: f64, hi: f64| rng.random_range(lo..hi);
        let pose = ManifoldVariable::se2(u(-3.0, 3.0), u(-3.0, 3.0), u(-3.0, 3.0));
        let gps = Vector2::new(u(-3.0, 3.0), u(-3.0, 3.0));
        let odom = [u(-3.0, 3.0), u(-3.0, 3.0), u(-1.0, 1.0)];
        cases.push(FdCase::new("pose-gps", GpsFactor::new(k(0), gps), vec![pose.clone()]));
        cases.push(FdCase::new("pose-odometry", OdometryFactor::new(k(0), odom), vec![pose.clone()]));
        cases.push(FdCase::new("pose-circle", KinematicsConstraint::new(k(0), u(0.5, 2.0)), vec![pose]));

        let state = |u: &mut dyn FnMut(f64, f64) -> f64| {
            ManifoldVariable::from_slice(&[u(-2.0, 2.0), u(-2.0, 2.0), u(-2.0, 2.0), u(-1.0, 1.0), u(-2.0, 2.0), u(-1.0, 1.0)])
        };
        let control = |u: &mut dyn FnMut(f64, f64) -> f64| ManifoldVariable::from_slice(&[u(-1.0, 1.0), u(-1.0, 1.0), u(-1.0, 1.0)]);
        let (x0, x1, c0, c1) = (state(&mut u), state(&mut u), control(&mut u), control(&mut u));
        let goal = Goal::new(u(-2.0, 2.0), u(-2.0, 2.0), u(-1.0, 1.0));
        cases.push(FdCase::new(
            "mpc-dynamics",
            DynamicsConstraint::new(k(0), k(1), k(2), 0.1),
            vec![x0.clone(), c0.clone(), x1],
        ));
        cases.push(FdCase::new("mpc-goal", GoalFactor::new(k(0), goal), vec![x0.clone()]));
        cases.push(FdCase::new("mpc-effort", EffortFactor::new(k(0)), vec![c0.clone()]));
        cases.push(FdCase::new("mpc-jerk", JerkFactor::new(k(0), k(1)), vec![c0.clone(), c1]));
        cases.push(FdCase::new("mpc-velocity", VelocityLimits::new(k(0), &mpc), vec![x0]));
        cases.push(FdCase::new("mpc-acceleration", AccelerationLimits::new(k(0), &mpc), vec![c0]));

        let (ri, rj, rz) = (random_rotation(&mut rng), random_rotation(&mut rng), random_rotation(&mut rng));
        // Off the manifold as well: the constraint must be differentiable there.
        let skew = Matrix3::from_fn(|_, _| rng.random_range(-0.2..0.2));
        cases.push(FdCase::new(
            "rotsync-relative",
            RelativeRotationFactor::new(k(0), k(1), rz),
            vec![ManifoldVariable::matrix3(&ri), ManifoldVariable::matrix3(&rj)],
        ));
        cases.push(FdCase::new(
            "rotsync-orthogonality",
            RotationConstraint::new(k(0)),
            vec![ManifoldVariable::matrix3(&(ri + skew))],
        ));
    }
    cases
}

/// `q*` against a brute-force scan of `μ(g + q) + ρ(g + q)²` over a `q ≥ 0`
/// grid with step `1e-4`.
pub fn slack_scan_suite(seed: u64, triples: usize) -> SuiteResult {
    const STEP: f64 = 1e-4;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut result = SuiteResult {
        name: "slack-grid-scan",
        cases: triples,
        failures: 0,
        worst: 0.0,
        tolerance: STEP,
    };
    for _ in 0..triples {
        let mu = rng.random_range(0.0..5.0);
        let rho = rng.random_range(0.1..10.0);
        let g = rng.random_range(-5.0..5.0);
        let objective = |q: f64| mu * (g + q) + rho * (g + q) * (g + q);
        // Past q = |g| the objective only grows.
        let steps = (g.abs() / STEP).ceil() as usize + 1;
        let mut best = (0.0, objective(0.0));
        for i in 1..=steps {
            let q = i as f64 * STEP;
            let value = objective(q);
            if value < best.1 {
                best = (q, value);
            }
        }
        let error = match slack_qstar(mu, rho, g) {
            Ok(q) => (q - best.0).abs(),
            Err(_) => f64::INFINITY,
        };
        record(&mut result, error);
    }
    result
}

/// `rk4_step` at `dt = 0.1` against ten longhand RK4 steps of `0.01`, for
/// controls inside the unit acceleration box.
pub fn rk4_substep_suite(seed: u64, cases: usize) -> SuiteResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut result = SuiteResult {
        name: "rk4-substep",
        cases,
        failures: 0,
        worst: 0.0,
        tolerance: 1e-6,
    };
    for _ in 0..cases {
        let mut u = |lo: f64, hi: f64| rng.random_range(lo..hi);
        let s = PlatformState::new(u(-2.0, 2.0), u(-2.0, 2.0), u(-3.0, 3.0), u(-1.0, 1.0), u(-3.0, 3.0), u(-1.0, 1.0));
        let c = ControlInput {
            dv: u(-1.0, 1.0),
            dphi: u(-1.0, 1.0),
            domega: u(-1.0, 1.0),
        };
        let coarse = rk4_step(&s, &c, 0.1).to_vector();
        let mut fine = s.to_vector();
        for _ in 0..10 {
            fine = longhand_rk4(&fine, &c.to_vector(), 0.01);
        }
        let error = (0..6)
            .map(|i| {
                let d = coarse[i] - fine[i];
                if i == 2 || i == 4 {
                    let w = d.rem_euclid(std::f64::consts::TAU);
                    w.min(std::f64::consts::TAU - w)
                } else {
                    d.abs()
                }
            })
            .fold(0.0, f64::max);
        record(&mut result, error);
    }
    result
}

fn longhand_rk4(s: &Vector6<f64>, u: &Vector3<f64>, dt: f64) -> Vector6<f64> {
    let f = |x: &Vector6<f64>| {
        let heading = x[2] + x[4];
        Vector6::new(x[3] * heading.cos(), x[3] * heading.sin(), x[5], u[0], u[1], u[2])
    };
    let k1 = f(s);
    let k2 = f(&(s + k1 * (dt / 2.0)));
    let k3 = f(&(s + k2 * (dt / 2.0)));
    let k4 = f(&(s + k3 * dt));
    s + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0)
}

fn record(result: &mut SuiteResult, error: f64) {
    // NaN counts as a failure and as the worst case.
    if !(error <= result.tolerance) {
        result.failures += 1;
    }
    if !(error <= result.worst) {
        result.worst = error;
    }
}
