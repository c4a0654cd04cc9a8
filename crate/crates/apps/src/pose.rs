//! Single SE(2) pose from one GPS fix and one odometry reading, optionally
//! constrained to the circle of radius `vT` with a radial heading.

use alfg::{
    wrap_angle, AlSolver, FactorGraph, Linearization, ManifoldVariable, Residual, SolverConfig, SolverReport,
    VariableKey,
};
use nalgebra::{DMatrix, DVector, Matrix2, Matrix3, Vector2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{AppError, AppResult};

/// Ground truth shared by every trial.
pub const TRUE_POSE: [f64; 3] = [1.0, 0.0, 0.0];

/// `t − z`.
pub fn gps_residual(pose: &[f64], z: &Vector2<f64>) -> Vector2<f64> {
    Vector2::new(pose[0] - z[0], pose[1] - z[1])
}

/// `X⁻¹ Z` as `(Δx, Δy, wrap(Δθ))` in the frame of `X`.
pub fn odom_residual(pose: &[f64], z: &[f64; 3]) -> [f64; 3] {
    let (s, c) = pose[2].sin_cos();
    let (dx, dy) = (z[0] - pose[0], z[1] - pose[1]);
    [c * dx + s * dy, -s * dx + c * dy, wrap_angle(z[2] - pose[2])]
}

/// `(x² + y² − (vT)², x sin θ − y cos θ)`.
pub fn kinematics_constraint(pose: &[f64], radius: f64) -> Vector2<f64> {
    let (s, c) = pose[2].sin_cos();
    Vector2::new(
        pose[0] * pose[0] + pose[1] * pose[1] - radius * radius,
        pose[0] * s - pose[1] * c,
    )
}

pub struct GpsFactor {
    keys: [VariableKey; 1],
    z: Vector2<f64>,
}

impl GpsFactor {
    pub fn new(key: VariableKey, z: Vector2<f64>) -> Self {
        Self { keys: [key], z }
    }
}

impl Residual for GpsFactor {
    fn keys(&self) -> &[VariableKey] {
        &self.keys
    }

    fn dim(&self) -> usize {
        2
    }

    fn evaluate(&self, vars: &[&ManifoldVariable]) -> DVector<f64> {
        let r = gps_residual(vars[0].value().as_slice(), &self.z);
        DVector::from_column_slice(r.as_slice())
    }

    fn linearize(&self, vars: &[&ManifoldVariable]) -> Linearization {
        let (s, c) = vars[0].value()[2].sin_cos();
        Linearization {
            residual: self.evaluate(vars),
            jacobians: vec![DMatrix::from_row_slice(2, 3, &[c, -s, 0.0, s, c, 0.0])],
        }
    }
}

pub struct OdometryFactor {
    keys: [VariableKey; 1],
    z: [f64; 3],
}

impl OdometryFactor {
    pub fn new(key: VariableKey, z: [f64; 3]) -> Self {
        Self { keys: [key], z }
    }
}

impl Residual for OdometryFactor {
    fn keys(&self) -> &[VariableKey] {
        &self.keys
    }

    fn dim(&self) -> usize {
        3
    }

    fn evaluate(&self, vars: &[&ManifoldVariable]) -> DVector<f64> {
        DVector::from_column_slice(&odom_residual(vars[0].value().as_slice(), &self.z))
    }

    fn linearize(&self, vars: &[&ManifoldVariable]) -> Linearization {
        let r = odom_residual(vars[0].value().as_slice(), &self.z);
        Linearization {
            residual: DVector::from_column_slice(&r),
            jacobians: vec![DMatrix::from_row_slice(
                3,
                3,
                &[-1.0, 0.0, r[1], 0.0, -1.0, -r[0], 0.0, 0.0, -1.0],
            )],
        }
    }
}

pub struct KinematicsConstraint {
    keys: [VariableKey; 1],
    radius: f64,
}

impl KinematicsConstraint {
    pub fn new(key: VariableKey, radius: f64) -> Self {
        Self { keys: [key], radius }
    }
}

impl Residual for KinematicsConstraint {
    fn keys(&self) -> &[VariableKey] {
        &self.keys
    }

    fn dim(&self) -> usize {
        2
    }

    fn evaluate(&self, vars: &[&ManifoldVariable]) -> DVector<f64> {
        let f = kinematics_constraint(vars[0].value().as_slice(), self.radius);
        DVector::from_column_slice(f.as_slice())
    }

    fn linearize(&self, vars: &[&ManifoldVariable]) -> Linearization {
        let p = vars[0].value();
        let (s, c) = p[2].sin_cos();
        // 2 tᵀ R(θ) for the radial row; the heading row only moves with δθ
        // along the body axes.
        let (gx, gy) = (2.0 * (p[0] * c + p[1] * s), 2.0 * (-p[0] * s + p[1] * c));
        Linearization {
            residual: self.evaluate(vars),
            jacobians: vec![DMatrix::from_row_slice(
                2,
                3,
                &[gx, gy, 0.0, 0.0, -1.0, p[0] * c + p[1] * s],
            )],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseEstimationProblem {
    pub z_gps: Vector2<f64>,
    pub z_odom: [f64; 3],
    pub omega_gps: Matrix2<f64>,
    pub omega_odom: Matrix3<f64>,
    pub v: f64,
    pub travel_time: f64,
    pub theta0: f64,
}

impl PoseEstimationProblem {
    /// Noise-free odometry from straight-line motion at heading `θ₀`.
    pub fn new(z_gps: Vector2<f64>, theta0: f64, v: f64, travel_time: f64, omega_gps: f64, omega_odom: f64) -> Self {
        let d = v * travel_time;
        Self {
            z_gps,
            z_odom: [d * theta0.cos(), d * theta0.sin(), wrap_angle(theta0)],
            omega_gps: Matrix2::identity() * omega_gps,
            omega_odom: Matrix3::identity() * omega_odom,
            v,
            travel_time,
            theta0,
        }
    }

    pub fn validate(&self) -> AppResult<()> {
        if !(self.v > 0.0 && self.travel_time > 0.0) {
            return Err(AppError::Invalid("v and T must be positive".into()));
        }
        let spd = |m: DMatrix<f64>| m.clone().cholesky().is_some() && (&m - m.transpose()).amax() == 0.0;
        if !spd(DMatrix::from_column_slice(2, 2, self.omega_gps.as_slice()))
            || !spd(DMatrix::from_column_slice(3, 3, self.omega_odom.as_slice()))
        {
            return Err(AppError::Invalid("information matrices must be symmetric positive definite".into()));
        }
        Ok(())
    }

    pub fn radius(&self) -> f64 {
        self.v * self.travel_time
    }

    pub fn build_graph(&self, constrained: bool) -> AppResult<(FactorGraph, VariableKey)> {
        let mut g = FactorGraph::new();
        let x = g.add_variable(ManifoldVariable::se2(0.0, 0.0, self.theta0));
        g.add_error(
            GpsFactor::new(x, self.z_gps),
            DMatrix::from_column_slice(2, 2, self.omega_gps.as_slice()),
        )?;
        g.add_error(
            OdometryFactor::new(x, self.z_odom),
            DMatrix::from_column_slice(3, 3, self.omega_odom.as_slice()),
        )?;
        if constrained {
            g.add_equality(KinematicsConstraint::new(x, self.radius()))?;
        }
        Ok((g, x))
    }

    pub fn solve(&self, constrained: bool, config: &SolverConfig) -> AppResult<PoseEstimate> {
        self.validate()?;
        let (mut g, x) = self.build_graph(constrained)?;
        let report = AlSolver::new(*config).solve(&mut g)?;
        let v = g.variable(x)?.value();
        Ok(PoseEstimate {
            pose: [v[0], v[1], v[2]],
            report,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseEstimate {
    pub pose: [f64; 3],
    pub report: SolverReport,
}

impl PoseEstimate {
    pub fn translation_error(&self) -> f64 {
        (self.pose[0] - TRUE_POSE[0]).hypot(self.pose[1] - TRUE_POSE[1])
    }

    pub fn rotation_error(&self) -> f64 {
        wrap_angle(self.pose[2] - TRUE_POSE[2]).abs()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MonteCarloConfig {
    pub trials: usize,
    pub seed: u64,
    pub theta0: f64,
    pub v: f64,
    pub travel_time: f64,
    pub omega_odom: f64,
    pub omega_gps: f64,
    /// Overrides the GPS noise standard deviation `1/√ω_gps`.
    pub gps_sigma: Option<f64>,
    /// 0 runs trials sequentially.
    pub threads: usize,
    pub solver: SolverConfig,
}

impl Default for MonteCarloConfig {
    fn default() -> Self {
        Self {
            trials: 10_000,
            seed: 0,
            theta0: 0.5,
            v: 1.0,
            travel_time: 1.0,
            omega_odom: 10.0,
            omega_gps: 20.0,
            gps_sigma: None,
            threads: 0,
            solver: SolverConfig::default(),
        }
    }
}

/// One row of the error table. Failed solves leave NaN errors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrialRecord {
    pub trial: usize,
    pub e_t_free: f64,
    pub e_rot_free: f64,
    pub e_t_constrained: f64,
    pub e_rot_constrained: f64,
    pub converged_free: bool,
    pub converged_constrained: bool,
    /// `‖f‖∞` of the circle/heading constraint at the constrained estimate.
    pub constraint_violation: f64,
}

/// GPS fix drawn from `N((1, 0), σ² I)` on the trial's own stream.
pub fn sample_gps(seed: u64, trial: usize, sigma: f64) -> Vector2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial as u64);
    let nx: f64 = StandardNormal.sample(&mut rng);
    let ny: f64 = StandardNormal.sample(&mut rng);
    Vector2::new(TRUE_POSE[0] + sigma * nx, TRUE_POSE[1] + sigma * ny)
}

pub fn run_trial(cfg: &MonteCarloConfig, trial: usize) -> TrialRecord {
    let problem = PoseEstimationProblem::new(
        sample_gps(cfg.seed, trial, cfg.gps_sigma.unwrap_or(cfg.omega_gps.sqrt().recip())),
        cfg.theta0,
        cfg.v,
        cfg.travel_time,
        cfg.omega_gps,
        cfg.omega_odom,
    );
    let free = problem.solve(false, &cfg.solver).ok();
    let constrained = problem.solve(true, &cfg.solver).ok();
    let errors = |e: &Option<PoseEstimate>| match e {
        Some(e) => (e.translation_error(), e.rotation_error(), e.report.converged),
        None => (f64::NAN, f64::NAN, false),
    };
    let (e_t_free, e_rot_free, converged_free) = errors(&free);
    let (e_t_constrained, e_rot_constrained, converged_constrained) = errors(&constrained);
    TrialRecord {
        trial,
        e_t_free,
        e_rot_free,
        e_t_constrained,
        e_rot_constrained,
        converged_free,
        converged_constrained,
        constraint_violation: constrained
            .map(|e| kinematics_constraint(&e.pose, problem.radius()).amax())
            .unwrap_or(f64::NAN),
    }
}

pub fn run_monte_carlo(cfg: &MonteCarloConfig) -> AppResult<Vec<TrialRecord>> {
    if cfg.trials == 0 {
        return Err(AppError::Invalid("at least one trial is required".into()));
    }
    cfg.solver.validate()?;
    if cfg.gps_sigma.is_some_and(|s| !(s >= 0.0)) {
        return Err(AppError::Invalid("GPS sigma must be non-negative".into()));
    }
    PoseEstimationProblem::new(Vector2::zeros(), cfg.theta0, cfg.v, cfg.travel_time, cfg.omega_gps, cfg.omega_odom)
        .validate()?;
    if cfg.threads == 0 {
        return Ok((0..cfg.trials).map(|t| run_trial(cfg, t)).collect());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| AppError::ThreadPool(e.to_string()))?;
    Ok(pool.install(|| (0..cfg.trials).into_par_iter().map(|t| run_trial(cfg, t)).collect()))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MonteCarloSummary {
    pub trials: usize,
    pub mean_t_free: f64,
    pub mean_t_constrained: f64,
    pub mean_rot_free: f64,
    pub mean_rot_constrained: f64,
    pub converged_constrained: usize,
    /// Converged constrained trials with `‖f‖∞ ≤ 1e-3`.
    pub satisfied_constrained: usize,
}

/// Means skip failed (NaN) trials.
pub fn summarize(records: &[TrialRecord]) -> MonteCarloSummary {
    let mean = |f: &dyn Fn(&TrialRecord) -> f64| {
        let vals: Vec<f64> = records.iter().map(f).filter(|v| v.is_finite()).collect();
        vals.iter().sum::<f64>() / vals.len().max(1) as f64
    };
    let converged: Vec<_> = records.iter().filter(|r| r.converged_constrained).collect();
    MonteCarloSummary {
        trials: records.len(),
        mean_t_free: mean(&|r| r.e_t_free),
        mean_t_constrained: mean(&|r| r.e_t_constrained),
        mean_rot_free: mean(&|r| r.e_rot_free),
        mean_rot_constrained: mean(&|r| r.e_rot_constrained),
        converged_constrained: converged.len(),
        satisfied_constrained: converged.iter().filter(|r| r.constraint_violation <= 1e-3).count(),
    }
}
