//! Rotation synchronisation with unconstrained 3×3 matrix variables.
//!
//! The relative residual `A_i Z_ij − A_j` is linear in the unknowns; the
//! constrained variant adds `AᵀA = I` and `det A = 1` per variable, while the
//! baseline solves the unconstrained problem and projects each estimate onto
//! SO(3) afterwards.

use std::collections::BTreeSet;

use alfg::{
    AlSolver, FactorGraph, Linearization, ManifoldVariable, PriorFactor, Residual, SolverConfig, SolverReport,
    VariableKey,
};
use nalgebra::{DMatrix, DVector, Matrix3, Rotation3, UnitQuaternion, Vector3, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{AppError, AppResult};

/// Information of the prior that pins variable 0.
pub const ANCHOR_WEIGHT: f64 = 1e6;

/// Row-major flattening.
pub fn flatten(m: &Matrix3<f64>) -> DVector<f64> {
    DVector::from_iterator(9, m.transpose().iter().copied())
}

pub fn unflatten(v: &[f64]) -> Matrix3<f64> {
    Matrix3::from_row_slice(v)
}

/// `flatten(A_i Z − A_j)`.
pub fn relative_residual(a_i: &Matrix3<f64>, a_j: &Matrix3<f64>, z: &Matrix3<f64>) -> DVector<f64> {
    flatten(&(a_i * z - a_j))
}

/// `(flatten(AᵀA − I), det A − 1)`.
pub fn rotation_constraint(a: &Matrix3<f64>) -> DVector<f64> {
    let mut out = DVector::zeros(10);
    out.rows_mut(0, 9)
        .copy_from(&flatten(&(a.transpose() * a - Matrix3::identity())));
    out[9] = a.determinant() - 1.0;
    out
}

/// Closest rotation in Frobenius norm, `U diag(1, 1, det(UVᵀ)) Vᵀ`.
pub fn svd_project(a: &Matrix3<f64>) -> AppResult<Matrix3<f64>> {
    let svd = a.svd(true, true);
    if svd.singular_values.min() <= 1e-12 * svd.singular_values.max().max(1.0) {
        return Err(AppError::Invalid("cannot project a singular matrix".into()));
    }
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let d = (u * v_t).determinant().signum();
    Ok(u * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d)) * v_t)
}

pub struct RelativeRotationFactor {
    keys: [VariableKey; 2],
    z: Matrix3<f64>,
}

impl RelativeRotationFactor {
    pub fn new(i: VariableKey, j: VariableKey, z: Matrix3<f64>) -> Self {
        Self { keys: [i, j], z }
    }
}

impl Residual for RelativeRotationFactor {
    fn keys(&self) -> &[VariableKey] {
        &self.keys
    }

    fn dim(&self) -> usize {
        9
    }

    fn evaluate(&self, vars: &[&ManifoldVariable]) -> DVector<f64> {
        relative_residual(
            &unflatten(vars[0].value().as_slice()),
            &unflatten(vars[1].value().as_slice()),
            &self.z,
        )
    }

    fn linearize(&self, vars: &[&ManifoldVariable]) -> Linearization {
        // Row r of A_i Z only sees row r of A_i: the block is I₃ ⊗ Zᵀ.
        let mut j_i = DMatrix::zeros(9, 9);
        for r in 0..3 {
            for c in 0..3 {
                for k in 0..3 {
                    j_i[(3 * r + c, 3 * r + k)] = self.z[(k, c)];
                }
            }
        }
        Linearization {
            residual: self.evaluate(vars),
            jacobians: vec![j_i, -DMatrix::identity(9, 9)],
        }
    }
}

pub struct RotationConstraint {
    keys: [VariableKey; 1],
}

impl RotationConstraint {
    pub fn new(key: VariableKey) -> Self {
        Self { keys: [key] }
    }
}

impl Residual for RotationConstraint {
    fn keys(&self) -> &[VariableKey] {
        &self.keys
    }

    fn dim(&self) -> usize {
        10
    }

    fn evaluate(&self, vars: &[&ManifoldVariable]) -> DVector<f64> {
        rotation_constraint(&unflatten(vars[0].value().as_slice()))
    }

    fn linearize(&self, vars: &[&ManifoldVariable]) -> Linearization {
        let a = unflatten(vars[0].value().as_slice());
        let mut jac = DMatrix::zeros(10, 9);
        // (AᵀA)[r,c] = Σ_k A[k,r] A[k,c]
        for r in 0..3 {
            for c in 0..3 {
                for k in 0..3 {
                    jac[(3 * r + c, 3 * k + r)] += a[(k, c)];
                    jac[(3 * r + c, 3 * k + c)] += a[(k, r)];
                }
            }
        }
        // ∂det/∂A is the cofactor matrix.
        let cols = [a.column(0), a.column(1), a.column(2)];
        let cof_t = Matrix3::from_rows(&[
            cols[1].cross(&cols[2]).transpose(),
            cols[2].cross(&cols[0]).transpose(),
            cols[0].cross(&cols[1]).transpose(),
        ]);
        for r in 0..3 {
            for c in 0..3 {
                jac[(9, 3 * r + c)] = cof_t[(c, r)];
            }
        }
        Linearization {
            residual: rotation_constraint(&a),
            jacobians: vec![jac],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Measurement {
    pub i: usize,
    pub j: usize,
    pub z: Matrix3<f64>,
    /// Isotropic information `ω` of the 9-vector residual.
    pub omega: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RotationSyncProblem {
    pub n: usize,
    pub measurements: Vec<Measurement>,
    pub gauge_index: usize,
    /// Value the gauge variable is pinned to.
    pub gauge_value: Matrix3<f64>,
}

impl RotationSyncProblem {
    pub fn validate(&self) -> AppResult<()> {
        if self.n < 2 || self.gauge_index >= self.n {
            return Err(AppError::Invalid("need at least two variables and a valid gauge".into()));
        }
        let mut adj = vec![Vec::new(); self.n];
        for m in &self.measurements {
            if m.i >= self.n || m.j >= self.n || m.i == m.j {
                return Err(AppError::Invalid(format!("bad edge {} {}", m.i, m.j)));
            }
            if !(m.omega > 0.0) {
                return Err(AppError::Invalid(format!("edge {} {} needs positive information", m.i, m.j)));
            }
            if (m.z.transpose() * m.z - Matrix3::identity()).amax() > 1e-6 {
                return Err(AppError::Invalid(format!("edge {} {} is not a rotation", m.i, m.j)));
            }
            adj[m.i].push(m.j);
            adj[m.j].push(m.i);
        }
        let mut seen = vec![false; self.n];
        let mut stack = vec![self.gauge_index];
        seen[self.gauge_index] = true;
        while let Some(v) = stack.pop() {
            for &w in &adj[v] {
                if !seen[w] {
                    seen[w] = true;
                    stack.push(w);
                }
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(AppError::Invalid("measurement graph is not connected".into()));
        }
        Ok(())
    }

    pub fn build_graph(&self, initial: &[Matrix3<f64>], constrained: bool) -> AppResult<FactorGraph> {
        if initial.len() != self.n {
            return Err(AppError::Invalid("one initial guess per variable".into()));
        }
        let mut g = FactorGraph::new();
        for a in initial {
            g.add_variable(ManifoldVariable::matrix3(a));
        }
        g.add_error(
            PriorFactor::new(VariableKey(self.gauge_index), flatten(&self.gauge_value)),
            DMatrix::identity(9, 9) * ANCHOR_WEIGHT,
        )?;
        for m in &self.measurements {
            g.add_error(
                RelativeRotationFactor::new(VariableKey(m.i), VariableKey(m.j), m.z),
                DMatrix::identity(9, 9) * m.omega,
            )?;
        }
        if constrained {
            for i in 0..self.n {
                g.add_equality(RotationConstraint::new(VariableKey(i)))?;
            }
        }
        Ok(g)
    }

    pub fn solve(&self, initial: &[Matrix3<f64>], constrained: bool, config: &SolverConfig) -> AppResult<SyncSolution> {
        self.validate()?;
        let mut g = self.build_graph(initial, constrained)?;
        let report = AlSolver::new(*config).solve(&mut g)?;
        let estimates: Option<Vec<_>> = g.variables().iter().map(|v| v.as_matrix3()).collect();
        Ok(SyncSolution {
            estimates: estimates.ok_or_else(|| AppError::Invalid("variables are not 3×3".into()))?,
            report,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyncSolution {
    pub estimates: Vec<Matrix3<f64>>,
    pub report: SolverReport,
}

impl SyncSolution {
    /// Worst `‖AᵀA − I‖∞` and `|det A − 1|` over all estimates.
    pub fn constraint_violation(&self) -> (f64, f64) {
        self.estimates.iter().fold((0.0, 0.0), |(o, d), a| {
            let f = rotation_constraint(a);
            (f64::max(o, f.rows(0, 9).amax()), f64::max(d, f[9].abs()))
        })
    }
}

fn normal<R: Rng>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

pub fn random_rotation<R: Rng>(rng: &mut R) -> Matrix3<f64> {
    let q = Vector4::from_fn(|_, _| normal(rng));
    *UnitQuaternion::from_quaternion(nalgebra::Quaternion::from(q))
        .to_rotation_matrix()
        .matrix()
}

/// `Exp(ε)` with `ε ~ N(0, σ² I₃)`.
pub fn random_perturbation<R: Rng>(rng: &mut R, sigma: f64) -> Matrix3<f64> {
    let eps = Vector3::from_fn(|_, _| sigma * normal(rng));
    *Rotation3::new(eps).matrix()
}

/// Ring `0 → 1 → … → n−1 → 0` plus `n / 4` distinct random chords.
pub fn ring_with_chords<R: Rng>(rng: &mut R, n: usize) -> Vec<(usize, usize)> {
    let mut edges: Vec<(usize, usize)> = (0..n).map(|i| (i, (i + 1) % n)).collect();
    let mut used: BTreeSet<(usize, usize)> = edges.iter().map(|&(i, j)| (i.min(j), i.max(j))).collect();
    let wanted = n / 4;
    // Small rings may not have room for every chord.
    let available = n * (n - 1) / 2 - used.len();
    let mut added = 0;
    while added < wanted.min(available) {
        let i = rng.random_range(0..n);
        let j = rng.random_range(0..n);
        if i == j || !used.insert((i.min(j), i.max(j))) {
            continue;
        }
        edges.push((i, j));
        added += 1;
    }
    edges
}

/// Synthetic instance: ground truth plus measurements `Z = R_iᵀ R_j Exp(ε)`
/// with `σ = 1/√ω`.
pub fn generate(n: usize, omega: f64, seed: u64) -> AppResult<(RotationSyncProblem, Vec<Matrix3<f64>>)> {
    if n < 3 {
        return Err(AppError::Invalid("rotation synchronisation needs n ≥ 3".into()));
    }
    if !(omega > 0.0) {
        return Err(AppError::Invalid("noise information must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let truth: Vec<Matrix3<f64>> = (0..n).map(|_| random_rotation(&mut rng)).collect();
    let sigma = omega.sqrt().recip();
    let measurements = ring_with_chords(&mut rng, n)
        .into_iter()
        .map(|(i, j)| Measurement {
            i,
            j,
            z: truth[i].transpose() * truth[j] * random_perturbation(&mut rng, sigma),
            omega,
        })
        .collect();
    Ok((
        RotationSyncProblem {
            n,
            measurements,
            gauge_index: 0,
            gauge_value: truth[0],
        },
        truth,
    ))
}

/// Fixed-axis XYZ angles of `R_gtᵀ R_est`.
pub fn angular_error(truth: &Matrix3<f64>, estimate: &Matrix3<f64>) -> Vector3<f64> {
    let (x, y, z) = Rotation3::from_matrix_unchecked(truth.transpose() * estimate).euler_angles();
    Vector3::new(x, y, z)
}

/// Per-axis mean of `|Δα|` over all variables.
pub fn mean_angular_error(truth: &[Matrix3<f64>], estimates: &[Matrix3<f64>]) -> Vector3<f64> {
    let sum = truth
        .iter()
        .zip(estimates)
        .fold(Vector3::zeros(), |acc, (t, e)| acc + angular_error(t, e).abs());
    sum / truth.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyncConfig {
    pub n: usize,
    pub omega: f64,
    pub seed: u64,
    pub random_init: bool,
    pub solver: SolverConfig,
}

impl Default for SyncConfig {
    fn default() -> Self {
        Self {
            n: 99,
            omega: 1e4,
            seed: 0,
            random_init: false,
            solver: sync_solver_config(),
        }
    }
}

/// Default solver settings with the equality tolerance tightened to 1e-4.
pub fn sync_solver_config() -> SolverConfig {
    SolverConfig {
        eps_f: 1e-4,
        ..Default::default()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyncRun {
    pub seed: u64,
    pub omega: f64,
    pub n: usize,
    pub error_constrained: Vector3<f64>,
    pub error_svd: Vector3<f64>,
    pub converged_constrained: bool,
    pub converged_free: bool,
    pub iterations_constrained: usize,
    /// Worst `‖AᵀA − I‖∞` of the constrained estimate before projection.
    pub orthogonality: f64,
    /// Worst `|det A − 1|` of the constrained estimate before projection.
    pub determinant: f64,
}

pub fn initial_guess(problem: &RotationSyncProblem, random: bool, seed: u64) -> Vec<Matrix3<f64>> {
    if !random {
        return vec![Matrix3::identity(); problem.n];
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    (0..problem.n).map(|_| random_rotation(&mut rng)).collect()
}

/// Solves one problem both ways and scores them against `truth`.
pub fn evaluate(
    problem: &RotationSyncProblem,
    truth: &[Matrix3<f64>],
    initial: &[Matrix3<f64>],
    solver: &SolverConfig,
) -> AppResult<(SyncSolution, SyncSolution, Vec<Matrix3<f64>>)> {
    let free = problem.solve(initial, false, solver)?;
    let projected = free.estimates.iter().map(svd_project).collect::<AppResult<Vec<_>>>()?;
    let constrained = problem.solve(initial, true, solver)?;
    if truth.len() != problem.n {
        return Err(AppError::Invalid("ground truth size mismatch".into()));
    }
    Ok((free, constrained, projected))
}

pub fn run_sync_experiment(cfg: &SyncConfig) -> AppResult<SyncRun> {
    let (problem, truth) = generate(cfg.n, cfg.omega, cfg.seed)?;
    let initial = initial_guess(&problem, cfg.random_init, cfg.seed);
    let (free, constrained, projected) = evaluate(&problem, &truth, &initial, &cfg.solver)?;
    let (orthogonality, determinant) = constrained.constraint_violation();
    Ok(SyncRun {
        seed: cfg.seed,
        omega: cfg.omega,
        n: cfg.n,
        error_constrained: mean_angular_error(&truth, &constrained.estimates),
        error_svd: mean_angular_error(&truth, &projected),
        converged_constrained: constrained.report.converged,
        converged_free: free.report.converged,
        iterations_constrained: constrained.report.outer_iterations,
        orthogonality,
        determinant,
    })
}

/// `runs` experiments on seeds `cfg.seed, cfg.seed + 1, …`; `threads = 0`
/// runs them sequentially.
pub fn run_sync_batch(cfg: &SyncConfig, runs: usize, threads: usize) -> AppResult<Vec<SyncRun>> {
    if runs == 0 {
        return Err(AppError::Invalid("at least one run is required".into()));
    }
    let one = |r: usize| {
        run_sync_experiment(&SyncConfig {
            seed: cfg.seed.wrapping_add(r as u64),
            ..*cfg
        })
    };
    if threads == 0 {
        return (0..runs).map(one).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| AppError::ThreadPool(e.to_string()))?;
    pool.install(|| (0..runs).into_par_iter().map(one).collect())
}

/// Parses `i j z00 z01 … z22 ω` lines; blank lines and `#` comments are
/// skipped. The number of variables is one past the largest index.
pub fn parse_measurements(text: &str) -> AppResult<RotationSyncProblem> {
    let mut measurements = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |message: String| AppError::Parse { line: idx + 1, message };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 12 {
            return Err(err(format!("expected 12 fields, found {}", fields.len())));
        }
        let index = |s: &str| s.parse::<usize>().map_err(|e| err(format!("{s}: {e}")));
        let (i, j) = (index(fields[0])?, index(fields[1])?);
        let nums = fields[2..]
            .iter()
            .map(|s| s.parse::<f64>().map_err(|e| err(format!("{s}: {e}"))))
            .collect::<AppResult<Vec<_>>>()?;
        measurements.push(Measurement {
            i,
            j,
            z: Matrix3::from_row_slice(&nums[..9]),
            omega: nums[9],
        });
    }
    let n = measurements.iter().map(|m| m.i.max(m.j) + 1).max().unwrap_or(0);
    let problem = RotationSyncProblem {
        n,
        measurements,
        gauge_index: 0,
        gauge_value: Matrix3::identity(),
    };
    problem.validate()?;
    Ok(problem)
}
