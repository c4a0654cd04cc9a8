//! Augmented-Lagrangian iterative least squares.
//!
//! Each outer iteration takes `inner_iterations` damped Gauss-Newton steps
//! on the augmented Lagrangian with multipliers and penalties frozen, then
//! updates every multiplier and penalty. The loop stops once the last step,
//! the equality violation and the inequality violation are all below their
//! tolerances.

use std::time::Instant;

use crate::constraint::PenaltyParams;
use crate::error::{Error, Result};
use crate::graph::{FactorGraph, Perturbation};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverConfig {
    /// Gauss-Newton steps per outer iteration.
    pub inner_iterations: usize,
    pub max_outer_iterations: usize,
    pub eps_x: f64,
    pub eps_f: f64,
    pub eps_g: f64,
    pub penalty: PenaltyParams,
    /// Damping used for every primal step of a solve.
    pub damping: f64,
    pub zeta_min: f64,
    pub zeta_max: f64,
    /// Mean-iteration breakpoints of the damping schedule.
    pub iterations_min: f64,
    pub iterations_max: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            inner_iterations: 3,
            max_outer_iterations: 1000,
            eps_x: 1e-3,
            eps_f: 1e-3,
            eps_g: 1e-3,
            penalty: PenaltyParams::default(),
            damping: 0.0,
            zeta_min: 0.1,
            zeta_max: 1.0,
            iterations_min: 20.0,
            iterations_max: 500.0,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        self.penalty.validate()?;
        if self.inner_iterations == 0 || self.max_outer_iterations == 0 {
            return Err(Error::InvalidConfig("iteration counts must be at least 1".into()));
        }
        if !(self.zeta_min >= 0.0 && self.zeta_min <= self.zeta_max) {
            return Err(Error::InvalidConfig("need 0 <= zeta_min <= zeta_max".into()));
        }
        if !(self.iterations_min < self.iterations_max) {
            return Err(Error::InvalidConfig("need iterations_min < iterations_max".into()));
        }
        if self.damping < 0.0 {
            return Err(Error::InvalidConfig("damping must be non-negative".into()));
        }
        if !(self.eps_x > 0.0 && self.eps_f > 0.0 && self.eps_g > 0.0) {
            return Err(Error::InvalidConfig("tolerances must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverReport {
    pub outer_iterations: usize,
    pub inner_iterations: usize,
    pub final_dx_norm: f64,
    pub max_eq_violation: f64,
    pub max_ineq_violation: f64,
    pub converged: bool,
    /// Seconds.
    pub wall_time: f64,
    /// Damping the solve ran with (after any retry).
    pub zeta: f64,
    /// Smallest and largest penalty entry seen after any dual update.
    pub rho_range: Option<(f64, f64)>,
}

/// One damped Gauss-Newton step `x̂ ← x̂ ⊞ Δx`, `(H^L + ζI)Δx = −b^L`.
///
/// A non positive-definite system is retried once with `retry_zeta`; the
/// damping that succeeded is returned with the step.
pub fn primal_step(graph: &mut FactorGraph, zeta: f64, retry_zeta: f64) -> Result<(Perturbation, f64)> {
    let mut system = graph.build_system(zeta)?;
    let (dx, used) = match system.solve_damped() {
        Ok(dx) => (dx, zeta),
        Err(Error::NotPositiveDefinite { .. }) => {
            system.set_damping(retry_zeta);
            match system.solve_damped() {
                Ok(dx) => (dx, retry_zeta),
                Err(Error::NotPositiveDefinite { .. }) => {
                    return Err(Error::PrimalStepAborted { zeta: retry_zeta })
                }
                Err(e) => return Err(e),
            }
        }
        Err(e) => return Err(e),
    };
    let dx = Perturbation::new(dx, &graph.tangent_dims())?;
    graph.apply(&dx)?;
    Ok((dx, used))
}

/// Multiplier step on every constraint factor, then the penalty schedule.
/// Both use the constraint value at the current estimate and the penalties
/// from before this call.
pub fn dual_phase(graph: &mut FactorGraph) -> Result<()> {
    let eq_values = graph
        .equality_factors()
        .iter()
        .map(|f| graph.evaluate(f.residual()))
        .collect::<Result<Vec<_>>>()?;
    let ineq_values = graph
        .inequality_factors()
        .iter()
        .map(|f| graph.evaluate(f.residual()))
        .collect::<Result<Vec<_>>>()?;
    for (f, value) in graph.equality_factors_mut().iter_mut().zip(&eq_values) {
        f.dual_update(value);
    }
    for (f, value) in graph.inequality_factors_mut().iter_mut().zip(&ineq_values) {
        f.dual_update(value);
    }
    for (f, value) in graph.equality_factors_mut().iter_mut().zip(&eq_values) {
        f.update_penalty(value);
    }
    for (f, value) in graph.inequality_factors_mut().iter_mut().zip(&ineq_values) {
        f.update_penalty(value);
    }
    Ok(())
}

/// `‖Δx‖₂ < ε_x`, `‖f‖∞ < ε_f` and `‖max(g, 0)‖∞ < ε_g`.
pub fn check_termination(graph: &FactorGraph, dx_norm: f64, config: &SolverConfig) -> Result<bool> {
    Ok(dx_norm < config.eps_x
        && graph.max_equality_violation()? < config.eps_f
        && graph.max_inequality_violation()? < config.eps_g)
}

/// Damping from the mean outer-iteration count: `ζ_m` below `Ī_m`, `ζ_M`
/// above `Ī_M`, linear in between.
pub fn update_zeta(mean_iterations: f64, config: &SolverConfig) -> f64 {
    let (lo, hi) = (config.iterations_min, config.iterations_max);
    if mean_iterations <= lo {
        config.zeta_min
    } else if mean_iterations > hi {
        config.zeta_max
    } else {
        config.zeta_min + (config.zeta_max - config.zeta_min) / (hi - lo) * (mean_iterations - lo)
    }
}

/// Iteration history across receding-horizon epochs and the damping it
/// selects.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochState {
    history: Vec<usize>,
    mean: f64,
    zeta: f64,
}

impl EpochState {
    pub fn new(config: &SolverConfig) -> Self {
        Self {
            history: Vec::new(),
            mean: 0.0,
            zeta: config.zeta_min,
        }
    }

    pub fn history(&self) -> &[usize] {
        &self.history
    }

    pub fn mean_iterations(&self) -> f64 {
        self.mean
    }

    pub fn zeta(&self) -> f64 {
        self.zeta
    }

    pub fn record(&mut self, outer_iterations: usize, config: &SolverConfig) {
        self.history.push(outer_iterations);
        self.mean = self.history.iter().sum::<usize>() as f64 / self.history.len() as f64;
        self.zeta = update_zeta(self.mean, config);
    }

    pub fn reset(&mut self, config: &SolverConfig) {
        *self = Self::new(config);
    }
}

#[derive(Debug, Clone, Default)]
pub struct AlSolver {
    pub config: SolverConfig,
}

impl AlSolver {
    pub fn new(config: SolverConfig) -> Self {
        Self { config }
    }

    /// Optimises `graph` in place starting from its current variable values.
    pub fn solve(&self, graph: &mut FactorGraph) -> Result<SolverReport> {
        let cfg = &self.config;
        cfg.validate()?;
        graph.finalize()?;
        let start = Instant::now();

        for f in graph.equality_factors_mut() {
            if f.penalty().is_fresh() {
                f.penalty_mut().reset(cfg.penalty);
            }
        }
        for f in graph.inequality_factors_mut() {
            if f.penalty().is_fresh() {
                f.penalty_mut().reset(cfg.penalty);
            }
        }

        let mut zeta = cfg.damping;
        let mut outer = 0;
        let mut inner = 0;
        let mut dx_norm = f64::INFINITY;
        let mut converged = false;
        let mut rho_range: Option<(f64, f64)> = None;
        while outer < cfg.max_outer_iterations {
            outer += 1;
            for _ in 0..cfg.inner_iterations {
                let (dx, used) = primal_step(graph, zeta, cfg.zeta_max)?;
                zeta = used;
                dx_norm = dx.norm();
                inner += 1;
            }
            dual_phase(graph)?;
            if graph.has_constraints() {
                let (lo, hi) = penalty_extent(graph);
                rho_range = Some(match rho_range {
                    Some((a, b)) => (a.min(lo), b.max(hi)),
                    None => (lo, hi),
                });
            }
            if check_termination(graph, dx_norm, cfg)? {
                converged = true;
                break;
            }
        }

        Ok(SolverReport {
            outer_iterations: outer,
            inner_iterations: inner,
            final_dx_norm: dx_norm,
            max_eq_violation: graph.max_equality_violation()?,
            max_ineq_violation: graph.max_inequality_violation()?,
            converged,
            wall_time: start.elapsed().as_secs_f64(),
            zeta,
            rho_range,
        })
    }
}

fn penalty_extent(graph: &FactorGraph) -> (f64, f64) {
    let eq = graph.equality_factors().iter().map(|f| f.penalty().rho());
    let ineq = graph.inequality_factors().iter().map(|f| f.penalty().rho());
    eq.chain(ineq).flat_map(|r| r.iter().copied()).fold(
        (f64::INFINITY, f64::NEG_INFINITY),
        |(lo, hi), v| (lo.min(v), hi.max(v)),
    )
}
