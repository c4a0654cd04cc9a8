//! Augmented-Lagrangian constraint factors.
//!
//! An equality factor carries `⟨λ, P, f(·)⟩`, an inequality factor
//! `⟨μ, P, g(·)⟩` with `P` diagonal. Inequalities come in two flavours:
//!
//! * [`InequalityFormulation::SlackActive`]: the slack `q ≥ 0` of `g + q = 0`
//!   is minimised in closed form, leaving the active-set residual
//!   `g⁺ = max(g, −μ/2ρ)`.
//! * [`InequalityFormulation::MaxPenalty`]: multiplier term on raw `g`,
//!   quadratic penalty on `max(0, g)`.
//!
//! Both use the same projected dual step `μ ← max(0, μ + 2Pg)`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::factor::{Linearization, Residual};
use crate::linear::Contribution;
use crate::variable::{ManifoldVariable, VariableKey};

/// Below this magnitude a violation counts as zero in the penalty schedule.
pub const VIOLATION_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PenaltyParams {
    pub rho_min: f64,
    pub rho_max: f64,
    pub rho_bar0: f64,
}

impl Default for PenaltyParams {
    fn default() -> Self {
        Self {
            rho_min: 0.5,
            rho_max: 2.0,
            rho_bar0: 1.0,
        }
    }
}

impl PenaltyParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho_min > 0.0 && self.rho_min <= self.rho_bar0 && self.rho_bar0 <= self.rho_max) {
            return Err(Error::InvalidConfig(format!(
                "penalty bounds must satisfy 0 < rho_min <= rho_bar0 <= rho_max, got {:?}",
                self
            )));
        }
        Ok(())
    }
}

/// Per-component penalty `ρ`, its baseline `ρ̄` and the violation recorded at
/// the previous dual iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct PenaltyState {
    params: PenaltyParams,
    rho: DVector<f64>,
    rho_bar: DVector<f64>,
    prev_violation: Option<DVector<f64>>,
}

impl PenaltyState {
    pub fn new(dim: usize, params: PenaltyParams) -> Self {
        Self {
            params,
            rho: DVector::from_element(dim, params.rho_bar0),
            rho_bar: DVector::from_element(dim, params.rho_bar0),
            prev_violation: None,
        }
    }

    /// Resets to `ρ = ρ̄ = ρ̄₀` under new bounds, forgetting history.
    pub fn reset(&mut self, params: PenaltyParams) {
        *self = Self::new(self.rho.len(), params);
    }

    pub fn params(&self) -> &PenaltyParams {
        &self.params
    }

    pub fn rho(&self) -> &DVector<f64> {
        &self.rho
    }

    pub fn rho_bar(&self) -> &DVector<f64> {
        &self.rho_bar
    }

    pub fn prev_violation(&self) -> Option<&DVector<f64>> {
        self.prev_violation.as_ref()
    }

    /// Overrides `ρ`; entries must lie inside the penalty box.
    pub fn set_rho(&mut self, rho: DVector<f64>) -> Result<()> {
        check_dim(self.rho.len(), rho.len())?;
        let PenaltyParams { rho_min, rho_max, .. } = self.params;
        if rho.iter().any(|r| !(*r >= rho_min && *r <= rho_max)) {
            return Err(Error::Contract(format!("penalty outside [{rho_min}, {rho_max}]")));
        }
        self.rho = rho;
        Ok(())
    }

    pub fn is_fresh(&self) -> bool {
        self.prev_violation.is_none()
    }

    pub fn matrix(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&self.rho)
    }

    /// Adapts every diagonal entry from the relative change in its own
    /// violation magnitude. The first call only records the violation.
    pub fn update(&mut self, violation: &DVector<f64>) {
        let current = violation.abs();
        if let Some(prev) = &self.prev_violation {
            let PenaltyParams {
                rho_min, rho_max, ..
            } = self.params;
            for i in 0..current.len() {
                let (before, now) = (prev[i], current[i]);
                let decrease = if before < VIOLATION_EPS {
                    0.0
                } else {
                    ((before - now) / before).max(0.0)
                };
                let increase = if now < VIOLATION_EPS {
                    0.0
                } else {
                    ((now - before) / now).max(0.0)
                };
                let bar = self.rho_bar[i];
                let rho = bar + decrease * (rho_max - bar) + increase * (rho_min - bar);
                self.rho[i] = rho.clamp(rho_min, rho_max);
                self.rho_bar[i] = (bar + decrease * (rho_max - bar)).clamp(rho_min, rho_max);
            }
        }
        self.prev_violation = Some(current);
    }
}

/// Closed-form slack minimiser `q* = max(0, −(μ/2ρ + g))`.
pub fn slack_qstar(mu: f64, rho: f64, g: f64) -> Result<f64> {
    if !(rho > 0.0) {
        return Err(Error::Contract(format!("penalty must be positive, got {rho}")));
    }
    Ok((-(mu / (2.0 * rho) + g)).max(0.0))
}

/// Componentwise active-set residual `g⁺ = max(g, −μ/2ρ)`.
pub fn g_plus(mu: &DVector<f64>, rho: &DVector<f64>, g: &DVector<f64>) -> DVector<f64> {
    DVector::from_fn(g.len(), |i, _| g[i].max(-mu[i] / (2.0 * rho[i])))
}

fn tangent_dims(vars: &[&ManifoldVariable]) -> Vec<usize> {
    vars.iter().map(|v| v.tangent_dim()).collect()
}

fn check_dim(expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::DimensionMismatch { expected, actual });
    }
    Ok(())
}

pub struct EqualityConstraintFactor {
    residual: Box<dyn Residual>,
    lambda: DVector<f64>,
    penalty: PenaltyState,
}

impl EqualityConstraintFactor {
    pub fn new(residual: Box<dyn Residual>, params: PenaltyParams) -> Self {
        let d = residual.dim();
        Self {
            residual,
            lambda: DVector::zeros(d),
            penalty: PenaltyState::new(d, params),
        }
    }

    pub fn keys(&self) -> &[VariableKey] {
        self.residual.keys()
    }

    pub fn dim(&self) -> usize {
        self.residual.dim()
    }

    pub fn residual(&self) -> &dyn Residual {
        self.residual.as_ref()
    }

    pub fn lambda(&self) -> &DVector<f64> {
        &self.lambda
    }

    pub fn set_lambda(&mut self, lambda: DVector<f64>) -> Result<()> {
        check_dim(self.dim(), lambda.len())?;
        self.lambda = lambda;
        Ok(())
    }

    pub fn penalty(&self) -> &PenaltyState {
        &self.penalty
    }

    pub fn penalty_mut(&mut self) -> &mut PenaltyState {
        &mut self.penalty
    }

    /// `H^f = Fᵀ P F`, `b^f = Fᵀ P f̂ + ½ Fᵀ λ`.
    pub fn contribution_from(&self, lin: &Linearization, dims: Vec<usize>) -> Contribution {
        let jac = lin.stacked_jacobian();
        let pf = lin.residual.component_mul(self.penalty.rho());
        let weighted = scale_rows(&jac, self.penalty.rho());
        Contribution {
            keys: self.keys().to_vec(),
            dims,
            hessian: jac.transpose() * weighted,
            gradient: jac.transpose() * (pf + &self.lambda * 0.5),
        }
    }

    pub fn contribution(&self, vars: &[&ManifoldVariable]) -> Contribution {
        self.contribution_from(&self.residual.linearize(vars), tangent_dims(vars))
    }

    /// `λ ← λ + 2 P f`.
    pub fn dual_update(&mut self, f: &DVector<f64>) {
        self.lambda += f.component_mul(self.penalty.rho()) * 2.0;
    }

    pub fn update_penalty(&mut self, f: &DVector<f64>) {
        self.penalty.update(f);
    }

    /// `λᵀ f + ‖f‖²_P`.
    pub fn lagrangian_term(&self, f: &DVector<f64>) -> f64 {
        self.lambda.dot(f) + f.component_mul(f).dot(self.penalty.rho())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum InequalityFormulation {
    #[default]
    SlackActive,
    MaxPenalty,
}

pub struct InequalityConstraintFactor {
    residual: Box<dyn Residual>,
    mu: DVector<f64>,
    penalty: PenaltyState,
    formulation: InequalityFormulation,
}

impl InequalityConstraintFactor {
    pub fn new(
        residual: Box<dyn Residual>,
        params: PenaltyParams,
        formulation: InequalityFormulation,
    ) -> Self {
        let d = residual.dim();
        Self {
            residual,
            mu: DVector::zeros(d),
            penalty: PenaltyState::new(d, params),
            formulation,
        }
    }

    pub fn keys(&self) -> &[VariableKey] {
        self.residual.keys()
    }

    pub fn dim(&self) -> usize {
        self.residual.dim()
    }

    pub fn residual(&self) -> &dyn Residual {
        self.residual.as_ref()
    }

    pub fn formulation(&self) -> InequalityFormulation {
        self.formulation
    }

    pub fn mu(&self) -> &DVector<f64> {
        &self.mu
    }

    /// Negative entries are rejected: multipliers live in the dual cone.
    pub fn set_mu(&mut self, mu: DVector<f64>) -> Result<()> {
        check_dim(self.dim(), mu.len())?;
        if mu.iter().any(|m| *m < 0.0) {
            return Err(Error::Contract("inequality multipliers must be non-negative".into()));
        }
        self.mu = mu;
        Ok(())
    }

    pub fn penalty(&self) -> &PenaltyState {
        &self.penalty
    }

    pub fn penalty_mut(&mut self) -> &mut PenaltyState {
        &mut self.penalty
    }

    /// Rows of the constraint Jacobian that are active in the penalty term.
    /// At the exact breakpoint the row counts as active.
    fn active(&self, g: &DVector<f64>) -> Vec<bool> {
        let rho = self.penalty.rho();
        (0..g.len())
            .map(|i| match self.formulation {
                InequalityFormulation::SlackActive => g[i] >= -self.mu[i] / (2.0 * rho[i]),
                InequalityFormulation::MaxPenalty => g[i] >= 0.0,
            })
            .collect()
    }

    /// The residual entering the penalty term: `g⁺` or `max(0, g)`.
    pub fn penalty_residual(&self, g: &DVector<f64>) -> DVector<f64> {
        match self.formulation {
            InequalityFormulation::SlackActive => g_plus(&self.mu, self.penalty.rho(), g),
            InequalityFormulation::MaxPenalty => g.map(|v| v.max(0.0)),
        }
    }

    /// SlackActive: `b = G⁺ᵀ P ĝ⁺ + ½ G⁺ᵀ μ`; MaxPenalty:
    /// `b = G⁺ᵀ P ĝ⁺ + ½ Gᵀ μ`. Both: `H = G⁺ᵀ P G⁺`.
    pub fn contribution_from(&self, lin: &Linearization, dims: Vec<usize>) -> Contribution {
        let g = &lin.residual;
        let jac = lin.stacked_jacobian();
        let mut jac_plus = jac.clone();
        for (i, is_active) in self.active(g).into_iter().enumerate() {
            if !is_active {
                jac_plus.row_mut(i).fill(0.0);
            }
        }
        let rho = self.penalty.rho();
        let gp = self.penalty_residual(g);
        let mult_jac = match self.formulation {
            InequalityFormulation::SlackActive => &jac_plus,
            InequalityFormulation::MaxPenalty => &jac,
        };
        let gradient = jac_plus.transpose() * gp.component_mul(rho) + mult_jac.transpose() * (&self.mu * 0.5);
        let hessian = jac_plus.transpose() * scale_rows(&jac_plus, rho);
        Contribution {
            keys: self.keys().to_vec(),
            dims,
            hessian,
            gradient,
        }
    }

    pub fn contribution(&self, vars: &[&ManifoldVariable]) -> Contribution {
        self.contribution_from(&self.residual.linearize(vars), tangent_dims(vars))
    }

    /// `μ ← max(0, μ + 2 P g)` on the raw constraint value.
    pub fn dual_update(&mut self, g: &DVector<f64>) {
        let step = g.component_mul(self.penalty.rho()) * 2.0;
        self.mu = (&self.mu + step).map(|m| m.max(0.0));
    }

    /// Violation magnitude `max(g, 0)` drives the penalty schedule.
    pub fn update_penalty(&mut self, g: &DVector<f64>) {
        self.penalty.update(&g.map(|v| v.max(0.0)));
    }

    pub fn lagrangian_term(&self, g: &DVector<f64>) -> f64 {
        let gp = self.penalty_residual(g);
        let mult = match self.formulation {
            InequalityFormulation::SlackActive => self.mu.dot(&gp),
            InequalityFormulation::MaxPenalty => self.mu.dot(g),
        };
        mult + gp.component_mul(&gp).dot(self.penalty.rho())
    }
}

fn scale_rows(m: &DMatrix<f64>, w: &DVector<f64>) -> DMatrix<f64> {
    let mut out = m.clone();
    for (i, wi) in w.iter().enumerate() {
        out.row_mut(i).scale_mut(*wi);
    }
    out
}
