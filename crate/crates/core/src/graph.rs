//! Variables plus error, equality and inequality factors.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector};

use crate::constraint::{
    EqualityConstraintFactor, InequalityConstraintFactor, InequalityFormulation, PenaltyParams,
};
use crate::error::{Error, Result};
use crate::factor::{ErrorFactor, Linearization, Residual};
use crate::linear::{Contribution, SparseBlockSystem};
use crate::variable::{ManifoldVariable, VariableKey};

/// A tangent-space step for every variable, concatenated in key order.
#[derive(Debug, Clone, PartialEq)]
pub struct Perturbation {
    delta: DVector<f64>,
    offsets: Vec<usize>,
}

impl Perturbation {
    pub fn new(delta: DVector<f64>, dims: &[usize]) -> Result<Self> {
        let mut offsets = vec![0];
        for d in dims {
            offsets.push(offsets.last().unwrap() + d);
        }
        let total = *offsets.last().unwrap();
        if delta.len() != total {
            return Err(Error::DimensionMismatch {
                expected: total,
                actual: delta.len(),
            });
        }
        Ok(Self { delta, offsets })
    }

    pub fn segment(&self, key: VariableKey) -> &[f64] {
        &self.delta.as_slice()[self.offsets[key.0]..self.offsets[key.0 + 1]]
    }

    pub fn as_vector(&self) -> &DVector<f64> {
        &self.delta
    }

    pub fn norm(&self) -> f64 {
        self.delta.norm()
    }
}

#[derive(Default)]
pub struct FactorGraph {
    variables: Vec<ManifoldVariable>,
    error_factors: Vec<ErrorFactor>,
    equality: Vec<EqualityConstraintFactor>,
    inequality: Vec<InequalityConstraintFactor>,
    penalty: PenaltyParams,
}

impl FactorGraph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Penalty bounds given to constraint factors added from now on.
    pub fn with_penalty_params(mut self, params: PenaltyParams) -> Self {
        self.penalty = params;
        self
    }

    pub fn add_variable(&mut self, var: ManifoldVariable) -> VariableKey {
        self.variables.push(var);
        VariableKey(self.variables.len() - 1)
    }

    pub fn num_variables(&self) -> usize {
        self.variables.len()
    }

    pub fn variable(&self, key: VariableKey) -> Result<&ManifoldVariable> {
        self.variables.get(key.0).ok_or(Error::UnknownVariable(key))
    }

    pub fn variables(&self) -> &[ManifoldVariable] {
        &self.variables
    }

    /// Replaces the estimate of `key`; the kind must not change.
    pub fn set_variable(&mut self, key: VariableKey, var: ManifoldVariable) -> Result<()> {
        let slot = self.variables.get_mut(key.0).ok_or(Error::UnknownVariable(key))?;
        if slot.kind() != var.kind() {
            return Err(Error::Contract(format!("variable {key} changed kind")));
        }
        *slot = var;
        Ok(())
    }

    pub fn tangent_dims(&self) -> Vec<usize> {
        self.variables.iter().map(|v| v.tangent_dim()).collect()
    }

    pub fn tangent_dim(&self) -> usize {
        self.variables.iter().map(|v| v.tangent_dim()).sum()
    }

    fn check_keys(&self, keys: &[VariableKey]) -> Result<()> {
        if keys.is_empty() {
            return Err(Error::EmptyFactor);
        }
        let mut seen = BTreeSet::new();
        for k in keys {
            if k.0 >= self.variables.len() {
                return Err(Error::UnknownVariable(*k));
            }
            if !seen.insert(*k) {
                return Err(Error::DuplicateVariable(*k));
            }
        }
        Ok(())
    }

    pub fn add_error_factor(&mut self, factor: ErrorFactor) -> Result<usize> {
        self.check_keys(factor.keys())?;
        self.error_factors.push(factor);
        Ok(self.error_factors.len() - 1)
    }

    pub fn add_error(&mut self, residual: impl Residual + 'static, information: DMatrix<f64>) -> Result<usize> {
        self.add_error_factor(ErrorFactor::new(Box::new(residual), information)?)
    }

    pub fn add_equality(&mut self, residual: impl Residual + 'static) -> Result<usize> {
        self.check_keys(residual.keys())?;
        self.equality
            .push(EqualityConstraintFactor::new(Box::new(residual), self.penalty));
        Ok(self.equality.len() - 1)
    }

    pub fn add_inequality(
        &mut self,
        residual: impl Residual + 'static,
        formulation: InequalityFormulation,
    ) -> Result<usize> {
        self.check_keys(residual.keys())?;
        self.inequality.push(InequalityConstraintFactor::new(
            Box::new(residual),
            self.penalty,
            formulation,
        ));
        Ok(self.inequality.len() - 1)
    }

    pub fn error_factors(&self) -> &[ErrorFactor] {
        &self.error_factors
    }

    pub fn equality_factors(&self) -> &[EqualityConstraintFactor] {
        &self.equality
    }

    pub fn equality_factors_mut(&mut self) -> &mut [EqualityConstraintFactor] {
        &mut self.equality
    }

    pub fn inequality_factors(&self) -> &[InequalityConstraintFactor] {
        &self.inequality
    }

    pub fn inequality_factors_mut(&mut self) -> &mut [InequalityConstraintFactor] {
        &mut self.inequality
    }

    pub fn has_constraints(&self) -> bool {
        !self.equality.is_empty() || !self.inequality.is_empty()
    }

    /// Re-checks that every factor touches only existing variables.
    pub fn finalize(&self) -> Result<()> {
        for k in self.error_factors.iter().map(|f| f.keys()) {
            self.check_keys(k)?;
        }
        for k in self.equality.iter().map(|f| f.keys()) {
            self.check_keys(k)?;
        }
        for k in self.inequality.iter().map(|f| f.keys()) {
            self.check_keys(k)?;
        }
        Ok(())
    }

    pub fn gather(&self, keys: &[VariableKey]) -> Result<Vec<&ManifoldVariable>> {
        keys.iter().map(|k| self.variable(*k)).collect()
    }

    pub fn evaluate(&self, residual: &dyn Residual) -> Result<DVector<f64>> {
        Ok(residual.evaluate(&self.gather(residual.keys())?))
    }

    pub fn linearize(&self, residual: &dyn Residual) -> Result<Linearization> {
        Ok(residual.linearize(&self.gather(residual.keys())?))
    }

    pub fn error_contribution(&self, idx: usize) -> Result<Contribution> {
        let f = &self.error_factors[idx];
        let vars = self.gather(f.keys())?;
        let lin = f.residual().linearize(&vars);
        let jac = lin.stacked_jacobian();
        let wj = f.information() * &jac;
        Ok(Contribution {
            keys: f.keys().to_vec(),
            dims: vars.iter().map(|v| v.tangent_dim()).collect(),
            hessian: jac.transpose() * wj,
            gradient: jac.transpose() * (f.information() * &lin.residual),
        })
    }

    pub fn equality_contribution(&self, idx: usize) -> Result<Contribution> {
        let f = &self.equality[idx];
        Ok(f.contribution(&self.gather(f.keys())?))
    }

    pub fn inequality_contribution(&self, idx: usize) -> Result<Contribution> {
        let f = &self.inequality[idx];
        Ok(f.contribution(&self.gather(f.keys())?))
    }

    /// Accumulates every error and constraint factor into `H^L`, `b^L`.
    pub fn build_system(&self, zeta: f64) -> Result<SparseBlockSystem> {
        let mut system = SparseBlockSystem::new(&self.tangent_dims());
        system.set_damping(zeta);
        for i in 0..self.error_factors.len() {
            system.accumulate(&self.error_contribution(i)?)?;
        }
        for i in 0..self.equality.len() {
            system.accumulate(&self.equality_contribution(i)?)?;
        }
        for i in 0..self.inequality.len() {
            system.accumulate(&self.inequality_contribution(i)?)?;
        }
        Ok(system)
    }

    pub fn apply(&mut self, dx: &Perturbation) -> Result<()> {
        for (i, var) in self.variables.iter_mut().enumerate() {
            var.boxplus_mut(dx.segment(VariableKey(i)))?;
        }
        Ok(())
    }

    /// `Σ ‖e_k‖²_Ω`.
    pub fn objective(&self) -> Result<f64> {
        self.error_factors
            .iter()
            .map(|f| Ok(f.chi2(&self.gather(f.keys())?)))
            .sum()
    }

    /// The augmented Lagrangian at the current estimate with the current
    /// multipliers and penalties.
    pub fn augmented_lagrangian(&self) -> Result<f64> {
        let mut total = self.objective()?;
        for f in &self.equality {
            total += f.lagrangian_term(&self.evaluate(f.residual())?);
        }
        for f in &self.inequality {
            total += f.lagrangian_term(&self.evaluate(f.residual())?);
        }
        Ok(total)
    }

    /// `max_k ‖f_k‖∞` over equality constraints.
    pub fn max_equality_violation(&self) -> Result<f64> {
        let mut worst: f64 = 0.0;
        for f in &self.equality {
            worst = worst.max(self.evaluate(f.residual())?.amax());
        }
        Ok(worst)
    }

    /// `max_k ‖max(g_k, 0)‖∞` over inequality constraints.
    pub fn max_inequality_violation(&self) -> Result<f64> {
        let mut worst: f64 = 0.0;
        for f in &self.inequality {
            let g = self.evaluate(f.residual())?;
            worst = worst.max(g.iter().fold(0.0, |m, v| m.max(*v)));
        }
        Ok(worst)
    }
}
