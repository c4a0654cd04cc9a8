//! The residual interface shared by error and constraint factors.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::variable::{ManifoldVariable, VariableKey};

/// Step used by [`numeric_linearize`] when a residual does not provide
/// analytic Jacobians.
pub const DEFAULT_FD_STEP: f64 = 1e-6;

/// Residual value and one Jacobian block per touched variable, taken with
/// respect to the `⊞` perturbation at zero.
#[derive(Debug, Clone, PartialEq)]
pub struct Linearization {
    pub residual: DVector<f64>,
    pub jacobians: Vec<DMatrix<f64>>,
}

impl Linearization {
    /// Horizontal concatenation of the per-variable blocks, in key order of
    /// the factor.
    pub fn stacked_jacobian(&self) -> DMatrix<f64> {
        let rows = self.residual.len();
        let cols = self.jacobians.iter().map(|j| j.ncols()).sum();
        let mut out = DMatrix::zeros(rows, cols);
        let mut c = 0;
        for j in &self.jacobians {
            out.view_mut((0, c), (rows, j.ncols())).copy_from(j);
            c += j.ncols();
        }
        out
    }
}

/// A vector-valued function of a fixed subset of graph variables.
///
/// Error factors, equality constraints and inequality constraints all wrap a
/// `Residual`; only how the solver consumes the value differs. The default
/// `linearize` falls back to central differences over `⊞`.
pub trait Residual: Send + Sync {
    fn keys(&self) -> &[VariableKey];

    fn dim(&self) -> usize;

    fn evaluate(&self, vars: &[&ManifoldVariable]) -> DVector<f64>;

    fn linearize(&self, vars: &[&ManifoldVariable]) -> Linearization {
        numeric_linearize(self, vars, DEFAULT_FD_STEP)
    }
}

/// Central finite differences of `residual` over the `⊞` retraction.
pub fn numeric_linearize<R: Residual + ?Sized>(
    residual: &R,
    vars: &[&ManifoldVariable],
    step: f64,
) -> Linearization {
    let value = residual.evaluate(vars);
    let mut jacobians = Vec::with_capacity(vars.len());
    let mut perturbed: Vec<ManifoldVariable> = vars.iter().map(|v| (*v).clone()).collect();
    for slot in 0..vars.len() {
        let dim = vars[slot].tangent_dim();
        let mut jac = DMatrix::zeros(value.len(), dim);
        let mut delta = vec![0.0; dim];
        for c in 0..dim {
            delta[c] = step;
            perturbed[slot] = vars[slot].boxplus(&delta).expect("tangent dim");
            let plus = residual.evaluate(&perturbed.iter().collect::<Vec<_>>());
            delta[c] = -step;
            perturbed[slot] = vars[slot].boxplus(&delta).expect("tangent dim");
            let minus = residual.evaluate(&perturbed.iter().collect::<Vec<_>>());
            delta[c] = 0.0;
            jac.set_column(c, &((plus - minus) / (2.0 * step)));
        }
        perturbed[slot] = vars[slot].clone();
        jacobians.push(jac);
    }
    Linearization {
        residual: value,
        jacobians,
    }
}

/// `⟨Ω, e(·)⟩`: a residual weighted by its information matrix.
pub struct ErrorFactor {
    residual: Box<dyn Residual>,
    information: DMatrix<f64>,
}

impl ErrorFactor {
    pub fn new(residual: Box<dyn Residual>, information: DMatrix<f64>) -> Result<Self> {
        let d = residual.dim();
        if information.nrows() != d || information.ncols() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                actual: information.nrows(),
            });
        }
        Ok(Self {
            residual,
            information,
        })
    }

    /// Isotropic information `weight · I`.
    pub fn isotropic(residual: Box<dyn Residual>, weight: f64) -> Self {
        let d = residual.dim();
        Self {
            residual,
            information: DMatrix::identity(d, d) * weight,
        }
    }

    pub fn residual(&self) -> &dyn Residual {
        self.residual.as_ref()
    }

    pub fn information(&self) -> &DMatrix<f64> {
        &self.information
    }

    pub fn keys(&self) -> &[VariableKey] {
        self.residual.keys()
    }

    /// `eᵀ Ω e`.
    pub fn chi2(&self, vars: &[&ManifoldVariable]) -> f64 {
        let e = self.residual.evaluate(vars);
        e.dot(&(&self.information * &e))
    }
}

/// `value − target`, with optional angle wrapping on chosen components.
///
/// For SE2 variables the translation part of the Jacobian is `R(θ)` to match
/// the body-frame retraction.
pub struct PriorFactor {
    keys: [VariableKey; 1],
    target: DVector<f64>,
    wrapped: Vec<usize>,
}

impl PriorFactor {
    pub fn new(key: VariableKey, target: DVector<f64>) -> Self {
        Self {
            keys: [key],
            target,
            wrapped: Vec::new(),
        }
    }

    pub fn with_wrapped(mut self, components: &[usize]) -> Self {
        self.wrapped = components.to_vec();
        self
    }
}

impl Residual for PriorFactor {
    fn keys(&self) -> &[VariableKey] {
        &self.keys
    }

    fn dim(&self) -> usize {
        self.target.len()
    }

    fn evaluate(&self, vars: &[&ManifoldVariable]) -> DVector<f64> {
        let mut r = vars[0].value() - &self.target;
        for &i in &self.wrapped {
            r[i] = crate::wrap_angle(r[i]);
        }
        r
    }

    fn linearize(&self, vars: &[&ManifoldVariable]) -> Linearization {
        let n = self.target.len();
        let mut jac = DMatrix::identity(n, n);
        if vars[0].kind() == crate::VariableKind::Se2 {
            let (s, c) = vars[0].value()[2].sin_cos();
            jac[(0, 0)] = c;
            jac[(0, 1)] = -s;
            jac[(1, 0)] = s;
            jac[(1, 1)] = c;
        }
        Linearization {
            residual: self.evaluate(vars),
            jacobians: vec![jac],
        }
    }
}

/// `Σ_k A_k x_k − z` over vector-valued variables (Euclidean or Matrix3Flat).
pub struct LinearFactor {
    keys: Vec<VariableKey>,
    blocks: Vec<DMatrix<f64>>,
    target: DVector<f64>,
}

impl LinearFactor {
    pub fn new(terms: Vec<(VariableKey, DMatrix<f64>)>, target: DVector<f64>) -> Result<Self> {
        if terms.is_empty() {
            return Err(Error::EmptyFactor);
        }
        for (_, a) in &terms {
            if a.nrows() != target.len() {
                return Err(Error::DimensionMismatch {
                    expected: target.len(),
                    actual: a.nrows(),
                });
            }
        }
        let (keys, blocks) = terms.into_iter().unzip();
        Ok(Self {
            keys,
            blocks,
            target,
        })
    }
}

impl Residual for LinearFactor {
    fn keys(&self) -> &[VariableKey] {
        &self.keys
    }

    fn dim(&self) -> usize {
        self.target.len()
    }

    fn evaluate(&self, vars: &[&ManifoldVariable]) -> DVector<f64> {
        let mut r = -self.target.clone();
        for (a, v) in self.blocks.iter().zip(vars) {
            r += a * v.value();
        }
        r
    }

    fn linearize(&self, vars: &[&ManifoldVariable]) -> Linearization {
        Linearization {
            residual: self.evaluate(vars),
            jacobians: self.blocks.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn linear_factor_residual_and_identity_jacobian() {
        let f = LinearFactor::new(
            vec![(VariableKey(0), DMatrix::identity(2, 2))],
            DVector::from_vec(vec![1.0, 2.0]),
        )
        .unwrap();
        let x = ManifoldVariable::from_slice(&[4.0, -1.0]);
        let lin = f.linearize(&[&x]);
        assert_eq!(lin.residual.as_slice(), &[3.0, -3.0]);
        assert_eq!(lin.jacobians[0], DMatrix::identity(2, 2));
    }

    #[test]
    fn numeric_matches_analytic_prior_on_se2() {
        let f = PriorFactor::new(VariableKey(0), DVector::from_vec(vec![0.5, -0.2, 3.0])).with_wrapped(&[2]);
        let x = ManifoldVariable::se2(1.0, 2.0, 0.7);
        let a = f.linearize(&[&x]);
        let n = numeric_linearize(&f, &[&x], 1e-6);
        assert_relative_eq!(a.jacobians[0], n.jacobians[0], epsilon = 1e-8);
    }

    #[test]
    fn information_dimension_is_checked() {
        let f = PriorFactor::new(VariableKey(0), DVector::zeros(3));
        assert!(ErrorFactor::new(Box::new(f), DMatrix::identity(2, 2)).is_err());
    }

    #[test]
    fn stacked_jacobian_concatenates_blocks() {
        let lin = Linearization {
            residual: DVector::zeros(2),
            jacobians: vec![DMatrix::from_element(2, 1, 1.0), DMatrix::from_element(2, 2, 2.0)],
        };
        let s = lin.stacked_jacobian();
        assert_eq!(s.shape(), (2, 3));
        assert_eq!(s[(1, 0)], 1.0);
        assert_eq!(s[(0, 2)], 2.0);
    }
}
