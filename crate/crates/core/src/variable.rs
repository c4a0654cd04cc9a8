//! Manifold-valued state blocks and the `⊞` retraction.

use std::f64::consts::PI;
use std::fmt;

use nalgebra::{DVector, Matrix3, Vector2};

use crate::error::{Error, Result};

/// Index of a variable inside a [`FactorGraph`](crate::FactorGraph).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct VariableKey(pub usize);

impl VariableKey {
    pub fn index(self) -> usize {
        self.0
    }
}

impl fmt::Display for VariableKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "x{}", self.0)
    }
}

/// Wraps an angle to `(-π, π]`. Angles already in range are returned untouched.
pub fn wrap_angle(angle: f64) -> f64 {
    if angle > -PI && angle <= PI {
        return angle;
    }
    PI - (PI - angle).rem_euclid(2.0 * PI)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VariableKind {
    /// Planar pose stored as `(x, y, θ)`.
    Se2,
    Euclidean(usize),
    /// A 3×3 matrix stored row-major as 9 reals, updated without projection.
    Matrix3Flat,
}

impl VariableKind {
    pub fn value_dim(self) -> usize {
        match self {
            VariableKind::Se2 => 3,
            VariableKind::Euclidean(n) => n,
            VariableKind::Matrix3Flat => 9,
        }
    }

    pub fn tangent_dim(self) -> usize {
        self.value_dim()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifoldVariable {
    kind: VariableKind,
    value: DVector<f64>,
}

impl ManifoldVariable {
    pub fn new(kind: VariableKind, value: DVector<f64>) -> Result<Self> {
        if value.len() != kind.value_dim() {
            return Err(Error::DimensionMismatch {
                expected: kind.value_dim(),
                actual: value.len(),
            });
        }
        let mut var = Self { kind, value };
        if kind == VariableKind::Se2 {
            var.value[2] = wrap_angle(var.value[2]);
        }
        Ok(var)
    }

    pub fn se2(x: f64, y: f64, theta: f64) -> Self {
        Self {
            kind: VariableKind::Se2,
            value: DVector::from_vec(vec![x, y, wrap_angle(theta)]),
        }
    }

    pub fn euclidean(value: DVector<f64>) -> Self {
        Self {
            kind: VariableKind::Euclidean(value.len()),
            value,
        }
    }

    pub fn from_slice(value: &[f64]) -> Self {
        Self::euclidean(DVector::from_column_slice(value))
    }

    pub fn matrix3(m: &Matrix3<f64>) -> Self {
        Self {
            kind: VariableKind::Matrix3Flat,
            value: DVector::from_iterator(9, m.transpose().iter().copied()),
        }
    }

    pub fn kind(&self) -> VariableKind {
        self.kind
    }

    pub fn tangent_dim(&self) -> usize {
        self.kind.tangent_dim()
    }

    pub fn value(&self) -> &DVector<f64> {
        &self.value
    }

    /// Overwrites the stored value, keeping the kind.
    pub fn set_value(&mut self, value: DVector<f64>) -> Result<()> {
        *self = Self::new(self.kind, value)?;
        Ok(())
    }

    /// Row-major view as a 3×3 matrix; `None` unless the kind is `Matrix3Flat`.
    pub fn as_matrix3(&self) -> Option<Matrix3<f64>> {
        (self.kind == VariableKind::Matrix3Flat).then(|| Matrix3::from_row_slice(self.value.as_slice()))
    }

    pub fn translation(&self) -> Vector2<f64> {
        Vector2::new(self.value[0], self.value[1])
    }

    pub fn boxplus(&self, delta: &[f64]) -> Result<Self> {
        let mut out = self.clone();
        out.boxplus_mut(delta)?;
        Ok(out)
    }

    /// SE2 perturbations act in the body frame, `t' = t + R(θ)·δt`,
    /// `θ' = wrap(θ + δθ)`. Every other kind is plain vector addition.
    pub fn boxplus_mut(&mut self, delta: &[f64]) -> Result<()> {
        if delta.len() != self.tangent_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.tangent_dim(),
                actual: delta.len(),
            });
        }
        match self.kind {
            VariableKind::Se2 => {
                let (s, c) = self.value[2].sin_cos();
                self.value[0] += c * delta[0] - s * delta[1];
                self.value[1] += s * delta[0] + c * delta[1];
                self.value[2] = wrap_angle(self.value[2] + delta[2]);
            }
            VariableKind::Euclidean(_) | VariableKind::Matrix3Flat => {
                for (v, d) in self.value.iter_mut().zip(delta) {
                    *v += d;
                }
            }
        }
        Ok(())
    }
}
