//! Constrained nonlinear least squares on factor graphs.
//!
//! Error factors `⟨Ω, e(·)⟩` define the objective `Σ‖e_k‖²_Ω`. Equality
//! (`f = 0`) and inequality (`g ≤ 0`) constraints enter as factors carrying
//! their own multipliers and diagonal penalties, so each contributes an
//! `(H, b)` pair to the same normal equations as a regular factor. The
//! [`AlSolver`] alternates damped Gauss-Newton steps on the augmented
//! Lagrangian with projected multiplier updates and an adaptive penalty
//! schedule.
//!
//! ```
//! use alfg::{AlSolver, FactorGraph, LinearFactor, ManifoldVariable};
//! use nalgebra::{DMatrix, DVector};
//!
//! // min (x − 3)²  s.t.  x − 1 = 0
//! let mut graph = FactorGraph::new();
//! let x = graph.add_variable(ManifoldVariable::from_slice(&[0.0]));
//! let one = DMatrix::identity(1, 1);
//! graph
//!     .add_error(LinearFactor::new(vec![(x, one.clone())], DVector::from_element(1, 3.0)).unwrap(), one.clone())
//!     .unwrap();
//! graph
//!     .add_equality(LinearFactor::new(vec![(x, one)], DVector::from_element(1, 1.0)).unwrap())
//!     .unwrap();
//! let report = AlSolver::default().solve(&mut graph).unwrap();
//! assert!(report.converged);
//! assert!((graph.variable(x).unwrap().value()[0] - 1.0).abs() < 1e-3);
//! ```

pub mod constraint;
mod error;
pub mod factor;
pub mod graph;
pub mod linear;
pub mod solver;
mod sparse;
pub mod variable;

pub use constraint::{
    g_plus, slack_qstar, EqualityConstraintFactor, InequalityConstraintFactor, InequalityFormulation,
    PenaltyParams, PenaltyState,
};
pub use error::{Error, Result};
pub use factor::{numeric_linearize, ErrorFactor, LinearFactor, Linearization, PriorFactor, Residual};
pub use graph::{FactorGraph, Perturbation};
pub use linear::{Contribution, SparseBlockSystem};
pub use solver::{
    check_termination, dual_phase, primal_step, update_zeta, AlSolver, EpochState, SolverConfig, SolverReport,
};
pub use variable::{wrap_angle, ManifoldVariable, VariableKey, VariableKind};
