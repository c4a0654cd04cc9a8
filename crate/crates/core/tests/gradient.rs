//! `2 b^L` against central differences of the augmented Lagrangian, and
//! analytic Jacobians against central differences of the residual.

use alfg::{
    numeric_linearize, FactorGraph, InequalityFormulation, Linearization, ManifoldVariable, Perturbation,
    PriorFactor, Residual, VariableKey,
};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `(b₀² − 1, b₀ b₁)`.
struct Bend([VariableKey; 1]);

impl Residual for Bend {
    fn keys(&self) -> &[VariableKey] {
        &self.0
    }
    fn dim(&self) -> usize {
        2
    }
    fn evaluate(&self, vars: &[&ManifoldVariable]) -> DVector<f64> {
        let b = vars[0].value();
        DVector::from_vec(vec![b[0] * b[0] - 1.0, b[0] * b[1]])
    }
    fn linearize(&self, vars: &[&ManifoldVariable]) -> Linearization {
        let b = vars[0].value();
        Linearization {
            residual: self.evaluate(vars),
            jacobians: vec![DMatrix::from_row_slice(2, 2, &[2.0 * b[0], 0.0, b[1], b[0]])],
        }
    }
}

/// Pose translation minus a point: `t_a − b`.
struct Attach([VariableKey; 2]);

impl Residual for Attach {
    fn keys(&self) -> &[VariableKey] {
        &self.0
    }
    fn dim(&self) -> usize {
        2
    }
    fn evaluate(&self, vars: &[&ManifoldVariable]) -> DVector<f64> {
        let (a, b) = (vars[0].value(), vars[1].value());
        DVector::from_vec(vec![a[0] - b[0], a[1] - b[1]])
    }
    fn linearize(&self, vars: &[&ManifoldVariable]) -> Linearization {
        let th = vars[0].value()[2];
        let (s, c) = th.sin_cos();
        Linearization {
            residual: self.evaluate(vars),
            jacobians: vec![
                DMatrix::from_row_slice(2, 3, &[c, -s, 0.0, s, c, 0.0]),
                -DMatrix::identity(2, 2),
            ],
        }
    }
}

/// `(‖b‖² − 4, sin θ_a − 0.5, x_a − 3)`.
struct Limits([VariableKey; 2]);

impl Residual for Limits {
    fn keys(&self) -> &[VariableKey] {
        &self.0
    }
    fn dim(&self) -> usize {
        3
    }
    fn evaluate(&self, vars: &[&ManifoldVariable]) -> DVector<f64> {
        let (a, b) = (vars[0].value(), vars[1].value());
        DVector::from_vec(vec![b.norm_squared() - 4.0, a[2].sin() - 0.5, a[0] - 3.0])
    }
    fn linearize(&self, vars: &[&ManifoldVariable]) -> Linearization {
        let (a, b) = (vars[0].value(), vars[1].value());
        let (s, c) = a[2].sin_cos();
        Linearization {
            residual: self.evaluate(vars),
            jacobians: vec![
                DMatrix::from_row_slice(3, 3, &[0.0, 0.0, 0.0, 0.0, 0.0, c, c, -s, 0.0]),
                DMatrix::from_row_slice(3, 2, &[2.0 * b[0], 2.0 * b[1], 0.0, 0.0, 0.0, 0.0]),
            ],
        }
    }
}

fn toy_graph(rng: &mut ChaCha8Rng, formulation: InequalityFormulation) -> FactorGraph {
    let mut g = FactorGraph::new();
    let a = g.add_variable(ManifoldVariable::se2(
        rng.random_range(-4.0..4.0),
        rng.random_range(-4.0..4.0),
        rng.random_range(-3.0..3.0),
    ));
    let b = g.add_variable(ManifoldVariable::from_slice(&[
        rng.random_range(-3.0..3.0),
        rng.random_range(-3.0..3.0),
    ]));
    g.add_error(
        PriorFactor::new(a, DVector::from_vec(vec![1.0, -0.5, 0.3])).with_wrapped(&[2]),
        DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 1.0, 0.5])),
    )
    .unwrap();
    g.add_error(Bend([b]), DMatrix::identity(2, 2) * 0.7).unwrap();
    g.add_equality(Attach([a, b])).unwrap();
    g.add_inequality(Limits([a, b]), formulation).unwrap();

    let lambda = DVector::from_fn(2, |_, _| rng.random_range(-2.0..2.0));
    let mu = DVector::from_fn(3, |_, _| rng.random_range(0.0..2.0));
    let rho_eq = DVector::from_fn(2, |_, _| rng.random_range(0.5..2.0));
    let rho_in = DVector::from_fn(3, |_, _| rng.random_range(0.5..2.0));
    let eq = &mut g.equality_factors_mut()[0];
    eq.set_lambda(lambda).unwrap();
    eq.penalty_mut().set_rho(rho_eq).unwrap();
    let ineq = &mut g.inequality_factors_mut()[0];
    ineq.set_mu(mu).unwrap();
    ineq.penalty_mut().set_rho(rho_in).unwrap();
    g
}

/// Distance of every inequality component from its kink.
fn breakpoint_gap(g: &FactorGraph, formulation: InequalityFormulation) -> f64 {
    let f = &g.inequality_factors()[0];
    let value = g.evaluate(f.residual()).unwrap();
    (0..value.len())
        .map(|i| match formulation {
            InequalityFormulation::SlackActive => (value[i] + f.mu()[i] / (2.0 * f.penalty().rho()[i])).abs(),
            InequalityFormulation::MaxPenalty => value[i].abs(),
        })
        .fold(f64::INFINITY, f64::min)
}

fn fd_gradient(g: &mut FactorGraph, h: f64) -> DVector<f64> {
    let dims = g.tangent_dims();
    let n = g.tangent_dim();
    let saved: Vec<_> = g.variables().to_vec();
    let mut grad = DVector::zeros(n);
    for i in 0..n {
        let mut e = DVector::zeros(n);
        e[i] = h;
        g.apply(&Perturbation::new(e.clone(), &dims).unwrap()).unwrap();
        let plus = g.augmented_lagrangian().unwrap();
        restore(g, &saved);
        g.apply(&Perturbation::new(-e, &dims).unwrap()).unwrap();
        let minus = g.augmented_lagrangian().unwrap();
        restore(g, &saved);
        grad[i] = (plus - minus) / (2.0 * h);
    }
    grad
}

fn restore(g: &mut FactorGraph, saved: &[ManifoldVariable]) {
    for (i, v) in saved.iter().enumerate() {
        g.set_variable(VariableKey(i), v.clone()).unwrap();
    }
}

#[test]
fn lagrangian_gradient_matches_finite_differences() {
    for formulation in [InequalityFormulation::SlackActive, InequalityFormulation::MaxPenalty] {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut checked = 0;
        while checked < 100 {
            let mut g = toy_graph(&mut rng, formulation);
            if breakpoint_gap(&g, formulation) < 1e-3 {
                continue;
            }
            let analytic = g.build_system(0.0).unwrap().gradient() * 2.0;
            let numeric = fd_gradient(&mut g, 1e-6);
            let scale = analytic.amax().max(1.0);
            assert!(
                (&analytic - &numeric).amax() <= 1e-5 * scale,
                "{formulation:?}: {analytic} vs {numeric}"
            );
            checked += 1;
        }
    }
}

#[test]
fn analytic_jacobians_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..100 {
        let g = toy_graph(&mut rng, InequalityFormulation::SlackActive);
        let residuals: Vec<&dyn Residual> = vec![
            g.error_factors()[0].residual(),
            g.error_factors()[1].residual(),
            g.equality_factors()[0].residual(),
            g.inequality_factors()[0].residual(),
        ];
        for r in residuals {
            let vars = g.gather(r.keys()).unwrap();
            let analytic = r.linearize(&vars).stacked_jacobian();
            let numeric = numeric_linearize(r, &vars, 1e-6).stacked_jacobian();
            let scale = analytic.amax().max(1.0);
            assert!((&analytic - &numeric).amax() <= 1e-5 * scale);
        }
    }
}

#[test]
fn satisfied_slack_constraints_contribute_nothing() {
    let mut g = FactorGraph::new();
    let a = g.add_variable(ManifoldVariable::se2(0.0, 0.0, 0.0));
    let b = g.add_variable(ManifoldVariable::from_slice(&[0.0, 0.0]));
    g.add_equality(Attach([a, b])).unwrap();
    g.add_inequality(Limits([a, b]), InequalityFormulation::SlackActive).unwrap();
    g.inequality_factors_mut()[0].set_mu(DVector::from_vec(vec![0.5, 0.2, 1.0])).unwrap();
    // f = 0 and g = (−4, −0.5, −3) lies below −μ/2ρ everywhere.
    let c = g.inequality_contribution(0).unwrap();
    assert_eq!(c.gradient, DVector::zeros(5));
    assert_eq!(c.hessian, DMatrix::zeros(5, 5));
    let c = g.equality_contribution(0).unwrap();
    assert_eq!(c.gradient, DVector::zeros(5));
}
