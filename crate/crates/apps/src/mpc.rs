//! Receding-horizon control of a pseudo-omnidirectional platform.
//!
//! Each epoch builds a horizon graph over states `X_0..X_T` and controls
//! `u_0..u_{T−1}`, ties consecutive knots with an RK4 dynamics equality, bounds
//! wheel speeds and accelerations with inequalities, and solves it with the
//! augmented-Lagrangian solver. The first control is applied to a simulated
//! plant integrated with the same RK4 step.

use std::time::Instant;

use alfg::{
    wrap_angle, AlSolver, EpochState, FactorGraph, InequalityFormulation, Linearization, ManifoldVariable,
    PriorFactor, Residual, SolverConfig, SolverReport, VariableKey,
};
use nalgebra::{DMatrix, DVector, Matrix6, Matrix6x3, Vector3, Vector6};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{AppError, AppResult};

/// Information of the prior that pins `X_0` to the measured plant state.
pub const ANCHOR_WEIGHT: f64 = 1e6;

/// Components of the state vector that are angles.
const ANGLES: [usize; 2] = [2, 4];

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PlatformState {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
    pub v: f64,
    /// Direction of travel in the body frame.
    pub phi: f64,
    pub omega: f64,
}

impl PlatformState {
    pub fn new(x: f64, y: f64, theta: f64, v: f64, phi: f64, omega: f64) -> Self {
        Self {
            x,
            y,
            theta: wrap_angle(theta),
            v,
            phi: wrap_angle(phi),
            omega,
        }
    }

    pub fn from_vector(s: &Vector6<f64>) -> Self {
        Self::new(s[0], s[1], s[2], s[3], s[4], s[5])
    }

    pub fn to_vector(&self) -> Vector6<f64> {
        Vector6::new(self.x, self.y, self.theta, self.v, self.phi, self.omega)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ControlInput {
    pub dv: f64,
    pub dphi: f64,
    pub domega: f64,
}

impl ControlInput {
    pub fn from_vector(u: &Vector3<f64>) -> Self {
        Self {
            dv: u[0],
            dphi: u[1],
            domega: u[2],
        }
    }

    pub fn to_vector(&self) -> Vector3<f64> {
        Vector3::new(self.dv, self.dphi, self.domega)
    }

    /// Clips each channel to its acceleration limit.
    pub fn saturated(&self, cfg: &MpcConfig) -> Self {
        Self {
            dv: self.dv.clamp(-cfg.dv_max, cfg.dv_max),
            dphi: self.dphi.clamp(-cfg.dphi_max, cfg.dphi_max),
            domega: self.domega.clamp(-cfg.domega_max, cfg.domega_max),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Goal {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

impl Goal {
    pub fn new(x: f64, y: f64, theta: f64) -> Self {
        Self { x, y, theta }
    }

    pub fn reached(&self, s: &PlatformState, tolerance: (f64, f64)) -> bool {
        (s.x - self.x).hypot(s.y - self.y) <= tolerance.0 && wrap_angle(s.theta - self.theta).abs() <= tolerance.1
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MpcConfig {
    /// Number of control intervals `T`.
    pub horizon: usize,
    pub dt: f64,
    /// Diagonal of `Ω^g` for `t < T`.
    pub goal_weight: f64,
    /// Multiplier on the goal weight at `t = T`.
    pub terminal_scale: f64,
    pub effort_weight: f64,
    pub jerk_weight: f64,
    pub omega_max: f64,
    pub dv_max: f64,
    pub dphi_max: f64,
    pub domega_max: f64,
    /// Half-track length in the wheel-speed limits.
    pub d: f64,
    /// Position (m) and heading (rad) tolerance for reaching a goal.
    pub goal_tolerance: (f64, f64),
    pub formulation: InequalityFormulation,
    /// Carry multipliers over from the previous epoch along with the plan.
    pub warm_duals: bool,
    pub solver: SolverConfig,
}

impl Default for MpcConfig {
    fn default() -> Self {
        Self {
            horizon: 20,
            dt: 0.1,
            goal_weight: 1.0,
            terminal_scale: 10.0,
            effort_weight: 0.1,
            jerk_weight: 0.1,
            omega_max: 1.0,
            dv_max: 1.0,
            dphi_max: 1.0,
            domega_max: 1.0,
            d: 0.5,
            goal_tolerance: (0.05, 0.05),
            formulation: InequalityFormulation::SlackActive,
            warm_duals: false,
            solver: SolverConfig::default(),
        }
    }
}

impl MpcConfig {
    pub fn validate(&self) -> AppResult<()> {
        if self.horizon < 2 {
            return Err(AppError::Invalid("horizon must be at least 2".into()));
        }
        let positive = [
            ("dt", self.dt),
            ("omega_max", self.omega_max),
            ("dv_max", self.dv_max),
            ("dphi_max", self.dphi_max),
            ("domega_max", self.domega_max),
            ("d", self.d),
            ("goal_weight", self.goal_weight),
            ("terminal_scale", self.terminal_scale),
            ("position tolerance", self.goal_tolerance.0),
            ("heading tolerance", self.goal_tolerance.1),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(AppError::Invalid(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.effort_weight >= 0.0 && self.jerk_weight >= 0.0) {
            return Err(AppError::Invalid("effort and jerk weights must be non-negative".into()));
        }
        self.solver.validate()?;
        Ok(())
    }
}

/// `(ẋ, ẏ, θ̇) = (R(θ)·(v cos φ, v sin φ), ω)`.
pub fn kinematics_derivative(s: &PlatformState) -> Vector3<f64> {
    let (sin, cos) = (s.theta + s.phi).sin_cos();
    Vector3::new(s.v * cos, s.v * sin, s.omega)
}

fn derivative(s: &Vector6<f64>, u: &Vector3<f64>) -> Vector6<f64> {
    let (sin, cos) = (s[2] + s[4]).sin_cos();
    Vector6::new(s[3] * cos, s[3] * sin, s[5], u[0], u[1], u[2])
}

fn derivative_jacobian(s: &Vector6<f64>) -> Matrix6<f64> {
    let (sin, cos) = (s[2] + s[4]).sin_cos();
    let mut a = Matrix6::zeros();
    a[(0, 2)] = -s[3] * sin;
    a[(0, 3)] = cos;
    a[(0, 4)] = -s[3] * sin;
    a[(1, 2)] = s[3] * cos;
    a[(1, 3)] = sin;
    a[(1, 4)] = s[3] * cos;
    a[(2, 5)] = 1.0;
    a
}

fn control_jacobian() -> Matrix6x3<f64> {
    let mut b = Matrix6x3::zeros();
    b[(3, 0)] = 1.0;
    b[(4, 1)] = 1.0;
    b[(5, 2)] = 1.0;
    b
}

/// One classical RK4 step of the state vector, without angle wrapping, and
/// its Jacobians with respect to the state and the control.
pub fn rk4_with_jacobians(
    s: &Vector6<f64>,
    u: &Vector3<f64>,
    dt: f64,
) -> (Vector6<f64>, Matrix6<f64>, Matrix6x3<f64>) {
    let h = dt;
    let b = control_jacobian();
    let i6 = Matrix6::identity();

    let k1 = derivative(s, u);
    let a1 = derivative_jacobian(s);
    let (k1_s, k1_u) = (a1, b);

    let s2 = s + k1 * (h / 2.0);
    let k2 = derivative(&s2, u);
    let a2 = derivative_jacobian(&s2);
    let k2_s = a2 * (i6 + k1_s * (h / 2.0));
    let k2_u = a2 * k1_u * (h / 2.0) + b;

    let s3 = s + k2 * (h / 2.0);
    let k3 = derivative(&s3, u);
    let a3 = derivative_jacobian(&s3);
    let k3_s = a3 * (i6 + k2_s * (h / 2.0));
    let k3_u = a3 * k2_u * (h / 2.0) + b;

    let s4 = s + k3 * h;
    let k4 = derivative(&s4, u);
    let a4 = derivative_jacobian(&s4);
    let k4_s = a4 * (i6 + k3_s * h);
    let k4_u = a4 * k3_u * h + b;

    let next = s + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
    let j_s = i6 + (k1_s + k2_s * 2.0 + k3_s * 2.0 + k4_s) * (h / 6.0);
    let j_u = (k1_u + k2_u * 2.0 + k3_u * 2.0 + k4_u) * (h / 6.0);
    (next, j_s, j_u)
}

/// Classical RK4 over the six-state model with constant accelerations.
pub fn rk4_step(state: &PlatformState, control: &ControlInput, dt: f64) -> PlatformState {
    let (next, _, _) = rk4_with_jacobians(&state.to_vector(), &control.to_vector(), dt);
    PlatformState::from_vector(&next)
}

/// `F(X_t, u_t) − X_{t+1}` with θ and φ differences wrapped.
pub fn dynamics_residual(x_t: &Vector6<f64>, u_t: &Vector3<f64>, x_next: &Vector6<f64>, dt: f64) -> Vector6<f64> {
    let (pred, _, _) = rk4_with_jacobians(x_t, u_t, dt);
    wrapped_difference(&pred, x_next)
}

fn wrapped_difference(a: &Vector6<f64>, b: &Vector6<f64>) -> Vector6<f64> {
    let mut r = a - b;
    for i in ANGLES {
        r[i] = wrap_angle(r[i]);
    }
    r
}

/// `(±(ω − v/d) − ω_max, ±(ω + v/d) − ω_max)`, ordered `+, −, +, −`.
pub fn velocity_constraints(s: &PlatformState, cfg: &MpcConfig) -> [f64; 4] {
    let a = s.omega - s.v / cfg.d;
    let b = s.omega + s.v / cfg.d;
    [a - cfg.omega_max, -a - cfg.omega_max, b - cfg.omega_max, -b - cfg.omega_max]
}

/// `±dv − dv_max, ±dφ − dφ_max, ±dω − dω_max`.
pub fn acceleration_constraints(u: &ControlInput, cfg: &MpcConfig) -> [f64; 6] {
    [
        u.dv - cfg.dv_max,
        -u.dv - cfg.dv_max,
        u.dphi - cfg.dphi_max,
        -u.dphi - cfg.dphi_max,
        u.domega - cfg.domega_max,
        -u.domega - cfg.domega_max,
    ]
}

fn vec6(v: &ManifoldVariable) -> Vector6<f64> {
    Vector6::from_column_slice(v.value().as_slice())
}

fn vec3(v: &ManifoldVariable) -> Vector3<f64> {
    Vector3::from_column_slice(v.value().as_slice())
}

/// Equality `F(X_t, u_t) − X_{t+1} = 0` over `[X_t, u_t, X_{t+1}]`.
pub struct DynamicsConstraint {
    keys: [VariableKey; 3],
    dt: f64,
}

impl DynamicsConstraint {
    pub fn new(x_t: VariableKey, u_t: VariableKey, x_next: VariableKey, dt: f64) -> Self {
        Self {
            keys: [x_t, u_t, x_next],
            dt,
        }
    }
}

impl Residual for DynamicsConstraint {
    fn keys(&self) -> &[VariableKey] {
        &self.keys
    }

    fn dim(&self) -> usize {
        6
    }

    fn evaluate(&self, vars: &[&ManifoldVariable]) -> DVector<f64> {
        let r = dynamics_residual(&vec6(vars[0]), &vec3(vars[1]), &vec6(vars[2]), self.dt);
        DVector::from_column_slice(r.as_slice())
    }

    fn linearize(&self, vars: &[&ManifoldVariable]) -> Linearization {
        let (pred, j_s, j_u) = rk4_with_jacobians(&vec6(vars[0]), &vec3(vars[1]), self.dt);
        let r = wrapped_difference(&pred, &vec6(vars[2]));
        Linearization {
            residual: DVector::from_column_slice(r.as_slice()),
            jacobians: vec![
                DMatrix::from_column_slice(6, 6, j_s.as_slice()),
                DMatrix::from_column_slice(6, 3, j_u.as_slice()),
                -DMatrix::identity(6, 6),
            ],
        }
    }
}

/// `(g_x − x, g_y − y, wrap(g_θ − θ))`.
pub struct GoalFactor {
    keys: [VariableKey; 1],
    goal: Goal,
}

impl GoalFactor {
    pub fn new(key: VariableKey, goal: Goal) -> Self {
        Self { keys: [key], goal }
    }
}

impl Residual for GoalFactor {
    fn keys(&self) -> &[VariableKey] {
        &self.keys
    }

    fn dim(&self) -> usize {
        3
    }

    fn evaluate(&self, vars: &[&ManifoldVariable]) -> DVector<f64> {
        let s = vars[0].value();
        DVector::from_vec(vec![
            self.goal.x - s[0],
            self.goal.y - s[1],
            wrap_angle(self.goal.theta - s[2]),
        ])
    }

    fn linearize(&self, vars: &[&ManifoldVariable]) -> Linearization {
        let mut j = DMatrix::zeros(3, 6);
        for i in 0..3 {
            j[(i, i)] = -1.0;
        }
        Linearization {
            residual: self.evaluate(vars),
            jacobians: vec![j],
        }
    }
}

/// `u_t`.
pub struct EffortFactor {
    keys: [VariableKey; 1],
}

impl EffortFactor {
    pub fn new(key: VariableKey) -> Self {
        Self { keys: [key] }
    }
}

impl Residual for EffortFactor {
    fn keys(&self) -> &[VariableKey] {
        &self.keys
    }

    fn dim(&self) -> usize {
        3
    }

    fn evaluate(&self, vars: &[&ManifoldVariable]) -> DVector<f64> {
        vars[0].value().clone()
    }

    fn linearize(&self, vars: &[&ManifoldVariable]) -> Linearization {
        Linearization {
            residual: self.evaluate(vars),
            jacobians: vec![DMatrix::identity(3, 3)],
        }
    }
}

/// `u_{t+1} − u_t`.
pub struct JerkFactor {
    keys: [VariableKey; 2],
}

impl JerkFactor {
    pub fn new(u_t: VariableKey, u_next: VariableKey) -> Self {
        Self { keys: [u_t, u_next] }
    }
}

impl Residual for JerkFactor {
    fn keys(&self) -> &[VariableKey] {
        &self.keys
    }

    fn dim(&self) -> usize {
        3
    }

    fn evaluate(&self, vars: &[&ManifoldVariable]) -> DVector<f64> {
        vars[1].value() - vars[0].value()
    }

    fn linearize(&self, vars: &[&ManifoldVariable]) -> Linearization {
        Linearization {
            residual: self.evaluate(vars),
            jacobians: vec![-DMatrix::identity(3, 3), DMatrix::identity(3, 3)],
        }
    }
}

/// Wheel-speed limits on one state as four `g ≤ 0` rows.
pub struct VelocityLimits {
    keys: [VariableKey; 1],
    d: f64,
    omega_max: f64,
}

impl VelocityLimits {
    pub fn new(key: VariableKey, cfg: &MpcConfig) -> Self {
        Self {
            keys: [key],
            d: cfg.d,
            omega_max: cfg.omega_max,
        }
    }
}

impl Residual for VelocityLimits {
    fn keys(&self) -> &[VariableKey] {
        &self.keys
    }

    fn dim(&self) -> usize {
        4
    }

    fn evaluate(&self, vars: &[&ManifoldVariable]) -> DVector<f64> {
        let s = vars[0].value();
        let (a, b) = (s[5] - s[3] / self.d, s[5] + s[3] / self.d);
        DVector::from_vec(vec![
            a - self.omega_max,
            -a - self.omega_max,
            b - self.omega_max,
            -b - self.omega_max,
        ])
    }

    fn linearize(&self, vars: &[&ManifoldVariable]) -> Linearization {
        let k = 1.0 / self.d;
        let mut j = DMatrix::zeros(4, 6);
        for (row, (dv, dw)) in [(-k, 1.0), (k, -1.0), (k, 1.0), (-k, -1.0)].into_iter().enumerate() {
            j[(row, 3)] = dv;
            j[(row, 5)] = dw;
        }
        Linearization {
            residual: self.evaluate(vars),
            jacobians: vec![j],
        }
    }
}

/// Acceleration limits on one control as six `g ≤ 0` rows.
pub struct AccelerationLimits {
    keys: [VariableKey; 1],
    limits: [f64; 3],
}

impl AccelerationLimits {
    pub fn new(key: VariableKey, cfg: &MpcConfig) -> Self {
        Self {
            keys: [key],
            limits: [cfg.dv_max, cfg.dphi_max, cfg.domega_max],
        }
    }
}

impl Residual for AccelerationLimits {
    fn keys(&self) -> &[VariableKey] {
        &self.keys
    }

    fn dim(&self) -> usize {
        6
    }

    fn evaluate(&self, vars: &[&ManifoldVariable]) -> DVector<f64> {
        let u = vars[0].value();
        DVector::from_iterator(
            6,
            (0..3).flat_map(|i| [u[i] - self.limits[i], -u[i] - self.limits[i]]),
        )
    }

    fn linearize(&self, vars: &[&ManifoldVariable]) -> Linearization {
        let mut j = DMatrix::zeros(6, 3);
        for i in 0..3 {
            j[(2 * i, i)] = 1.0;
            j[(2 * i + 1, i)] = -1.0;
        }
        Linearization {
            residual: self.evaluate(vars),
            jacobians: vec![j],
        }
    }
}

/// Multipliers of one horizon: `λ` per dynamics constraint, `μ` per velocity
/// limit (on `X_1..X_T`) and per acceleration limit.
#[derive(Debug, Clone, PartialEq)]
pub struct Duals {
    pub dynamics: Vec<DVector<f64>>,
    pub velocity: Vec<DVector<f64>>,
    pub acceleration: Vec<DVector<f64>>,
}

fn shift_one<T: Clone>(v: &[T]) -> Vec<T> {
    let mut out = v[1..].to_vec();
    out.push(v.last().expect("non-empty horizon").clone());
    out
}

impl Duals {
    fn shifted(&self) -> Self {
        Self {
            dynamics: shift_one(&self.dynamics),
            velocity: shift_one(&self.velocity),
            acceleration: shift_one(&self.acceleration),
        }
    }
}

/// States `X_0..X_T` and controls `u_0..u_{T−1}` of one horizon, with the
/// multipliers they were solved with.
#[derive(Debug, Clone, PartialEq)]
pub struct Plan {
    pub states: Vec<Vector6<f64>>,
    pub controls: Vec<Vector3<f64>>,
    /// `None` starts every multiplier at zero.
    pub duals: Option<Duals>,
}

impl Plan {
    /// Every pose at the world origin, all velocities and controls zero, and
    /// `X_0` set to the plant.
    pub fn cold(plant: &PlatformState, horizon: usize) -> Self {
        let mut states = vec![Vector6::zeros(); horizon + 1];
        states[0] = plant.to_vector();
        Self {
            states,
            controls: vec![Vector3::zeros(); horizon],
            duals: None,
        }
    }

    /// Drops the first knot, repeats the last one and sets `X_0` to the plant.
    /// Multipliers move with their knots when `keep_duals` is set.
    pub fn shifted(&self, plant: &PlatformState, keep_duals: bool) -> Self {
        let mut states = shift_one(&self.states);
        states[0] = plant.to_vector();
        Self {
            states,
            controls: shift_one(&self.controls),
            duals: if keep_duals { self.duals.as_ref().map(Duals::shifted) } else { None },
        }
    }

    pub fn horizon(&self) -> usize {
        self.controls.len()
    }

    /// Worst `‖F(X_t, u_t) ⊖ X_{t+1}‖∞` along the plan.
    pub fn max_dynamics_residual(&self, dt: f64) -> f64 {
        (0..self.horizon())
            .map(|t| dynamics_residual(&self.states[t], &self.controls[t], &self.states[t + 1], dt).amax())
            .fold(0.0, f64::max)
    }

    /// Worst `max(g, 0)` over the velocity limits on `X_1..X_T` and the
    /// acceleration limits on every control.
    pub fn max_limit_violation(&self, cfg: &MpcConfig) -> f64 {
        let vel = self.states[1..]
            .iter()
            .flat_map(|s| velocity_constraints(&PlatformState::from_vector(s), cfg));
        let acc = self
            .controls
            .iter()
            .flat_map(|u| acceleration_constraints(&ControlInput::from_vector(u), cfg));
        vel.chain(acc).fold(0.0, f64::max)
    }
}

/// Keys of the horizon graph.
pub struct HorizonKeys {
    pub states: Vec<VariableKey>,
    pub controls: Vec<VariableKey>,
}

/// The horizon graph for `goal`, initialised at `init` with `X_0` anchored to
/// `plant`.
pub fn build_horizon_graph(
    plant: &PlatformState,
    init: &Plan,
    goal: Goal,
    cfg: &MpcConfig,
) -> AppResult<(FactorGraph, HorizonKeys)> {
    let t_max = cfg.horizon;
    if init.horizon() != t_max || init.states.len() != t_max + 1 {
        return Err(AppError::Invalid(format!("initial plan does not span T = {t_max}")));
    }
    let mut g = FactorGraph::new().with_penalty_params(cfg.solver.penalty);
    let mut states = Vec::with_capacity(t_max + 1);
    let mut controls = Vec::with_capacity(t_max);
    for t in 0..=t_max {
        states.push(g.add_variable(ManifoldVariable::from_slice(init.states[t].as_slice())));
        if t < t_max {
            controls.push(g.add_variable(ManifoldVariable::from_slice(init.controls[t].as_slice())));
        }
    }

    let p = plant.to_vector();
    g.add_error(
        PriorFactor::new(states[0], DVector::from_column_slice(p.as_slice())).with_wrapped(&ANGLES),
        DMatrix::identity(6, 6) * ANCHOR_WEIGHT,
    )?;
    for t in 0..=t_max {
        let w = if t == t_max { cfg.goal_weight * cfg.terminal_scale } else { cfg.goal_weight };
        g.add_error(GoalFactor::new(states[t], goal), DMatrix::identity(3, 3) * w)?;
    }
    for t in 0..t_max {
        g.add_error(EffortFactor::new(controls[t]), DMatrix::identity(3, 3) * cfg.effort_weight)?;
    }
    for t in 0..t_max.saturating_sub(1) {
        g.add_error(
            JerkFactor::new(controls[t], controls[t + 1]),
            DMatrix::identity(3, 3) * cfg.jerk_weight,
        )?;
    }
    for t in 0..t_max {
        g.add_equality(DynamicsConstraint::new(states[t], controls[t], states[t + 1], cfg.dt))?;
    }
    // X_0 is pinned to the plant, which the controller cannot change.
    for &s in &states[1..] {
        g.add_inequality(VelocityLimits::new(s, cfg), cfg.formulation)?;
    }
    for &u in &controls {
        g.add_inequality(AccelerationLimits::new(u, cfg), cfg.formulation)?;
    }
    if let Some(d) = &init.duals {
        if d.dynamics.len() != t_max || d.velocity.len() != t_max || d.acceleration.len() != t_max {
            return Err(AppError::Invalid(format!("multipliers do not span T = {t_max}")));
        }
        for (f, l) in g.equality_factors_mut().iter_mut().zip(&d.dynamics) {
            f.set_lambda(l.clone())?;
        }
        let mu = d.velocity.iter().chain(&d.acceleration);
        for (f, m) in g.inequality_factors_mut().iter_mut().zip(mu) {
            f.set_mu(m.clone())?;
        }
    }
    Ok((g, HorizonKeys { states, controls }))
}

fn read_plan(g: &FactorGraph, keys: &HorizonKeys) -> AppResult<Plan> {
    let get = |k: VariableKey| g.variable(k).map(|v| v.value().clone());
    let mut states = Vec::with_capacity(keys.states.len());
    for &k in &keys.states {
        let mut s = Vector6::from_column_slice(get(k)?.as_slice());
        for i in ANGLES {
            s[i] = wrap_angle(s[i]);
        }
        states.push(s);
    }
    let controls = keys
        .controls
        .iter()
        .map(|&k| get(k).map(|v| Vector3::from_column_slice(v.as_slice())))
        .collect::<Result<Vec<_>, _>>()?;
    let t_max = keys.controls.len();
    let ineq = g.inequality_factors();
    let duals = Duals {
        dynamics: g.equality_factors().iter().map(|f| f.lambda().clone()).collect(),
        velocity: ineq[..t_max].iter().map(|f| f.mu().clone()).collect(),
        acceleration: ineq[t_max..].iter().map(|f| f.mu().clone()).collect(),
    };
    Ok(Plan {
        states,
        controls,
        duals: Some(duals),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MpcEpochResult {
    pub plan: Plan,
    pub report: SolverReport,
    /// Damping used for every primal step of the epoch.
    pub zeta: f64,
}

impl MpcEpochResult {
    pub fn first_control(&self) -> ControlInput {
        ControlInput::from_vector(&self.plan.controls[0])
    }
}

/// Solves one horizon from `previous` shifted by a knot, or from a cold start,
/// with the damping of `epochs`, then records the iteration count in `epochs`.
pub fn mpc_epoch(
    plant: &PlatformState,
    previous: Option<&Plan>,
    goal: Goal,
    cfg: &MpcConfig,
    epochs: &mut EpochState,
) -> AppResult<MpcEpochResult> {
    cfg.validate()?;
    let init = match previous {
        Some(p) if p.horizon() == cfg.horizon => p.shifted(plant, cfg.warm_duals),
        _ => Plan::cold(plant, cfg.horizon),
    };
    let (mut graph, keys) = build_horizon_graph(plant, &init, goal, cfg)?;
    let zeta = epochs.zeta();
    let solver = AlSolver::new(SolverConfig {
        damping: zeta,
        ..cfg.solver
    });
    let outcome = solver.solve(&mut graph);
    let iterations = match &outcome {
        Ok(r) => r.outer_iterations,
        Err(_) => cfg.solver.max_outer_iterations,
    };
    epochs.record(iterations, &cfg.solver);
    let report = outcome?;
    let mut plan = read_plan(&graph, &keys)?;
    // Multipliers of an unfinished solve are not a useful starting point.
    if !report.converged {
        plan.duals = None;
    }
    Ok(MpcEpochResult {
        plan,
        report,
        zeta,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimulationConfig {
    pub mpc: MpcConfig,
    /// Hard stop on the number of epochs across all goals.
    pub max_epochs: usize,
    /// Standard deviation of Gaussian noise added to the plant state after
    /// every control period.
    pub plant_noise: f64,
    pub seed: u64,
    /// Record wall-clock solve times; off gives byte-stable logs.
    pub record_timing: bool,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            mpc: MpcConfig::default(),
            max_epochs: 5000,
            plant_noise: 0.0,
            seed: 0,
            record_timing: true,
        }
    }
}

/// Three goals around the origin, one per line.
pub const GOALS_3: &str = include_str!("../data/goals_3.txt");
/// Eleven goals in three closed loops.
pub const GOALS_11: &str = include_str!("../data/goals_11.txt");

/// Epochs after which repeated solver failures switch the plant to zero
/// control.
pub const FAILURE_LIMIT: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    /// Simulated time at which the plant was measured.
    pub time: f64,
    pub state: PlatformState,
    pub control: ControlInput,
    pub iterations: usize,
    pub zeta: f64,
    pub solve_ms: f64,
    pub goal_index: usize,
    /// `None` when the solver aborted.
    pub converged: Option<bool>,
    pub rho_range: Option<(f64, f64)>,
    pub max_dynamics_residual: f64,
    pub max_limit_violation: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationResult {
    pub epochs: Vec<EpochLog>,
    /// Time from reaching the previous goal (or the start) to each reached goal.
    pub travel_times: Vec<f64>,
    pub goals_reached: usize,
    /// Plant states after every control period, starting with the initial one.
    pub trajectory: Vec<PlatformState>,
}

impl SimulationResult {
    pub fn completed(&self, goals: usize) -> bool {
        self.goals_reached == goals
    }

    pub fn solve_times_ms(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.solve_ms).collect()
    }
}

/// Drives the plant from `start` through `goals` in order.
pub fn run_simulation(start: PlatformState, goals: &[Goal], cfg: &SimulationConfig) -> AppResult<SimulationResult> {
    run_simulation_observed(start, goals, cfg, |_, _| {})
}

/// [`run_simulation`] that also hands every solved epoch to `observe`.
pub fn run_simulation_observed<F: FnMut(usize, &MpcEpochResult)>(
    start: PlatformState,
    goals: &[Goal],
    cfg: &SimulationConfig,
    mut observe: F,
) -> AppResult<SimulationResult> {
    cfg.mpc.validate()?;
    if !(cfg.plant_noise >= 0.0) {
        return Err(AppError::Invalid("plant noise must be non-negative".into()));
    }
    let noise = Normal::new(0.0, cfg.plant_noise).map_err(|e| AppError::Invalid(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let dt = cfg.mpc.dt;

    let mut plant = start;
    let mut time = 0.0;
    let mut goal_index = 0;
    let mut goal_started = 0.0;
    let mut previous: Option<Plan> = None;
    let mut last_control = ControlInput::default();
    let mut failures = 0;
    let mut epochs = EpochState::new(&cfg.mpc.solver);
    let mut out = SimulationResult {
        epochs: Vec::new(),
        travel_times: Vec::new(),
        goals_reached: 0,
        trajectory: vec![plant],
    };

    for epoch in 0..cfg.max_epochs {
        while goal_index < goals.len() && goals[goal_index].reached(&plant, cfg.mpc.goal_tolerance) {
            out.travel_times.push(time - goal_started);
            goal_started = time;
            goal_index += 1;
            previous = None;
            epochs.reset(&cfg.mpc.solver);
        }
        if goal_index == goals.len() {
            break;
        }

        let clock = Instant::now();
        let result = mpc_epoch(&plant, previous.as_ref(), goals[goal_index], &cfg.mpc, &mut epochs);
        let solve_ms = if cfg.record_timing { clock.elapsed().as_secs_f64() * 1e3 } else { 0.0 };

        let log = match result {
            Ok(r) => {
                observe(epoch, &r);
                failures = 0;
                last_control = r.first_control().saturated(&cfg.mpc);
                let log = EpochLog {
                    epoch,
                    time,
                    state: plant,
                    control: last_control,
                    iterations: r.report.outer_iterations,
                    zeta: r.zeta,
                    solve_ms,
                    goal_index,
                    converged: Some(r.report.converged),
                    rho_range: r.report.rho_range,
                    max_dynamics_residual: r.plan.max_dynamics_residual(dt),
                    max_limit_violation: r.plan.max_limit_violation(&cfg.mpc),
                };
                previous = Some(r.plan);
                log
            }
            Err(AppError::Solver(_)) => {
                failures += 1;
                if failures >= FAILURE_LIMIT {
                    last_control = ControlInput::default();
                }
                previous = None;
                EpochLog {
                    epoch,
                    time,
                    state: plant,
                    control: last_control,
                    iterations: cfg.mpc.solver.max_outer_iterations,
                    zeta: epochs.zeta(),
                    solve_ms,
                    goal_index,
                    converged: None,
                    rho_range: None,
                    max_dynamics_residual: f64::NAN,
                    max_limit_violation: f64::NAN,
                }
            }
            Err(e) => return Err(e),
        };
        out.epochs.push(log);

        plant = rk4_step(&plant, &last_control, dt);
        if cfg.plant_noise > 0.0 {
            let s = plant.to_vector().map(|v| v + noise.sample(&mut rng));
            plant = PlatformState::from_vector(&s);
        }
        time += dt;
        out.trajectory.push(plant);
    }
    // A goal reached on the final control period still counts.
    while goal_index < goals.len() && goals[goal_index].reached(&plant, cfg.mpc.goal_tolerance) {
        out.travel_times.push(time - goal_started);
        goal_started = time;
        goal_index += 1;
    }
    out.goals_reached = goal_index;
    Ok(out)
}

/// Parses `g_x g_y g_θ` lines; blank lines and `#` comments are skipped.
pub fn parse_goals(text: &str) -> AppResult<Vec<Goal>> {
    let mut goals = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |message: String| AppError::Parse { line: idx + 1, message };
        let nums = line
            .split_whitespace()
            .map(|s| s.parse::<f64>().map_err(|e| err(format!("{s}: {e}"))))
            .collect::<AppResult<Vec<_>>>()?;
        if nums.len() != 3 || nums.iter().any(|v| !v.is_finite()) {
            return Err(err(format!("expected 3 finite numbers, found {}", nums.len())));
        }
        goals.push(Goal::new(nums[0], nums[1], nums[2]));
    }
    if goals.is_empty() {
        return Err(AppError::Invalid("goal list is empty".into()));
    }
    Ok(goals)
}

/// Applies `key = value` lines (`omega_max`, `dv_max`, `dphi_max`,
/// `domega_max`, `d`) to `cfg`.
pub fn apply_limits(text: &str, cfg: &mut MpcConfig) -> AppResult<()> {
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |message: String| AppError::Parse { line: idx + 1, message };
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| err("expected key = value".into()))?;
        let value: f64 = value.trim().parse().map_err(|e| err(format!("{}: {e}", value.trim())))?;
        let slot = match key.trim() {
            "omega_max" => &mut cfg.omega_max,
            "dv_max" => &mut cfg.dv_max,
            "dphi_max" => &mut cfg.dphi_max,
            "domega_max" => &mut cfg.domega_max,
            "d" => &mut cfg.d,
            other => return Err(err(format!("unknown limit {other}"))),
        };
        *slot = value;
    }
    cfg.validate()
}

#[cfg(test)]
mod tests {
    use super::*;
    use alfg::numeric_linearize;
    use std::f64::consts::FRAC_PI_2;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn kinematics_examples() {
        assert_eq!(kinematics_derivative(&PlatformState::default()), Vector3::zeros());
        let s = PlatformState::new(0.0, 0.0, 0.0, 1.0, 0.0, 0.0);
        assert_eq!(kinematics_derivative(&s), Vector3::new(1.0, 0.0, 0.0));
        let s = PlatformState::new(0.0, 0.0, FRAC_PI_2, 1.0, 0.0, 0.5);
        let d = kinematics_derivative(&s);
        assert!(d[0].abs() < 1e-15 && close(d[1], 1.0, 1e-15) && d[2] == 0.5);
    }

    #[test]
    fn rk4_examples() {
        let zero = PlatformState::default();
        assert_eq!(rk4_step(&zero, &ControlInput::default(), 0.1), zero);
        let cruise = PlatformState::new(0.0, 0.0, 0.0, 1.0, 0.0, 0.0);
        let next = rk4_step(&cruise, &ControlInput::default(), 0.1);
        assert_eq!(next.x, 0.1);
        let push = ControlInput { dv: 1.0, dphi: 0.0, domega: 0.0 };
        let next = rk4_step(&zero, &push, 0.1);
        assert!(close(next.v, 0.1, 1e-15));
        assert!(close(next.x, 0.005, 1e-9));
    }

    #[test]
    fn velocity_limit_examples() {
        let cfg = MpcConfig::default();
        let w = cfg.omega_max;
        assert_eq!(velocity_constraints(&PlatformState::default(), &cfg), [-w; 4]);
        let spin = PlatformState::new(0.0, 0.0, 0.0, 0.0, 0.0, w);
        assert_eq!(velocity_constraints(&spin, &cfg), [0.0, -2.0 * w, 0.0, -2.0 * w]);
        let drive = PlatformState::new(0.0, 0.0, 0.0, cfg.d * w, 0.0, 0.0);
        let g = velocity_constraints(&drive, &cfg);
        assert_eq!(g, [-2.0 * w, 0.0, 0.0, -2.0 * w]);
    }

    #[test]
    fn acceleration_limit_examples() {
        let cfg = MpcConfig::default();
        let g = acceleration_constraints(&ControlInput::default(), &cfg);
        assert_eq!(g, [-cfg.dv_max, -cfg.dv_max, -cfg.dphi_max, -cfg.dphi_max, -cfg.domega_max, -cfg.domega_max]);
        let at = ControlInput { dv: cfg.dv_max, ..Default::default() };
        assert_eq!(acceleration_constraints(&at, &cfg)[0], 0.0);
        let over = ControlInput { dv: 2.0 * cfg.dv_max, ..Default::default() };
        assert_eq!(acceleration_constraints(&over, &cfg)[0], cfg.dv_max);
    }

    #[test]
    fn feasible_triples_have_zero_residual() {
        assert_eq!(dynamics_residual(&Vector6::zeros(), &Vector3::zeros(), &Vector6::zeros(), 0.1), Vector6::zeros());
        let s = Vector6::new(0.3, -1.0, 3.1, 0.4, -3.0, 0.7);
        let u = Vector3::new(0.5, -0.2, 0.9);
        let next = rk4_step(&PlatformState::from_vector(&s), &ControlInput::from_vector(&u), 0.1).to_vector();
        assert!(dynamics_residual(&s, &u, &next, 0.1).amax() < 1e-15);
    }

    #[test]
    fn factor_jacobians_match_finite_differences() {
        let cfg = MpcConfig::default();
        let vars = [
            ManifoldVariable::from_slice(&[0.2, -0.4, 0.7, 0.35, -0.6, 0.3]),
            ManifoldVariable::from_slice(&[0.4, -0.8, 0.25]),
            ManifoldVariable::from_slice(&[0.25, -0.35, 0.75, 0.4, -0.7, 0.3]),
        ];
        let k = |i| VariableKey(i);
        let residuals: Vec<(Box<dyn Residual>, Vec<&ManifoldVariable>)> = vec![
            (Box::new(DynamicsConstraint::new(k(0), k(1), k(2), 0.1)), vec![&vars[0], &vars[1], &vars[2]]),
            (Box::new(GoalFactor::new(k(0), Goal::new(1.0, 2.0, -3.0))), vec![&vars[0]]),
            (Box::new(EffortFactor::new(k(1))), vec![&vars[1]]),
            (Box::new(JerkFactor::new(k(1), k(1))), vec![&vars[1], &vars[1]]),
            (Box::new(VelocityLimits::new(k(0), &cfg)), vec![&vars[0]]),
            (Box::new(AccelerationLimits::new(k(1), &cfg)), vec![&vars[1]]),
        ];
        for (r, v) in &residuals {
            let analytic = r.linearize(v);
            let numeric = numeric_linearize(r.as_ref(), v, 1e-6);
            assert_eq!(analytic.residual, numeric.residual);
            for (a, n) in analytic.jacobians.iter().zip(&numeric.jacobians) {
                let scale = n.amax().max(1.0);
                assert!((a - n).amax() / scale < 1e-5, "{a}\n{n}");
            }
        }
    }

    #[test]
    fn objective_factor_counts() {
        let cfg = MpcConfig { horizon: 3, ..Default::default() };
        let plant = PlatformState::default();
        let (g, keys) = build_horizon_graph(&plant, &Plan::cold(&plant, 3), Goal::new(1.0, 0.0, 0.0), &cfg).unwrap();
        assert_eq!(keys.states.len(), 4);
        assert_eq!(keys.controls.len(), 3);
        // prior + 4 goal + 3 effort + 2 jerk
        assert_eq!(g.error_factors().len(), 10);
        assert_eq!(g.equality_factors().len(), 3);
        assert_eq!(g.inequality_factors().len(), 3 + 3);
    }

    #[test]
    fn goal_and_jerk_residuals_vanish_at_rest() {
        let at_goal = ManifoldVariable::from_slice(&[1.0, 2.0, 0.5, 0.0, 0.0, 0.0]);
        let goal = GoalFactor::new(VariableKey(0), Goal::new(1.0, 2.0, 0.5));
        assert_eq!(goal.evaluate(&[&at_goal]), DVector::zeros(3));
        let u = ManifoldVariable::from_slice(&[0.3, -0.1, 0.2]);
        assert_eq!(JerkFactor::new(VariableKey(0), VariableKey(1)).evaluate(&[&u, &u]), DVector::zeros(3));
    }

    #[test]
    fn shifted_plan_repeats_last_knot() {
        let plan = Plan {
            states: (0..4).map(|i| Vector6::from_element(i as f64)).collect(),
            controls: (0..3).map(|i| Vector3::from_element(i as f64)).collect(),
            duals: Some(Duals {
                dynamics: (0..3).map(|i| DVector::from_element(6, i as f64)).collect(),
                velocity: (0..3).map(|i| DVector::from_element(4, i as f64)).collect(),
                acceleration: (0..3).map(|i| DVector::from_element(6, i as f64)).collect(),
            }),
        };
        let plant = PlatformState::new(9.0, 9.0, 0.0, 0.0, 0.0, 0.0);
        assert_eq!(plan.shifted(&plant, false).duals, None);
        let s = plan.shifted(&plant, true);
        let d = s.duals.as_ref().unwrap();
        assert_eq!(d.dynamics[0], DVector::from_element(6, 1.0));
        assert_eq!(d.velocity[2], DVector::from_element(4, 2.0));
        assert_eq!(s.states[0], plant.to_vector());
        assert_eq!(s.states[1], Vector6::from_element(2.0));
        assert_eq!(s.states[3], Vector6::from_element(3.0));
        assert_eq!(s.controls, vec![Vector3::from_element(1.0), Vector3::from_element(2.0), Vector3::from_element(2.0)]);
    }

    #[test]
    fn parses_goal_files() {
        let goals = parse_goals("# x y theta\n1 2 0.5\n\n-1 0 3.1 # last\n").unwrap();
        assert_eq!(goals, vec![Goal::new(1.0, 2.0, 0.5), Goal::new(-1.0, 0.0, 3.1)]);
        assert!(matches!(parse_goals("1 2\n"), Err(AppError::Parse { line: 1, .. })));
        assert!(parse_goals("# nothing\n").is_err());
    }

    #[test]
    fn limits_file_overrides_defaults() {
        let mut cfg = MpcConfig::default();
        apply_limits("omega_max = 2\nd = 0.25 # narrow\n", &mut cfg).unwrap();
        assert_eq!((cfg.omega_max, cfg.d), (2.0, 0.25));
        assert!(apply_limits("speed = 1\n", &mut cfg).is_err());
        assert!(apply_limits("dv_max = -1\n", &mut cfg).is_err());
    }
}
