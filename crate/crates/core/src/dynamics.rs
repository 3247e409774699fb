//! Kinematic bicycle model with acceleration and steering-rate inputs.
//!
//! The state is `[x, y, theta, v, steer]` and the input is `[accel, steer_rate]`.
//! Integration is explicit Euler; the stochastic variant adds a zero-mean
//! Gaussian disturbance to the state derivative before integrating.
//!
//! Time-varying LQR gains are synthesised along a nominal trajectory and used
//! by [`rollout_policy`] / [`simulate_closed_loop`] to track it.

use nalgebra::{Matrix2, SMatrix, SVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type StateVec = SVector<f64, 5>;
pub type ControlVec = SVector<f64, 2>;
pub type StateMatrix = SMatrix<f64, 5, 5>;
pub type InputMatrix = SMatrix<f64, 5, 2>;
pub type Gain = SMatrix<f64, 2, 5>;

/// Actuator limit on the steering angle (rad).
pub const STEER_LIMIT: f64 = 0.4;
/// Bound on longitudinal acceleration (m/s²).
pub const ACCEL_LIMIT: f64 = 1.0;
/// Bound on steering rate (rad/s).
pub const STEER_RATE_LIMIT: f64 = 1.0;
/// Wheelbase of the 1/10 scale car (m).
pub const DEFAULT_WHEELBASE: f64 = 0.33;
/// Planning timestep (s).
pub const PLANNING_DT: f64 = 0.1;

#[derive(Debug, Error)]
pub enum DynamicsError {
    #[error("wheelbase must be positive, got {0}")]
    BadWheelbase(f64),
    #[error("R + BᵀPB is not invertible at step {step}; check that R is positive definite")]
    SingularGain { step: usize },
    #[error("trajectory shape mismatch: {0}")]
    Shape(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct VehicleState {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
    pub v: f64,
    pub steer: f64,
}

impl VehicleState {
    pub const fn new(x: f64, y: f64, theta: f64, v: f64, steer: f64) -> Self {
        Self { x, y, theta, v, steer }
    }

    pub fn to_vector(&self) -> StateVec {
        StateVec::new(self.x, self.y, self.theta, self.v, self.steer)
    }

    pub fn from_vector(v: &StateVec) -> Self {
        Self::new(v[0], v[1], v[2], v[3], v[4])
    }

    pub fn position(&self) -> (f64, f64) {
        (self.x, self.y)
    }

    pub fn is_finite(&self) -> bool {
        self.to_vector().iter().all(|c| c.is_finite())
    }

    /// State difference `self - other` with the heading component wrapped.
    pub fn error_from(&self, other: &VehicleState) -> StateVec {
        let mut d = self.to_vector() - other.to_vector();
        d[2] = wrap_angle(d[2]);
        d
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ControlInput {
    pub accel: f64,
    pub steer_rate: f64,
}

impl ControlInput {
    /// Builds a control clamped into the actuator box.
    pub fn new(accel: f64, steer_rate: f64) -> Self {
        Self { accel, steer_rate }.clamped()
    }

    pub fn clamped(self) -> Self {
        Self {
            accel: self.accel.clamp(-ACCEL_LIMIT, ACCEL_LIMIT),
            steer_rate: self.steer_rate.clamp(-STEER_RATE_LIMIT, STEER_RATE_LIMIT),
        }
    }

    pub fn to_vector(&self) -> ControlVec {
        ControlVec::new(self.accel, self.steer_rate)
    }

    pub fn from_vector(v: &ControlVec) -> Self {
        Self::new(v[0], v[1])
    }
}

/// Diagonal process-noise covariance on the state derivative.
///
/// `gamma_diag` is specified for integration at `reference_dt`. Steps taken at
/// another rate rescale the variance by `reference_dt / dt`, so the diffusion
/// accumulated over one reference interval does not depend on the substep count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    pub gamma_diag: [f64; 5],
    #[serde(default = "default_reference_dt")]
    pub reference_dt: f64,
}

fn default_reference_dt() -> f64 {
    PLANNING_DT
}

impl NoiseModel {
    /// Covariance fit to the simulated car.
    pub const SIMULATION: NoiseModel = NoiseModel {
        gamma_diag: [0.0004, 0.0004, 0.0116, 0.1004, 0.0056],
        reference_dt: PLANNING_DT,
    };
    /// Covariance fit to motion-capture data from the hardware car.
    pub const HARDWARE: NoiseModel = NoiseModel {
        gamma_diag: [0.001, 0.001, 0.014, 0.079, 0.006],
        reference_dt: PLANNING_DT,
    };

    pub const fn zero() -> Self {
        NoiseModel { gamma_diag: [0.0; 5], reference_dt: PLANNING_DT }
    }

    pub fn is_zero(&self) -> bool {
        self.gamma_diag.iter().all(|&g| g == 0.0)
    }

    pub fn is_valid(&self) -> bool {
        self.gamma_diag.iter().all(|&g| g >= 0.0 && g.is_finite()) && self.reference_dt > 0.0
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R, dt: f64) -> StateVec {
        let scale = self.reference_dt / dt;
        let mut w = StateVec::zeros();
        for (k, &g) in self.gamma_diag.iter().enumerate() {
            if g > 0.0 {
                let z: f64 = rng.sample(StandardNormal);
                w[k] = (g * scale).sqrt() * z;
            }
        }
        w
    }
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self::SIMULATION
    }
}

/// Continuous-time state derivative `f(x, u)`.
pub fn dynamics_deriv(state: &VehicleState, control: &ControlInput, wheelbase: f64) -> StateVec {
    debug_assert!(wheelbase > 0.0);
    let (s, c) = state.theta.sin_cos();
    StateVec::new(
        state.v * c,
        state.v * s,
        state.v * state.steer.tan() / wheelbase,
        control.accel,
        control.steer_rate,
    )
}

fn integrate(state: &VehicleState, deriv: &StateVec, dt: f64) -> VehicleState {
    let mut next = VehicleState::from_vector(&(state.to_vector() + deriv * dt));
    next.steer = next.steer.clamp(-STEER_LIMIT, STEER_LIMIT);
    next
}

/// Bicycle model parameterised by wheelbase.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BicycleModel {
    pub wheelbase: f64,
}

impl Default for BicycleModel {
    fn default() -> Self {
        Self { wheelbase: DEFAULT_WHEELBASE }
    }
}

impl BicycleModel {
    pub fn new(wheelbase: f64) -> Result<Self, DynamicsError> {
        if wheelbase > 0.0 && wheelbase.is_finite() {
            Ok(Self { wheelbase })
        } else {
            Err(DynamicsError::BadWheelbase(wheelbase))
        }
    }

    pub fn deriv(&self, state: &VehicleState, control: &ControlInput) -> StateVec {
        dynamics_deriv(state, &control.clamped(), self.wheelbase)
    }

    /// Deterministic Euler step.
    pub fn step_nominal(&self, state: &VehicleState, control: &ControlInput, dt: f64) -> VehicleState {
        integrate(state, &self.deriv(state, control), dt)
    }

    /// Euler step with the derivative perturbed by `ω ~ N(0, Γ · reference_dt / dt)`.
    pub fn step_stochastic<R: Rng + ?Sized>(
        &self,
        state: &VehicleState,
        control: &ControlInput,
        noise: &NoiseModel,
        rng: &mut R,
        dt: f64,
    ) -> VehicleState {
        let d = self.deriv(state, control) + noise.sample(rng, dt);
        integrate(state, &d, dt)
    }

    /// Analytic discrete-time Jacobians `A = I + dt ∂f/∂x`, `B = dt ∂f/∂u`.
    pub fn linearize(&self, state: &VehicleState, _control: &ControlInput, dt: f64) -> (StateMatrix, InputMatrix) {
        let (s, c) = state.theta.sin_cos();
        let v = state.v;
        let tan_d = state.steer.tan();
        let sec2 = 1.0 + tan_d * tan_d;
        let l = self.wheelbase;

        let mut jac = StateMatrix::zeros();
        jac[(0, 2)] = -v * s;
        jac[(0, 3)] = c;
        jac[(1, 2)] = v * c;
        jac[(1, 3)] = s;
        jac[(2, 3)] = tan_d / l;
        jac[(2, 4)] = v * sec2 / l;

        let mut b = InputMatrix::zeros();
        b[(3, 0)] = dt;
        b[(4, 1)] = dt;
        (StateMatrix::identity() + jac * dt, b)
    }

    /// Nominal trajectory obtained by applying `controls` open loop from `initial`.
    pub fn nominal_trajectory(&self, initial: VehicleState, controls: &[ControlInput], dt: f64) -> Trajectory {
        let mut states = Vec::with_capacity(controls.len() + 1);
        let mut controls_out = Vec::with_capacity(controls.len());
        states.push(initial);
        let mut x = initial;
        for u in controls {
            let u = u.clamped();
            x = self.step_nominal(&x, &u, dt);
            states.push(x);
            controls_out.push(u);
        }
        Trajectory { states, controls: controls_out, dt }
    }
}

/// State/control sequence with `states.len() == controls.len() + 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub states: Vec<VehicleState>,
    pub controls: Vec<ControlInput>,
    pub dt: f64,
}

impl Trajectory {
    pub fn horizon(&self) -> usize {
        self.controls.len()
    }

    pub fn terminal(&self) -> &VehicleState {
        self.states.last().expect("trajectory has at least one state")
    }

    pub fn is_consistent(&self) -> bool {
        self.states.len() == self.controls.len() + 1
    }
}

/// LQR weights for trajectory tracking.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LqrWeights {
    pub q_diag: [f64; 5],
    pub r_diag: [f64; 2],
    pub qf_diag: [f64; 5],
}

impl Default for LqrWeights {
    fn default() -> Self {
        let q = [10.0, 10.0, 1.0, 1.0, 1.0];
        Self { q_diag: q, r_diag: [1.0, 1.0], qf_diag: q }
    }
}

impl LqrWeights {
    pub fn q(&self) -> StateMatrix {
        StateMatrix::from_diagonal(&StateVec::from(self.q_diag))
    }
    pub fn r(&self) -> Matrix2<f64> {
        Matrix2::from_diagonal(&ControlVec::from(self.r_diag))
    }
    pub fn qf(&self) -> StateMatrix {
        StateMatrix::from_diagonal(&StateVec::from(self.qf_diag))
    }
}

/// Output of the backward Riccati sweep.
#[derive(Debug, Clone)]
pub struct RiccatiSolution {
    /// `gains[t]` for t in 0..N.
    pub gains: Vec<Gain>,
    /// `cost_to_go[t]` for t in 0..=N; the last entry is the terminal weight.
    pub cost_to_go: Vec<StateMatrix>,
}

/// Finite-horizon discrete Riccati recursion for given linearizations.
pub fn riccati_backward(
    a: &[StateMatrix],
    b: &[InputMatrix],
    q: &StateMatrix,
    r: &Matrix2<f64>,
    qf: &StateMatrix,
) -> Result<RiccatiSolution, DynamicsError> {
    if a.len() != b.len() {
        return Err(DynamicsError::Shape(format!("{} A matrices vs {} B matrices", a.len(), b.len())));
    }
    let n = a.len();
    let mut gains = vec![Gain::zeros(); n];
    let mut cost_to_go = vec![StateMatrix::zeros(); n + 1];
    let mut p = *qf;
    cost_to_go[n] = p;
    for t in (0..n).rev() {
        let (at, bt) = (&a[t], &b[t]);
        let btp = bt.transpose() * p;
        let s = r + btp * bt;
        let s_inv = s.try_inverse().ok_or(DynamicsError::SingularGain { step: t })?;
        if !s_inv.iter().all(|v| v.is_finite()) {
            return Err(DynamicsError::SingularGain { step: t });
        }
        let k = s_inv * btp * at;
        let closed = at - bt * k;
        p = q + at.transpose() * p * closed;
        p = (p + p.transpose()) * 0.5;
        gains[t] = k;
        cost_to_go[t] = p;
    }
    Ok(RiccatiSolution { gains, cost_to_go })
}

/// TVLQR gains along `nominal`, linearised with `model`.
pub fn tvlqr_gains(model: &BicycleModel, nominal: &Trajectory, weights: &LqrWeights) -> Result<Vec<Gain>, DynamicsError> {
    if !nominal.is_consistent() {
        return Err(DynamicsError::Shape("|states| != |controls| + 1".into()));
    }
    let (a, b): (Vec<_>, Vec<_>) = nominal
        .controls
        .iter()
        .zip(&nominal.states)
        .map(|(u, x)| model.linearize(x, u, nominal.dt))
        .unzip();
    riccati_backward(&a, &b, &weights.q(), &weights.r(), &weights.qf()).map(|s| s.gains)
}

/// Nominal trajectory plus time-varying feedback gains.
#[derive(Debug, Clone)]
pub struct FeedbackPolicy {
    pub nominal: Trajectory,
    pub gains: Vec<Gain>,
    /// Integration substeps per planning step when executing the policy.
    pub substeps: usize,
}

impl FeedbackPolicy {
    pub fn new(nominal: Trajectory, gains: Vec<Gain>, substeps: usize) -> Result<Self, DynamicsError> {
        if gains.len() != nominal.controls.len() || !nominal.is_consistent() || substeps == 0 {
            return Err(DynamicsError::Shape(format!(
                "{} gains, {} controls, {} states, {} substeps",
                gains.len(),
                nominal.controls.len(),
                nominal.states.len(),
                substeps
            )));
        }
        Ok(Self { nominal, gains, substeps })
    }

    /// Builds the nominal trajectory from `controls` and synthesises its gains.
    pub fn synthesize(
        model: &BicycleModel,
        initial: VehicleState,
        controls: &[ControlInput],
        dt: f64,
        weights: &LqrWeights,
        substeps: usize,
    ) -> Result<Self, DynamicsError> {
        let nominal = model.nominal_trajectory(initial, controls, dt);
        let gains = tvlqr_gains(model, &nominal, weights)?;
        Self::new(nominal, gains, substeps)
    }

    pub fn with_zero_gains(nominal: Trajectory, substeps: usize) -> Result<Self, DynamicsError> {
        let gains = vec![Gain::zeros(); nominal.controls.len()];
        Self::new(nominal, gains, substeps)
    }

    /// Desired state and feedforward control at `(knot, substep)`.
    ///
    /// States are interpolated linearly between knots (heading along the short
    /// arc); the feedforward control is held over the planning step.
    pub fn reference(&self, knot: usize, substep: usize) -> (VehicleState, ControlInput) {
        let x0 = &self.nominal.states[knot];
        let u = self.nominal.controls[knot];
        if substep == 0 {
            return (*x0, u);
        }
        let x1 = &self.nominal.states[knot + 1];
        let frac = substep as f64 / self.substeps as f64;
        let delta = x1.error_from(x0);
        let xd = VehicleState::from_vector(&(x0.to_vector() + delta * frac));
        (xd, u)
    }

    pub fn control(&self, knot: usize, substep: usize, state: &VehicleState) -> ControlInput {
        let (xd, ud) = self.reference(knot, substep);
        let fb = self.gains[knot] * xd.error_from(state);
        ControlInput::new(ud.accel + fb[0], ud.steer_rate + fb[1])
    }
}

/// Runs the first `knots` planning steps of `policy` closed loop under the
/// stochastic model at `dt / substeps`. Returns the state sequence including
/// the initial state (`knots * substeps + 1` entries) and the applied controls.
pub fn simulate_closed_loop<R: Rng + ?Sized>(
    model: &BicycleModel,
    policy: &FeedbackPolicy,
    initial: VehicleState,
    noise: &NoiseModel,
    rng: &mut R,
    knots: usize,
) -> (Vec<VehicleState>, Vec<ControlInput>) {
    let knots = knots.min(policy.gains.len());
    let sub_dt = policy.nominal.dt / policy.substeps as f64;
    let mut states = Vec::with_capacity(knots * policy.substeps + 1);
    let mut controls = Vec::with_capacity(knots * policy.substeps);
    let mut x = initial;
    states.push(x);
    for t in 0..knots {
        for s in 0..policy.substeps {
            let u = policy.control(t, s, &x);
            x = model.step_stochastic(&x, &u, noise, rng, sub_dt);
            states.push(x);
            controls.push(u);
        }
    }
    (states, controls)
}

/// Closed-loop rollout of the full policy horizon, reported at planning resolution.
pub fn rollout_policy<R: Rng + ?Sized>(
    model: &BicycleModel,
    policy: &FeedbackPolicy,
    initial: VehicleState,
    noise: &NoiseModel,
    rng: &mut R,
) -> Trajectory {
    let n = policy.gains.len();
    let (fine, fine_u) = simulate_closed_loop(model, policy, initial, noise, rng, n);
    let states = fine.iter().step_by(policy.substeps).copied().collect();
    let controls = fine_u.iter().step_by(policy.substeps).copied().collect();
    Trajectory { states, controls, dt: policy.nominal.dt }
}

/// Wraps an angle into (-π, π].
pub fn wrap_angle(a: f64) -> f64 {
    use std::f64::consts::PI;
    let mut r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r -= 2.0 * PI;
    }
    r
}
