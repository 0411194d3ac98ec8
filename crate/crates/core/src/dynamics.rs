//! World-frame quadrotor rigid-body model and a shared explicit RK4 integrator.
//!
//! States live in the world frame: position, velocity, a scalar-first unit
//! quaternion (body-to-world) and body rates. Rotor thrusts map to a body
//! wrench through the arm-length / torque-coefficient mixing rows.

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default gravity magnitude along world -z [m/s^2].
pub const GRAVITY: f64 = 9.81;

/// Physical constants of the vehicle.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QuadParams {
    /// Mass [kg].
    pub mass: f64,
    /// Diagonal of the body-frame inertia tensor [kg m^2].
    pub inertia_diag: Vector3<f64>,
    /// Distance from the center of mass to each rotor [m].
    pub arm_length: f64,
    /// Force-to-yaw-torque ratio c_tau [m].
    pub torque_coeff: f64,
    /// Minimum single-rotor thrust [N].
    pub eta_min: f64,
    /// Maximum single-rotor thrust [N].
    pub eta_max: f64,
    /// Gravity magnitude along world -z [m/s^2].
    pub gravity: f64,
}

impl QuadParams {
    /// Racing configuration: thrust-to-weight 6.4, mass 0.76 kg, inertia
    /// diag(3, 3, 5) g m^2, arm length 0.17 m, rotor constant 0.01.
    pub fn racing() -> Self {
        let mass = 0.76;
        let twr = 6.4;
        Self {
            mass,
            inertia_diag: Vector3::new(3.0e-3, 3.0e-3, 5.0e-3),
            arm_length: 0.17,
            torque_coeff: 0.01,
            eta_min: 0.0,
            eta_max: twr * mass * GRAVITY / 4.0,
            gravity: GRAVITY,
        }
    }

    /// Build from a thrust-to-weight ratio, deriving per-rotor `eta_max`.
    pub fn with_thrust_to_weight(mut self, twr: f64) -> Self {
        self.eta_max = twr * self.mass * self.gravity / 4.0;
        self
    }

    /// Thrust-to-weight ratio implied by the per-rotor bound.
    pub fn thrust_to_weight(&self) -> f64 {
        4.0 * self.eta_max / (self.mass * self.gravity)
    }

    /// Per-rotor thrust at hover.
    pub fn hover_thrust(&self) -> f64 {
        self.mass * self.gravity / 4.0
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.mass > 0.0) {
            return Err(Error::InvalidInput("mass must be positive".into()));
        }
        if self.inertia_diag.iter().any(|j| *j <= 0.0) {
            return Err(Error::InvalidInput(
                "inertia components must be positive".into(),
            ));
        }
        if !(self.eta_min >= 0.0 && self.eta_min < self.eta_max) {
            return Err(Error::InvalidInput(format!(
                "rotor bounds must satisfy 0 <= eta_min < eta_max, got [{}, {}]",
                self.eta_min, self.eta_max
            )));
        }
        Ok(())
    }

    pub fn inertia(&self) -> Matrix3<f64> {
        Matrix3::from_diagonal(&self.inertia_diag)
    }

    pub fn gravity_vector(&self) -> Vector3<f64> {
        Vector3::new(0.0, 0.0, -self.gravity)
    }
}

impl Default for QuadParams {
    fn default() -> Self {
        Self::racing()
    }
}

/// World-frame rigid-body state.
#[derive(Debug, Clone, Copy)]
pub struct WorldState {
    /// Position [m].
    pub position: Vector3<f64>,
    /// Velocity [m/s].
    pub velocity: Vector3<f64>,
    /// Attitude, body to world, scalar-first Hamilton convention.
    pub attitude: UnitQuaternion<f64>,
    /// Body rates [rad/s].
    pub body_rates: Vector3<f64>,
}

impl WorldState {
    pub fn at_rest(position: Vector3<f64>) -> Self {
        Self {
            position,
            velocity: Vector3::zeros(),
            attitude: UnitQuaternion::identity(),
            body_rates: Vector3::zeros(),
        }
    }
}

/// Single-rotor thrust commands [N].
#[derive(Debug, Clone, Copy, Default)]
pub struct RotorThrusts(pub Vector4<f64>);

impl RotorThrusts {
    pub fn uniform(eta: f64) -> Self {
        Self(Vector4::repeat(eta))
    }

    /// Hover thrusts for the given vehicle.
    pub fn hover(params: &QuadParams) -> Self {
        Self::uniform(params.hover_thrust())
    }

    pub fn total(&self) -> f64 {
        self.0.sum()
    }

    /// Component-wise clamp to the rotor bounds.
    pub fn clamped(&self, params: &QuadParams) -> Self {
        Self(self.0.map(|e| e.clamp(params.eta_min, params.eta_max)))
    }

    pub fn within_bounds(&self, params: &QuadParams, tol: f64) -> bool {
        self.0
            .iter()
            .all(|e| *e >= params.eta_min - tol && *e <= params.eta_max + tol)
    }
}

/// Map rotor thrusts to the collective body force and torque.
///
/// The force acts along body +z; the roll/pitch rows mix pairs of rotors at
/// lever arm l/sqrt(2) and yaw uses the force-torque coefficient.
pub fn thrust_torque_map(
    eta: &RotorThrusts,
    params: &QuadParams,
) -> (Vector3<f64>, Vector3<f64>) {
    let e = &eta.0;
    let force = Vector3::new(0.0, 0.0, e.sum());
    let lever = params.arm_length / std::f64::consts::SQRT_2;
    let torque = Vector3::new(
        lever * (e[0] + e[1] - e[2] - e[3]),
        lever * (-e[0] + e[1] + e[2] - e[3]),
        params.torque_coeff * (e[0] - e[1] + e[2] - e[3]),
    );
    (force, torque)
}

/// Time derivative of the world-frame state under the given rotor thrusts.
pub fn world_dynamics(
    state: &WorldState,
    eta: &RotorThrusts,
    params: &QuadParams,
) -> WorldDerivative {
    let (force, torque) = thrust_torque_map(eta, params);
    let acceleration = params.gravity_vector() + state.attitude * force / params.mass;
    let omega = state.body_rates;
    // qdot = 1/2 q (x) (0, omega) for body rates in the body frame
    let q = state.attitude.quaternion();
    let omega_quat = Quaternion::new(0.0, omega.x, omega.y, omega.z);
    let attitude_rate = q * omega_quat * 0.5;
    let inertia = params.inertia();
    let rate_dot = Matrix3::from_diagonal(&params.inertia_diag.map(|j| 1.0 / j))
        * (torque - omega.cross(&(inertia * omega)));
    WorldDerivative {
        velocity: state.velocity,
        acceleration,
        attitude_rate,
        body_rate_dot: rate_dot,
    }
}

/// Derivative of every [`WorldState`] field.
#[derive(Debug, Clone, Copy)]
pub struct WorldDerivative {
    pub velocity: Vector3<f64>,
    pub acceleration: Vector3<f64>,
    pub attitude_rate: Quaternion<f64>,
    pub body_rate_dot: Vector3<f64>,
}

/// Location of an embedded quaternion inside a flat state vector, if any.
///
/// The four components starting at the given offset are renormalized after
/// each integration step.
pub type QuatIndex = Option<usize>;

/// Reusable stage buffers for [`rk4_step_into`]; one per solver instance
/// keeps the hot path allocation-free.
#[derive(Debug, Clone)]
pub struct Rk4Workspace {
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    xs: Vec<f64>,
}

impl Rk4Workspace {
    pub fn new(dim: usize) -> Self {
        Self {
            k1: vec![0.0; dim],
            k2: vec![0.0; dim],
            k3: vec![0.0; dim],
            k4: vec![0.0; dim],
            xs: vec![0.0; dim],
        }
    }
}

/// Classic explicit fourth-order Runge-Kutta step on a flat state vector.
///
/// `f(x, u, dx)` writes the state derivative into `dx`. Non-finite
/// derivative components abort with the failing stage index (0..=3).
pub fn rk4_step<F>(f: F, x: &[f64], u: &[f64], dt: f64, quat: QuatIndex) -> Result<Vec<f64>>
where
    F: FnMut(&[f64], &[f64], &mut [f64]) -> Result<()>,
{
    let mut ws = Rk4Workspace::new(x.len());
    let mut out = vec![0.0; x.len()];
    rk4_step_into(f, x, u, dt, quat, &mut ws, &mut out)?;
    Ok(out)
}

/// [`rk4_step`] writing into caller-provided buffers.
pub fn rk4_step_into<F>(
    mut f: F,
    x: &[f64],
    u: &[f64],
    dt: f64,
    quat: QuatIndex,
    ws: &mut Rk4Workspace,
    out: &mut [f64],
) -> Result<()>
where
    F: FnMut(&[f64], &[f64], &mut [f64]) -> Result<()>,
{
    debug_assert!(dt > 0.0, "rk4_step requires dt > 0");
    let n = x.len();
    fn check(k: &[f64], stage: usize) -> Result<()> {
        if k.iter().any(|v| !v.is_finite()) {
            Err(Error::Integration { stage })
        } else {
            Ok(())
        }
    }
    f(x, u, &mut ws.k1)?;
    check(&ws.k1, 0)?;
    for i in 0..n {
        ws.xs[i] = x[i] + 0.5 * dt * ws.k1[i];
    }
    f(&ws.xs, u, &mut ws.k2)?;
    check(&ws.k2, 1)?;
    for i in 0..n {
        ws.xs[i] = x[i] + 0.5 * dt * ws.k2[i];
    }
    f(&ws.xs, u, &mut ws.k3)?;
    check(&ws.k3, 2)?;
    for i in 0..n {
        ws.xs[i] = x[i] + dt * ws.k3[i];
    }
    f(&ws.xs, u, &mut ws.k4)?;
    check(&ws.k4, 3)?;
    for i in 0..n {
        out[i] = x[i] + dt / 6.0 * (ws.k1[i] + 2.0 * ws.k2[i] + 2.0 * ws.k3[i] + ws.k4[i]);
    }
    if let Some(q0) = quat {
        normalize_quat_slice(&mut out[q0..q0 + 4]);
    }
    Ok(())
}

pub(crate) fn normalize_quat_slice(q: &mut [f64]) {
    let norm = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    if norm > 0.0 {
        for c in q.iter_mut() {
            *c /= norm;
        }
    }
}

/// World-frame plant with rotor thrusts appended as states and thrust rates
/// as inputs. Layout: [p(3), v(3), q(4) scalar-first, omega(3), eta(4)].
pub const PLANT_DIM: usize = 17;
pub const PLANT_QUAT_INDEX: usize = 6;

#[derive(Debug, Clone, Copy)]
pub struct PlantState {
    pub world: WorldState,
    pub eta: RotorThrusts,
}

impl PlantState {
    pub fn hover_at(position: Vector3<f64>, params: &QuadParams) -> Self {
        Self {
            world: WorldState::at_rest(position),
            eta: RotorThrusts::hover(params),
        }
    }

    pub fn to_vector(&self) -> [f64; PLANT_DIM] {
        let mut x = [0.0; PLANT_DIM];
        x[0..3].copy_from_slice(self.world.position.as_slice());
        x[3..6].copy_from_slice(self.world.velocity.as_slice());
        let q = self.world.attitude.quaternion();
        x[6] = q.w;
        x[7] = q.i;
        x[8] = q.j;
        x[9] = q.k;
        x[10..13].copy_from_slice(self.world.body_rates.as_slice());
        x[13..17].copy_from_slice(self.eta.0.as_slice());
        x
    }

    pub fn from_vector(x: &[f64]) -> Self {
        debug_assert_eq!(x.len(), PLANT_DIM);
        Self {
            world: WorldState {
                position: Vector3::new(x[0], x[1], x[2]),
                velocity: Vector3::new(x[3], x[4], x[5]),
                attitude: UnitQuaternion::from_quaternion(Quaternion::new(
                    x[6], x[7], x[8], x[9],
                )),
                body_rates: Vector3::new(x[10], x[11], x[12]),
            },
            eta: RotorThrusts(Vector4::new(x[13], x[14], x[15], x[16])),
        }
    }

    /// One RK4 step under a constant thrust-rate input.
    pub fn step(&self, eta_rate: &Vector4<f64>, dt: f64, params: &QuadParams) -> Result<Self> {
        let x = self.to_vector();
        let f = |x: &[f64], u: &[f64], dx: &mut [f64]| -> Result<()> {
            let state = PlantState::from_vector(x);
            let d = world_dynamics(&state.world, &state.eta, params);
            dx[0..3].copy_from_slice(d.velocity.as_slice());
            dx[3..6].copy_from_slice(d.acceleration.as_slice());
            dx[6] = d.attitude_rate.w;
            dx[7] = d.attitude_rate.i;
            dx[8] = d.attitude_rate.j;
            dx[9] = d.attitude_rate.k;
            dx[10..13].copy_from_slice(d.body_rate_dot.as_slice());
            dx[13..17].copy_from_slice(u);
            Ok(())
        };
        let next = rk4_step(f, &x, eta_rate.as_slice(), dt, Some(PLANT_QUAT_INDEX))?;
        Ok(Self::from_vector(&next))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn racing_params_match_thrust_to_weight() {
        let p = QuadParams::racing();
        assert!((p.thrust_to_weight() - 6.4).abs() < 1e-9);
        assert_relative_eq!(p.eta_max, 6.4 * 0.76 * 9.81 / 4.0, epsilon = 1e-12);
        p.validate().unwrap();
    }

    #[test]
    fn symmetric_thrusts_produce_no_torque() {
        let p = QuadParams::racing();
        let (f, tau) = thrust_torque_map(&RotorThrusts::uniform(1.0), &p);
        assert_relative_eq!(f.z, 4.0, epsilon = 1e-12);
        assert_eq!(f.x, 0.0);
        assert_eq!(f.y, 0.0);
        assert!(tau.norm() < 1e-15);
    }

    #[test]
    fn mixing_rows_match_hand_evaluation() {
        // eta = [1,1,0,0], l = 0.17: tau_x = 2 * 0.17 / sqrt(2)
        let p = QuadParams::racing();
        let eta = RotorThrusts(Vector4::new(1.0, 1.0, 0.0, 0.0));
        let (_, tau) = thrust_torque_map(&eta, &p);
        assert_relative_eq!(tau.x, 2.0 * 0.17 / std::f64::consts::SQRT_2, epsilon = 1e-12);
        assert_relative_eq!(tau.x, 0.24041631, epsilon = 1e-7);
        assert_relative_eq!(tau.y, 0.0, epsilon = 1e-15);
        assert_relative_eq!(tau.z, 0.0, epsilon = 1e-15);
    }

    #[test]
    fn thrust_map_is_linear() {
        let p = QuadParams::racing();
        let e1 = RotorThrusts(Vector4::new(1.0, -2.0, 0.5, 3.0));
        let e2 = RotorThrusts(Vector4::new(0.3, 1.7, -0.9, 2.2));
        let (a, b) = (2.5, -1.25);
        let combo = RotorThrusts(e1.0 * a + e2.0 * b);
        let (fc, tc) = thrust_torque_map(&combo, &p);
        let (f1, t1) = thrust_torque_map(&e1, &p);
        let (f2, t2) = thrust_torque_map(&e2, &p);
        assert!((fc - (f1 * a + f2 * b)).norm() == 0.0);
        assert!((tc - (t1 * a + t2 * b)).norm() < 1e-15);
    }

    #[test]
    fn hover_is_an_equilibrium() {
        let p = QuadParams::racing();
        let state = WorldState::at_rest(Vector3::zeros());
        let d = world_dynamics(&state, &RotorThrusts::hover(&p), &p);
        assert!(d.acceleration.norm() < 1e-12);
        assert!(d.body_rate_dot.norm() < 1e-12);
    }

    #[test]
    fn zero_thrust_free_fall() {
        let p = QuadParams::racing();
        let mut state = WorldState::at_rest(Vector3::zeros());
        state.attitude =
            UnitQuaternion::from_axis_angle(&Vector3::x_axis(), 0.7);
        let d = world_dynamics(&state, &RotorThrusts::uniform(0.0), &p);
        assert_relative_eq!(d.acceleration.z, -p.gravity, epsilon = 1e-12);
        assert!(d.acceleration.xy().norm() < 1e-12);
    }

    #[test]
    fn principal_axis_spin_has_no_gyroscopic_torque() {
        let p = QuadParams::racing();
        let mut state = WorldState::at_rest(Vector3::zeros());
        state.body_rates = Vector3::new(0.0, 0.0, 1.0);
        let d = world_dynamics(&state, &RotorThrusts::hover(&p), &p);
        assert!(d.body_rate_dot.norm() < 1e-12);
    }

    #[test]
    fn rk4_exact_for_constant_and_zero_fields() {
        let f_zero = |_: &[f64], _: &[f64], dx: &mut [f64]| {
            dx[0] = 0.0;
            Ok(())
        };
        let out = rk4_step(f_zero, &[3.5], &[], 0.02, None).unwrap();
        assert_eq!(out[0], 3.5);

        let f_one = |_: &[f64], _: &[f64], dx: &mut [f64]| {
            dx[0] = 1.0;
            Ok(())
        };
        let out = rk4_step(f_one, &[1.0], &[], 0.02, None).unwrap();
        assert_eq!(out[0], 1.02);
    }

    #[test]
    fn rk4_matches_exponential_decay() {
        let f = |x: &[f64], _: &[f64], dx: &mut [f64]| {
            dx[0] = -x[0];
            Ok(())
        };
        let out = rk4_step(f, &[1.0], &[], 0.1, None).unwrap();
        assert_relative_eq!(out[0], (-0.1f64).exp(), epsilon = 1e-7);
        assert_relative_eq!(out[0], 0.90483742, epsilon = 1e-7);
    }

    #[test]
    fn rk4_reports_non_finite_stage() {
        let f = |x: &[f64], _: &[f64], dx: &mut [f64]| {
            dx[0] = if x[0] > 1.5 { f64::NAN } else { 10.0 };
            Ok(())
        };
        // First stage is fine (x=1), midpoint stages see x=2 -> NaN at stage 1.
        let err = rk4_step(f, &[1.0], &[], 0.2, None).unwrap_err();
        match err {
            Error::Integration { stage } => assert_eq!(stage, 1),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn quaternion_norm_preserved_over_long_integration() {
        let p = QuadParams::racing();
        let mut state = PlantState::hover_at(Vector3::zeros(), &p);
        state.world.body_rates = Vector3::new(2.0, -1.0, 0.5);
        let mut x = state;
        for _ in 0..10_000 {
            x = x.step(&Vector4::zeros(), 1e-3, &p).unwrap();
            let q = x.world.attitude.quaternion();
            assert!((q.norm() - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn ballistic_energy_conserved() {
        let p = QuadParams::racing();
        let mut state = PlantState::hover_at(Vector3::new(0.0, 0.0, 10.0), &p);
        state.eta = RotorThrusts::uniform(0.0);
        state.world.velocity = Vector3::new(2.0, 0.0, 1.0);
        let energy = |s: &PlantState| {
            0.5 * p.mass * s.world.velocity.norm_squared()
                + p.mass * p.gravity * s.world.position.z
        };
        let e0 = energy(&state);
        let mut x = state;
        for _ in 0..1000 {
            x = x.step(&Vector4::zeros(), 1e-3, &p).unwrap();
        }
        assert!((energy(&x) - e0).abs() / e0.abs() < 1e-6);
    }

    #[test]
    fn rk4_order_check_on_full_model() {
        let p = QuadParams::racing();
        let mut state = PlantState::hover_at(Vector3::zeros(), &p);
        state.world.velocity = Vector3::new(1.0, 0.5, -0.3);
        state.world.body_rates = Vector3::new(3.0, -2.0, 1.0);
        state.eta = RotorThrusts(Vector4::new(2.0, 1.5, 2.5, 1.8));
        let rate = Vector4::new(5.0, -5.0, 2.0, 0.0);

        // One-step error against a tight-dt reference over the same horizon.
        let one_step_error = |dt: f64| {
            let reference = {
                let mut x = state;
                for _ in 0..4000 {
                    x = x.step(&rate, dt / 4000.0, &p).unwrap();
                }
                x.to_vector()
            };
            let x = state.step(&rate, dt, &p).unwrap().to_vector();
            x.iter()
                .zip(reference.iter())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max)
        };
        let ratio = one_step_error(0.02) / one_step_error(0.01);
        assert!(
            ratio > 16.0 && ratio < 64.0,
            "expected ~2^5 error reduction, got ratio {ratio}"
        );
    }
}
