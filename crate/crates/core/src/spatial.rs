//! Path-parametric reformulation of the quadrotor model.
//!
//! Position and velocity are replaced by progress `s` along the reference
//! path, transverse offsets `w = (w1, w2)` on the frame normal/binormal,
//! and their rates. Attitude, body rates and rotor thrusts stay in their
//! world/body form; thrust rates are the inputs.
//!
//! The rate equations are the exact time derivatives of the closest-point
//! projection under the cached frame evaluators (see
//! [`crate::geometry::PathKinematics`]), so integrating them and mapping
//! back to world coordinates reproduces a world-frame integration up to
//! integrator truncation.

use nalgebra::{Quaternion, UnitQuaternion, Vector2, Vector3, Vector4};

use crate::dynamics::{
    normalize_quat_slice, thrust_torque_map, QuadParams, Rk4Workspace, RotorThrusts, WorldState,
};
use crate::error::{Error, Result};
use crate::geometry::{PathKinematics, PathSpline};

/// Flat layout: [s, w1, w2, sdot, w1dot, w2dot, q(4), omega(3), eta(4)].
pub const SPATIAL_DIM: usize = 17;
pub const SPATIAL_QUAT_INDEX: usize = 6;
/// Index of the first rotor-thrust state in the flat layout.
pub const SPATIAL_ETA_INDEX: usize = 13;

/// The progress-rate denominator must stay above this margin.
pub const GUARD_MARGIN: f64 = 1e-3;

/// Quadrotor state in path coordinates, rotor thrusts appended as states.
#[derive(Debug, Clone, Copy)]
pub struct SpatialState {
    pub s: f64,
    pub w: Vector2<f64>,
    pub s_dot: f64,
    pub w_dot: Vector2<f64>,
    pub attitude: UnitQuaternion<f64>,
    pub body_rates: Vector3<f64>,
    pub eta: RotorThrusts,
}

impl SpatialState {
    pub fn to_vector(&self) -> [f64; SPATIAL_DIM] {
        let mut x = [0.0; SPATIAL_DIM];
        x[0] = self.s;
        x[1] = self.w.x;
        x[2] = self.w.y;
        x[3] = self.s_dot;
        x[4] = self.w_dot.x;
        x[5] = self.w_dot.y;
        let q = self.attitude.quaternion();
        x[6] = q.w;
        x[7] = q.i;
        x[8] = q.j;
        x[9] = q.k;
        x[10..13].copy_from_slice(self.body_rates.as_slice());
        x[13..17].copy_from_slice(self.eta.0.as_slice());
        x
    }

    pub fn from_vector(x: &[f64]) -> Self {
        debug_assert_eq!(x.len(), SPATIAL_DIM);
        Self {
            s: x[0],
            w: Vector2::new(x[1], x[2]),
            s_dot: x[3],
            w_dot: Vector2::new(x[4], x[5]),
            attitude: UnitQuaternion::from_quaternion(Quaternion::new(x[6], x[7], x[8], x[9])),
            body_rates: Vector3::new(x[10], x[11], x[12]),
            eta: RotorThrusts(Vector4::new(x[13], x[14], x[15], x[16])),
        }
    }

    /// At rest on the path at `s` with hover thrusts and level attitude.
    pub fn hover_on_path(s: f64, params: &QuadParams) -> Self {
        Self {
            s,
            w: Vector2::zeros(),
            s_dot: 0.0,
            w_dot: Vector2::zeros(),
            attitude: UnitQuaternion::identity(),
            body_rates: Vector3::zeros(),
            eta: RotorThrusts::hover(params),
        }
    }
}

/// Time derivative of every [`SpatialState`] field.
#[derive(Debug, Clone, Copy)]
pub struct SpatialDerivative {
    pub s_dot: f64,
    pub w_dot: Vector2<f64>,
    pub s_ddot: f64,
    pub w_ddot: Vector2<f64>,
    pub attitude_rate: Quaternion<f64>,
    pub body_rate_dot: Vector3<f64>,
    pub eta_rate: Vector4<f64>,
}

fn guard_check(kin: &PathKinematics, w1: f64, w2: f64) -> Result<f64> {
    let denom = kin.progress_denominator(w1, w2);
    if denom <= GUARD_MARGIN {
        Err(Error::Singularity {
            s: kin.s,
            w1,
            margin: denom,
        })
    } else {
        Ok(denom)
    }
}

/// Project a world state into path coordinates.
pub fn world_to_spatial(
    world: &WorldState,
    eta: &RotorThrusts,
    spline: &PathSpline,
    s_guess: f64,
) -> Result<SpatialState> {
    let proj = spline.closest_point(&world.position, s_guess)?;
    let kin = spline.kinematics(proj.s);
    let d = world.position - kin.gamma;
    let w1 = kin.normal.dot(&d);
    let w2 = kin.binormal.dot(&d);
    let denom = guard_check(&kin, w1, w2)?;
    let s_dot = kin.tangent.dot(&world.velocity) / denom;
    let w1_dot = kin.normal.dot(&world.velocity) + kin.sigma * s_dot * w2;
    let w2_dot = kin.binormal.dot(&world.velocity) - kin.sigma * s_dot * w1;
    Ok(SpatialState {
        s: proj.s,
        w: Vector2::new(w1, w2),
        s_dot,
        w_dot: Vector2::new(w1_dot, w2_dot),
        attitude: world.attitude,
        body_rates: world.body_rates,
        eta: *eta,
    })
}

/// Reconstruct the world position and velocity from path coordinates.
pub fn spatial_to_world(state: &SpatialState, spline: &PathSpline) -> Result<WorldState> {
    if state.s < -1e-9 || state.s > spline.length() + 1e-9 {
        return Err(Error::OutOfRange {
            s: state.s,
            length: spline.length(),
        });
    }
    let kin = spline.kinematics(state.s);
    guard_check(&kin, state.w.x, state.w.y)?;
    let position = kin.gamma + kin.normal * state.w.x + kin.binormal * state.w.y;
    let velocity = reconstruct_velocity(&kin, &state.w, state.s_dot, &state.w_dot);
    Ok(WorldState {
        position,
        velocity,
        attitude: state.attitude,
        body_rates: state.body_rates,
    })
}

/// Velocity via the chain rule on p = gamma(s) + w1 n(s) + w2 b(s).
#[inline]
fn reconstruct_velocity(
    kin: &PathKinematics,
    w: &Vector2<f64>,
    s_dot: f64,
    w_dot: &Vector2<f64>,
) -> Vector3<f64> {
    kin.gamma_d * s_dot
        + (kin.normal_d * w.x + kin.binormal_d * w.y) * s_dot
        + kin.normal * w_dot.x
        + kin.binormal * w_dot.y
}

/// Spatial equations of motion; thrust rates are the input.
pub fn spatial_dynamics(
    state: &SpatialState,
    eta_rate: &Vector4<f64>,
    spline: &PathSpline,
    params: &QuadParams,
) -> Result<SpatialDerivative> {
    let x = state.to_vector();
    let mut dx = [0.0; SPATIAL_DIM];
    spatial_dynamics_flat(&x, eta_rate.as_slice(), spline, params, &mut dx)?;
    Ok(SpatialDerivative {
        s_dot: dx[0],
        w_dot: Vector2::new(dx[1], dx[2]),
        s_ddot: dx[3],
        w_ddot: Vector2::new(dx[4], dx[5]),
        attitude_rate: Quaternion::new(dx[6], dx[7], dx[8], dx[9]),
        body_rate_dot: Vector3::new(dx[10], dx[11], dx[12]),
        eta_rate: Vector4::new(dx[13], dx[14], dx[15], dx[16]),
    })
}

/// Flat-vector form of [`spatial_dynamics`] for integrators and Jacobians.
pub fn spatial_dynamics_flat(
    x: &[f64],
    u: &[f64],
    spline: &PathSpline,
    params: &QuadParams,
    dx: &mut [f64],
) -> Result<()> {
    let (s, w1, w2) = (x[0], x[1], x[2]);
    let (s_dot, w1_dot, w2_dot) = (x[3], x[4], x[5]);
    let kin = spline.kinematics(s);
    let denom = guard_check(&kin, w1, w2)?;

    let attitude = UnitQuaternion::from_quaternion(Quaternion::new(x[6], x[7], x[8], x[9]));
    let omega = Vector3::new(x[10], x[11], x[12]);
    let eta = RotorThrusts(Vector4::new(x[13], x[14], x[15], x[16]));

    let w = Vector2::new(w1, w2);
    let w_dot = Vector2::new(w1_dot, w2_dot);
    let velocity = reconstruct_velocity(&kin, &w, s_dot, &w_dot);

    let (force, torque) = thrust_torque_map(&eta, params);
    let v_dot = params.gravity_vector() + attitude * force / params.mass;

    // Progress acceleration: exact d/dt of sdot = t.v / (lambda - w1 k_n - w2 k_b).
    let t_dot_v = kin.tangent_d.dot(&velocity) * s_dot + kin.tangent.dot(&v_dot);
    let denom_rate = kin.lambda_d * s_dot
        - w1_dot * kin.kappa_n
        - w1 * kin.kappa_n_d * s_dot
        - w2_dot * kin.kappa_b
        - w2 * kin.kappa_b_d * s_dot;
    let s_ddot = t_dot_v / denom - kin.tangent.dot(&velocity) * denom_rate / (denom * denom);

    // Transverse accelerations, chain rule on w1dot/w2dot.
    let sigma_rate = kin.sigma_d * s_dot;
    let w1_ddot = kin.normal_d.dot(&velocity) * s_dot
        + kin.normal.dot(&v_dot)
        + sigma_rate * s_dot * w2
        + kin.sigma * (s_ddot * w2 + s_dot * w2_dot);
    let w2_ddot = kin.binormal_d.dot(&velocity) * s_dot
        + kin.binormal.dot(&v_dot)
        - sigma_rate * s_dot * w1
        - kin.sigma * (s_ddot * w1 + s_dot * w1_dot);

    // Attitude and body-rate dynamics as in the world model.
    let q = attitude.quaternion();
    let q_rate = q * Quaternion::new(0.0, omega.x, omega.y, omega.z) * 0.5;
    let inertia_omega = params.inertia_diag.component_mul(&omega);
    let body_rate_dot = (torque - omega.cross(&inertia_omega))
        .component_div(&params.inertia_diag);

    dx[0] = s_dot;
    dx[1] = w1_dot;
    dx[2] = w2_dot;
    dx[3] = s_ddot;
    dx[4] = w1_ddot;
    dx[5] = w2_ddot;
    dx[6] = q_rate.w;
    dx[7] = q_rate.i;
    dx[8] = q_rate.j;
    dx[9] = q_rate.k;
    dx[10] = body_rate_dot.x;
    dx[11] = body_rate_dot.y;
    dx[12] = body_rate_dot.z;
    dx[13..17].copy_from_slice(u);
    Ok(())
}

/// Spatial model bound to a path and vehicle, with a reusable workspace.
#[derive(Debug, Clone)]
pub struct SpatialModel<'a> {
    pub spline: &'a PathSpline,
    pub params: &'a QuadParams,
    workspace: Rk4Workspace,
}

impl<'a> SpatialModel<'a> {
    pub fn new(spline: &'a PathSpline, params: &'a QuadParams) -> Self {
        Self {
            spline,
            params,
            workspace: Rk4Workspace::new(SPATIAL_DIM),
        }
    }

    /// Integrate one interval with `substeps` RK4 steps, renormalizing the
    /// embedded quaternion after each.
    pub fn step(
        &mut self,
        x: &[f64; SPATIAL_DIM],
        u: &[f64],
        dt: f64,
        substeps: usize,
    ) -> Result<[f64; SPATIAL_DIM]> {
        debug_assert!(substeps >= 1);
        let spline = self.spline;
        let params = self.params;
        let h = dt / substeps as f64;
        let mut cur = *x;
        let mut next = [0.0; SPATIAL_DIM];
        for _ in 0..substeps {
            crate::dynamics::rk4_step_into(
                |x, u, dx| spatial_dynamics_flat(x, u, spline, params, dx),
                &cur,
                u,
                h,
                None,
                &mut self.workspace,
                &mut next,
            )?;
            normalize_quat_slice(&mut next[SPATIAL_QUAT_INDEX..SPATIAL_QUAT_INDEX + 4]);
            cur = next;
        }
        Ok(cur)
    }
}
