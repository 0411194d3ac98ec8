//! Multiple-shooting NLP assembly: decision variables over the horizon,
//! least-squares tracking cost, thrust bounds and slack-relaxed tunnel
//! constraints.
//!
//! The tracked reference advances the progress state at a (deliberately
//! slightly infeasible) constant rate and rides the corridor center line;
//! everything else is weighted so lightly it is effectively free.

use nalgebra::{SVector, Vector2};
use serde::{Deserialize, Serialize};

use crate::dynamics::QuadParams;
use crate::error::{Error, Result};
use crate::geometry::PathSpline;
use crate::spatial::{SpatialState, GUARD_MARGIN, SPATIAL_DIM, SPATIAL_ETA_INDEX};
use crate::tunnel::Tunnel;

pub const STATE_DIM: usize = SPATIAL_DIM;
pub const INPUT_DIM: usize = 4;

pub type StateVector = SVector<f64, STATE_DIM>;
pub type InputVector = SVector<f64, INPUT_DIM>;

/// Diagonal weights of the least-squares cost plus slack penalties.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NlpWeights {
    /// Stage state weights over [s, w(2), sdot, wdot(2), q(4), omega(3), eta(4)].
    pub state: Vec<f64>,
    /// Input (thrust-rate) weights.
    pub input: Vec<f64>,
    /// Terminal state weights.
    pub terminal: Vec<f64>,
    /// Linear slack penalty [1/m].
    pub slack_linear: f64,
    /// Quadratic slack penalty [1/m^2].
    pub slack_quadratic: f64,
}

impl Default for NlpWeights {
    fn default() -> Self {
        let mut state = vec![1e-10; STATE_DIM];
        state[0] = 10.0;
        state[3] = 1.0;
        state[4] = 1.0;
        state[5] = 1.0;
        for i in SPATIAL_ETA_INDEX..STATE_DIM {
            state[i] = 1e-3;
        }
        let mut terminal = vec![1e-10; STATE_DIM];
        terminal[3] = 1.0;
        terminal[4] = 10.0;
        terminal[5] = 10.0;
        for i in SPATIAL_ETA_INDEX..STATE_DIM {
            terminal[i] = 1e-3;
        }
        Self {
            state,
            input: vec![1.0; INPUT_DIM],
            terminal,
            slack_linear: 1e3,
            slack_quadratic: 1e4,
        }
    }
}

impl NlpWeights {
    pub fn validate(&self) -> Result<()> {
        if self.state.len() != STATE_DIM || self.terminal.len() != STATE_DIM {
            return Err(Error::InvalidInput(format!(
                "state weight vectors must have {STATE_DIM} entries"
            )));
        }
        if self.input.len() != INPUT_DIM {
            return Err(Error::InvalidInput(format!(
                "input weight vector must have {INPUT_DIM} entries"
            )));
        }
        if self
            .state
            .iter()
            .chain(self.terminal.iter())
            .any(|w| *w < 0.0)
        {
            return Err(Error::InvalidInput("state weights must be >= 0".into()));
        }
        if self.input.iter().any(|w| *w <= 0.0) {
            return Err(Error::InvalidInput(
                "input weights must be > 0 (Gauss-Newton regularity)".into(),
            ));
        }
        if self.slack_linear < 0.0 || self.slack_quadratic < 0.0 {
            return Err(Error::InvalidInput("slack penalties must be >= 0".into()));
        }
        Ok(())
    }
}

/// Reference states along the horizon: progress ramps at `s_dot_ref`, the
/// transverse target rides the corridor center, rotor thrusts sit at hover
/// (so regulation has a cost-free equilibrium), everything else is zero
/// apart from the identity attitude.
pub fn build_reference(
    s0: f64,
    s_dot_ref: f64,
    horizon: f64,
    n_stages: usize,
    centerline: &dyn Fn(f64) -> Vector2<f64>,
    s_max: f64,
    eta_ref: f64,
) -> Vec<StateVector> {
    debug_assert!(n_stages >= 1);
    (0..=n_stages)
        .map(|k| {
            let s_ref =
                (s0 + s_dot_ref * horizon * k as f64 / n_stages as f64).clamp(0.0, s_max);
            let c = centerline(s_ref);
            let mut x = StateVector::zeros();
            x[0] = s_ref;
            x[1] = c.x;
            x[2] = c.y;
            x[3] = s_dot_ref;
            x[6] = 1.0; // identity attitude, effectively unweighted
            for i in SPATIAL_ETA_INDEX..STATE_DIM {
                x[i] = eta_ref;
            }
            x
        })
        .collect()
}

/// Horizon discretization and bounds for one NMPC solve.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct HorizonConfig {
    /// Prediction horizon [s].
    pub horizon: f64,
    /// Shooting stages.
    pub stages: usize,
    /// RK4 substeps per shooting interval.
    pub substeps: usize,
    /// Reference progress rate [m/s].
    pub s_dot_ref: f64,
}

impl Default for HorizonConfig {
    fn default() -> Self {
        Self {
            horizon: 1.0,
            stages: 50,
            substeps: 2,
            s_dot_ref: 40.0,
        }
    }
}

impl HorizonConfig {
    pub fn dt(&self) -> f64 {
        self.horizon / self.stages as f64
    }
}

/// One NMPC subproblem: current-state pin, references, corridor handle.
pub struct NlpProblem<'a> {
    pub x_current: [f64; STATE_DIM],
    pub reference: Vec<StateVector>,
    pub weights: NlpWeights,
    pub horizon: HorizonConfig,
    pub tunnel: &'a Tunnel,
    pub spline: &'a PathSpline,
    pub params: &'a QuadParams,
}

/// Assemble the stage problem at the current state.
pub fn assemble_nlp<'a>(
    x_current: &SpatialState,
    tunnel: &'a Tunnel,
    spline: &'a PathSpline,
    params: &'a QuadParams,
    weights: NlpWeights,
    horizon: HorizonConfig,
) -> Result<NlpProblem<'a>> {
    weights.validate()?;
    let x = x_current.to_vector();
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput(
            "current state pin contains non-finite values".into(),
        ));
    }
    let kin = spline.kinematics(x_current.s);
    if kin.progress_denominator(x_current.w.x, x_current.w.y) <= GUARD_MARGIN {
        return Err(Error::Singularity {
            s: x_current.s,
            w1: x_current.w.x,
            margin: kin.progress_denominator(x_current.w.x, x_current.w.y),
        });
    }
    let reference = build_reference(
        x_current.s,
        horizon.s_dot_ref,
        horizon.horizon,
        horizon.stages,
        &|s| tunnel.center(s),
        spline.length(),
        params.hover_thrust(),
    );
    Ok(NlpProblem {
        x_current: x,
        reference,
        weights,
        horizon,
        tunnel,
        spline,
        params,
    })
}

impl<'a> NlpProblem<'a> {
    pub fn stages(&self) -> usize {
        self.horizon.stages
    }

    pub fn faces(&self) -> usize {
        self.tunnel.spec.faces()
    }

    /// Two-sided per-rotor box constraints over the horizon.
    pub fn thrust_bound_rows(&self) -> usize {
        2 * INPUT_DIM * self.stages()
    }

    /// Slack-relaxed tunnel rows over the horizon.
    pub fn tunnel_rows(&self) -> usize {
        self.faces() * self.stages()
    }

    /// Slack nonnegativity rows over the horizon.
    pub fn slack_rows(&self) -> usize {
        self.faces() * self.stages()
    }

    /// Full nonlinear objective of a trajectory (no 1/2 factor).
    pub fn objective(&self, traj: &Trajectory) -> f64 {
        let n = self.stages();
        let mut cost = 0.0;
        for k in 0..n {
            let dx = state_residual(&traj.states[k], &self.reference[k]);
            for i in 0..STATE_DIM {
                cost += self.weights.state[i] * dx[i] * dx[i];
            }
            for i in 0..INPUT_DIM {
                cost += self.weights.input[i] * traj.inputs[k][i] * traj.inputs[k][i];
            }
            for sl in traj.slacks[k].iter() {
                cost += self.weights.slack_linear * sl
                    + self.weights.slack_quadratic * sl * sl;
            }
        }
        let dx = state_residual(&traj.states[n], &self.reference[n]);
        for i in 0..STATE_DIM {
            cost += self.weights.terminal[i] * dx[i] * dx[i];
        }
        cost
    }
}

#[inline]
pub fn state_residual(x: &[f64; STATE_DIM], reference: &StateVector) -> [f64; STATE_DIM] {
    let mut out = [0.0; STATE_DIM];
    for i in 0..STATE_DIM {
        out[i] = x[i] - reference[i];
    }
    out
}

/// Decision trajectory over the horizon: N+1 states, N inputs, N slack
/// vectors (one per tunnel face per stage).
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub states: Vec<[f64; STATE_DIM]>,
    pub inputs: Vec<[f64; INPUT_DIM]>,
    pub slacks: Vec<Vec<f64>>,
}

impl Trajectory {
    pub fn hold(x0: [f64; STATE_DIM], n_stages: usize, faces: usize) -> Self {
        Self {
            states: vec![x0; n_stages + 1],
            inputs: vec![[0.0; INPUT_DIM]; n_stages],
            slacks: vec![vec![0.0; faces]; n_stages],
        }
    }
}
