//! Run configuration: vehicle, weights, solver, horizon and simulation
//! parameters, JSON-loadable with racing-setup defaults.

use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::dynamics::QuadParams;
use crate::error::{Error, Result};
use crate::ocp::{HorizonConfig, NlpWeights};
use crate::solver::SolverConfig;

/// Solve mode per control step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Fully converged SQP at every step.
    Sqp,
    /// One linearization + QP per step (real-time iteration).
    Rti,
}

impl std::str::FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sqp" => Ok(Mode::Sqp),
            "rti" => Ok(Mode::Rti),
            other => Err(Error::InvalidInput(format!(
                "mode must be `sqp` or `rti`, got `{other}`"
            ))),
        }
    }
}

/// Plant-side simulation parameters.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct SimParams {
    /// Plant integration step [s].
    pub plant_dt: f64,
    /// Abort threshold on wall simulation time [s].
    pub max_time: f64,
    /// Initial progress along the track [m].
    pub start_s: f64,
}

impl Default for SimParams {
    fn default() -> Self {
        Self {
            plant_dt: 1e-3,
            max_time: 60.0,
            start_s: 0.0,
        }
    }
}

/// Complete run configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub quad: QuadParams,
    /// When set, re-derives `quad.eta_max` from this thrust-to-weight ratio.
    pub thrust_to_weight: Option<f64>,
    pub weights: NlpWeights,
    pub solver: SolverConfig,
    pub horizon: HorizonConfig,
    pub sim: SimParams,
    /// Tunnel face count n_p.
    pub tunnel_faces: usize,
    /// Tunnel fidelity factor k_tau.
    pub tunnel_k_tau: usize,
    /// Base corridor half-width when the scenario does not override it [m].
    pub tunnel_half_width: f64,
    /// Path cache knot spacing [m].
    pub knot_spacing: f64,
    pub mode: Mode,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            quad: QuadParams::racing(),
            thrust_to_weight: None,
            weights: NlpWeights::default(),
            solver: SolverConfig::default(),
            horizon: HorizonConfig::default(),
            sim: SimParams::default(),
            tunnel_faces: 4,
            tunnel_k_tau: 10,
            tunnel_half_width: 1.0,
            knot_spacing: 0.3,
            mode: Mode::Rti,
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut config: RunConfig = serde_json::from_str(&text)?;
        config.resolve()?;
        Ok(config)
    }

    /// Apply derived fields and validate the invariants.
    pub fn resolve(&mut self) -> Result<()> {
        if let Some(twr) = self.thrust_to_weight {
            self.quad = self.quad.clone().with_thrust_to_weight(twr);
        }
        self.quad.validate()?;
        self.weights.validate()?;
        if let Some(twr) = self.thrust_to_weight {
            if (self.quad.thrust_to_weight() - twr).abs() > 1e-9 {
                return Err(Error::InvalidInput(
                    "rotor bound inconsistent with thrust-to-weight ratio".into(),
                ));
            }
        }
        if !(self.horizon.horizon > 0.0) || self.horizon.stages == 0 {
            return Err(Error::InvalidInput("horizon must be positive".into()));
        }
        if self.horizon.substeps == 0 {
            return Err(Error::InvalidInput("substeps must be >= 1".into()));
        }
        let control_dt = self.horizon.dt();
        let ratio = control_dt / self.sim.plant_dt;
        if (ratio - ratio.round()).abs() > 1e-9 || ratio < 1.0 {
            return Err(Error::InvalidInput(format!(
                "plant_dt {} must divide the control period {control_dt}",
                self.sim.plant_dt
            )));
        }
        if self.tunnel_faces < 3 {
            return Err(Error::InvalidInput("tunnel_faces must be >= 3".into()));
        }
        if self.tunnel_k_tau == 0 {
            return Err(Error::InvalidInput("tunnel_k_tau must be >= 1".into()));
        }
        if !(self.knot_spacing > 0.0) {
            return Err(Error::InvalidInput("knot_spacing must be positive".into()));
        }
        Ok(())
    }

    /// Plant steps per control period.
    pub fn steps_per_control(&self) -> usize {
        (self.horizon.dt() / self.sim.plant_dt).round() as usize
    }
}
