//! Gauss-Newton SQP over the multiple-shooting NLP, in two modes: fully
//! converged SQP with an L1-merit line search, and the real-time iteration
//! (one linearization, one QP, full step) with warm-start shifting.

pub mod dense_oracle;
pub mod qp;

use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ocp::{NlpProblem, Trajectory, INPUT_DIM, STATE_DIM};
use crate::spatial::{SpatialModel, GUARD_MARGIN, SPATIAL_ETA_INDEX};
use qp::{IpmSettings, KktResiduals, QpProblem, QpStage, QpTerminal};

/// Solver knobs; defaults pin the tolerances of the whole pipeline.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SolverConfig {
    /// SQP convergence threshold on the NLP KKT residuals.
    pub kkt_tolerance: f64,
    pub max_sqp_iterations: usize,
    pub max_backtracks: usize,
    pub backtrack_factor: f64,
    /// Forward-difference step for dynamics sensitivities.
    pub fd_step: f64,
    /// Levenberg shift added to every Hessian block.
    pub levenberg: f64,
    /// QP feasibility/complementarity tolerance for the NMPC subproblems.
    /// Slack penalties put the cost gradients at 1e3-1e4, so 1e-6 absolute
    /// is ~1e-9 relative and well below what the outer SQP tolerance needs;
    /// the solver itself defaults to 1e-8 when driven directly.
    pub qp_tolerance: f64,
    /// QP stationarity tolerance for the NMPC subproblems.
    pub qp_stationarity_tolerance: f64,
    pub qp_max_iterations: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            kkt_tolerance: 1e-6,
            max_sqp_iterations: 100,
            max_backtracks: 10,
            backtrack_factor: 0.5,
            fd_step: 1e-6,
            levenberg: 1e-8,
            qp_tolerance: 1e-6,
            qp_stationarity_tolerance: 1e-6,
            qp_max_iterations: 50,
        }
    }
}

impl SolverConfig {
    fn ipm(&self) -> IpmSettings {
        IpmSettings {
            tolerance: self.qp_tolerance,
            stationarity_tolerance: self.qp_stationarity_tolerance,
            max_iterations: self.qp_max_iterations,
            ..IpmSettings::default()
        }
    }
}

/// Previous solution plus duals, shifted between control steps.
#[derive(Debug, Clone)]
pub struct WarmStart {
    pub trajectory: Trajectory,
    pub eq_duals: Vec<DVector<f64>>,
    pub ineq_duals: Vec<DVector<f64>>,
}

impl WarmStart {
    pub fn cold(trajectory: Trajectory) -> Self {
        let n = trajectory.inputs.len();
        Self {
            trajectory,
            eq_duals: vec![DVector::zeros(STATE_DIM); n],
            ineq_duals: Vec::new(),
        }
    }

    /// Shift every stage one step forward, duplicating the terminal stage.
    pub fn shifted(&self) -> Self {
        let n = self.trajectory.inputs.len();
        let mut states = Vec::with_capacity(n + 1);
        for k in 0..=n {
            states.push(self.trajectory.states[(k + 1).min(n)]);
        }
        let mut inputs = Vec::with_capacity(n);
        for k in 0..n {
            inputs.push(self.trajectory.inputs[(k + 1).min(n - 1)]);
        }
        let mut slacks = Vec::with_capacity(n);
        for k in 0..n {
            slacks.push(self.trajectory.slacks[(k + 1).min(n - 1)].clone());
        }
        let mut eq_duals = Vec::with_capacity(n);
        for k in 0..n {
            eq_duals.push(self.eq_duals[(k + 1).min(n - 1)].clone());
        }
        let ineq_duals = if self.ineq_duals.is_empty() {
            Vec::new()
        } else {
            let mut duals = Vec::with_capacity(n + 1);
            for k in 0..=n {
                duals.push(self.ineq_duals[(k + 1).min(n)].clone());
            }
            duals
        };
        Self {
            trajectory: Trajectory {
                states,
                inputs,
                slacks,
            },
            eq_duals,
            ineq_duals,
        }
    }
}

/// First-stage command extracted from a solution: the thrust-rate input and
/// the stage-end thrusts it integrates to.
#[derive(Debug, Clone, Copy)]
pub struct Command {
    pub eta_rate: [f64; INPUT_DIM],
    pub eta_next: [f64; INPUT_DIM],
}

/// Optimized trajectory with convergence and timing diagnostics.
#[derive(Debug, Clone)]
pub struct NmpcSolution {
    pub trajectory: Trajectory,
    pub kkt: KktResiduals,
    pub iterations: usize,
    pub solve_time: Duration,
    pub converged: bool,
    pub objective: f64,
    pub max_slack: f64,
    pub max_defect: f64,
    /// Stages whose linearization point needed a guard projection.
    pub guard_projections: usize,
}

/// Finite-difference linearization of an arbitrary discrete step map.
///
/// Forward differences with the configured step; columns of `a` over the
/// state, columns of `b` over the input.
pub fn linearize_step<F>(
    mut step: F,
    x: &[f64],
    u: &[f64],
    fd_step: f64,
) -> Result<(DMatrix<f64>, DMatrix<f64>, Vec<f64>)>
where
    F: FnMut(&[f64], &[f64]) -> Result<Vec<f64>>,
{
    let nx = x.len();
    let nu = u.len();
    let base = step(x, u)?;
    let mut a = DMatrix::zeros(nx, nx);
    let mut b = DMatrix::zeros(nx, nu);
    let mut xp = x.to_vec();
    for j in 0..nx {
        xp[j] += fd_step;
        let pert = step(&xp, u)?;
        xp[j] = x[j];
        for i in 0..nx {
            a[(i, j)] = (pert[i] - base[i]) / fd_step;
        }
    }
    let mut up = u.to_vec();
    for j in 0..nu {
        up[j] += fd_step;
        let pert = step(x, &up)?;
        up[j] = u[j];
        for i in 0..nx {
            b[(i, j)] = (pert[i] - base[i]) / fd_step;
        }
    }
    if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
        return Err(Error::SolverAbort("non-finite sensitivities".into()));
    }
    Ok((a, b, base))
}

/// Per-stage linearization of the NLP around an iterate.
pub struct QpData {
    pub problem: QpProblem,
    /// Shooting defects at the iterate, per stage.
    pub defects: Vec<DVector<f64>>,
    pub guard_projections: usize,
}

/// The NMPC solver: owns workspaces and tolerances. One instance per
/// control loop; instances are independent.
pub struct NmpcSolver {
    pub config: SolverConfig,
    merit_penalty: f64,
}

impl NmpcSolver {
    pub fn new(config: SolverConfig) -> Self {
        Self {
            config,
            merit_penalty: 1.0,
        }
    }

    /// Clamp the transverse offset of a linearization point back inside the
    /// progress-rate guard; returns true when a projection was applied.
    fn project_to_guard(nlp: &NlpProblem, x: &mut [f64; STATE_DIM]) -> bool {
        let kin = nlp.spline.kinematics(x[0]);
        let target = 5.0 * GUARD_MARGIN;
        let denom = kin.progress_denominator(x[1], x[2]);
        if denom > target {
            return false;
        }
        if kin.kappa_n.abs() > 1e-9 {
            x[1] = (kin.lambda - x[2] * kin.kappa_b - target) / kin.kappa_n;
        }
        true
    }

    /// Integrate one shooting interval from a stage state.
    fn shoot(
        nlp: &NlpProblem,
        x: &[f64; STATE_DIM],
        u: &[f64; INPUT_DIM],
    ) -> Result<[f64; STATE_DIM]> {
        let mut model = SpatialModel::new(nlp.spline, nlp.params);
        model.step(x, u, nlp.horizon.dt(), nlp.horizon.substeps)
    }

    /// Linearize dynamics, cost and constraints around `traj`.
    pub fn build_qp(&self, nlp: &NlpProblem, traj: &Trajectory) -> Result<QpData> {
        let n = nlp.stages();
        let faces = nlp.faces();
        let nu = INPUT_DIM + faces;
        let lev = self.config.levenberg;
        let dt = nlp.horizon.dt();
        let substeps = nlp.horizon.substeps;
        let mut guard_projections = 0;

        let mut stages = Vec::with_capacity(n);
        let mut defects = Vec::with_capacity(n);
        let mut model = SpatialModel::new(nlp.spline, nlp.params);

        for k in 0..n {
            let mut xk = traj.states[k];
            if Self::project_to_guard(nlp, &mut xk) {
                guard_projections += 1;
            }
            let uk = traj.inputs[k];
            let sk = &traj.slacks[k];

            // Sensitivities of the shooting map by forward differences.
            let (a, b_dyn, base) = {
                let step_fn = |x: &[f64], u: &[f64]| -> Result<Vec<f64>> {
                    let mut xa = [0.0; STATE_DIM];
                    xa.copy_from_slice(x);
                    let mut ua = [0.0; INPUT_DIM];
                    ua.copy_from_slice(u);
                    Ok(model.step(&xa, &ua, dt, substeps)?.to_vec())
                };
                linearize_step(step_fn, &xk, &uk, self.config.fd_step)?
            };
            let defect = DVector::from_fn(STATE_DIM, |i, _| base[i] - traj.states[k + 1][i]);

            // Inputs are [thrust rates; slacks].
            let mut b = DMatrix::zeros(STATE_DIM, nu);
            b.view_mut((0, 0), (STATE_DIM, INPUT_DIM)).copy_from(&b_dyn);

            // Gauss-Newton cost blocks (1/2-form: H = 2 diag(w)).
            let mut q = DMatrix::zeros(STATE_DIM, STATE_DIM);
            let mut q_lin = DVector::zeros(STATE_DIM);
            for i in 0..STATE_DIM {
                q[(i, i)] = 2.0 * nlp.weights.state[i] + lev;
                q_lin[i] = 2.0 * nlp.weights.state[i] * (xk[i] - nlp.reference[k][i]);
            }
            let mut r = DMatrix::zeros(nu, nu);
            let mut r_lin = DVector::zeros(nu);
            for i in 0..INPUT_DIM {
                r[(i, i)] = 2.0 * nlp.weights.input[i] + lev;
                r_lin[i] = 2.0 * nlp.weights.input[i] * uk[i];
            }
            for i in 0..faces {
                r[(INPUT_DIM + i, INPUT_DIM + i)] = 2.0 * nlp.weights.slack_quadratic + lev;
                r_lin[INPUT_DIM + i] =
                    nlp.weights.slack_linear + 2.0 * nlp.weights.slack_quadratic * sk[i];
            }

            // Constraint rows: tunnel (slack-relaxed), slack >= 0, thrust box.
            let rows = nlp.tunnel.spec.rows(xk[0]);
            let n_thrust = if k == 0 { 0 } else { 2 * INPUT_DIM };
            let nc = 2 * faces + n_thrust;
            let mut c = DMatrix::zeros(nc, STATE_DIM);
            let mut d = DMatrix::zeros(nc, nu);
            let mut upper = DVector::zeros(nc);
            for (i, row) in rows.iter().enumerate() {
                let phi = row.a * xk[1] + row.b * xk[2] - row.c - sk[i];
                c[(i, 0)] = row.da * xk[1] + row.db * xk[2] - row.dc;
                c[(i, 1)] = row.a;
                c[(i, 2)] = row.b;
                d[(i, INPUT_DIM + i)] = -1.0;
                upper[i] = -phi;
                // Slack nonnegativity.
                d[(faces + i, INPUT_DIM + i)] = -1.0;
                upper[faces + i] = sk[i];
            }
            if k > 0 {
                for j in 0..INPUT_DIM {
                    let idx = 2 * faces + 2 * j;
                    let eta = xk[SPATIAL_ETA_INDEX + j];
                    c[(idx, SPATIAL_ETA_INDEX + j)] = 1.0;
                    upper[idx] = nlp.params.eta_max - eta;
                    c[(idx + 1, SPATIAL_ETA_INDEX + j)] = -1.0;
                    upper[idx + 1] = eta - nlp.params.eta_min;
                }
            }

            defects.push(defect.clone());
            stages.push(QpStage {
                q,
                s: DMatrix::zeros(nu, STATE_DIM),
                r,
                q_lin,
                r_lin,
                a,
                b,
                residual: defect,
                c,
                d,
                upper,
            });
        }

        // Terminal cost, no constraints.
        let mut q = DMatrix::zeros(STATE_DIM, STATE_DIM);
        let mut q_lin = DVector::zeros(STATE_DIM);
        for i in 0..STATE_DIM {
            q[(i, i)] = 2.0 * nlp.weights.terminal[i] + lev;
            q_lin[i] = 2.0 * nlp.weights.terminal[i] * (traj.states[n][i] - nlp.reference[n][i]);
        }
        let terminal = QpTerminal {
            q,
            q_lin,
            c: DMatrix::zeros(0, STATE_DIM),
            upper: DVector::zeros(0),
        };

        Ok(QpData {
            problem: QpProblem {
                x0: DVector::zeros(STATE_DIM),
                stages,
                terminal,
            },
            defects,
            guard_projections,
        })
    }

    /// L1 constraint violation of a trajectory (defects + tunnel overshoot).
    fn violation(&self, nlp: &NlpProblem, traj: &Trajectory) -> Option<f64> {
        let n = nlp.stages();
        let mut total = 0.0;
        for k in 0..n {
            let next = Self::shoot(nlp, &traj.states[k], &traj.inputs[k]).ok()?;
            for i in 0..STATE_DIM {
                total += (next[i] - traj.states[k + 1][i]).abs();
            }
            let rows = nlp.tunnel.spec.rows(traj.states[k][0]);
            for (i, row) in rows.iter().enumerate() {
                let phi =
                    row.a * traj.states[k][1] + row.b * traj.states[k][2] - row.c;
                total += (phi - traj.slacks[k][i]).max(0.0);
            }
        }
        Some(total)
    }

    fn candidate(traj: &Trajectory, sol: &qp::QpSolution, alpha: f64) -> Trajectory {
        let n = traj.inputs.len();
        let faces = traj.slacks[0].len();
        let mut out = traj.clone();
        for k in 0..=n {
            for i in 0..STATE_DIM {
                out.states[k][i] += alpha * sol.states[k][i];
            }
            crate::dynamics::normalize_quat_slice(&mut out.states[k][6..10]);
        }
        for k in 0..n {
            for i in 0..INPUT_DIM {
                out.inputs[k][i] += alpha * sol.inputs[k][i];
            }
            for i in 0..faces {
                out.slacks[k][i] = (out.slacks[k][i] + alpha * sol.inputs[k][INPUT_DIM + i]).max(0.0);
            }
        }
        out
    }

    /// Full SQP with an L1 merit line search.
    pub fn sqp_solve(
        &mut self,
        nlp: &NlpProblem,
        init: &WarmStart,
    ) -> Result<(NmpcSolution, WarmStart)> {
        let start = Instant::now();
        let mut traj = init.trajectory.clone();
        traj.states[0] = nlp.x_current;
        let mut eq_duals = init.eq_duals.clone();
        let mut ineq_duals = init.ineq_duals.clone();
        let mut guard_projections = 0;
        let mut iterations = 0;
        let mut converged = false;
        let mut last_kkt = KktResiduals::default();

        for _ in 0..self.config.max_sqp_iterations {
            let data = self.build_qp(nlp, &traj)?;
            guard_projections += data.guard_projections;
            let kkt_now = qp::kkt_at_zero(&data.problem, &eq_duals, &ineq_duals);
            last_kkt = kkt_now;
            if kkt_now.max() <= self.config.kkt_tolerance {
                converged = true;
                break;
            }

            let sol = qp::solve_qp(&data.problem, &self.config.ipm())?;
            iterations += 1;

            // A negligible step means the iterate is already stationary up
            // to QP tolerance; take the multipliers and re-check the KKT.
            let step_norm = sol
                .states
                .iter()
                .map(|v| v.amax())
                .chain(sol.inputs.iter().map(|v| v.amax()))
                .fold(0.0f64, f64::max);
            if step_norm <= 1e-9 {
                eq_duals = sol.eq_duals;
                ineq_duals = sol.ineq_duals;
                continue;
            }

            // Exact-penalty weight from the fresh multipliers.
            let mut dual_max: f64 = 0.0;
            for l in &sol.eq_duals {
                dual_max = dual_max.max(l.amax());
            }
            for m in &sol.ineq_duals {
                if m.len() > 0 {
                    dual_max = dual_max.max(m.amax());
                }
            }
            self.merit_penalty = self.merit_penalty.max(1.5 * dual_max + 1.0);

            let viol0 = self
                .violation(nlp, &traj)
                .ok_or_else(|| Error::SolverAbort("iterate not integrable".into()))?;
            let merit0 = nlp.objective(&traj) + self.merit_penalty * viol0;

            // Directional derivative of the merit surrogate.
            let mut grad_dot: f64 = 0.0;
            for (k, stage) in data.problem.stages.iter().enumerate() {
                grad_dot += stage.q_lin.dot(&sol.states[k]) + stage.r_lin.dot(&sol.inputs[k]);
            }
            grad_dot += data.problem.terminal.q_lin.dot(&sol.states[nlp.stages()]);
            let descent = grad_dot - self.merit_penalty * viol0;

            let mut alpha = 1.0;
            let mut accepted = None;
            // Roundoff slop: defects of order machine epsilon get amplified
            // by the penalty weight and must not veto a stationary step.
            let slop = 1e-11 * (1.0 + merit0.abs() + self.merit_penalty);
            for _ in 0..=self.config.max_backtracks {
                let cand = Self::candidate(&traj, &sol, alpha);
                if let Some(viol) = self.violation(nlp, &cand) {
                    let merit = nlp.objective(&cand) + self.merit_penalty * viol;
                    let threshold = merit0 + 1e-4 * alpha * descent.min(0.0) + slop;
                    if merit <= threshold {
                        accepted = Some(cand);
                        break;
                    }
                }
                alpha *= self.config.backtrack_factor;
            }
            match accepted {
                Some(cand) => traj = cand,
                // Line search exhausted: keep the iterate and stop.
                None => break,
            }
            eq_duals = sol.eq_duals;
            ineq_duals = sol.ineq_duals;
        }

        let objective = nlp.objective(&traj);
        let max_slack = traj
            .slacks
            .iter()
            .flat_map(|s| s.iter().copied())
            .fold(0.0f64, f64::max);
        let max_defect = self.max_defect(nlp, &traj);
        let solution = NmpcSolution {
            trajectory: traj.clone(),
            kkt: last_kkt,
            iterations,
            solve_time: start.elapsed(),
            converged,
            objective,
            max_slack,
            max_defect,
            guard_projections,
        };
        Ok((
            solution,
            WarmStart {
                trajectory: traj,
                eq_duals,
                ineq_duals,
            },
        ))
    }

    fn max_defect(&self, nlp: &NlpProblem, traj: &Trajectory) -> f64 {
        let mut worst = 0.0f64;
        for k in 0..nlp.stages() {
            if let Ok(next) = Self::shoot(nlp, &traj.states[k], &traj.inputs[k]) {
                for i in 0..STATE_DIM {
                    worst = worst.max((next[i] - traj.states[k + 1][i]).abs());
                }
            } else {
                return f64::INFINITY;
            }
        }
        worst
    }

    /// One real-time iteration: a single linearization and QP, full step,
    /// then a one-stage shift of the warm start.
    pub fn rti_step(
        &mut self,
        nlp: &NlpProblem,
        warm: &WarmStart,
    ) -> Result<(Command, NmpcSolution, WarmStart)> {
        let start = Instant::now();
        let mut traj = warm.trajectory.clone();
        traj.states[0] = nlp.x_current;

        let data = self.build_qp(nlp, &traj)?;
        let sol = qp::solve_qp(&data.problem, &self.config.ipm())?;
        let updated = Self::candidate(&traj, &sol, 1.0);

        let objective = nlp.objective(&updated);
        let max_slack = updated
            .slacks
            .iter()
            .flat_map(|s| s.iter().copied())
            .fold(0.0f64, f64::max);
        let command = Command {
            eta_rate: updated.inputs[0],
            eta_next: {
                let mut eta = [0.0; INPUT_DIM];
                for i in 0..INPUT_DIM {
                    eta[i] = updated.states[1][SPATIAL_ETA_INDEX + i]
                        .clamp(nlp.params.eta_min, nlp.params.eta_max);
                }
                eta
            },
        };
        let shifted = WarmStart {
            trajectory: updated.clone(),
            eq_duals: sol.eq_duals.clone(),
            ineq_duals: sol.ineq_duals.clone(),
        }
        .shifted();
        let solution = NmpcSolution {
            trajectory: updated,
            kkt: sol.kkt,
            iterations: 1,
            solve_time: start.elapsed(),
            converged: true,
            objective,
            max_slack,
            max_defect: data
                .defects
                .iter()
                .map(|d| d.amax())
                .fold(0.0f64, f64::max),
            guard_projections: data.guard_projections,
        };
        Ok((command, solution, shifted))
    }

    /// Cold-start trajectory: roll the model out with zero thrust rates.
    pub fn rollout(nlp: &NlpProblem) -> Trajectory {
        let n = nlp.stages();
        let faces = nlp.faces();
        let mut traj = Trajectory::hold(nlp.x_current, n, faces);
        let mut model = SpatialModel::new(nlp.spline, nlp.params);
        for k in 0..n {
            match model.step(
                &traj.states[k],
                &[0.0; INPUT_DIM],
                nlp.horizon.dt(),
                nlp.horizon.substeps,
            ) {
                Ok(next) => traj.states[k + 1] = next,
                Err(_) => {
                    // Hold the last valid state for the rest of the horizon.
                    for j in k + 1..=n {
                        traj.states[j] = traj.states[k];
                    }
                    break;
                }
            }
        }
        for k in 0..n {
            let rows = nlp.tunnel.spec.rows(traj.states[k][0]);
            for (i, row) in rows.iter().enumerate() {
                let phi = row.a * traj.states[k][1] + row.b * traj.states[k][2] - row.c;
                traj.slacks[k][i] = phi.max(0.0);
            }
        }
        traj
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::QuadParams;
    use crate::geometry::{fit_path, PathSpline};
    use crate::ocp::{assemble_nlp, HorizonConfig, NlpWeights};
    use crate::spatial::SpatialState;
    use crate::tunnel::{Tunnel, TunnelConfig, TunnelShape};
    use nalgebra::Vector3;

    fn straight_path(len: usize) -> PathSpline {
        let wps: Vec<Vector3<f64>> = (0..=len).map(|i| Vector3::new(i as f64, 0.0, 0.0)).collect();
        fit_path(&wps, 0.3).unwrap()
    }

    fn test_setup(
        len: usize,
        half_width: f64,
        stages: usize,
    ) -> (PathSpline, QuadParams, Tunnel, HorizonConfig) {
        let spline = straight_path(len);
        let params = QuadParams::racing();
        let window_hi = spline.length() - 0.5;
        let tunnel = Tunnel::build(
            &spline,
            TunnelShape::uniform(half_width),
            TunnelConfig {
                faces: 4,
                k_tau: 4,
                stages,
            },
            (0.0, window_hi),
        )
        .unwrap();
        let horizon = HorizonConfig {
            horizon: 0.5,
            stages,
            substeps: 2,
            s_dot_ref: 0.0,
        };
        (spline, params, tunnel, horizon)
    }

    #[test]
    fn linearize_matches_exact_double_integrator() {
        // One RK4 step on a double integrator is the exact discretization.
        let dt = 0.05;
        let step = |x: &[f64], u: &[f64]| -> Result<Vec<f64>> {
            crate::dynamics::rk4_step(
                |x: &[f64], u: &[f64], dx: &mut [f64]| {
                    dx[0] = x[1];
                    dx[1] = u[0];
                    Ok(())
                },
                x,
                u,
                dt,
                None,
            )
        };
        let (a, b, _) = linearize_step(step, &[0.3, -0.2], &[0.4], 1e-6).unwrap();
        let a_exact = DMatrix::from_row_slice(2, 2, &[1.0, dt, 0.0, 1.0]);
        let b_exact = DMatrix::from_row_slice(2, 1, &[0.5 * dt * dt, dt]);
        assert!((a - a_exact).amax() < 1e-6);
        assert!((b - b_exact).amax() < 1e-6);
    }

    #[test]
    fn dynamics_jacobians_match_central_differences() {
        let (spline, params, _tunnel, horizon) = test_setup(30, 1.0, 10);
        let mut x = SpatialState::hover_on_path(5.0, &params).to_vector();
        // A representative moving state.
        x[3] = 3.0;
        x[4] = 0.2;
        x[1] = 0.15;
        x[10] = 0.4;
        let u = [1.0, -0.5, 0.3, 0.2];
        let dt = horizon.dt();
        let step = |x: &[f64], u: &[f64]| -> Result<Vec<f64>> {
            let mut model = SpatialModel::new(&spline, &params);
            let mut xa = [0.0; STATE_DIM];
            xa.copy_from_slice(x);
            let mut ua = [0.0; INPUT_DIM];
            ua.copy_from_slice(u);
            Ok(model.step(&xa, &ua, dt, horizon.substeps)?.to_vec())
        };
        let (a_fwd, b_fwd, _) = linearize_step(&step, &x, &u, 1e-6).unwrap();
        // Central-difference oracle.
        let h = 1e-5;
        let mut a_cd = DMatrix::zeros(STATE_DIM, STATE_DIM);
        for j in 0..STATE_DIM {
            let mut xp = x;
            let mut xm = x;
            xp[j] += h;
            xm[j] -= h;
            let fp = step(&xp, &u).unwrap();
            let fm = step(&xm, &u).unwrap();
            for i in 0..STATE_DIM {
                a_cd[(i, j)] = (fp[i] - fm[i]) / (2.0 * h);
            }
        }
        let mut b_cd = DMatrix::zeros(STATE_DIM, INPUT_DIM);
        for j in 0..INPUT_DIM {
            let mut up = u;
            let mut um = u;
            up[j] += h;
            um[j] -= h;
            let fp = step(&x, &up).unwrap();
            let fm = step(&x, &um).unwrap();
            for i in 0..STATE_DIM {
                b_cd[(i, j)] = (fp[i] - fm[i]) / (2.0 * h);
            }
        }
        let rel_a = (&a_fwd - &a_cd).norm() / a_cd.norm();
        let rel_b = (&b_fwd - &b_cd).norm() / b_cd.norm();
        assert!(rel_a < 1e-4, "A relative error {rel_a}");
        assert!(rel_b < 1e-4, "B relative error {rel_b}");
    }

    #[test]
    fn zero_residual_gradient_vanishes() {
        let (spline, params, tunnel, horizon) = test_setup(30, 1.0, 10);
        let x0 = SpatialState::hover_on_path(5.0, &params);
        let nlp = assemble_nlp(&x0, &tunnel, &spline, &params, NlpWeights::default(), horizon)
            .unwrap();
        let solver = NmpcSolver::new(SolverConfig::default());
        let traj = NmpcSolver::rollout(&nlp);
        let data = solver.build_qp(&nlp, &traj).unwrap();
        for stage in &data.problem.stages {
            assert!(stage.q_lin.amax() <= 1e-8);
            assert!(stage.r_lin.amax() <= 1e-8 + 1e3); // slack linear term stays
        }
        // Gauss-Newton gradient equals the exact gradient at zero residual:
        // thrust-rate and state parts are identically zero.
        for stage in &data.problem.stages {
            for i in 0..INPUT_DIM {
                assert!(stage.r_lin[i].abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn hover_problem_converges_immediately() {
        let (spline, params, tunnel, horizon) = test_setup(30, 1.0, 10);
        let x0 = SpatialState::hover_on_path(5.0, &params);
        let nlp = assemble_nlp(&x0, &tunnel, &spline, &params, NlpWeights::default(), horizon)
            .unwrap();
        let mut solver = NmpcSolver::new(SolverConfig::default());
        let warm = WarmStart::cold(NmpcSolver::rollout(&nlp));
        let (sol, _) = solver.sqp_solve(&nlp, &warm).unwrap();
        assert!(sol.converged);
        assert!(sol.iterations <= 2, "iterations {}", sol.iterations);
        assert!(sol.objective <= 1e-10, "objective {}", sol.objective);
    }

    #[test]
    fn acceleration_problem_respects_bounds() {
        let (spline, params, tunnel, mut horizon) = test_setup(60, 1.0, 15);
        horizon.s_dot_ref = 20.0;
        let x0 = SpatialState::hover_on_path(0.5, &params);
        let nlp = assemble_nlp(
            &x0,
            &tunnel,
            &spline,
            &params,
            NlpWeights::default(),
            horizon,
        )
        .unwrap();
        let mut solver = NmpcSolver::new(SolverConfig::default());
        let warm = WarmStart::cold(NmpcSolver::rollout(&nlp));
        let (sol, _) = solver.sqp_solve(&nlp, &warm).unwrap();
        for x in &sol.trajectory.states[1..] {
            let mut total = 0.0;
            for j in 0..INPUT_DIM {
                let eta = x[SPATIAL_ETA_INDEX + j];
                assert!(eta <= params.eta_max + 1e-6, "eta {eta} over bound");
                assert!(eta >= params.eta_min - 1e-6);
                total += eta;
            }
            assert!(total <= 4.0 * params.eta_max + 1e-6);
        }
        // The progress reference is aggressive: thrust should be working.
        assert!(sol.trajectory.states[nlp.stages()][3] > 1.0);
    }

    #[test]
    fn warm_start_invariance_of_objective() {
        let (spline, params, tunnel, mut horizon) = test_setup(40, 1.0, 12);
        horizon.s_dot_ref = 5.0;
        let mut x0 = SpatialState::hover_on_path(2.0, &params);
        x0.s_dot = 1.0;
        let nlp = assemble_nlp(
            &x0,
            &tunnel,
            &spline,
            &params,
            NlpWeights::default(),
            horizon,
        )
        .unwrap();
        let mut solver_a = NmpcSolver::new(SolverConfig::default());
        let mut solver_b = NmpcSolver::new(SolverConfig::default());
        let warm_a = WarmStart::cold(NmpcSolver::rollout(&nlp));
        let warm_b = WarmStart::cold(Trajectory::hold(
            nlp.x_current,
            nlp.stages(),
            nlp.faces(),
        ));
        let (sol_a, _) = solver_a.sqp_solve(&nlp, &warm_a).unwrap();
        let (sol_b, _) = solver_b.sqp_solve(&nlp, &warm_b).unwrap();
        assert!(sol_a.converged && sol_b.converged);
        let diff = (sol_a.objective - sol_b.objective).abs();
        assert!(
            diff <= 1e-6 * sol_a.objective.abs().max(1.0),
            "objectives {} vs {}",
            sol_a.objective,
            sol_b.objective
        );
    }

    #[test]
    fn rti_is_fixed_point_of_converged_solution() {
        let (spline, params, tunnel, mut horizon) = test_setup(40, 1.0, 12);
        horizon.s_dot_ref = 3.0;
        let mut x0 = SpatialState::hover_on_path(2.0, &params);
        x0.s_dot = 1.5;
        let nlp = assemble_nlp(
            &x0,
            &tunnel,
            &spline,
            &params,
            NlpWeights::default(),
            horizon,
        )
        .unwrap();
        let mut solver = NmpcSolver::new(SolverConfig::default());
        let warm = WarmStart::cold(NmpcSolver::rollout(&nlp));
        let (sol, converged_warm) = solver.sqp_solve(&nlp, &warm).unwrap();
        assert!(sol.converged);
        // An RTI step from the converged solution barely moves the controls.
        let unshifted = WarmStart {
            trajectory: sol.trajectory.clone(),
            eq_duals: converged_warm.eq_duals.clone(),
            ineq_duals: converged_warm.ineq_duals.clone(),
        };
        let (_, rti_sol, _) = solver.rti_step(&nlp, &unshifted).unwrap();
        for k in 0..nlp.stages() {
            for i in 0..INPUT_DIM {
                let delta = (rti_sol.trajectory.inputs[k][i] - sol.trajectory.inputs[k][i]).abs();
                assert!(delta <= 1e-6, "control moved by {delta} at stage {k}");
            }
        }
    }

    #[test]
    fn shift_property() {
        let traj = {
            let mut t = Trajectory::hold([0.0; STATE_DIM], 5, 4);
            for (k, x) in t.states.iter_mut().enumerate() {
                x[0] = k as f64;
            }
            for (k, u) in t.inputs.iter_mut().enumerate() {
                u[0] = 10.0 + k as f64;
            }
            t
        };
        let warm = WarmStart::cold(traj).shifted();
        for k in 0..4 {
            assert_eq!(warm.trajectory.states[k][0], (k + 1) as f64);
            assert_eq!(warm.trajectory.inputs[k][0], 10.0 + (k + 1).min(4) as f64);
        }
        assert_eq!(warm.trajectory.states[5][0], 5.0);
    }

    #[test]
    fn slack_stays_zero_in_comfortable_tunnel() {
        let (spline, params, tunnel, mut horizon) = test_setup(40, 1.5, 12);
        horizon.s_dot_ref = 4.0;
        let mut x0 = SpatialState::hover_on_path(2.0, &params);
        x0.s_dot = 2.0;
        let nlp = assemble_nlp(
            &x0,
            &tunnel,
            &spline,
            &params,
            NlpWeights::default(),
            horizon,
        )
        .unwrap();
        let mut solver = NmpcSolver::new(SolverConfig::default());
        let warm = WarmStart::cold(NmpcSolver::rollout(&nlp));
        let (sol, _) = solver.sqp_solve(&nlp, &warm).unwrap();
        assert!(sol.max_slack <= 1e-8, "max slack {}", sol.max_slack);
    }

    #[test]
    fn objective_non_increasing_across_sqp_iterates() {
        // Run SQP step by step from a feasible rollout and watch the cost.
        let (spline, params, tunnel, mut horizon) = test_setup(40, 1.0, 12);
        horizon.s_dot_ref = 6.0;
        let mut x0 = SpatialState::hover_on_path(1.0, &params);
        x0.s_dot = 0.5;
        let nlp = assemble_nlp(
            &x0,
            &tunnel,
            &spline,
            &params,
            NlpWeights::default(),
            horizon,
        )
        .unwrap();
        let mut config = SolverConfig::default();
        config.max_sqp_iterations = 1;
        let mut warm = WarmStart::cold(NmpcSolver::rollout(&nlp));
        let mut last = f64::INFINITY;
        for _ in 0..8 {
            let mut solver = NmpcSolver::new(config);
            let (sol, next) = solver.sqp_solve(&nlp, &warm).unwrap();
            assert!(
                sol.objective <= last * (1.0 + 1e-9) + 1e-9,
                "objective increased: {last} -> {}",
                sol.objective
            );
            last = sol.objective;
            warm = next;
            if sol.converged {
                break;
            }
        }
    }
}
