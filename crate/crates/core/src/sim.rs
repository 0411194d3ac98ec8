//! Closed-loop simulation: world-frame plant at a fine timestep, NMPC at
//! the control period, event-driven corridor updates, lap and excursion
//! metrics.
//!
//! Plant and prediction model are the same equations in different charts,
//! so closed-loop behavior isolates the controller; the thrust-rate command
//! is held constant over each control period and integrates to the stage-end
//! thrusts of the plan.

use nalgebra::{Vector2, Vector3, Vector4};
use serde::Serialize;

use crate::config::{Mode, RunConfig};
use crate::dynamics::PlantState;
use crate::error::Result;
use crate::geometry::track::FittedTrack;
use crate::ocp::{assemble_nlp, INPUT_DIM};
use crate::solver::{Command, NmpcSolver, WarmStart};
use crate::spatial::{spatial_to_world, world_to_spatial, SpatialState};
use crate::tunnel::{Tunnel, TunnelConfig, TunnelEvent, TunnelShape};

/// Excursion detection threshold on the worst face residual [m].
pub const EXCURSION_THRESHOLD: f64 = 1e-3;
/// Consecutive plant steps above threshold before an excursion counts.
pub const EXCURSION_DEBOUNCE: usize = 3;

/// One plant-rate log sample.
#[derive(Debug, Clone)]
pub struct LogRow {
    pub t: f64,
    pub plant: PlantState,
    pub s: f64,
    pub w: Vector2<f64>,
    pub s_dot: f64,
    /// Worst tunnel face residual (positive = outside) [m].
    pub phi_max: f64,
}

/// One control-rate solver sample.
#[derive(Debug, Clone, Serialize)]
pub struct SolverStat {
    pub t: f64,
    pub solve_ms: f64,
    pub iterations: usize,
    pub kkt_stationarity: f64,
    pub kkt_feasibility: f64,
    pub kkt_complementarity: f64,
    pub max_slack: f64,
    pub objective: f64,
    pub reused_command: bool,
}

/// A sustained corridor violation.
#[derive(Debug, Clone, Serialize)]
pub struct Excursion {
    pub t_start: f64,
    pub t_end: f64,
    pub max_depth: f64,
}

/// Full run record.
#[derive(Debug, Clone)]
pub struct SimLog {
    pub rows: Vec<LogRow>,
    pub solver_stats: Vec<SolverStat>,
    pub lap_time: Option<f64>,
    pub excursions: Vec<Excursion>,
    pub peak_specific_force: f64,
    pub max_slack: f64,
    pub dnf: Option<String>,
    pub finish_s: f64,
}

impl SimLog {
    pub fn completed(&self) -> bool {
        self.lap_time.is_some()
    }
}

/// Scenario inputs resolved for one run.
pub struct ScenarioRun<'a> {
    pub track: &'a FittedTrack,
    pub shape: TunnelShape,
    pub events: Vec<TunnelEvent>,
    pub config: &'a RunConfig,
}

/// Simulate until lap completion, abort or timeout.
pub fn run_scenario(run: ScenarioRun<'_>) -> Result<SimLog> {
    let config = run.config;
    let spline = &run.track.spline;
    let params = &config.quad;
    let control_dt = config.horizon.dt();
    let plant_steps = config.steps_per_control();
    let plant_dt = config.sim.plant_dt;
    let tunnel_config = TunnelConfig {
        faces: config.tunnel_faces,
        k_tau: config.tunnel_k_tau,
        stages: config.horizon.stages,
    };

    let window = |s: f64, s_dot: f64| -> (f64, f64) {
        let reach = (config.horizon.s_dot_ref * config.horizon.horizon)
            .max(s_dot.abs() * config.horizon.horizon * 1.5)
            .max(2.0);
        let lo = (s - 2.0).max(0.0);
        let hi = (s + reach + 2.0).min(spline.length());
        (lo, hi.max(lo + 1.0))
    };

    // Start hovering on the corridor center line.
    let start_s = config.sim.start_s.clamp(0.0, run.track.finish_s);
    let mut tunnel = Tunnel::build(
        spline,
        run.shape.clone(),
        tunnel_config,
        window(start_s, 0.0),
    )?;
    let mut plant = {
        let kin = spline.kinematics(start_s);
        let center = tunnel.center(start_s);
        let position = kin.gamma + kin.normal * center.x + kin.binormal * center.y;
        PlantState::hover_at(position, params)
    };
    let mut s_guess = start_s;

    let mut solver = NmpcSolver::new(config.solver);
    let mut warm: Option<WarmStart> = None;
    let mut pending_events: Vec<TunnelEvent> = run.events.clone();
    let mut last_command: Option<Command> = None;
    let mut consecutive_failures = 0usize;

    let mut log = SimLog {
        rows: Vec::new(),
        solver_stats: Vec::new(),
        lap_time: None,
        excursions: Vec::new(),
        peak_specific_force: 0.0,
        max_slack: 0.0,
        dnf: None,
        finish_s: run.track.finish_s,
    };

    // Initial sample at t = 0.
    {
        let spatial = world_to_spatial(&plant.world, &plant.eta, spline, s_guess)?;
        s_guess = spatial.s;
        log.rows.push(LogRow {
            t: 0.0,
            plant,
            s: spatial.s,
            w: spatial.w,
            s_dot: spatial.s_dot,
            phi_max: tunnel.spec.max_residual(spatial.s, &spatial.w),
        });
    }

    let mut t = 0.0;
    'outer: while t < config.sim.max_time {
        // Event triggers are checked against time and vehicle progress.
        let mut fired = Vec::new();
        pending_events.retain(|event| {
            if event.trigger.fired(t, s_guess) {
                fired.push(event.clone());
                false
            } else {
                true
            }
        });
        for event in &fired {
            tunnel = tunnel.apply_event(spline, event)?;
        }

        // Project the plant into path coordinates and solve.
        let spatial = match world_to_spatial(&plant.world, &plant.eta, spline, s_guess) {
            Ok(sp) => sp,
            Err(e) => {
                log.dnf = Some(format!("projection failed: {e}"));
                break;
            }
        };
        s_guess = spatial.s;
        tunnel.rebuild(spline, window(spatial.s, spatial.s_dot))?;

        let solve_result = (|| -> Result<(Command, SolverStat, WarmStart)> {
            let nlp = assemble_nlp(
                &spatial,
                &tunnel,
                spline,
                params,
                config.weights.clone(),
                config.horizon,
            )?;
            let warm_now = match &warm {
                Some(w) => {
                    let mut aligned = w.clone();
                    aligned.trajectory.states[0] = nlp.x_current;
                    aligned
                }
                None => WarmStart::cold(NmpcSolver::rollout(&nlp)),
            };
            let (command, solution, next_warm) = match config.mode {
                Mode::Rti => solver.rti_step(&nlp, &warm_now)?,
                Mode::Sqp => {
                    let (solution, next) = solver.sqp_solve(&nlp, &warm_now)?;
                    let command = Command {
                        eta_rate: solution.trajectory.inputs[0],
                        eta_next: {
                            let mut eta = [0.0; INPUT_DIM];
                            for i in 0..INPUT_DIM {
                                eta[i] = solution.trajectory.states[1]
                                    [crate::spatial::SPATIAL_ETA_INDEX + i]
                                    .clamp(params.eta_min, params.eta_max);
                            }
                            eta
                        },
                    };
                    (command, solution, next.shifted())
                }
            };
            let stat = SolverStat {
                t,
                solve_ms: solution.solve_time.as_secs_f64() * 1e3,
                iterations: solution.iterations,
                kkt_stationarity: solution.kkt.stationarity,
                kkt_feasibility: solution
                    .kkt
                    .eq_feasibility
                    .max(solution.kkt.ineq_feasibility),
                kkt_complementarity: solution.kkt.complementarity,
                max_slack: solution.max_slack,
                objective: solution.objective,
                reused_command: false,
            };
            Ok((command, stat, next_warm))
        })();

        let command = match solve_result {
            Ok((command, stat, next_warm)) => {
                log.max_slack = log.max_slack.max(stat.max_slack);
                log.solver_stats.push(stat);
                warm = Some(next_warm);
                consecutive_failures = 0;
                last_command = Some(command);
                command
            }
            Err(e) => {
                consecutive_failures += 1;
                if consecutive_failures >= 2 || last_command.is_none() {
                    log.dnf = Some(format!("solver aborted: {e}"));
                    break;
                }
                // Reuse the previous command once.
                log.solver_stats.push(SolverStat {
                    t,
                    solve_ms: 0.0,
                    iterations: 0,
                    kkt_stationarity: 0.0,
                    kkt_feasibility: 0.0,
                    kkt_complementarity: 0.0,
                    max_slack: 0.0,
                    objective: 0.0,
                    reused_command: true,
                });
                warm = warm.take().map(|w| w.shifted());
                last_command.unwrap()
            }
        };

        // Apply the thrust-rate command at the plant rate.
        let rate = Vector4::from_column_slice(&command.eta_rate);
        for i in 0..plant_steps {
            plant = match plant.step(&rate, plant_dt, params) {
                Ok(p) => p,
                Err(e) => {
                    log.dnf = Some(format!("plant integration failed: {e}"));
                    break 'outer;
                }
            };
            // Hard thrust clamp: applied inputs never exceed the rotor limits.
            plant.eta = plant.eta.clamped(params);
            assert!(plant.eta.within_bounds(params, 1e-9));
            let t_now = t + (i + 1) as f64 * plant_dt;

            let spatial_now = match world_to_spatial(&plant.world, &plant.eta, spline, s_guess) {
                Ok(sp) => sp,
                Err(e) => {
                    log.dnf = Some(format!("projection failed: {e}"));
                    break 'outer;
                }
            };
            s_guess = spatial_now.s;
            let phi_max = tunnel.spec.max_residual(spatial_now.s, &spatial_now.w);
            log.peak_specific_force = log
                .peak_specific_force
                .max(plant.eta.total() / params.mass);
            log.rows.push(LogRow {
                t: t_now,
                plant,
                s: spatial_now.s,
                w: spatial_now.w,
                s_dot: spatial_now.s_dot,
                phi_max,
            });

            if plant.world.position.norm() > 1e4 {
                log.dnf = Some("plant diverged".into());
                break 'outer;
            }
            // Lap completion, with sub-step interpolation of the crossing.
            if spatial_now.s >= run.track.finish_s {
                let prev = &log.rows[log.rows.len() - 2];
                let frac = if spatial_now.s > prev.s {
                    ((run.track.finish_s - prev.s) / (spatial_now.s - prev.s)).clamp(0.0, 1.0)
                } else {
                    1.0
                };
                log.lap_time = Some(prev.t + frac * plant_dt);
                break 'outer;
            }
        }
        t += control_dt;
    }

    if log.lap_time.is_none() && log.dnf.is_none() {
        log.dnf = Some("timeout".into());
    }
    log.excursions = detect_excursions(&log.rows, EXCURSION_THRESHOLD, EXCURSION_DEBOUNCE);
    Ok(log)
}

/// One closed-loop step for tests: project, solve, apply, integrate.
pub fn step_closed_loop(
    plant: &mut PlantState,
    tunnel: &Tunnel,
    solver: &mut NmpcSolver,
    warm: &mut Option<WarmStart>,
    track: &FittedTrack,
    config: &RunConfig,
    s_guess: f64,
) -> Result<(SpatialState, Command)> {
    let spatial = world_to_spatial(&plant.world, &plant.eta, &track.spline, s_guess)?;
    let nlp = assemble_nlp(
        &spatial,
        tunnel,
        &track.spline,
        &config.quad,
        config.weights.clone(),
        config.horizon,
    )?;
    let warm_now = match warm.as_ref() {
        Some(w) => {
            let mut aligned = w.clone();
            aligned.trajectory.states[0] = nlp.x_current;
            aligned
        }
        None => WarmStart::cold(NmpcSolver::rollout(&nlp)),
    };
    let (command, _, next) = solver.rti_step(&nlp, &warm_now)?;
    *warm = Some(next);
    let rate = Vector4::from_column_slice(&command.eta_rate);
    for _ in 0..config.steps_per_control() {
        *plant = plant.step(&rate, config.sim.plant_dt, &config.quad)?;
        plant.eta = plant.eta.clamped(&config.quad);
    }
    Ok((spatial, command))
}

/// Debounced corridor violations: `phi_max > threshold` for at least
/// `debounce` consecutive samples.
pub fn detect_excursions(rows: &[LogRow], threshold: f64, debounce: usize) -> Vec<Excursion> {
    let mut out = Vec::new();
    let mut run_start: Option<usize> = None;
    for (i, row) in rows.iter().enumerate() {
        if row.phi_max > threshold {
            if run_start.is_none() {
                run_start = Some(i);
            }
        } else if let Some(start) = run_start.take() {
            if i - start >= debounce {
                out.push(make_excursion(&rows[start..i]));
            }
        }
    }
    if let Some(start) = run_start {
        if rows.len() - start >= debounce {
            out.push(make_excursion(&rows[start..]));
        }
    }
    out
}

fn make_excursion(rows: &[LogRow]) -> Excursion {
    Excursion {
        t_start: rows[0].t,
        t_end: rows[rows.len() - 1].t,
        max_depth: rows.iter().map(|r| r.phi_max).fold(0.0, f64::max),
    }
}

/// Reconstruct a spatial state trajectory row into world coordinates
/// (used by output writers for cross-checks).
pub fn row_world_position(row: &LogRow) -> Vector3<f64> {
    row.plant.world.position
}

/// Convenience: spatial state of a log row rebuilt against a spline.
pub fn row_spatial(row: &LogRow, track: &FittedTrack) -> Result<SpatialState> {
    world_to_spatial(&row.plant.world, &row.plant.eta, &track.spline, row.s)
}

/// Map a spatial plan state back to a world state (prediction checks).
pub fn plan_to_world(state: &SpatialState, track: &FittedTrack) -> Result<PlantState> {
    let world = spatial_to_world(state, &track.spline)?;
    Ok(PlantState {
        world,
        eta: state.eta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::track::Track;
    use approx::assert_relative_eq;

    fn straight_track(length: usize, margin: f64) -> FittedTrack {
        let track = Track {
            name: format!("straight_{length}"),
            closed: false,
            waypoints: (0..=length).map(|i| [i as f64, 0.0, 0.0]).collect(),
            gates: vec![],
        };
        track.fit(0.3, margin, Vector3::new(0.0, 1.0, 0.0)).unwrap()
    }

    fn fast_config(s_dot_ref: f64) -> RunConfig {
        let mut config = RunConfig::default();
        config.horizon.s_dot_ref = s_dot_ref;
        config.horizon.stages = 25;
        config.horizon.horizon = 0.5;
        config.tunnel_k_tau = 4;
        config.sim.max_time = 20.0;
        config.resolve().unwrap();
        config
    }

    #[test]
    fn hover_scenario_stays_put() {
        let track = straight_track(20, 4.0);
        let mut config = fast_config(0.0);
        config.sim.max_time = 5.0;
        let log = run_scenario(ScenarioRun {
            track: &track,
            shape: TunnelShape::uniform(1.0),
            events: vec![],
            config: &config,
        })
        .unwrap();
        assert!(log.dnf.as_deref() == Some("timeout"), "dnf: {:?}", log.dnf);
        let p0 = log.rows[0].plant.world.position;
        for row in &log.rows {
            let drift = (row.plant.world.position - p0).norm();
            assert!(drift <= 0.01, "drift {drift} m at t = {}", row.t);
        }
        assert!(log.excursions.is_empty());
    }

    #[test]
    fn straight_sprint_reaches_full_throttle() {
        let track = straight_track(60, 12.0);
        let config = fast_config(25.0);
        let log = run_scenario(ScenarioRun {
            track: &track,
            shape: TunnelShape::uniform(1.0),
            events: vec![],
            config: &config,
        })
        .unwrap();
        assert!(log.completed(), "dnf: {:?}", log.dnf);
        // Progress strictly increases once moving.
        for pair in log.rows.windows(2) {
            assert!(pair[1].s >= pair[0].s - 1e-9);
        }
        // Thrusts saturate during the launch and never exceed the bounds.
        let eta_max = config.quad.eta_max;
        let mut peak_eta: f64 = 0.0;
        for row in &log.rows {
            for i in 0..4 {
                peak_eta = peak_eta.max(row.plant.eta.0[i]);
                assert!(row.plant.eta.0[i] <= eta_max + 1e-9);
            }
        }
        assert!(peak_eta >= 0.95 * eta_max, "peak eta {peak_eta}");
        assert!(log.peak_specific_force <= 4.0 * eta_max / config.quad.mass + 1e-9);
    }

    #[test]
    fn one_step_prediction_matches_plant() {
        // Identical models: the stage-1 plan state reproduces the plant
        // state after one control period.
        let track = straight_track(30, 6.0);
        let config = fast_config(3.0);
        let mut solver = NmpcSolver::new(config.solver);
        let tunnel = Tunnel::build(
            &track.spline,
            TunnelShape::uniform(1.0),
            TunnelConfig {
                faces: 4,
                k_tau: 4,
                stages: config.horizon.stages,
            },
            (0.0, track.spline.length()),
        )
        .unwrap();
        let mut plant = PlantState::hover_at(track.spline.position(2.0), &config.quad);
        let mut warm = None;
        // Settle transients for a few steps, then test the prediction.
        let mut s_guess = 2.0;
        for _ in 0..5 {
            let (spatial, _) = step_closed_loop(
                &mut plant,
                &tunnel,
                &mut solver,
                &mut warm,
                &track,
                &config,
                s_guess,
            )
            .unwrap();
            s_guess = spatial.s;
        }
        let predicted = warm.as_ref().unwrap().trajectory.states[0];
        // warm was shifted once: stage 0 of the shifted warm start is the
        // stage-1 prediction of the last solve == current plant state.
        let spatial_now =
            world_to_spatial(&plant.world, &plant.eta, &track.spline, s_guess).unwrap();
        let actual = spatial_now.to_vector();
        for i in 0..3 {
            assert_relative_eq!(predicted[i], actual[i], epsilon = 1e-6);
        }
    }

    #[test]
    fn excursion_debounce_logic() {
        let mk_row = |t: f64, phi: f64| LogRow {
            t,
            plant: PlantState::hover_at(Vector3::zeros(), &crate::dynamics::QuadParams::racing()),
            s: 0.0,
            w: Vector2::zeros(),
            s_dot: 0.0,
            phi_max: phi,
        };
        // Two samples above threshold: below the 3-step debounce.
        let rows: Vec<LogRow> = (0..10)
            .map(|i| mk_row(i as f64 * 1e-3, if i == 4 || i == 5 { 0.2 } else { -0.5 }))
            .collect();
        assert!(detect_excursions(&rows, 1e-3, 3).is_empty());
        // Five consecutive samples: one excursion of depth 0.2.
        let rows: Vec<LogRow> = (0..12)
            .map(|i| mk_row(i as f64 * 1e-3, if (3..8).contains(&i) { 0.2 } else { -0.5 }))
            .collect();
        let ex = detect_excursions(&rows, 1e-3, 3);
        assert_eq!(ex.len(), 1);
        assert_relative_eq!(ex[0].max_depth, 0.2);
        // Continuous center-line flight: none.
        let rows: Vec<LogRow> = (0..10).map(|i| mk_row(i as f64 * 1e-3, -1.0)).collect();
        assert!(detect_excursions(&rows, 1e-3, 3).is_empty());
    }

    #[test]
    fn deterministic_rerun_bitwise_equal() {
        let track = straight_track(30, 6.0);
        let config = fast_config(10.0);
        let run = || {
            run_scenario(ScenarioRun {
                track: &track,
                shape: TunnelShape::uniform(1.0),
                events: vec![],
                config: &config,
            })
            .unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.rows.len(), b.rows.len());
        assert_eq!(a.lap_time, b.lap_time);
        for (ra, rb) in a.rows.iter().zip(b.rows.iter()) {
            assert_eq!(ra.s, rb.s);
            assert_eq!(ra.phi_max, rb.phi_max);
            assert_eq!(ra.plant.world.position, rb.plant.world.position);
        }
    }
}
