use nalgebra::Vector3;
use tunnel_nmpc::config::RunConfig;
use tunnel_nmpc::geometry::track::Track;
use tunnel_nmpc::sim::{run_scenario, ScenarioRun};
use tunnel_nmpc::tunnel::TunnelShape;

fn main() {
    // Full racing defaults on a 100 m straight.
    let track = Track {
        name: "straight_100".into(),
        closed: false,
        waypoints: (0..=50).map(|i| [2.0 * i as f64, 0.0, 0.0]).collect(),
        gates: vec![],
    };
    let mut config = RunConfig::default();
    config.sim.max_time = 15.0;
    config.resolve().unwrap();
    let fitted = track
        .fit(config.knot_spacing, config.horizon.s_dot_ref * config.horizon.horizon + 5.0,
             Vector3::new(0.0, 1.0, 0.0))
        .unwrap();
    let t0 = std::time::Instant::now();
    let log = run_scenario(ScenarioRun {
        track: &fitted,
        shape: TunnelShape::uniform(1.0),
        events: vec![],
        config: &config,
    })
    .unwrap();
    let peak_eta = log
        .rows
        .iter()
        .map(|r| r.plant.eta.0.max())
        .fold(0.0f64, f64::max);
    let peak_sdot = log.rows.iter().map(|r| r.s_dot).fold(0.0f64, f64::max);
    let mut solve_ms: Vec<f64> = log.solver_stats.iter().map(|s| s.solve_ms).collect();
    solve_ms.sort_by(f64::total_cmp);
    println!(
        "lap {:?} dnf {:?} peak_eta {:.2} (max {:.2}) peak_sf {:.1} peak_sdot {:.1} max_slack {:.2e}",
        log.lap_time, log.dnf, peak_eta, config.quad.eta_max, log.peak_specific_force, peak_sdot, log.max_slack
    );
    println!(
        "steps {} median solve {:.2} ms p99 {:.2} ms wall {:.1}s excursions {}",
        log.solver_stats.len(),
        solve_ms[solve_ms.len() / 2],
        solve_ms[(solve_ms.len() * 99) / 100],
        t0.elapsed().as_secs_f64(),
        log.excursions.len()
    );
}
