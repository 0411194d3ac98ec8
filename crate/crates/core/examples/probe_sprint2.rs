use nalgebra::Vector3;
use tunnel_nmpc::config::RunConfig;
use tunnel_nmpc::geometry::track::Track;
use tunnel_nmpc::sim::{run_scenario, ScenarioRun};
use tunnel_nmpc::tunnel::TunnelShape;

fn main() {
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
    let log = run_scenario(ScenarioRun {
        track: &fitted,
        shape: TunnelShape::uniform(1.0),
        events: vec![],
        config: &config,
    })
    .unwrap();
    for e in &log.excursions {
        println!("excursion t=[{:.3},{:.3}] depth {:.3}", e.t_start, e.t_end, e.max_depth);
    }
    // where is phi > 0?
    let mut last_report = -1.0f64;
    for r in &log.rows {
        if r.phi_max > 1e-3 && r.t - last_report > 0.05 {
            println!("t {:.3} s {:.2} w ({:.3},{:.3}) sdot {:.2} phi {:.3}", r.t, r.s, r.w.x, r.w.y, r.s_dot, r.phi_max);
            last_report = r.t;
        }
    }
    // worst slack solve
    let worst = log
        .solver_stats
        .iter()
        .max_by(|a, b| a.max_slack.total_cmp(&b.max_slack))
        .unwrap();
    println!(
        "worst slack {:.4} at t {:.3}; lap {:?}; final s {:.2}",
        worst.max_slack,
        worst.t,
        log.lap_time,
        log.rows.last().unwrap().s
    );
}
