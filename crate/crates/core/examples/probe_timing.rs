use nalgebra::Vector3;
use std::time::Instant;
use tunnel_nmpc::config::RunConfig;
use tunnel_nmpc::geometry::track::Track;
use tunnel_nmpc::ocp::assemble_nlp;
use tunnel_nmpc::solver::{qp, NmpcSolver, WarmStart};
use tunnel_nmpc::spatial::SpatialState;
use tunnel_nmpc::tunnel::{Tunnel, TunnelConfig, TunnelShape};

fn main() {
    let track = Track {
        name: "straight_100".into(),
        closed: false,
        waypoints: (0..=50).map(|i| [2.0 * i as f64, 0.0, 0.0]).collect(),
        gates: vec![],
    };
    let mut config = RunConfig::default();
    config.resolve().unwrap();
    let fitted = track.fit(0.3, 45.0, Vector3::new(0.0, 1.0, 0.0)).unwrap();
    let tunnel = Tunnel::build(
        &fitted.spline,
        TunnelShape::uniform(5.0),
        TunnelConfig { faces: 4, k_tau: 10, stages: 50 },
        (0.0, 60.0),
    )
    .unwrap();
    let mut x0 = SpatialState::hover_on_path(2.0, &config.quad);
    x0.s_dot = 10.0;
    let nlp = assemble_nlp(&x0, &tunnel, &fitted.spline, &config.quad, config.weights.clone(), config.horizon).unwrap();
    let solver = NmpcSolver::new(config.solver);
    let traj = NmpcSolver::rollout(&nlp);

    // Time build_qp
    let t0 = Instant::now();
    let reps = 20;
    for _ in 0..reps {
        let _ = solver.build_qp(&nlp, &traj).unwrap();
    }
    let build_ms = t0.elapsed().as_secs_f64() * 1e3 / reps as f64;

    let data = solver.build_qp(&nlp, &traj).unwrap();
    let t0 = Instant::now();
    let mut iters = 0;
    for _ in 0..reps {
        let sol = qp::solve_qp(&data.problem, &Default::default()).unwrap();
        iters = sol.iterations;
    }
    let qp_ms = t0.elapsed().as_secs_f64() * 1e3 / reps as f64;
    println!("build_qp {build_ms:.2} ms, solve_qp {qp_ms:.2} ms ({iters} IP iters)");

    // Full RTI step timing across a few warm starts
    let mut solver = NmpcSolver::new(config.solver);
    let mut warm = WarmStart::cold(traj);
    let t0 = Instant::now();
    for _ in 0..20 {
        let (_, sol, w) = solver.rti_step(&nlp, &warm).unwrap();
        warm = w;
        let _ = sol;
    }
    println!("rti_step avg {:.2} ms", t0.elapsed().as_secs_f64() * 1e3 / 20.0);
}
