//! Reference solvers and problem generators used by the test suites.
//!
//! Everything here is deliberately independent of the Riccati/interior-point
//! path it cross-checks: the QP is flattened into one dense KKT system with
//! the active inequalities pinned as equalities and factorized with LU.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::solver::qp::{QpProblem, QpSolution, QpStage, QpTerminal};

/// Dense solution of the stage QP with a fixed active set.
pub struct DenseSolution {
    pub states: Vec<DVector<f64>>,
    pub inputs: Vec<DVector<f64>>,
}

/// Pick the active inequality rows of a converged solution.
pub fn active_sets(problem: &QpProblem, sol: &QpSolution) -> Vec<Vec<usize>> {
    let n = problem.stages.len();
    (0..=n)
        .map(|k| {
            let nc = if k < n {
                problem.stages[k].upper.len()
            } else {
                problem.terminal.upper.len()
            };
            (0..nc)
                .filter(|&i| {
                    // Strictly complementary rows separate cleanly.
                    let mu = sol.ineq_duals[k][i];
                    mu > 1e-5 && mu * mu > sol.kkt.complementarity
                })
                .collect()
        })
        .collect()
}

/// Solve the QP with `active` inequality rows treated as equalities by one
/// dense KKT factorization. `active` has N+1 entries (terminal last).
pub fn solve_equality_kkt(problem: &QpProblem, active: &[Vec<usize>]) -> Result<DenseSolution> {
    let n = problem.stages.len();
    let nx = problem.x0.len();
    let nu = problem.stages[0].b.ncols();
    let nz = n * (nu + nx);
    let u_idx = |k: usize| k * (nu + nx);
    let x_idx = |k: usize| (k - 1) * (nu + nx) + nu; // valid for k >= 1

    let mut h = DMatrix::<f64>::zeros(nz, nz);
    let mut g = DVector::<f64>::zeros(nz);

    for (k, stage) in problem.stages.iter().enumerate() {
        let ui = u_idx(k);
        h.view_mut((ui, ui), (nu, nu)).copy_from(&stage.r);
        g.rows_mut(ui, nu).copy_from(&stage.r_lin);
        if k == 0 {
            // Stage-0 state is a parameter: fold S x0 into the gradient.
            let extra = &stage.s * &problem.x0;
            let mut rows = g.rows_mut(ui, nu);
            rows += &extra;
        } else {
            let xi = x_idx(k);
            h.view_mut((xi, xi), (nx, nx)).copy_from(&stage.q);
            h.view_mut((ui, xi), (nu, nx)).copy_from(&stage.s);
            h.view_mut((xi, ui), (nx, nu)).copy_from(&stage.s.transpose());
            let mut rows = g.rows_mut(xi, nx);
            rows += &stage.q_lin;
        }
    }
    {
        let xi = x_idx(n);
        h.view_mut((xi, xi), (nx, nx)).copy_from(&problem.terminal.q);
        let mut rows = g.rows_mut(xi, nx);
        rows += &problem.terminal.q_lin;
    }

    // Equality rows: dynamics plus active inequalities.
    let n_active: usize = active.iter().map(|a| a.len()).sum();
    let ne = n * nx + n_active;
    let mut gmat = DMatrix::<f64>::zeros(ne, nz);
    let mut rhs = DVector::<f64>::zeros(ne);
    let mut row = 0;
    for (k, stage) in problem.stages.iter().enumerate() {
        // x_{k+1} - A x_k - B u_k = residual (+ A x0 for k = 0).
        let xi_next = x_idx(k + 1);
        for i in 0..nx {
            gmat[(row + i, xi_next + i)] = 1.0;
        }
        gmat.view_mut((row, u_idx(k)), (nx, nu))
            .copy_from(&(-&stage.b));
        rhs.rows_mut(row, nx).copy_from(&stage.residual);
        if k == 0 {
            let extra = &stage.a * &problem.x0;
            let mut rows = rhs.rows_mut(row, nx);
            rows += &extra;
        } else {
            gmat.view_mut((row, x_idx(k)), (nx, nx))
                .copy_from(&(-&stage.a));
        }
        row += nx;
    }
    for k in 0..=n {
        for &i in &active[k] {
            if k < n {
                let stage = &problem.stages[k];
                if k == 0 {
                    rhs[row] = stage.upper[i] - (stage.c.row(i) * &problem.x0)[0];
                } else {
                    gmat.view_mut((row, x_idx(k)), (1, nx))
                        .copy_from(&stage.c.row(i));
                    rhs[row] = stage.upper[i];
                }
                gmat.view_mut((row, u_idx(k)), (1, nu))
                    .copy_from(&stage.d.row(i));
            } else {
                gmat.view_mut((row, x_idx(n)), (1, nx))
                    .copy_from(&problem.terminal.c.row(i));
                rhs[row] = problem.terminal.upper[i];
            }
            row += 1;
        }
    }

    // Assemble and factorize the KKT system.
    let dim = nz + ne;
    let mut kkt = DMatrix::<f64>::zeros(dim, dim);
    kkt.view_mut((0, 0), (nz, nz)).copy_from(&h);
    kkt.view_mut((nz, 0), (ne, nz)).copy_from(&gmat);
    kkt.view_mut((0, nz), (nz, ne)).copy_from(&gmat.transpose());
    let mut full_rhs = DVector::<f64>::zeros(dim);
    full_rhs.rows_mut(0, nz).copy_from(&(-&g));
    full_rhs.rows_mut(nz, ne).copy_from(&rhs);

    let lu = kkt.lu();
    let sol = lu
        .solve(&full_rhs)
        .ok_or_else(|| Error::SolverAbort("dense KKT system singular".into()))?;

    let mut states = Vec::with_capacity(n + 1);
    states.push(problem.x0.clone());
    for k in 1..=n {
        states.push(DVector::from(sol.rows(x_idx(k), nx).clone_owned()));
    }
    let inputs = (0..n)
        .map(|k| DVector::from(sol.rows(u_idx(k), nu).clone_owned()))
        .collect();
    Ok(DenseSolution { states, inputs })
}

fn randn(rng: &mut ChaCha8Rng) -> f64 {
    // Sum of uniforms; close enough to Gaussian for test data.
    (0..6).map(|_| rng.gen_range(-0.5..0.5)).sum::<f64>() / 1.5
}

fn rand_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| scale * randn(rng))
}

/// A randomized strictly feasible stage QP for oracle cross-checks.
pub fn random_qp(seed: u64, nx: usize, nu: usize, nc: usize, n: usize) -> QpProblem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x0 = DVector::from_fn(nx, |_, _| 0.5 * randn(&mut rng));

    // Margins are drawn around a zero-input rollout so a strictly feasible
    // point exists while a few rows end up active at the optimum.
    let mut x_nom = x0.clone();
    let mut stages = Vec::with_capacity(n);
    for _ in 0..n {
        let lq = rand_matrix(&mut rng, nx, nx, 0.4);
        let lr = rand_matrix(&mut rng, nu, nu, 0.4);
        let a = DMatrix::identity(nx, nx) + rand_matrix(&mut rng, nx, nx, 0.15);
        let b = rand_matrix(&mut rng, nx, nu, 0.4);
        let residual = DVector::from_fn(nx, |_, _| 0.1 * randn(&mut rng));
        let c = rand_matrix(&mut rng, nc, nx, 0.8);
        let d = rand_matrix(&mut rng, nc, nu, 0.8);
        let cx = &c * &x_nom;
        let upper = DVector::from_fn(nc, |i, _| cx[i] + rng.gen_range(0.05..1.2));
        x_nom = &a * &x_nom + &residual;
        stages.push(QpStage {
            q: &lq * lq.transpose() + DMatrix::identity(nx, nx) * 0.2,
            s: rand_matrix(&mut rng, nu, nx, 0.1),
            r: &lr * lr.transpose() + DMatrix::identity(nu, nu) * 0.5,
            q_lin: DVector::from_fn(nx, |_, _| randn(&mut rng)),
            r_lin: DVector::from_fn(nu, |_, _| randn(&mut rng)),
            a,
            b,
            residual,
            c,
            d,
            upper,
        });
    }
    let lq = rand_matrix(&mut rng, nx, nx, 0.4);
    let nct = nc.min(2);
    let ct = rand_matrix(&mut rng, nct, nx, 0.8);
    let cx = &ct * &x_nom;
    let upper_t = DVector::from_fn(nct, |i, _| cx[i] + rng.gen_range(0.5..2.0));
    QpProblem {
        x0,
        stages,
        terminal: QpTerminal {
            q: &lq * lq.transpose() + DMatrix::identity(nx, nx) * 0.3,
            q_lin: DVector::from_fn(nx, |_, _| randn(&mut rng)),
            c: ct,
            upper: upper_t,
        },
    }
}
