//! Structure-exploiting QP solver: a primal-dual interior point method
//! whose Newton systems are solved by Riccati recursion over the stages.
//!
//! The QP is the standard multi-stage form
//!
//! ```text
//! min  sum_k 1/2 x_k'Q_k x_k + u_k'S_k x_k + 1/2 u_k'R_k u_k + q_k'x_k + r_k'u_k
//!      + 1/2 x_N'Q_N x_N + q_N'x_N
//! s.t. x_0 = x0,  x_{k+1} = A_k x_k + B_k u_k + b_k,
//!      C_k x_k + D_k u_k <= e_k,  C_N x_N <= e_N.
//! ```
//!
//! Inequalities get slacks `t >= 0` with duals `mu >= 0`; eliminating the
//! complementarity rows folds `C'diag(mu/t)C` into the stage Hessians, and
//! the remaining equality-constrained problem is one backward/forward
//! Riccati sweep per Newton step.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// One stage of the multi-stage QP.
#[derive(Debug, Clone)]
pub struct QpStage {
    pub q: DMatrix<f64>,
    pub s: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub q_lin: DVector<f64>,
    pub r_lin: DVector<f64>,
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    /// Dynamics residual: x_{k+1} = A x_k + B u_k + residual.
    pub residual: DVector<f64>,
    pub c: DMatrix<f64>,
    pub d: DMatrix<f64>,
    pub upper: DVector<f64>,
}

/// Terminal cost and constraints.
#[derive(Debug, Clone)]
pub struct QpTerminal {
    pub q: DMatrix<f64>,
    pub q_lin: DVector<f64>,
    pub c: DMatrix<f64>,
    pub upper: DVector<f64>,
}

#[derive(Debug, Clone)]
pub struct QpProblem {
    pub x0: DVector<f64>,
    pub stages: Vec<QpStage>,
    pub terminal: QpTerminal,
}

/// KKT residual norms of a candidate solution.
#[derive(Debug, Clone, Copy, Default)]
pub struct KktResiduals {
    pub stationarity: f64,
    pub eq_feasibility: f64,
    pub ineq_feasibility: f64,
    pub complementarity: f64,
}

impl KktResiduals {
    pub fn max(&self) -> f64 {
        self.stationarity
            .max(self.eq_feasibility)
            .max(self.ineq_feasibility)
            .max(self.complementarity)
    }
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub states: Vec<DVector<f64>>,
    pub inputs: Vec<DVector<f64>>,
    /// Duals of the dynamics rows (lambda_k multiplies the x_{k+1} equation).
    pub eq_duals: Vec<DVector<f64>>,
    /// Inequality duals per stage, terminal at index N.
    pub ineq_duals: Vec<DVector<f64>>,
    pub kkt: KktResiduals,
    pub iterations: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct IpmSettings {
    /// Tolerance on feasibility and complementarity residuals.
    pub tolerance: f64,
    /// Tolerance on the stationarity residual. Stationarity is measured in
    /// gradient units, so callers with large penalty weights may relax it
    /// independently of the feasibility tolerances.
    pub stationarity_tolerance: f64,
    pub max_iterations: usize,
    pub fraction_to_boundary: f64,
}

impl Default for IpmSettings {
    fn default() -> Self {
        Self {
            tolerance: 1e-8,
            stationarity_tolerance: 1e-8,
            max_iterations: 50,
            fraction_to_boundary: 0.995,
        }
    }
}

struct IpmState {
    xs: Vec<DVector<f64>>,
    us: Vec<DVector<f64>>,
    lambdas: Vec<DVector<f64>>,
    mus: Vec<DVector<f64>>,
    ts: Vec<DVector<f64>>,
}

/// Nonzero patterns of the inequality rows, shared by every iteration.
struct Sparsity {
    /// Per stage (terminal last), per row: nonzeros of C and of D.
    rows: Vec<Vec<(Vec<(usize, f64)>, Vec<(usize, f64)>)>>,
}

impl Sparsity {
    fn build(problem: &QpProblem) -> Self {
        let n = problem.stages.len();
        let rows = (0..=n)
            .map(|k| {
                let (c, d, upper) = stage_ineq(problem, k);
                (0..upper.len())
                    .map(|i| {
                        let c_nz: Vec<(usize, f64)> = (0..c.ncols())
                            .filter(|&j| c[(i, j)] != 0.0)
                            .map(|j| (j, c[(i, j)]))
                            .collect();
                        let d_nz: Vec<(usize, f64)> = if k < n {
                            (0..d.ncols())
                                .filter(|&j| d[(i, j)] != 0.0)
                                .map(|j| (j, d[(i, j)]))
                                .collect()
                        } else {
                            Vec::new()
                        };
                        (c_nz, d_nz)
                    })
                    .collect()
            })
            .collect();
        Self { rows }
    }
}

/// Solve the multi-stage QP with a Mehrotra predictor-corrector iteration;
/// errors with a residual report on stall.
pub fn solve_qp(problem: &QpProblem, settings: &IpmSettings) -> Result<QpSolution> {
    let n = problem.stages.len();
    assert!(n >= 1, "need at least one stage");
    let nx = problem.x0.len();

    // Primal initialization: roll the dynamics out with zero inputs.
    let mut state = {
        let mut xs = Vec::with_capacity(n + 1);
        xs.push(problem.x0.clone());
        for stage in &problem.stages {
            let next = &stage.a * xs.last().unwrap() + &stage.residual;
            xs.push(next);
        }
        let us: Vec<DVector<f64>> = problem
            .stages
            .iter()
            .map(|s| DVector::zeros(s.b.ncols()))
            .collect();
        let lambdas: Vec<DVector<f64>> = (0..n).map(|_| DVector::zeros(nx)).collect();
        let mut mus = Vec::with_capacity(n + 1);
        let mut ts = Vec::with_capacity(n + 1);
        for k in 0..=n {
            let (c, d, upper) = stage_ineq(problem, k);
            let margin = if c.nrows() == 0 {
                DVector::zeros(0)
            } else {
                let mut m = upper - c * &xs[k];
                if k < n {
                    m -= d * &us[k];
                }
                m
            };
            let t = margin.map(|v| v.max(0.1));
            let mu = t.map(|v| (1.0 / v).clamp(1e-2, 1e2));
            ts.push(t);
            mus.push(mu);
        }
        IpmState {
            xs,
            us,
            lambdas,
            mus,
            ts,
        }
    };

    let m_total: usize = (0..=n).map(|k| stage_ineq(problem, k).2.len()).sum();
    let sparsity = Sparsity::build(problem);
    let mut fact = Factorization::alloc(problem);
    let mut affine = NewtonStep::alloc(problem);
    let mut step = NewtonStep::alloc(problem);
    let mut last_kkt = KktResiduals::default();

    for iter in 0..settings.max_iterations {
        // NaN-propagation guard: f64::max ignores NaN, so check explicitly.
        let finite = state.xs.iter().all(|v| v.iter().all(|x| x.is_finite()))
            && state.ts.iter().all(|v| v.iter().all(|x| x.is_finite()))
            && state.mus.iter().all(|v| v.iter().all(|x| x.is_finite()));
        if !finite {
            return Err(Error::QpFailure {
                iterations: iter,
                stationarity: last_kkt.stationarity,
                feasibility: f64::INFINITY,
                complementarity: last_kkt.complementarity,
            });
        }
        let kkt = kkt_residuals(problem, &state);
        last_kkt = kkt;
        if kkt.stationarity <= settings.stationarity_tolerance
            && kkt.eq_feasibility <= settings.tolerance
            && kkt.ineq_feasibility <= settings.tolerance
            && kkt.complementarity <= settings.tolerance
        {
            return Ok(extract_solution(state, kkt, iter));
        }

        let duality: f64 = (0..=n)
            .map(|k| state.ts[k].dot(&state.mus[k]))
            .sum::<f64>()
            / m_total.max(1) as f64;

        // One factorization serves the predictor and corrector solves.
        fact.compute(problem, &state, &sparsity)?;

        // Predictor: pure Newton step toward the boundary (tau = 0).
        fact.solve_direction(problem, &state, 0.0, false, &mut affine);
        let (ap_aff, ad_aff) = step_lengths(&state, &affine, 1.0);

        // Centering from the affine duality-measure reduction.
        let sigma = if m_total > 0 {
            let mut aff_duality = 0.0;
            for k in 0..=n {
                for i in 0..state.ts[k].len() {
                    aff_duality += (state.ts[k][i] + ap_aff * affine.dts[k][i])
                        * (state.mus[k][i] + ad_aff * affine.dmus[k][i]);
                }
            }
            aff_duality /= m_total as f64;
            ((aff_duality / duality.max(1e-300)).powi(3)).clamp(1e-4, 0.99)
        } else {
            0.0
        };
        // Keep the barrier from collapsing below the working tolerance:
        // products t*mu far under it only destroy the conditioning of the
        // mu/t-weighted Newton system without improving the solution.
        let tau = (sigma * duality).max(0.05 * settings.tolerance);

        // Corrector with the second-order complementarity term. The cross
        // term dt_aff . dmu_aff is staged into `fact.cross` first.
        fact.load_cross(&affine);
        fact.solve_direction(problem, &state, tau, true, &mut step);
        let ftb = if duality < 1e-6 {
            0.9995
        } else {
            settings.fraction_to_boundary
        };
        let (alpha_p, alpha_d) = step_lengths(&state, &step, ftb);
        if std::env::var_os("TN_QP_DEBUG").is_some() {
            eprintln!(
                "  ipm {iter}: stat {:.2e} eq {:.2e} ineq {:.2e} comp {:.2e} dual {:.2e} sigma {:.2e} ap {:.2e} ad {:.2e}",
                kkt.stationarity, kkt.eq_feasibility, kkt.ineq_feasibility,
                kkt.complementarity, duality, sigma, alpha_p, alpha_d
            );
        }

        for k in 0..=n {
            state.xs[k].axpy(alpha_p, &step.dxs[k], 1.0);
            if k < n {
                state.us[k].axpy(alpha_p, &step.dus[k], 1.0);
                state.lambdas[k].axpy(alpha_d, &step.dlambdas[k], 1.0);
            }
            state.ts[k].axpy(alpha_p, &step.dts[k], 1.0);
            state.mus[k].axpy(alpha_d, &step.dmus[k], 1.0);
        }
    }

    Err(Error::QpFailure {
        iterations: settings.max_iterations,
        stationarity: last_kkt.stationarity,
        feasibility: last_kkt.eq_feasibility.max(last_kkt.ineq_feasibility),
        complementarity: last_kkt.complementarity,
    })
}

/// Largest primal/dual steps keeping slacks and duals positive.
fn step_lengths(state: &IpmState, step: &NewtonStep, fraction: f64) -> (f64, f64) {
    let mut alpha_p: f64 = 1.0;
    let mut alpha_d: f64 = 1.0;
    for k in 0..state.ts.len() {
        for i in 0..state.ts[k].len() {
            if step.dts[k][i] < 0.0 {
                alpha_p = alpha_p.min(-fraction * state.ts[k][i] / step.dts[k][i]);
            }
            if step.dmus[k][i] < 0.0 {
                alpha_d = alpha_d.min(-fraction * state.mus[k][i] / step.dmus[k][i]);
            }
        }
    }
    (alpha_p, alpha_d)
}

fn stage_ineq(problem: &QpProblem, k: usize) -> (&DMatrix<f64>, &DMatrix<f64>, &DVector<f64>) {
    if k < problem.stages.len() {
        let s = &problem.stages[k];
        (&s.c, &s.d, &s.upper)
    } else {
        static EMPTY_D: once_fn::OnceDMatrix = once_fn::OnceDMatrix::new();
        let t = &problem.terminal;
        (&t.c, EMPTY_D.get(), &t.upper)
    }
}

mod once_fn {
    use nalgebra::DMatrix;
    use std::sync::OnceLock;

    pub struct OnceDMatrix(OnceLock<DMatrix<f64>>);

    impl OnceDMatrix {
        pub const fn new() -> Self {
            Self(OnceLock::new())
        }
        pub fn get(&self) -> &DMatrix<f64> {
            self.0.get_or_init(|| DMatrix::zeros(0, 0))
        }
    }
}


fn kkt_residuals(problem: &QpProblem, st: &IpmState) -> KktResiduals {
    let n = problem.stages.len();
    let nx = problem.x0.len();
    let mut stat: f64 = 0.0;
    let mut eq: f64 = 0.0;
    let mut ineq: f64 = 0.0;
    let mut comp: f64 = 0.0;
    let mut rx = DVector::<f64>::zeros(nx);
    let mut ru = DVector::<f64>::zeros(0);
    let mut rdyn = DVector::<f64>::zeros(nx);

    for k in 0..n {
        let s = &problem.stages[k];
        let nu = s.b.ncols();
        if ru.len() != nu {
            ru = DVector::zeros(nu);
        }
        // u-stationarity at every stage.
        ru.copy_from(&s.r_lin);
        ru.gemv(1.0, &s.r, &st.us[k], 1.0);
        ru.gemv(1.0, &s.s, &st.xs[k], 1.0);
        ru.gemv_tr(1.0, &s.b, &st.lambdas[k], 1.0);
        if s.d.nrows() > 0 {
            ru.gemv_tr(1.0, &s.d, &st.mus[k], 1.0);
        }
        stat = stat.max(ru.amax());
        // x-stationarity for k >= 1 (x0 pinned).
        if k >= 1 {
            rx.copy_from(&s.q_lin);
            rx.gemv(1.0, &s.q, &st.xs[k], 1.0);
            rx.gemv_tr(1.0, &s.s, &st.us[k], 1.0);
            rx.gemv_tr(1.0, &s.a, &st.lambdas[k], 1.0);
            rx -= &st.lambdas[k - 1];
            if s.c.nrows() > 0 {
                rx.gemv_tr(1.0, &s.c, &st.mus[k], 1.0);
            }
            stat = stat.max(rx.amax());
        }
        // Dynamics feasibility.
        rdyn.copy_from(&s.residual);
        rdyn.gemv(1.0, &s.a, &st.xs[k], 1.0);
        rdyn.gemv(1.0, &s.b, &st.us[k], 1.0);
        rdyn -= &st.xs[k + 1];
        eq = eq.max(rdyn.amax());
    }
    {
        let t = &problem.terminal;
        rx.copy_from(&t.q_lin);
        rx.gemv(1.0, &t.q, &st.xs[n], 1.0);
        rx -= &st.lambdas[n - 1];
        if t.c.nrows() > 0 {
            rx.gemv_tr(1.0, &t.c, &st.mus[n], 1.0);
        }
        stat = stat.max(rx.amax());
    }
    for k in 0..=n {
        let (c, d, upper) = stage_ineq(problem, k);
        if upper.len() == 0 {
            continue;
        }
        let mut margin = upper - c * &st.xs[k];
        if k < n && d.nrows() > 0 {
            margin -= d * &st.us[k];
        }
        for i in 0..upper.len() {
            ineq = ineq.max((margin[i] - st.ts[k][i]).abs());
            comp = comp.max((st.ts[k][i] * st.mus[k][i]).abs());
        }
    }
    KktResiduals {
        stationarity: stat,
        eq_feasibility: eq,
        ineq_feasibility: ineq,
        complementarity: comp,
    }
}

/// KKT residuals of an assembled problem at the zero step with the given
/// multipliers: since the linear terms are the NLP gradient and the `upper`
/// vectors are constraint margins at the linearization point, these are the
/// NLP's own first-order residuals there.
pub fn kkt_at_zero(
    problem: &QpProblem,
    eq_duals: &[DVector<f64>],
    ineq_duals: &[DVector<f64>],
) -> KktResiduals {
    let n = problem.stages.len();
    let have_mu = ineq_duals.len() == n + 1;
    let mut stat: f64 = 0.0;
    let mut eq: f64 = 0.0;
    let mut ineq: f64 = 0.0;
    let mut comp: f64 = 0.0;
    for (k, s) in problem.stages.iter().enumerate() {
        let mut ru = s.r_lin.clone() + s.b.transpose() * &eq_duals[k];
        if have_mu && s.d.nrows() > 0 {
            ru += s.d.transpose() * &ineq_duals[k];
        }
        stat = stat.max(ru.amax());
        if k >= 1 {
            let mut rx = s.q_lin.clone() + s.a.transpose() * &eq_duals[k] - &eq_duals[k - 1];
            if have_mu && s.c.nrows() > 0 {
                rx += s.c.transpose() * &ineq_duals[k];
            }
            stat = stat.max(rx.amax());
        }
        eq = eq.max(s.residual.amax());
        for i in 0..s.upper.len() {
            ineq = ineq.max(-s.upper[i]);
            if have_mu {
                comp = comp.max((ineq_duals[k][i] * s.upper[i]).abs());
            }
        }
    }
    {
        let t = &problem.terminal;
        let mut rx = t.q_lin.clone() - &eq_duals[n - 1];
        if have_mu && t.c.nrows() > 0 {
            rx += t.c.transpose() * &ineq_duals[n];
        }
        stat = stat.max(rx.amax());
        for i in 0..t.upper.len() {
            ineq = ineq.max(-t.upper[i]);
            if have_mu {
                comp = comp.max((ineq_duals[n][i] * t.upper[i]).abs());
            }
        }
    }
    KktResiduals {
        stationarity: stat,
        eq_feasibility: eq,
        ineq_feasibility: ineq.max(0.0),
        complementarity: comp,
    }
}

/// Search direction buffers, reused across iterations.
struct NewtonStep {
    dxs: Vec<DVector<f64>>,
    dus: Vec<DVector<f64>>,
    dlambdas: Vec<DVector<f64>>,
    dts: Vec<DVector<f64>>,
    dmus: Vec<DVector<f64>>,
}

impl NewtonStep {
    fn alloc(problem: &QpProblem) -> Self {
        let n = problem.stages.len();
        let nx = problem.x0.len();
        Self {
            dxs: (0..=n).map(|_| DVector::zeros(nx)).collect(),
            dus: problem
                .stages
                .iter()
                .map(|s| DVector::zeros(s.b.ncols()))
                .collect(),
            dlambdas: (0..n).map(|_| DVector::zeros(nx)).collect(),
            dts: (0..=n)
                .map(|k| DVector::zeros(stage_ineq(problem, k).2.len()))
                .collect(),
            dmus: (0..=n)
                .map(|k| DVector::zeros(stage_ineq(problem, k).2.len()))
                .collect(),
        }
    }
}

fn cholesky_with_jitter(m: DMatrix<f64>) -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    let dim = m.nrows();
    // Roundoff in the Riccati Schur complement can leave tiny negative
    // eigenvalues proportional to the matrix scale; regularize relative
    // to the diagonal.
    let scale = (0..dim).map(|i| m[(i, i)].abs()).fold(1.0f64, f64::max);
    let mut jitter = 1e-14 * scale;
    let mut mat = m;
    for attempt in 0..7 {
        match nalgebra::Cholesky::new(mat.clone()) {
            Some(c) => return Ok(c),
            None => {
                if attempt > 0 {
                    jitter *= 1000.0;
                }
                for i in 0..dim {
                    mat[(i, i)] += jitter;
                }
            }
        }
    }
    Err(Error::SolverAbort(
        "input Hessian block not positive definite".into(),
    ))
}

/// W-augmented stage data and Riccati gains for one interior-point
/// iteration; one factorization serves the predictor and corrector solves.
/// All buffers are allocated once per QP solve.
struct Factorization {
    q_hats: Vec<DMatrix<f64>>,
    s_hats: Vec<DMatrix<f64>>,
    r_hats: Vec<DMatrix<f64>>,
    gains: Vec<DMatrix<f64>>,
    guxs: Vec<DMatrix<f64>>,
    chols: Vec<Option<nalgebra::Cholesky<f64, nalgebra::Dyn>>>,
    /// Value-function Hessians P_k, k = 0..=n.
    values: Vec<DMatrix<f64>>,
    /// Inequality residuals e - Cx - Du - t per stage.
    r_cs: Vec<DVector<f64>>,
    /// Dynamics residuals per stage.
    r_dyns: Vec<DVector<f64>>,
    /// Plain cost gradients at the iterate (no barrier terms).
    grad_x: Vec<DVector<f64>>,
    grad_u: Vec<DVector<f64>>,
    /// Barrier weights mu/t per stage row.
    weights: Vec<DVector<f64>>,
    /// Mehrotra cross terms dt_aff * dmu_aff per stage row.
    cross: Vec<DVector<f64>>,
    // Scratch space for the sweeps.
    pa: DMatrix<f64>,
    pb: DMatrix<f64>,
    guu: DMatrix<f64>,
    pvecs: Vec<DVector<f64>>,
    ffs: Vec<DVector<f64>>,
    pr: DVector<f64>,
    gx_hats: Vec<DVector<f64>>,
    gu_hats: Vec<DVector<f64>>,
}

impl Factorization {
    fn alloc(problem: &QpProblem) -> Self {
        let n = problem.stages.len();
        let nx = problem.x0.len();
        let nu_max = problem
            .stages
            .iter()
            .map(|s| s.b.ncols())
            .max()
            .unwrap_or(0);
        let nc = |k: usize| stage_ineq(problem, k).2.len();
        Self {
            q_hats: (0..=n).map(|_| DMatrix::zeros(nx, nx)).collect(),
            s_hats: problem
                .stages
                .iter()
                .map(|s| DMatrix::zeros(s.b.ncols(), nx))
                .collect(),
            r_hats: problem
                .stages
                .iter()
                .map(|s| DMatrix::zeros(s.b.ncols(), s.b.ncols()))
                .collect(),
            gains: problem
                .stages
                .iter()
                .map(|s| DMatrix::zeros(s.b.ncols(), nx))
                .collect(),
            guxs: problem
                .stages
                .iter()
                .map(|s| DMatrix::zeros(s.b.ncols(), nx))
                .collect(),
            chols: (0..n).map(|_| None).collect(),
            values: (0..=n).map(|_| DMatrix::zeros(nx, nx)).collect(),
            r_cs: (0..=n).map(|k| DVector::zeros(nc(k))).collect(),
            r_dyns: (0..n).map(|_| DVector::zeros(nx)).collect(),
            grad_x: (0..=n).map(|_| DVector::zeros(nx)).collect(),
            grad_u: problem
                .stages
                .iter()
                .map(|s| DVector::zeros(s.b.ncols()))
                .collect(),
            weights: (0..=n).map(|k| DVector::zeros(nc(k))).collect(),
            cross: (0..=n).map(|k| DVector::zeros(nc(k))).collect(),
            pa: DMatrix::zeros(nx, nx),
            pb: DMatrix::zeros(nx, nu_max),
            guu: DMatrix::zeros(nu_max, nu_max),
            pvecs: (0..=n).map(|_| DVector::zeros(nx)).collect(),
            ffs: problem
                .stages
                .iter()
                .map(|s| DVector::zeros(s.b.ncols()))
                .collect(),
            pr: DVector::zeros(nx),
            gx_hats: (0..=n).map(|_| DVector::zeros(nx)).collect(),
            gu_hats: problem
                .stages
                .iter()
                .map(|s| DVector::zeros(s.b.ncols()))
                .collect(),
        }
    }

    /// Build the W-augmented stage data and run the backward matrix sweep.
    fn compute(&mut self, problem: &QpProblem, st: &IpmState, sp: &Sparsity) -> Result<()> {
        let n = problem.stages.len();

        for k in 0..=n {
            let (c, d, upper) = stage_ineq(problem, k);
            let nc = upper.len();
            for i in 0..nc {
                // Conditioning cap on the barrier weights.
                self.weights[k][i] = (st.mus[k][i] / st.ts[k][i]).min(1e14);
            }
            if nc > 0 {
                let r_c = &mut self.r_cs[k];
                r_c.copy_from(upper);
                r_c.gemv(-1.0, c, &st.xs[k], 1.0);
                if k < n {
                    r_c.gemv(-1.0, d, &st.us[k], 1.0);
                }
                *r_c -= &st.ts[k];
            }
            if k < n {
                let s = &problem.stages[k];
                self.q_hats[k].copy_from(&s.q);
                self.s_hats[k].copy_from(&s.s);
                self.r_hats[k].copy_from(&s.r);
                // Sparse accumulation of C'WC, D'WD and D'WC.
                for (i, (c_nz, d_nz)) in sp.rows[k].iter().enumerate() {
                    let w = self.weights[k][i];
                    for &(j1, v1) in c_nz {
                        for &(j2, v2) in c_nz {
                            self.q_hats[k][(j1, j2)] += w * v1 * v2;
                        }
                        for &(j2, v2) in d_nz {
                            self.s_hats[k][(j2, j1)] += w * v2 * v1;
                        }
                    }
                    for &(j1, v1) in d_nz {
                        for &(j2, v2) in d_nz {
                            self.r_hats[k][(j1, j2)] += w * v1 * v2;
                        }
                    }
                }
                let gx = &mut self.grad_x[k];
                gx.copy_from(&s.q_lin);
                gx.gemv(1.0, &s.q, &st.xs[k], 1.0);
                gx.gemv_tr(1.0, &s.s, &st.us[k], 1.0);
                let gu = &mut self.grad_u[k];
                gu.copy_from(&s.r_lin);
                gu.gemv(1.0, &s.r, &st.us[k], 1.0);
                gu.gemv(1.0, &s.s, &st.xs[k], 1.0);
                let rd = &mut self.r_dyns[k];
                rd.copy_from(&s.residual);
                rd.gemv(1.0, &s.a, &st.xs[k], 1.0);
                rd.gemv(1.0, &s.b, &st.us[k], 1.0);
                *rd -= &st.xs[k + 1];
            } else {
                let t = &problem.terminal;
                self.q_hats[n].copy_from(&t.q);
                for (i, (c_nz, _)) in sp.rows[n].iter().enumerate() {
                    let w = self.weights[n][i];
                    for &(j1, v1) in c_nz {
                        for &(j2, v2) in c_nz {
                            self.q_hats[n][(j1, j2)] += w * v1 * v2;
                        }
                    }
                }
                let gx = &mut self.grad_x[n];
                gx.copy_from(&t.q_lin);
                gx.gemv(1.0, &t.q, &st.xs[n], 1.0);
            }
        }

        // Backward Riccati sweep on the matrices only.
        self.values[n].copy_from(&self.q_hats[n]);
        for k in (0..n).rev() {
            let s = &problem.stages[k];
            let nu = s.b.ncols();
            let nx = s.a.nrows();
            {
                let (p, pa) = (&self.values[k + 1], &mut self.pa);
                pa.gemm(1.0, p, &s.a, 0.0);
            }
            {
                let mut pb = self.pb.view_mut((0, 0), (nx, nu));
                pb.gemm(1.0, &self.values[k + 1], &s.b, 0.0);
            }
            {
                let mut guu = self.guu.view_mut((0, 0), (nu, nu));
                guu.copy_from(&self.r_hats[k]);
                guu.gemm_tr(1.0, &s.b, &self.pb.view((0, 0), (nx, nu)), 1.0);
            }
            self.guxs[k].copy_from(&self.s_hats[k]);
            self.guxs[k].gemm_tr(1.0, &s.b, &self.pa, 1.0);
            let chol =
                cholesky_with_jitter(self.guu.view((0, 0), (nu, nu)).clone_owned())?;
            self.gains[k].copy_from(&self.guxs[k]);
            chol.solve_mut(&mut self.gains[k]);
            self.gains[k].neg_mut();
            self.chols[k] = Some(chol);
            // P_k = Q~ + A'PA + Gux' K, symmetrized.
            let (head, tail) = self.values.split_at_mut(k + 1);
            let pk = &mut head[k];
            let _ = &tail;
            pk.copy_from(&self.q_hats[k]);
            pk.gemm_tr(1.0, &s.a, &self.pa, 1.0);
            pk.gemm_tr(1.0, &self.guxs[k], &self.gains[k], 1.0);
            for i in 0..pk.nrows() {
                for j in 0..i {
                    let avg = 0.5 * (pk[(i, j)] + pk[(j, i)]);
                    pk[(i, j)] = avg;
                    pk[(j, i)] = avg;
                }
            }
        }
        Ok(())
    }

    /// Stage the Mehrotra cross terms from an affine predictor step.
    fn load_cross(&mut self, affine: &NewtonStep) {
        for k in 0..self.cross.len() {
            for i in 0..self.cross[k].len() {
                self.cross[k][i] = affine.dts[k][i] * affine.dmus[k][i];
            }
        }
    }

    /// Back-substitution for one barrier target; `with_cross` adds the
    /// staged second-order complementarity correction.
    fn solve_direction(
        &mut self,
        problem: &QpProblem,
        st: &IpmState,
        tau: f64,
        with_cross: bool,
        out: &mut NewtonStep,
    ) {
        let n = problem.stages.len();

        // Gradient contributions of the eliminated inequality rows:
        // g_hat = grad + C'(mu + g_c), mu + g_c = (tau - cross)/t - W r_C.
        for k in 0..=n {
            let (c, d, upper) = stage_ineq(problem, k);
            let nc = upper.len();
            self.gx_hats[k].copy_from(&self.grad_x[k]);
            if k < n {
                self.gu_hats[k].copy_from(&self.grad_u[k]);
            }
            if nc == 0 {
                continue;
            }
            for i in 0..nc {
                let cross = if with_cross { self.cross[k][i] } else { 0.0 };
                let m = (tau - cross) / st.ts[k][i] - self.weights[k][i] * self.r_cs[k][i];
                for j in 0..c.ncols() {
                    let v = c[(i, j)];
                    if v != 0.0 {
                        self.gx_hats[k][j] += v * m;
                    }
                }
                if k < n {
                    for j in 0..d.ncols() {
                        let v = d[(i, j)];
                        if v != 0.0 {
                            self.gu_hats[k][j] += v * m;
                        }
                    }
                }
            }
        }

        // Backward sweep for the value-function gradients.
        self.pvecs[n].copy_from(&self.gx_hats[n]);
        for k in (0..n).rev() {
            let s = &problem.stages[k];
            self.pr.copy_from(&self.pvecs[k + 1]);
            self.pr.gemv(1.0, &self.values[k + 1], &self.r_dyns[k], 1.0);
            let ff = &mut self.ffs[k];
            ff.copy_from(&self.gu_hats[k]);
            ff.gemv_tr(1.0, &s.b, &self.pr, 1.0);
            self.chols[k].as_ref().unwrap().solve_mut(ff);
            ff.neg_mut();
            let (head, tail) = self.pvecs.split_at_mut(k + 1);
            let pv = &mut head[k];
            let _ = &tail;
            pv.copy_from(&self.gx_hats[k]);
            pv.gemv_tr(1.0, &s.a, &self.pr, 1.0);
            pv.gemv_tr(1.0, &self.guxs[k], &self.ffs[k], 1.0);
        }

        // Forward rollout; x0 is pinned so dx0 = 0.
        out.dxs[0].fill(0.0);
        for k in 0..n {
            let s = &problem.stages[k];
            {
                let du = &mut out.dus[k];
                du.copy_from(&self.ffs[k]);
                du.gemv(1.0, &self.gains[k], &out.dxs[k], 1.0);
            }
            {
                let (head, tail) = out.dxs.split_at_mut(k + 1);
                let dx_next = &mut tail[0];
                dx_next.copy_from(&self.r_dyns[k]);
                dx_next.gemv(1.0, &s.a, &head[k], 1.0);
                dx_next.gemv(1.0, &s.b, &out.dus[k], 1.0);
            }
            let dl = &mut out.dlambdas[k];
            dl.copy_from(&self.pvecs[k + 1]);
            dl.gemv(1.0, &self.values[k + 1], &out.dxs[k + 1], 1.0);
            *dl -= &st.lambdas[k];
        }

        // Recover slack and dual steps.
        for k in 0..=n {
            let (c, d, upper) = stage_ineq(problem, k);
            let nc = upper.len();
            if nc == 0 {
                continue;
            }
            {
                let dt = &mut out.dts[k];
                dt.copy_from(&self.r_cs[k]);
                dt.gemv(-1.0, c, &out.dxs[k], 1.0);
                if k < n {
                    dt.gemv(-1.0, d, &out.dus[k], 1.0);
                }
            }
            for i in 0..nc {
                let cross = if with_cross { self.cross[k][i] } else { 0.0 };
                out.dmus[k][i] = (tau
                    - cross
                    - st.ts[k][i] * st.mus[k][i]
                    - st.mus[k][i] * out.dts[k][i])
                    / st.ts[k][i];
            }
        }
    }
}

fn extract_solution(st: IpmState, kkt: KktResiduals, iterations: usize) -> QpSolution {
    QpSolution {
        states: st.xs,
        inputs: st.us,
        eq_duals: st.lambdas,
        ineq_duals: st.mus,
        kkt,
        iterations,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::solver::dense_oracle;

    fn lqr_double_integrator(n: usize) -> QpProblem {
        let dt = 0.1;
        let a = DMatrix::from_row_slice(2, 2, &[1.0, dt, 0.0, 1.0]);
        let b = DMatrix::from_row_slice(2, 1, &[0.5 * dt * dt, dt]);
        let stage = QpStage {
            q: DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 0.1])),
            s: DMatrix::zeros(1, 2),
            r: DMatrix::from_diagonal(&DVector::from_vec(vec![0.5])),
            q_lin: DVector::from_vec(vec![-1.0, 0.0]), // drive x -> 1
            r_lin: DVector::zeros(1),
            a,
            b,
            residual: DVector::zeros(2),
            c: DMatrix::zeros(0, 2),
            d: DMatrix::zeros(0, 1),
            upper: DVector::zeros(0),
        };
        QpProblem {
            x0: DVector::from_vec(vec![0.0, 0.0]),
            stages: vec![stage; n],
            terminal: QpTerminal {
                q: DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 0.5])),
                q_lin: DVector::from_vec(vec![-2.0, 0.0]),
                c: DMatrix::zeros(0, 2),
                upper: DVector::zeros(0),
            },
        }
    }

    #[test]
    fn unconstrained_lqr_matches_dense_kkt() {
        let problem = lqr_double_integrator(20);
        let sol = solve_qp(&problem, &IpmSettings::default()).unwrap();
        let active = vec![vec![]; 21];
        let dense = dense_oracle::solve_equality_kkt(&problem, &active).unwrap();
        for k in 0..=20 {
            let err = (&sol.states[k] - &dense.states[k]).amax();
            assert!(err < 1e-6, "state {k} differs by {err}");
        }
        for k in 0..20 {
            let err = (&sol.inputs[k] - &dense.inputs[k]).amax();
            assert!(err < 1e-6, "input {k} differs by {err}");
        }
        assert!(sol.kkt.max() <= 1e-8);
    }

    #[test]
    fn active_bounds_satisfy_complementarity() {
        // Same LQR but with a tight input bound that will be active early.
        let mut problem = lqr_double_integrator(20);
        for stage in &mut problem.stages {
            stage.c = DMatrix::zeros(2, 2);
            stage.d = DMatrix::from_row_slice(2, 1, &[1.0, -1.0]);
            stage.upper = DVector::from_vec(vec![0.4, 0.4]); // |u| <= 0.4
        }
        let sol = solve_qp(&problem, &IpmSettings::default()).unwrap();
        assert!(sol.kkt.max() <= 1e-8);
        let mut any_active = false;
        for k in 0..20 {
            let u = sol.inputs[k][0];
            assert!(u <= 0.4 + 1e-7 && u >= -0.4 - 1e-7);
            for i in 0..2 {
                let mu = sol.ineq_duals[k][i];
                assert!(mu >= -1e-10, "negative multiplier");
                let residual = if i == 0 { u - 0.4 } else { -u - 0.4 };
                assert!(
                    (mu * residual).abs() <= 1e-6,
                    "complementarity violated: mu={mu}, res={residual}"
                );
                if mu > 1e-4 {
                    any_active = true;
                }
            }
        }
        assert!(any_active, "expected the bound to be active somewhere");
    }

    #[test]
    fn random_problems_match_dense_active_set() {
        for seed in 0..20u64 {
            let problem = dense_oracle::random_qp(seed, 4, 2, 3, 8);
            let sol = solve_qp(&problem, &IpmSettings::default()).unwrap();
            assert!(sol.kkt.max() <= 1e-8, "seed {seed}: kkt {:?}", sol.kkt);
            let active = dense_oracle::active_sets(&problem, &sol);
            let dense = dense_oracle::solve_equality_kkt(&problem, &active).unwrap();
            for k in 0..problem.stages.len() {
                let err = (&sol.states[k] - &dense.states[k]).amax();
                assert!(err < 1e-6, "seed {seed} state {k} differs by {err}");
            }
        }
    }

    #[test]
    fn reports_failure_with_residuals() {
        // Contradictory constant constraints on x0 cannot be satisfied.
        let mut problem = lqr_double_integrator(3);
        problem.stages[0].c = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        problem.stages[0].d = DMatrix::zeros(1, 1);
        problem.stages[0].upper = DVector::from_vec(vec![-1.0]); // x0[0] <= -1, but x0 = 0
        let err = solve_qp(&problem, &IpmSettings::default()).unwrap_err();
        match err {
            Error::QpFailure { feasibility, .. } => assert!(feasibility > 1e-6),
            other => panic!("unexpected {other:?}"),
        }
    }
}
