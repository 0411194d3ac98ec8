//! Arc-length-parametrized path splines with Frenet frames, curvature,
//! torsion and closest-point projection.
//!
//! A path is fitted through waypoints with chord-length parameters, then
//! reparametrized toward arc length over three refinement passes and
//! resampled onto a uniform knot grid. Tangent/normal/binormal evaluators
//! are built from the cached splines with exact s-derivatives, so the
//! path-coordinate dynamics can differentiate them consistently.

pub mod cubic;
pub mod track;

use nalgebra::Vector3;

use crate::error::{Error, Result};
use cubic::{Cubic1d, Vec3Spline};

/// Curvature below this is treated as a straight segment and the normal is
/// parallel-transported from the previous knot [1/m].
pub const EPS_KAPPA: f64 = 1e-6;

/// Orthonormal Frenet triad with curvature and torsion at one path point.
#[derive(Debug, Clone, Copy)]
pub struct FrenetFrame {
    pub tangent: Vector3<f64>,
    pub normal: Vector3<f64>,
    pub binormal: Vector3<f64>,
    /// Curvature [1/m], nonnegative.
    pub kappa: f64,
    /// Torsion [1/m].
    pub sigma: f64,
}

/// Result of a closest-point projection.
#[derive(Debug, Clone, Copy)]
pub struct Projection {
    /// Arc position of the local minimizer, clamped to [0, L].
    pub s: f64,
    /// Euclidean distance at the minimizer.
    pub distance: f64,
    /// Newton converged within the iteration budget.
    pub newton_converged: bool,
    /// The +-2 m grid-search fallback was used.
    pub grid_fallback: bool,
}

/// First and second s-derivatives of the transported frame at one point.
///
/// `kappa_n`/`kappa_b` are the frame's own curvature components
/// (tangent' projected on normal/binormal) and `sigma` its torsion
/// (normal' projected on binormal); together with `lambda = |gamma'|`
/// they make the progress-rate and transverse-rate equations exact
/// time-derivatives of the projection, not just approximations.
#[derive(Debug, Clone, Copy)]
pub struct PathKinematics {
    pub s: f64,
    pub gamma: Vector3<f64>,
    pub gamma_d: Vector3<f64>,
    pub tangent: Vector3<f64>,
    pub normal: Vector3<f64>,
    pub binormal: Vector3<f64>,
    pub tangent_d: Vector3<f64>,
    pub normal_d: Vector3<f64>,
    pub binormal_d: Vector3<f64>,
    pub lambda: f64,
    pub lambda_d: f64,
    pub kappa_n: f64,
    pub kappa_n_d: f64,
    pub kappa_b: f64,
    pub kappa_b_d: f64,
    pub sigma: f64,
    pub sigma_d: f64,
}

impl PathKinematics {
    /// Denominator of the progress-rate equation, `lambda - w1*kappa_n - w2*kappa_b`.
    ///
    /// On an ideal arc-length path this is the familiar `1 - kappa*w1`.
    #[inline]
    pub fn progress_denominator(&self, w1: f64, w2: f64) -> f64 {
        self.lambda - w1 * self.kappa_n - w2 * self.kappa_b
    }
}

/// Arc-length-parametrized path with cached frame splines.
#[derive(Debug, Clone)]
pub struct PathSpline {
    gamma: Vec3Spline,
    normal_cache: Vec3Spline,
    kappa_cache: Cubic1d,
    sigma_cache: Cubic1d,
    length: f64,
    knot_spacing: f64,
}

/// Fit a path through waypoints; cache spacing defaults apply.
pub fn fit_path(waypoints: &[Vector3<f64>], knot_spacing: f64) -> Result<PathSpline> {
    fit_path_with(waypoints, knot_spacing, Vector3::new(0.0, 1.0, 0.0))
}

/// Fit with an explicit world-frame reference for the initial normal on
/// straight starts (projected orthogonal to the tangent).
pub fn fit_path_with(
    waypoints: &[Vector3<f64>],
    knot_spacing: f64,
    initial_normal: Vector3<f64>,
) -> Result<PathSpline> {
    if waypoints.len() < 4 {
        return Err(Error::InvalidInput(format!(
            "waypoints: need at least 4, got {}",
            waypoints.len()
        )));
    }
    if !(knot_spacing > 0.0) {
        return Err(Error::InvalidInput("knot_spacing must be positive".into()));
    }
    for (i, w) in waypoints.windows(2).enumerate() {
        if (w[1] - w[0]).norm() < 1e-9 {
            return Err(Error::InvalidInput(format!(
                "waypoints: entries {} and {} coincide",
                i,
                i + 1
            )));
        }
    }

    // Chord-length parameters, then arc-length refinement passes.
    let mut params: Vec<f64> = Vec::with_capacity(waypoints.len());
    let mut acc = 0.0;
    params.push(0.0);
    for w in waypoints.windows(2) {
        acc += (w[1] - w[0]).norm();
        params.push(acc);
    }
    let mut spline = Vec3Spline::fit(&params, waypoints)?;
    for _ in 0..3 {
        let mut arc = Vec::with_capacity(params.len());
        let mut total = 0.0;
        arc.push(0.0);
        for w in params.windows(2) {
            total += spline.arc_length(w[0], w[1]);
            arc.push(total);
        }
        params = arc;
        spline = Vec3Spline::fit(&params, waypoints)?;
    }
    let length = *params.last().unwrap();

    // Resample onto a uniform grid; every cached quantity shares these knots.
    let n_knots = ((length / knot_spacing).ceil() as usize + 1).max(4);
    let h = length / (n_knots - 1) as f64;
    let grid: Vec<f64> = (0..n_knots).map(|i| i as f64 * h).collect();
    let samples: Vec<Vector3<f64>> = grid.iter().map(|&s| spline.eval(s)).collect();
    let gamma = Vec3Spline::fit(&grid, &samples)?;

    // Walk the grid building the frame caches; the normal is transported
    // across straight segments so it stays continuous.
    let mut normals = Vec::with_capacity(n_knots);
    let mut kappas = Vec::with_capacity(n_knots);
    let mut sigmas = Vec::with_capacity(n_knots);
    let mut prev_normal: Option<Vector3<f64>> = None;
    for &s in &grid {
        let (_, u, u2, u3) = gamma.eval_all(s);
        let tangent = u.normalize();
        let kappa = u2.norm();
        let normal = if kappa >= EPS_KAPPA {
            orthonormal_to(&u2, &tangent).ok_or_else(|| {
                Error::SplineFit(format!("degenerate curvature direction at s = {s}"))
            })?
        } else {
            let reference = prev_normal.unwrap_or(initial_normal);
            orthonormal_to(&reference, &tangent)
                .or_else(|| orthonormal_to(&Vector3::new(0.0, 0.0, 1.0), &tangent))
                .ok_or_else(|| {
                    Error::SplineFit(format!("cannot seed path normal at s = {s}"))
                })?
        };
        prev_normal = Some(normal);
        let cross = u.cross(&u2);
        let denom = cross.norm_squared();
        let sigma = if denom > 1e-12 { cross.dot(&u3) / denom } else { 0.0 };
        normals.push(normal);
        kappas.push(kappa);
        sigmas.push(sigma);
    }
    let normal_cache = Vec3Spline::fit(&grid, &normals)?;
    let kappa_cache = Cubic1d::fit(&grid, &kappas)?;
    let sigma_cache = Cubic1d::fit(&grid, &sigmas)?;

    Ok(PathSpline {
        gamma,
        normal_cache,
        kappa_cache,
        sigma_cache,
        length,
        knot_spacing: h,
    })
}

fn orthonormal_to(v: &Vector3<f64>, tangent: &Vector3<f64>) -> Option<Vector3<f64>> {
    let proj = v - tangent * v.dot(tangent);
    let n = proj.norm();
    if n < 1e-9 {
        None
    } else {
        Some(proj / n)
    }
}

impl PathSpline {
    pub fn length(&self) -> f64 {
        self.length
    }

    pub fn knot_spacing(&self) -> f64 {
        self.knot_spacing
    }

    pub fn position(&self, s: f64) -> Vector3<f64> {
        self.gamma.eval(self.clamp(s))
    }

    /// Curvature from the cached spline, clamped nonnegative.
    pub fn curvature(&self, s: f64) -> f64 {
        self.kappa_cache.eval(self.clamp(s)).max(0.0)
    }

    pub fn torsion(&self, s: f64) -> f64 {
        self.sigma_cache.eval(self.clamp(s))
    }

    #[inline]
    fn clamp(&self, s: f64) -> f64 {
        s.clamp(0.0, self.length)
    }

    /// Orthonormal frame, curvature and torsion at `s`.
    pub fn frenet_frame(&self, s: f64) -> Result<FrenetFrame> {
        if s < -1e-12 || s > self.length + 1e-12 {
            return Err(Error::OutOfRange {
                s,
                length: self.length,
            });
        }
        let kin = self.kinematics(s);
        Ok(FrenetFrame {
            tangent: kin.tangent,
            normal: kin.normal,
            binormal: kin.binormal,
            kappa: self.curvature(s),
            sigma: self.torsion(s),
        })
    }

    /// Frame and exact frame derivatives used by the path-coordinate model.
    pub fn kinematics(&self, s: f64) -> PathKinematics {
        let s = self.clamp(s);
        let (gamma, u, u2, u3) = self.gamma.eval_all(s);
        let (m, m1, m2, _) = {
            let (v, d1, d2, d3) = self.normal_cache.eval_all(s);
            (v, d1, d2, d3)
        };

        // Unit tangent chain: t = u/|u| with two s-derivatives.
        let nu = u.norm();
        let nu_d = u.dot(&u2) / nu;
        let nu_dd = (u2.dot(&u2) + u.dot(&u3) - nu_d * nu_d) / nu;
        let tangent = u / nu;
        let tangent_d = u2 / nu - u * (nu_d / (nu * nu));
        let tangent_dd = u3 / nu - u2 * (2.0 * nu_d / (nu * nu)) - u * (nu_dd / (nu * nu))
            + u * (2.0 * nu_d * nu_d / (nu * nu * nu));

        // Project the cached normal orthogonal to the tangent, then normalize.
        let alpha = m.dot(&tangent);
        let alpha_d = m1.dot(&tangent) + m.dot(&tangent_d);
        let alpha_dd = m2.dot(&tangent) + 2.0 * m1.dot(&tangent_d) + m.dot(&tangent_dd);
        let r = m - tangent * alpha;
        let r1 = m1 - tangent * alpha_d - tangent_d * alpha;
        let r2 = m2 - tangent * alpha_dd - tangent_d * (2.0 * alpha_d) - tangent_dd * alpha;

        let rho = r.norm();
        let rho_d = r.dot(&r1) / rho;
        let rho_dd = (r1.dot(&r1) + r.dot(&r2) - rho_d * rho_d) / rho;
        let normal = r / rho;
        let normal_d = r1 / rho - r * (rho_d / (rho * rho));
        let normal_dd = r2 / rho - r1 * (2.0 * rho_d / (rho * rho)) - r * (rho_dd / (rho * rho))
            + r * (2.0 * rho_d * rho_d / (rho * rho * rho));

        let binormal = tangent.cross(&normal);
        let binormal_d = tangent_d.cross(&normal) + tangent.cross(&normal_d);

        let kappa_n = tangent_d.dot(&normal);
        let kappa_n_d = tangent_dd.dot(&normal) + tangent_d.dot(&normal_d);
        let kappa_b = tangent_d.dot(&binormal);
        let kappa_b_d = tangent_dd.dot(&binormal) + tangent_d.dot(&binormal_d);
        let sigma = normal_d.dot(&binormal);
        let sigma_d = normal_dd.dot(&binormal) + normal_d.dot(&binormal_d);

        PathKinematics {
            s,
            gamma,
            gamma_d: u,
            tangent,
            normal,
            binormal,
            tangent_d,
            normal_d,
            binormal_d,
            lambda: nu,
            lambda_d: nu_d,
            kappa_n,
            kappa_n_d,
            kappa_b,
            kappa_b_d,
            sigma,
            sigma_d,
        }
    }

    /// Local closest-point projection of `p`, warm-started at `s_guess`.
    ///
    /// Newton iterations on the stationarity condition `(p - gamma).gamma' = 0`
    /// clamped to [0, L]; falls back to a +-2 m grid search when Newton stalls.
    pub fn closest_point(&self, p: &Vector3<f64>, s_guess: f64) -> Result<Projection> {
        if s_guess < -1e-9 || s_guess > self.length + 1e-9 {
            return Err(Error::Projection {
                s_guess,
                reason: format!("warm start outside [0, {}]", self.length),
            });
        }
        let mut s = self.clamp(s_guess);
        let mut converged = false;
        for _ in 0..20 {
            let (gamma, u, u2, _) = self.gamma.eval_all(s);
            let d = p - gamma;
            let g = d.dot(&u);
            let g_d = -u.norm_squared() + d.dot(&u2);
            if g_d.abs() < 1e-12 {
                break;
            }
            let step = -g / g_d;
            let new_s = self.clamp(s + step);
            let delta = (new_s - s).abs();
            s = new_s;
            if delta < 1e-8 {
                converged = true;
                break;
            }
        }
        if converged {
            let d = p - self.gamma.eval(s);
            return Ok(Projection {
                s,
                distance: d.norm(),
                newton_converged: true,
                grid_fallback: false,
            });
        }
        // Grid search over a +-2 m window, then polish with a few Newton steps.
        let lo = self.clamp(s_guess - 2.0);
        let hi = self.clamp(s_guess + 2.0);
        let samples = 400;
        let mut best_s = lo;
        let mut best_d2 = f64::INFINITY;
        for i in 0..=samples {
            let cand = lo + (hi - lo) * i as f64 / samples as f64;
            let d2 = (p - self.gamma.eval(cand)).norm_squared();
            if d2 < best_d2 {
                best_d2 = d2;
                best_s = cand;
            }
        }
        let mut s = best_s;
        for _ in 0..10 {
            let (gamma, u, u2, _) = self.gamma.eval_all(s);
            let d = p - gamma;
            let g = d.dot(&u);
            let g_d = -u.norm_squared() + d.dot(&u2);
            if g_d.abs() < 1e-12 {
                break;
            }
            let new_s = self.clamp(s - g / g_d);
            if (new_s - s).abs() < 1e-10 {
                s = new_s;
                break;
            }
            s = new_s;
        }
        let d = p - self.gamma.eval(s);
        Ok(Projection {
            s,
            distance: d.norm(),
            newton_converged: false,
            grid_fallback: true,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn straight_path() -> PathSpline {
        let wps: Vec<Vector3<f64>> = (0..11)
            .map(|i| Vector3::new(i as f64, 0.5, -0.2))
            .collect();
        fit_path(&wps, 0.3).unwrap()
    }

    fn circle_path(radius: f64, spacing: f64) -> PathSpline {
        let n = 256;
        let wps: Vec<Vector3<f64>> = (0..=n)
            .map(|i| {
                let th = 2.0 * std::f64::consts::PI * i as f64 / n as f64;
                Vector3::new(radius * th.cos(), radius * th.sin(), 0.0)
            })
            .collect();
        fit_path(&wps, spacing).unwrap()
    }

    fn helix_path(spacing: f64) -> PathSpline {
        helix_path_sampled(0.1, spacing)
    }

    fn helix_path_sampled(wp_spacing: f64, cache_spacing: f64) -> PathSpline {
        // Arc-length parametrized helix with kappa = sigma = 0.5.
        let r2 = std::f64::consts::SQRT_2;
        let n = (20.0 / wp_spacing) as usize;
        let wps: Vec<Vector3<f64>> = (0..n)
            .map(|i| {
                let s = i as f64 * wp_spacing;
                Vector3::new((s / r2).cos(), (s / r2).sin(), s / r2)
            })
            .collect();
        fit_path(&wps, cache_spacing).unwrap()
    }

    #[test]
    fn straight_line_is_exact() {
        let sp = straight_path();
        assert_relative_eq!(sp.length(), 10.0, epsilon = 1e-6);
        let p = sp.position(3.7);
        assert_relative_eq!(p.x, 3.7, epsilon = 1e-9);
        assert_relative_eq!(p.y, 0.5, epsilon = 1e-9);
        assert_relative_eq!(p.z, -0.2, epsilon = 1e-9);
        let f = sp.frenet_frame(5.0).unwrap();
        assert!((f.tangent - Vector3::new(1.0, 0.0, 0.0)).norm() < 1e-9);
        assert!(f.kappa < 1e-9);
        assert!(f.sigma.abs() < 1e-9);
        // Parallel-transported normal from the +y reference.
        assert!((f.normal - Vector3::new(0.0, 1.0, 0.0)).norm() < 1e-9);
    }

    #[test]
    fn circle_circumference_within_tenth_percent() {
        let sp = circle_path(2.0, 0.3);
        let expected = 4.0 * std::f64::consts::PI;
        assert!((sp.length() - expected).abs() / expected < 1e-3);
    }

    #[test]
    fn helix_tangent_norm_within_tolerance() {
        let sp = helix_path(0.1);
        let n = (sp.length() / sp.knot_spacing()) as usize;
        for i in 0..=n {
            let s = i as f64 * sp.knot_spacing();
            let kin = sp.kinematics(s.min(sp.length()));
            assert!(
                (kin.lambda - 1.0).abs() < 1e-3,
                "|gamma'| = {} at s = {s}",
                kin.lambda
            );
        }
    }

    #[test]
    fn circle_frame_points_inward() {
        let sp = circle_path(2.0, 0.05);
        let s = sp.length() * 0.37;
        let f = sp.frenet_frame(s).unwrap();
        assert_relative_eq!(f.kappa, 0.5, epsilon = 2e-4);
        assert!(f.sigma.abs() < 2e-4);
        // Normal points toward the circle center.
        let p = sp.position(s);
        let to_center = -p.normalize();
        assert!((f.normal - to_center).norm() < 1e-3);
    }

    #[test]
    fn helix_curvature_and_torsion() {
        let sp = helix_path_sampled(0.03, 0.03);
        for frac in [0.2, 0.5, 0.8] {
            let s = sp.length() * frac;
            let f = sp.frenet_frame(s).unwrap();
            assert_relative_eq!(f.kappa, 0.5, epsilon = 1e-4);
            assert_relative_eq!(f.sigma, 0.5, epsilon = 1e-4);
        }
    }

    #[test]
    fn frames_orthonormal_and_right_handed_at_knots() {
        for sp in [circle_path(2.0, 0.3), helix_path(0.3), straight_path()] {
            let n = (sp.length() / sp.knot_spacing()) as usize;
            for i in 0..=n {
                let s = (i as f64 * sp.knot_spacing()).min(sp.length());
                let k = sp.kinematics(s);
                assert!(k.tangent.dot(&k.normal).abs() < 1e-6);
                assert!(k.tangent.dot(&k.binormal).abs() < 1e-6);
                assert!(k.normal.dot(&k.binormal).abs() < 1e-6);
                assert!((k.binormal - k.tangent.cross(&k.normal)).norm() < 1e-6);
                let det = k.tangent.dot(&k.normal.cross(&k.binormal));
                assert!((det - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn frenet_ode_consistency() {
        // Finite-difference dt/ds vs kappa*n and db/ds vs -sigma*n.
        for sp in [circle_path(2.0, 0.1), helix_path(0.1)] {
            let h = 1e-5;
            for i in 1..1000 {
                let s = sp.length() * i as f64 / 1001.0;
                let f0 = sp.frenet_frame(s - h).unwrap();
                let f1 = sp.frenet_frame(s + h).unwrap();
                let f = sp.frenet_frame(s).unwrap();
                let dt_ds = (f1.tangent - f0.tangent) / (2.0 * h);
                let db_ds = (f1.binormal - f0.binormal) / (2.0 * h);
                let tol = 1e-3 * (1.0 + f.kappa);
                assert!(
                    (dt_ds - f.normal * f.kappa).amax() <= tol,
                    "dt/ds residual {} at s={}",
                    (dt_ds - f.normal * f.kappa).amax(),
                    s
                );
                assert!(
                    (db_ds + f.normal * f.sigma).amax() <= tol,
                    "db/ds residual {} at s={}",
                    (db_ds + f.normal * f.sigma).amax(),
                    s
                );
            }
        }
    }

    #[test]
    fn kinematics_derivatives_match_finite_differences() {
        let sp = helix_path(0.1);
        let h = 1e-6;
        for frac in [0.21, 0.48, 0.76] {
            let s = sp.length() * frac;
            let k = sp.kinematics(s);
            let km = sp.kinematics(s - h);
            let kp = sp.kinematics(s + h);
            let fd_t = (kp.tangent - km.tangent) / (2.0 * h);
            let fd_n = (kp.normal - km.normal) / (2.0 * h);
            let fd_b = (kp.binormal - km.binormal) / (2.0 * h);
            assert!((fd_t - k.tangent_d).norm() < 1e-5);
            assert!((fd_n - k.normal_d).norm() < 1e-5);
            assert!((fd_b - k.binormal_d).norm() < 1e-5);
            let fd_sigma = (kp.sigma - km.sigma) / (2.0 * h);
            assert!((fd_sigma - k.sigma_d).abs() < 1e-4);
            let fd_kn = (kp.kappa_n - km.kappa_n) / (2.0 * h);
            assert!((fd_kn - k.kappa_n_d).abs() < 1e-4);
            let fd_lambda = (kp.lambda - km.lambda) / (2.0 * h);
            assert!((fd_lambda - k.lambda_d).abs() < 1e-5);
        }
    }

    #[test]
    fn closest_point_on_path_returns_origin() {
        let sp = circle_path(2.0, 0.1);
        let s0 = 3.1;
        let p = sp.position(s0);
        let proj = sp.closest_point(&p, s0 + 0.4).unwrap();
        assert!(proj.newton_converged);
        assert!((proj.s - s0).abs() < 1e-6);
        assert!(proj.distance < 1e-9);
    }

    #[test]
    fn closest_point_perpendicular_foot_on_straight_path() {
        let sp = straight_path();
        let p = Vector3::new(3.0, 0.9, -0.4);
        let proj = sp.closest_point(&p, 1.0).unwrap();
        assert!((proj.s - 3.0).abs() < 1e-8);
    }

    #[test]
    fn closest_point_matches_grid_oracle_on_circle() {
        let sp = circle_path(2.0, 0.05);
        let theta: f64 = 0.9;
        let p = Vector3::new(1.5 * theta.cos(), 1.5 * theta.sin(), 0.0);
        // Dense grid-search oracle.
        let mut best = (0.0, f64::INFINITY);
        for i in 0..10_000 {
            let s = sp.length() * i as f64 / 9_999.0;
            let d = (p - sp.position(s)).norm();
            if d < best.1 {
                best = (s, d);
            }
        }
        let proj = sp.closest_point(&p, 2.0 * theta + 0.3).unwrap();
        assert!(
            (proj.s - best.0).abs() < 2e-3,
            "newton {} vs grid {}",
            proj.s,
            best.0
        );
        assert!((proj.s - 2.0 * theta).abs() < 1e-3);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn closest_point_stationarity(frac in 0.05f64..0.95, off_n in -0.8f64..0.8, off_b in -0.8f64..0.8, wobble in -0.3f64..0.3) {
            let sp = helix_path(0.1);
            let s0 = sp.length() * frac;
            let k = sp.kinematics(s0);
            let p = k.gamma + k.normal * off_n + k.binormal * off_b;
            let proj = sp.closest_point(&p, (s0 + wobble).clamp(0.0, sp.length())).unwrap();
            prop_assume!(proj.newton_converged);
            prop_assume!(proj.s > 1e-6 && proj.s < sp.length() - 1e-6);
            let kin = sp.kinematics(proj.s);
            let d = p - kin.gamma;
            let resid = d.dot(&kin.gamma_d).abs();
            prop_assert!(resid <= 1e-6 * d.norm().max(1e-12) + 1e-9);
        }
    }
}
