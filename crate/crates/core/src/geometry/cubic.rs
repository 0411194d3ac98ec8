//! Interpolating cubic splines with not-a-knot end conditions.
//!
//! Coefficients are stored per interval in local coordinates, so evaluation
//! is a knot lookup plus a Horner pass. Uniform knot grids get an O(1)
//! lookup, which the solver hot path relies on.

use crate::error::{Error, Result};

/// Scalar cubic spline on ascending knots.
#[derive(Debug, Clone)]
pub struct Cubic1d {
    knots: Vec<f64>,
    /// Per-interval local coefficients [c0, c1, c2, c3].
    coeffs: Vec<[f64; 4]>,
    uniform_h: Option<f64>,
}

impl Cubic1d {
    /// Fit an interpolating spline through `(knots, values)` with not-a-knot
    /// end conditions. Requires at least 4 strictly increasing knots.
    pub fn fit(knots: &[f64], values: &[f64]) -> Result<Self> {
        let n = knots.len();
        if n < 4 {
            return Err(Error::SplineFit(format!(
                "need at least 4 knots, got {n}"
            )));
        }
        if values.len() != n {
            return Err(Error::SplineFit(
                "knot and value counts differ".into(),
            ));
        }
        for w in knots.windows(2) {
            if !(w[1] > w[0]) {
                return Err(Error::SplineFit(format!(
                    "knots must be strictly increasing, got {} then {}",
                    w[0], w[1]
                )));
            }
        }
        let m = solve_not_a_knot(knots, values)?;
        let mut coeffs = Vec::with_capacity(n - 1);
        for i in 0..n - 1 {
            let h = knots[i + 1] - knots[i];
            let dy = (values[i + 1] - values[i]) / h;
            let c0 = values[i];
            let c1 = dy - h * (2.0 * m[i] + m[i + 1]) / 6.0;
            let c2 = 0.5 * m[i];
            let c3 = (m[i + 1] - m[i]) / (6.0 * h);
            coeffs.push([c0, c1, c2, c3]);
        }
        let h0 = knots[1] - knots[0];
        let uniform = knots
            .windows(2)
            .all(|w| ((w[1] - w[0]) - h0).abs() <= 1e-9 * h0.max(1.0));
        Ok(Self {
            knots: knots.to_vec(),
            coeffs,
            uniform_h: if uniform { Some(h0) } else { None },
        })
    }

    pub fn start(&self) -> f64 {
        self.knots[0]
    }

    pub fn end(&self) -> f64 {
        *self.knots.last().unwrap()
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    /// Interval index containing `s` (end intervals extrapolate).
    #[inline]
    pub fn locate(&self, s: f64) -> usize {
        let last = self.coeffs.len() - 1;
        if let Some(h) = self.uniform_h {
            let idx = ((s - self.knots[0]) / h).floor();
            return (idx.max(0.0) as usize).min(last);
        }
        if s <= self.knots[0] {
            return 0;
        }
        if s >= self.knots[self.knots.len() - 1] {
            return last;
        }
        // partition_point: first knot > s, minus one
        self.knots.partition_point(|k| *k <= s).saturating_sub(1).min(last)
    }

    #[inline]
    pub fn eval(&self, s: f64) -> f64 {
        let i = self.locate(s);
        let t = s - self.knots[i];
        let c = &self.coeffs[i];
        ((c[3] * t + c[2]) * t + c[1]) * t + c[0]
    }

    #[inline]
    pub fn deriv(&self, s: f64) -> f64 {
        let i = self.locate(s);
        let t = s - self.knots[i];
        let c = &self.coeffs[i];
        (3.0 * c[3] * t + 2.0 * c[2]) * t + c[1]
    }

    /// Value and first three derivatives at `s` (third is piecewise constant).
    #[inline]
    pub fn eval_all(&self, s: f64) -> (f64, f64, f64, f64) {
        let i = self.locate(s);
        let t = s - self.knots[i];
        let c = &self.coeffs[i];
        let v = ((c[3] * t + c[2]) * t + c[1]) * t + c[0];
        let d1 = (3.0 * c[3] * t + 2.0 * c[2]) * t + c[1];
        let d2 = 6.0 * c[3] * t + 2.0 * c[2];
        let d3 = 6.0 * c[3];
        (v, d1, d2, d3)
    }
}

/// Solve for knot second derivatives with not-a-knot end conditions.
///
/// The end conditions (third-derivative continuity at the second and
/// second-to-last knots) express M_0 and M_{n-1} through their neighbors;
/// substituting them into the adjacent interior rows leaves a diagonally
/// dominant tridiagonal system over M_1..M_{n-2}.
fn solve_not_a_knot(x: &[f64], y: &[f64]) -> Result<Vec<f64>> {
    let n = x.len();
    let h: Vec<f64> = x.windows(2).map(|w| w[1] - w[0]).collect();

    // M0 = ((h0+h1) M1 - h0 M2) / h1
    // M_{n-1} = ((h_{n-3}+h_{n-2}) M_{n-2} - h_{n-2} M_{n-3}) / h_{n-3}
    let nu = n - 2;
    let mut sub = vec![0.0; nu];
    let mut diag = vec![0.0; nu];
    let mut sup = vec![0.0; nu];
    let mut rhs = vec![0.0; nu];
    for i in 1..=n - 2 {
        let j = i - 1;
        let mut a = h[i - 1] / 6.0;
        let mut b = (h[i - 1] + h[i]) / 3.0;
        let mut c = h[i] / 6.0;
        let r = (y[i + 1] - y[i]) / h[i] - (y[i] - y[i - 1]) / h[i - 1];
        if i == 1 {
            b += a * (h[0] + h[1]) / h[1];
            c -= a * h[0] / h[1];
            a = 0.0;
        }
        if i == n - 2 {
            b += c * (h[n - 3] + h[n - 2]) / h[n - 3];
            a -= c * h[n - 2] / h[n - 3];
            c = 0.0;
        }
        sub[j] = a;
        diag[j] = b;
        sup[j] = c;
        rhs[j] = r;
    }

    // Thomas sweep over the reduced system.
    let mut c_star = vec![0.0; nu];
    let mut d_star = vec![0.0; nu];
    if diag[0].abs() < 1e-300 {
        return Err(Error::SplineFit("singular spline system".into()));
    }
    c_star[0] = sup[0] / diag[0];
    d_star[0] = rhs[0] / diag[0];
    for i in 1..nu {
        let denom = diag[i] - sub[i] * c_star[i - 1];
        if denom.abs() < 1e-300 {
            return Err(Error::SplineFit("singular spline system".into()));
        }
        c_star[i] = sup[i] / denom;
        d_star[i] = (rhs[i] - sub[i] * d_star[i - 1]) / denom;
    }
    let mut m = vec![0.0; n];
    m[nu] = d_star[nu - 1];
    for i in (0..nu - 1).rev() {
        m[i + 1] = d_star[i] - c_star[i] * m[i + 2];
    }
    m[0] = ((h[0] + h[1]) * m[1] - h[0] * m[2]) / h[1];
    m[n - 1] = ((h[n - 3] + h[n - 2]) * m[n - 2] - h[n - 2] * m[n - 3]) / h[n - 3];
    Ok(m)
}

/// Three scalar splines sharing one knot grid.
#[derive(Debug, Clone)]
pub struct Vec3Spline {
    pub x: Cubic1d,
    pub y: Cubic1d,
    pub z: Cubic1d,
}

impl Vec3Spline {
    pub fn fit(knots: &[f64], points: &[nalgebra::Vector3<f64>]) -> Result<Self> {
        let xs: Vec<f64> = points.iter().map(|p| p.x).collect();
        let ys: Vec<f64> = points.iter().map(|p| p.y).collect();
        let zs: Vec<f64> = points.iter().map(|p| p.z).collect();
        Ok(Self {
            x: Cubic1d::fit(knots, &xs)?,
            y: Cubic1d::fit(knots, &ys)?,
            z: Cubic1d::fit(knots, &zs)?,
        })
    }

    pub fn start(&self) -> f64 {
        self.x.start()
    }

    pub fn end(&self) -> f64 {
        self.x.end()
    }

    #[inline]
    pub fn eval(&self, s: f64) -> nalgebra::Vector3<f64> {
        nalgebra::Vector3::new(self.x.eval(s), self.y.eval(s), self.z.eval(s))
    }

    #[inline]
    pub fn deriv(&self, s: f64) -> nalgebra::Vector3<f64> {
        nalgebra::Vector3::new(self.x.deriv(s), self.y.deriv(s), self.z.deriv(s))
    }

    /// Value plus first three derivative vectors.
    #[inline]
    pub fn eval_all(
        &self,
        s: f64,
    ) -> (
        nalgebra::Vector3<f64>,
        nalgebra::Vector3<f64>,
        nalgebra::Vector3<f64>,
        nalgebra::Vector3<f64>,
    ) {
        let (vx, dx, ddx, dddx) = self.x.eval_all(s);
        let (vy, dy, ddy, dddy) = self.y.eval_all(s);
        let (vz, dz, ddz, dddz) = self.z.eval_all(s);
        (
            nalgebra::Vector3::new(vx, vy, vz),
            nalgebra::Vector3::new(dx, dy, dz),
            nalgebra::Vector3::new(ddx, ddy, ddz),
            nalgebra::Vector3::new(dddx, dddy, dddz),
        )
    }

    /// Arc length of the curve between `a` and `b` by per-interval
    /// Gauss-Legendre quadrature.
    pub fn arc_length(&self, a: f64, b: f64) -> f64 {
        debug_assert!(b >= a);
        // 5-point Gauss-Legendre nodes/weights on [-1, 1].
        const GL_X: [f64; 5] = [
            0.0,
            -0.538_469_310_105_683_1,
            0.538_469_310_105_683_1,
            -0.906_179_845_938_664,
            0.906_179_845_938_664,
        ];
        const GL_W: [f64; 5] = [
            0.568_888_888_888_888_9,
            0.478_628_670_499_366_5,
            0.478_628_670_499_366_5,
            0.236_926_885_056_189_1,
            0.236_926_885_056_189_1,
        ];
        let knots = self.x.knots();
        let mut total = 0.0;
        let mut lo = a;
        // Split at knots so each quadrature panel sees a single polynomial.
        let mut idx = knots.partition_point(|k| *k <= a);
        loop {
            let hi = if idx < knots.len() && knots[idx] < b {
                knots[idx]
            } else {
                b
            };
            if hi > lo {
                // Two panels per piece keep the sqrt() integrand error tiny.
                for panel in 0..2 {
                    let phalf = 0.25 * (hi - lo);
                    let pmid = lo + (hi - lo) * 0.5 * panel as f64 + phalf;
                    for (xq, wq) in GL_X.iter().zip(GL_W.iter()) {
                        let s = pmid + phalf * xq;
                        total += wq * phalf * self.deriv(s).norm();
                    }
                }
            }
            if hi >= b {
                break;
            }
            lo = hi;
            idx += 1;
        }
        total
    }
}
