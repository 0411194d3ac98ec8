//! Time-varying corridor around the path: an `n_p`-sided polyhedron in the
//! transverse plane whose face parameters are piecewise cubic polynomials
//! in progress, with event-driven rebuilds.
//!
//! Face normals sit at equal angles around the center line; each face row
//! `(a, b, c)` is normalized so `a*w1 + b*w2 - c` is a signed distance in
//! meters. Face planes interpolate the requested profile exactly at section
//! knots with first-derivative continuity (centered-difference slopes).

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::PathSpline;

/// Cap on corridor reach relative to the local curvature radius, keeping
/// every reachable point clear of the progress-rate singularity.
pub const GUARD_RADIUS_FRACTION: f64 = 0.9;

/// A localized pinch/displacement of the corridor, blended smoothly into
/// the base width (cosine blend over `+-blend` meters).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TunnelFeature {
    pub s: f64,
    pub half_width: f64,
    #[serde(default)]
    pub offset: [f64; 2],
    pub blend: f64,
}

/// A hard replacement of the corridor over an s-interval, with a leading
/// transition gap spanning the union of old and new cross sections.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SectionOverride {
    pub s_start: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub s_end: Option<f64>,
    pub half_width: f64,
    #[serde(default)]
    pub offset: [f64; 2],
    #[serde(default)]
    pub gap: f64,
}

/// A linear half-width ramp over an s-interval.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TunnelRamp {
    pub s_start: f64,
    pub s_end: f64,
    pub half_width_start: f64,
    pub half_width_end: f64,
}

/// Corridor geometry as a function of progress: base width, linear ramps,
/// smooth features (gates, chicanes) and hard overrides (events).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TunnelShape {
    pub base_half_width: f64,
    #[serde(default)]
    pub ramps: Vec<TunnelRamp>,
    #[serde(default)]
    pub features: Vec<TunnelFeature>,
    #[serde(default)]
    pub overrides: Vec<SectionOverride>,
}

/// Cross section at one s: per-face plane distances from the path plus the
/// corridor center used for references and feasibility checks.
#[derive(Debug, Clone)]
pub struct CrossSection {
    pub face_distances: Vec<f64>,
    pub center: Vector2<f64>,
}

impl TunnelShape {
    pub fn uniform(half_width: f64) -> Self {
        Self {
            base_half_width: half_width,
            ramps: Vec::new(),
            features: Vec::new(),
            overrides: Vec::new(),
        }
    }

    /// Corridor center line in transverse coordinates.
    pub fn center(&self, s: f64) -> Vector2<f64> {
        self.blended(s).1
    }

    fn blended(&self, s: f64) -> (f64, Vector2<f64>) {
        let mut hw = self.base_half_width;
        let mut off = Vector2::zeros();
        for r in &self.ramps {
            if s >= r.s_start && s <= r.s_end {
                let frac = (s - r.s_start) / (r.s_end - r.s_start);
                hw = r.half_width_start + (r.half_width_end - r.half_width_start) * frac;
            }
        }
        for f in &self.features {
            if f.blend > 0.0 && (s - f.s).abs() < f.blend {
                let lam = 0.5 * (1.0 + (std::f64::consts::PI * (s - f.s) / f.blend).cos());
                hw = hw + (f.half_width - hw) * lam;
                off = off + (Vector2::new(f.offset[0], f.offset[1]) - off) * lam;
            }
        }
        (hw, off)
    }

    /// Evaluate the cross section for the given face directions.
    pub fn cross_section(&self, s: f64, face_dirs: &[Vector2<f64>]) -> CrossSection {
        let (hw, off) = self.blended(s);
        let mut distances: Vec<f64> = face_dirs.iter().map(|a| hw + a.dot(&off)).collect();
        let mut center = off;
        for o in &self.overrides {
            let end = o.s_end.unwrap_or(f64::INFINITY);
            if s < o.s_start || s > end {
                continue;
            }
            let o_off = Vector2::new(o.offset[0], o.offset[1]);
            let o_dist: Vec<f64> = face_dirs.iter().map(|a| o.half_width + a.dot(&o_off)).collect();
            if s < o.s_start + o.gap {
                // Transition gap: smallest polytope containing both sections.
                for (d, od) in distances.iter_mut().zip(o_dist.iter()) {
                    *d = d.max(*od);
                }
                center = (center + o_off) * 0.5;
            } else {
                distances = o_dist;
                center = o_off;
            }
        }
        CrossSection {
            face_distances: distances,
            center,
        }
    }
}

/// How the corridor reacts to the world changing: at a trigger instant the
/// shape gains an override (or replaces the geometry over an interval).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TunnelEvent {
    pub trigger: EventTrigger,
    pub change: SectionOverride,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type", content = "value")]
pub enum EventTrigger {
    /// Fires when simulation time reaches the value [s].
    Time(f64),
    /// Fires when vehicle progress reaches the value [m].
    Progress(f64),
}

impl EventTrigger {
    pub fn fired(&self, time: f64, progress: f64) -> bool {
        match self {
            EventTrigger::Time(t) => time >= *t,
            EventTrigger::Progress(s) => progress >= *s,
        }
    }
}

/// Build parameters for the piecewise-cubic corridor.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TunnelConfig {
    pub faces: usize,
    pub k_tau: usize,
    /// Shooting-node count the fidelity factor multiplies.
    pub stages: usize,
}

impl Default for TunnelConfig {
    fn default() -> Self {
        Self {
            faces: 4,
            k_tau: 10,
            stages: 50,
        }
    }
}

impl TunnelConfig {
    pub fn sections(&self) -> usize {
        self.k_tau * self.stages - 1
    }
}

/// Piecewise-cubic corridor over an s-window.
#[derive(Debug, Clone)]
pub struct TunnelSpec {
    face_dirs: Vec<Vector2<f64>>,
    knots: Vec<f64>,
    /// coeffs[face][section][column(a,b,c)] = local cubic [c0, c1, c2, c3].
    coeffs: Vec<Vec<[[f64; 4]; 3]>>,
    s_lo: f64,
    s_hi: f64,
}

/// One evaluated face row of the constraint matrix.
#[derive(Debug, Clone, Copy)]
pub struct FaceRow {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    /// s-derivatives of the three columns.
    pub da: f64,
    pub db: f64,
    pub dc: f64,
}

/// Fit the corridor polynomials over `window`, `k_tau * N - 1` sections.
pub fn build_tunnel(
    spline: &PathSpline,
    shape: &TunnelShape,
    config: &TunnelConfig,
    window: (f64, f64),
) -> Result<TunnelSpec> {
    let (s_lo, s_hi) = window;
    if config.faces < 3 {
        return Err(Error::Tunnel(format!(
            "need at least 3 faces, got {}",
            config.faces
        )));
    }
    if !(s_hi > s_lo) {
        return Err(Error::Tunnel("window must have positive length".into()));
    }
    let sections = config.sections();
    let n_knots = sections + 1;
    let face_dirs: Vec<Vector2<f64>> = (0..config.faces)
        .map(|i| {
            let th = 2.0 * std::f64::consts::PI * i as f64 / config.faces as f64;
            Vector2::new(th.cos(), th.sin())
        })
        .collect();

    let h = (s_hi - s_lo) / sections as f64;
    let knots: Vec<f64> = (0..n_knots).map(|i| s_lo + i as f64 * h).collect();

    // Sample the profile at knots; cap face reach by the curvature guard.
    let inradius_factor = (std::f64::consts::PI / config.faces as f64).cos();
    let mut samples: Vec<Vec<[f64; 3]>> = vec![Vec::with_capacity(n_knots); config.faces];
    for &s in &knots {
        let cross = shape.cross_section(s, &face_dirs);
        let kappa = spline.curvature(s);
        let cap = if kappa > 1e-9 {
            GUARD_RADIUS_FRACTION * inradius_factor / kappa
        } else {
            f64::INFINITY
        };
        for (i, dir) in face_dirs.iter().enumerate() {
            let c = cross.face_distances[i].min(cap);
            // The corridor must keep its own center strictly inside.
            if c - dir.dot(&cross.center) <= 0.0 {
                return Err(Error::Tunnel(format!(
                    "profile leaves no width at s = {s} (face {i})"
                )));
            }
            samples[i].push([dir.x, dir.y, c]);
        }
    }

    // Per-face, per-column clamped cubics: exact at knots, centered-difference
    // slopes at interior knots give C1 continuity.
    let mut coeffs = Vec::with_capacity(config.faces);
    for face_samples in &samples {
        let mut face_sections = Vec::with_capacity(sections);
        for n in 0..sections {
            let mut cols = [[0.0; 4]; 3];
            for col in 0..3 {
                let y0 = face_samples[n][col];
                let y1 = face_samples[n + 1][col];
                let slope_at = |k: usize| -> f64 {
                    if k == 0 {
                        (face_samples[1][col] - face_samples[0][col]) / h
                    } else if k == n_knots - 1 {
                        (face_samples[k][col] - face_samples[k - 1][col]) / h
                    } else {
                        (face_samples[k + 1][col] - face_samples[k - 1][col]) / (2.0 * h)
                    }
                };
                let m0 = slope_at(n);
                let m1 = slope_at(n + 1);
                let d = (y1 - y0) / h;
                cols[col] = [
                    y0,
                    m0,
                    (3.0 * d - 2.0 * m0 - m1) / h,
                    (m0 + m1 - 2.0 * d) / (h * h),
                ];
            }
            face_sections.push(cols);
        }
        coeffs.push(face_sections);
    }

    Ok(TunnelSpec {
        face_dirs,
        knots,
        coeffs,
        s_lo,
        s_hi,
    })
}

impl TunnelSpec {
    pub fn faces(&self) -> usize {
        self.face_dirs.len()
    }

    pub fn range(&self) -> (f64, f64) {
        (self.s_lo, self.s_hi)
    }

    pub fn sections(&self) -> usize {
        self.coeffs[0].len()
    }

    /// Total cubic-coefficient count: 12 per face and section.
    pub fn coefficient_count(&self) -> usize {
        12 * self.faces() * self.sections()
    }

    pub fn in_range(&self, s: f64) -> bool {
        s >= self.s_lo && s <= self.s_hi
    }

    #[inline]
    fn locate(&self, s: f64) -> (usize, f64) {
        let clamped = s.clamp(self.s_lo, self.s_hi);
        let h = (self.s_hi - self.s_lo) / self.sections() as f64;
        let idx = (((clamped - self.s_lo) / h) as usize).min(self.sections() - 1);
        (idx, clamped - self.knots[idx])
    }

    /// Face rows with their s-derivatives; `s` outside the window clamps.
    pub fn rows(&self, s: f64) -> Vec<FaceRow> {
        let (idx, t) = self.locate(s);
        self.coeffs
            .iter()
            .map(|face| {
                let cols = &face[idx];
                let ev = |c: &[f64; 4]| ((c[3] * t + c[2]) * t + c[1]) * t + c[0];
                let dv = |c: &[f64; 4]| (3.0 * c[3] * t + 2.0 * c[2]) * t + c[1];
                FaceRow {
                    a: ev(&cols[0]),
                    b: ev(&cols[1]),
                    c: ev(&cols[2]),
                    da: dv(&cols[0]),
                    db: dv(&cols[1]),
                    dc: dv(&cols[2]),
                }
            })
            .collect()
    }

    /// The n_p x 3 constraint matrix at `s` (rows `(a, b, c)`).
    pub fn eval(&self, s: f64) -> nalgebra::DMatrix<f64> {
        let rows = self.rows(s);
        let mut m = nalgebra::DMatrix::zeros(rows.len(), 3);
        for (i, r) in rows.iter().enumerate() {
            m[(i, 0)] = r.a;
            m[(i, 1)] = r.b;
            m[(i, 2)] = r.c;
        }
        m
    }

    /// Signed distances to every face: positive means outside.
    pub fn residual(&self, s: f64, w: &Vector2<f64>) -> Vec<f64> {
        self.rows(s)
            .iter()
            .map(|r| r.a * w.x + r.b * w.y - r.c)
            .collect()
    }

    /// Largest face violation at `(s, w)` in meters.
    pub fn max_residual(&self, s: f64, w: &Vector2<f64>) -> f64 {
        self.residual(s, w).into_iter().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Live corridor: shape (source of truth) plus the fitted polynomial spec.
#[derive(Debug, Clone)]
pub struct Tunnel {
    pub shape: TunnelShape,
    pub config: TunnelConfig,
    pub spec: TunnelSpec,
}

impl Tunnel {
    pub fn build(
        spline: &PathSpline,
        shape: TunnelShape,
        config: TunnelConfig,
        window: (f64, f64),
    ) -> Result<Self> {
        let spec = build_tunnel(spline, &shape, &config, window)?;
        Ok(Self {
            shape,
            config,
            spec,
        })
    }

    /// Refit the polynomials to a new window (same geometry).
    pub fn rebuild(&mut self, spline: &PathSpline, window: (f64, f64)) -> Result<()> {
        self.spec = build_tunnel(spline, &self.shape, &self.config, window)?;
        Ok(())
    }

    /// Apply an event's geometry change; returns the rebuilt corridor.
    pub fn apply_event(&self, spline: &PathSpline, event: &TunnelEvent) -> Result<Self> {
        if event.change.s_start < 0.0
            || event.change.s_end.map_or(false, |e| e > spline.length() + 1e-9)
        {
            return Err(Error::Tunnel(format!(
                "event interval [{}, {:?}] outside path range",
                event.change.s_start, event.change.s_end
            )));
        }
        let mut shape = self.shape.clone();
        shape.overrides.push(event.change.clone());
        let spec = build_tunnel(spline, &shape, &self.config, self.spec.range())?;
        Ok(Self {
            shape,
            config: self.config,
            spec,
        })
    }

    /// Corridor center in transverse coordinates (reference target).
    pub fn center(&self, s: f64) -> Vector2<f64> {
        self.shape
            .cross_section(s, &self.spec.face_dirs)
            .center
    }
}
