//! Track files: ordered waypoints or gates, loaded from JSON and fitted
//! into a path spline with a margin past the finish line so the controller
//! never evaluates beyond fitted data.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{fit_path_with, PathSpline};

/// A gate the vehicle should pass through.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Gate {
    pub center: [f64; 3],
    pub side_length: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub normal: Option<[f64; 3]>,
}

/// Track description: explicit waypoints or gate centers.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Track {
    pub name: String,
    #[serde(default)]
    pub closed: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub waypoints: Vec<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub gates: Vec<Gate>,
}

/// Gate location on the fitted path.
#[derive(Debug, Clone, Copy)]
pub struct GateOnPath {
    pub s: f64,
    pub side_length: f64,
}

/// A fitted track: spline, finish line and gate arc positions.
#[derive(Debug, Clone)]
pub struct FittedTrack {
    pub spline: PathSpline,
    /// Arc position of the last real waypoint; crossing it completes a lap.
    pub finish_s: f64,
    pub gates: Vec<GateOnPath>,
    pub name: String,
}

impl Track {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let track: Track = serde_json::from_str(&text)?;
        track.validate()?;
        Ok(track)
    }

    pub fn validate(&self) -> Result<()> {
        if self.waypoints.is_empty() && self.gates.is_empty() {
            return Err(Error::InvalidInput(
                "track: needs `waypoints` or `gates`".into(),
            ));
        }
        if !self.waypoints.is_empty() && !self.gates.is_empty() {
            return Err(Error::InvalidInput(
                "track: give either `waypoints` or `gates`, not both".into(),
            ));
        }
        let n = self.waypoints.len().max(self.gates.len());
        if n < 4 {
            return Err(Error::InvalidInput(format!(
                "track: need at least 4 waypoints/gates, got {n}"
            )));
        }
        for g in &self.gates {
            if !(g.side_length > 0.0) {
                return Err(Error::InvalidInput(
                    "track: gate side_length must be positive".into(),
                ));
            }
        }
        let all_finite = self
            .waypoints
            .iter()
            .chain(self.gates.iter().map(|g| &g.center))
            .all(|w| w.iter().all(|c| c.is_finite()));
        if !all_finite {
            return Err(Error::InvalidInput(
                "track: waypoints must be finite".into(),
            ));
        }
        Ok(())
    }

    fn centers(&self) -> Vec<Vector3<f64>> {
        if !self.waypoints.is_empty() {
            self.waypoints
                .iter()
                .map(|w| Vector3::new(w[0], w[1], w[2]))
                .collect()
        } else {
            self.gates
                .iter()
                .map(|g| Vector3::new(g.center[0], g.center[1], g.center[2]))
                .collect()
        }
    }

    /// Fit the center line and extend it `margin` meters past the finish.
    ///
    /// Open tracks extrapolate straight along the final tangent; closed
    /// tracks wrap their first waypoints past the seam.
    pub fn fit(
        &self,
        knot_spacing: f64,
        margin: f64,
        initial_normal: Vector3<f64>,
    ) -> Result<FittedTrack> {
        self.validate()?;
        let centers = self.centers();
        let mut extended = centers.clone();
        if self.closed {
            let mut wrapped = 0.0;
            let mut i = 0;
            while wrapped < margin {
                let next = centers[(i + 1) % centers.len()];
                let prev = *extended.last().unwrap();
                if (next - prev).norm() > 1e-9 {
                    wrapped += (next - prev).norm();
                    extended.push(next);
                }
                i += 1;
                if i > 4 * centers.len() {
                    break;
                }
            }
        } else {
            let last = centers[centers.len() - 1];
            let dir = (last - centers[centers.len() - 2]).normalize();
            let step = margin / 4.0;
            for k in 1..=4 {
                extended.push(last + dir * (step * k as f64));
            }
        }
        let spline = fit_path_with(&extended, knot_spacing, initial_normal)?;

        // Locate the finish and the gates on the fitted arc.
        let mut chord = vec![0.0];
        for w in centers.windows(2) {
            chord.push(chord.last().unwrap() + (w[1] - w[0]).norm());
        }
        let finish_guess = chord[centers.len() - 1].min(spline.length());
        let finish_s = spline
            .closest_point(&centers[centers.len() - 1], finish_guess)?
            .s;
        let mut gates = Vec::new();
        for (i, g) in self.gates.iter().enumerate() {
            let guess = chord[i].min(spline.length());
            let center = Vector3::new(g.center[0], g.center[1], g.center[2]);
            let s = spline.closest_point(&center, guess)?.s;
            gates.push(GateOnPath {
                s,
                side_length: g.side_length,
            });
        }
        Ok(FittedTrack {
            spline,
            finish_s,
            gates,
            name: self.name.clone(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn straight_track_extends_past_finish() {
        let track = Track {
            name: "straight".into(),
            closed: false,
            waypoints: (0..11).map(|i| [2.0 * i as f64, 0.0, 1.0]).collect(),
            gates: vec![],
        };
        let fitted = track.fit(0.3, 6.0, Vector3::new(0.0, 1.0, 0.0)).unwrap();
        assert!((fitted.finish_s - 20.0).abs() < 1e-3);
        assert!(fitted.spline.length() > 25.5);
        // The extension continues the straight line.
        let p = fitted.spline.position(24.0);
        assert!((p - Vector3::new(24.0, 0.0, 1.0)).norm() < 1e-6);
    }

    #[test]
    fn gate_track_reports_gate_positions() {
        let gates: Vec<Gate> = (0..6)
            .map(|i| Gate {
                center: [5.0 * i as f64, 0.2 * (i as f64).sin(), 1.5],
                side_length: 2.0,
                normal: None,
            })
            .collect();
        let track = Track {
            name: "gates".into(),
            closed: false,
            waypoints: vec![],
            gates,
        };
        let fitted = track.fit(0.3, 4.0, Vector3::new(0.0, 1.0, 0.0)).unwrap();
        assert_eq!(fitted.gates.len(), 6);
        assert!(fitted.gates[0].s.abs() < 1e-6);
        for w in fitted.gates.windows(2) {
            assert!(w[1].s > w[0].s + 4.0);
        }
    }

    #[test]
    fn rejects_underspecified_track() {
        let track = Track {
            name: "bad".into(),
            closed: false,
            waypoints: vec![[0.0; 3], [1.0, 0.0, 0.0]],
            gates: vec![],
        };
        assert!(track.validate().is_err());
    }
}
