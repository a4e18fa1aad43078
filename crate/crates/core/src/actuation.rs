//! Actuation signals: per-velocity actuation-vs-displacement curves and the
//! table that collects them for rendering.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{DisplacementGrid, BIN_MM};
use crate::model::FieldError;
use crate::vibration::VibrationDescriptor;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ActuationError {
    #[error("need at least {need} curves, got {got}")]
    TooFewCurves { need: usize, got: usize },
    #[error("curves must have distinct velocities ({0} mm/s repeats)")]
    DuplicateVelocity(f64),
    #[error("grid mismatch: {0} bins vs {1} bins")]
    GridMismatch(usize, usize),
    #[error("target_count must be at least 2, got {0}")]
    TargetCount(usize),
    #[error("invalid actuation table: {}", .0.iter().map(|e| format!("{}: {}", e.field, e.message)).collect::<Vec<_>>().join("; "))]
    Invalid(Vec<FieldError>),
}

/// Actuation `u` per 0.05 mm bin for one press velocity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CurveRepr", into = "CurveRepr")]
pub struct ActuationCurve {
    pub velocity_mm_s: f64,
    pub grid: DisplacementGrid,
    pub u: Vec<f64>,
    /// Separate signal for the upstroke, when one exists.
    pub release_u: Option<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct CurveRepr {
    velocity_mm_s: f64,
    grid_mm: f64,
    travel_range_mm: f64,
    u: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    release_u: Option<Vec<f64>>,
}

impl From<ActuationCurve> for CurveRepr {
    fn from(c: ActuationCurve) -> Self {
        Self {
            velocity_mm_s: c.velocity_mm_s,
            grid_mm: BIN_MM,
            travel_range_mm: c.grid.travel_range(),
            u: c.u,
            release_u: c.release_u,
        }
    }
}

impl TryFrom<CurveRepr> for ActuationCurve {
    type Error = String;

    fn try_from(r: CurveRepr) -> Result<Self, String> {
        if (r.grid_mm - BIN_MM).abs() > 1e-12 {
            return Err(format!("grid_mm must be {BIN_MM}, got {}", r.grid_mm));
        }
        if !(r.travel_range_mm.is_finite() && r.travel_range_mm > 0.0) {
            return Err(format!("travel_range_mm must be positive, got {}", r.travel_range_mm));
        }
        let grid = DisplacementGrid::new(r.travel_range_mm);
        let check = |name: &str, v: &[f64]| {
            if v.len() != grid.len() {
                return Err(format!("{name} has {} values, grid has {} bins", v.len(), grid.len()));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(format!("{name} contains non-finite values"));
            }
            Ok(())
        };
        check("u", &r.u)?;
        if let Some(rel) = &r.release_u {
            check("release_u", rel)?;
        }
        Ok(Self {
            velocity_mm_s: r.velocity_mm_s,
            grid,
            u: r.u,
            release_u: r.release_u,
        })
    }
}

impl ActuationCurve {
    pub fn new(velocity_mm_s: f64, grid: DisplacementGrid, u: Vec<f64>) -> Self {
        assert_eq!(grid.len(), u.len(), "actuation vector does not match grid");
        Self {
            velocity_mm_s,
            grid,
            u,
            release_u: None,
        }
    }

    /// Step lookup: actuation of the bin containing `d`.
    pub fn u_at(&self, d: f64) -> f64 {
        self.u[self.grid.bin_clamped(d)]
    }

    pub fn release_u_at(&self, d: f64) -> f64 {
        let b = self.grid.bin_clamped(d);
        self.release_u.as_ref().map_or(self.u[b], |r| r[b])
    }
}

fn sorted_checked(curves: &[ActuationCurve]) -> Result<Vec<&ActuationCurve>, ActuationError> {
    if curves.len() < 2 {
        return Err(ActuationError::TooFewCurves {
            need: 2,
            got: curves.len(),
        });
    }
    let mut v: Vec<&ActuationCurve> = curves.iter().collect();
    v.sort_by(|a, b| a.velocity_mm_s.total_cmp(&b.velocity_mm_s));
    for w in v.windows(2) {
        if w[0].velocity_mm_s == w[1].velocity_mm_s {
            return Err(ActuationError::DuplicateVelocity(w[0].velocity_mm_s));
        }
        if w[0].u.len() != w[1].u.len() {
            return Err(ActuationError::GridMismatch(w[0].u.len(), w[1].u.len()));
        }
    }
    Ok(v)
}

fn lerp_curves(a: &ActuationCurve, b: &ActuationCurve, velocity: f64) -> ActuationCurve {
    let w = (velocity - a.velocity_mm_s) / (b.velocity_mm_s - a.velocity_mm_s);
    let mix = |x: &[f64], y: &[f64]| -> Vec<f64> {
        x.iter().zip(y).map(|(p, q)| p + w * (q - p)).collect()
    };
    let release_u = match (&a.release_u, &b.release_u) {
        (Some(x), Some(y)) => Some(mix(x, y)),
        _ => None,
    };
    ActuationCurve {
        velocity_mm_s: velocity,
        grid: a.grid,
        u: mix(&a.u, &b.u),
        release_u,
    }
}

/// Per-bin linear interpolation in velocity; clamps to the nearest curve
/// outside the measured span and returns input curves exactly at their own
/// velocities.
pub fn curve_at_velocity(curves: &[ActuationCurve], velocity: f64) -> Result<ActuationCurve, ActuationError> {
    let v = sorted_checked(curves)?;
    let last = v.len() - 1;
    if velocity <= v[0].velocity_mm_s {
        return Ok(v[0].clone());
    }
    if velocity >= v[last].velocity_mm_s {
        return Ok(v[last].clone());
    }
    let hi = v.partition_point(|c| c.velocity_mm_s <= velocity);
    let lo = hi - 1;
    if v[lo].velocity_mm_s == velocity {
        return Ok(v[lo].clone());
    }
    Ok(lerp_curves(v[lo], v[hi], velocity))
}

/// `target_count` curves evenly spaced over the measured velocity span.
pub fn interpolate_velocities(
    curves: &[ActuationCurve],
    target_count: usize,
) -> Result<Vec<ActuationCurve>, ActuationError> {
    let v = sorted_checked(curves)?;
    if target_count < 2 {
        return Err(ActuationError::TargetCount(target_count));
    }
    let (lo, hi) = (v[0].velocity_mm_s, v[v.len() - 1].velocity_mm_s);
    (0..target_count)
        .map(|i| {
            let vel = if i == target_count - 1 {
                hi
            } else {
                lo + (hi - lo) * i as f64 / (target_count - 1) as f64
            };
            curve_at_velocity(curves, vel)
        })
        .collect()
}

/// Nearest-velocity curve; ties go to the slower curve.
pub fn select_actuation(curves: &[ActuationCurve], velocity: f64) -> &ActuationCurve {
    assert!(!curves.is_empty(), "no actuation curves");
    curves
        .iter()
        .min_by(|a, b| {
            let da = (a.velocity_mm_s - velocity).abs();
            let db = (b.velocity_mm_s - velocity).abs();
            da.total_cmp(&db)
                .then(a.velocity_mm_s.total_cmp(&b.velocity_mm_s))
        })
        .unwrap()
}

pub fn slowest(curves: &[ActuationCurve]) -> &ActuationCurve {
    curves
        .iter()
        .min_by(|a, b| a.velocity_mm_s.total_cmp(&b.velocity_mm_s))
        .expect("no actuation curves")
}

/// The renderable artifact produced by compensation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActuationTable {
    pub button_id: String,
    pub plant_id: String,
    pub travel_range_mm: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub activation_point_mm: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vibration: Option<VibrationDescriptor>,
    pub curves: Vec<ActuationCurve>,
    #[serde(default)]
    pub interpolated: bool,
}

impl ActuationTable {
    pub fn validate(&self) -> Result<(), ActuationError> {
        let mut errs = Vec::new();
        if self.curves.is_empty() {
            errs.push(FieldError::new("curves", "at least one curve is required"));
        }
        for (i, c) in self.curves.iter().enumerate() {
            if (c.grid.travel_range() - self.travel_range_mm).abs() > 1e-9 {
                errs.push(FieldError::new(
                    format!("curves[{i}]"),
                    format!(
                        "curve travel {} mm differs from table travel {} mm",
                        c.grid.travel_range(),
                        self.travel_range_mm
                    ),
                ));
            }
            if !(c.velocity_mm_s.is_finite() && c.velocity_mm_s > 0.0) {
                errs.push(FieldError::new(
                    format!("curves[{i}].velocity_mm_s"),
                    "must be positive",
                ));
            }
        }
        if let Some(ap) = self.activation_point_mm {
            if !(ap > 0.0 && ap < self.travel_range_mm) {
                errs.push(FieldError::new(
                    "activation_point_mm",
                    format!("must lie inside (0, {})", self.travel_range_mm),
                ));
            }
        }
        if let Some(v) = &self.vibration {
            errs.extend(v.validate(self.travel_range_mm));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(ActuationError::Invalid(errs))
        }
    }

    pub fn grid(&self) -> DisplacementGrid {
        DisplacementGrid::new(self.travel_range_mm)
    }

    pub fn velocities(&self) -> Vec<f64> {
        self.curves.iter().map(|c| c.velocity_mm_s).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn curve(v: f64, f: impl Fn(usize) -> f64) -> ActuationCurve {
        let g = DisplacementGrid::new(4.0);
        ActuationCurve::new(v, g, (0..g.len()).map(f).collect())
    }

    #[test]
    fn midpoint_is_mean() {
        let a = curve(50.0, |i| i as f64);
        let b = curve(150.0, |i| 200.0 - 3.0 * i as f64);
        let m = curve_at_velocity(&[a.clone(), b.clone()], 100.0).unwrap();
        for i in 0..80 {
            assert!((m.u[i] - 0.5 * (a.u[i] + b.u[i])).abs() <= 1e-12);
        }
    }

    #[test]
    fn knots_are_reproduced() {
        let cs: Vec<_> = [50.0, 100.0, 150.0, 200.0]
            .iter()
            .map(|&v| curve(v, move |i| v + (i as f64).sqrt()))
            .collect();
        for c in &cs {
            assert_eq!(&curve_at_velocity(&cs, c.velocity_mm_s).unwrap(), c);
        }
        let dense = interpolate_velocities(&cs, 16).unwrap();
        assert_eq!(dense.len(), 16);
        assert_eq!(dense[0], cs[0]);
        assert_eq!(dense[15], cs[3]);
        assert_eq!(dense[5], cs[1]);
    }

    #[test]
    fn clamps_outside_span() {
        let cs = vec![curve(50.0, |_| 1.0), curve(200.0, |_| 2.0)];
        assert_eq!(curve_at_velocity(&cs, 10.0).unwrap().u[0], 1.0);
        assert_eq!(curve_at_velocity(&cs, 900.0).unwrap().u[0], 2.0);
    }

    #[test]
    fn interpolation_errors() {
        let one = vec![curve(50.0, |_| 1.0)];
        assert!(matches!(
            interpolate_velocities(&one, 4),
            Err(ActuationError::TooFewCurves { .. })
        ));
        let dup = vec![curve(50.0, |_| 1.0), curve(50.0, |_| 2.0)];
        assert!(matches!(
            interpolate_velocities(&dup, 4),
            Err(ActuationError::DuplicateVelocity(_))
        ));
    }

    #[test]
    fn nearest_selection_with_low_ties() {
        let cs: Vec<_> = [50.0, 100.0, 150.0, 200.0]
            .iter()
            .map(|&v| curve(v, |_| 0.0))
            .collect();
        assert_eq!(select_actuation(&cs, 120.0).velocity_mm_s, 100.0);
        assert_eq!(select_actuation(&cs, 125.0).velocity_mm_s, 100.0);
        assert_eq!(select_actuation(&cs, 500.0).velocity_mm_s, 200.0);
        assert_eq!(select_actuation(&cs[2..3], 1.0).velocity_mm_s, 150.0);
    }

    #[test]
    fn table_round_trip() {
        let t = ActuationTable {
            button_id: "b".into(),
            plant_id: "default".into(),
            travel_range_mm: 4.0,
            activation_point_mm: Some(2.0),
            vibration: None,
            curves: vec![curve(100.0, |i| i as f64 * 0.5)],
            interpolated: false,
        };
        let text = serde_json::to_string(&t).unwrap();
        assert!(text.contains("\"grid_mm\":0.05"));
        let back: ActuationTable = serde_json::from_str(&text).unwrap();
        assert_eq!(back, t);
        let short = text.replacen("\"u\":[0.0,", "\"u\":[", 1);
        assert!(serde_json::from_str::<ActuationTable>(&short).is_err());
    }
}
