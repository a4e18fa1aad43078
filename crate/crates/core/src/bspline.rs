//! Clamped uniform B-spline curves through (displacement, force) control
//! points.
//!
//! The curve is parametric, `t -> (x(t), y(t))` with `t` in `[0, 1]`. When the
//! control-point displacements sit at the Greville abscissae of the knot
//! vector, `x(t)` is exactly linear and evaluation at a displacement is a
//! direct lookup; otherwise `x(t) = d` is solved by bisection, which is valid
//! because non-decreasing control displacements give a non-decreasing `x(t)`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_DEGREE: usize = 3;

/// Tolerance on the evaluation domain ends (mm).
const DOMAIN_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CurveError {
    #[error("need at least {need} control points for degree {degree}, got {got}")]
    TooFewPoints {
        need: usize,
        degree: usize,
        got: usize,
    },
    #[error("degree must be at least 1")]
    ZeroDegree,
    #[error("control point {index} displacement {x} is below its predecessor {prev}")]
    Unordered { index: usize, x: f64, prev: f64 },
    #[error("control point {0} is not finite")]
    NonFinite(usize),
    #[error("displacement {d} mm outside curve domain [{lo}, {hi}]")]
    Domain { d: f64, lo: f64, hi: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CurveRepr", into = "CurveRepr")]
pub struct BSplineCurve {
    degree: usize,
    points: Vec<[f64; 2]>,
    knots: Vec<f64>,
    /// `x(t)` is affine (Greville-placed displacements).
    linear_x: bool,
}

#[derive(Serialize, Deserialize)]
struct CurveRepr {
    degree: usize,
    control_points: Vec<[f64; 2]>,
}

impl TryFrom<CurveRepr> for BSplineCurve {
    type Error = CurveError;
    fn try_from(r: CurveRepr) -> Result<Self, CurveError> {
        BSplineCurve::new(r.degree, r.control_points)
    }
}

impl From<BSplineCurve> for CurveRepr {
    fn from(c: BSplineCurve) -> Self {
        CurveRepr {
            degree: c.degree,
            control_points: c.points,
        }
    }
}

/// Clamped knot vector on `[0, 1]` with uniformly spaced interior knots.
pub fn clamped_uniform_knots(count: usize, degree: usize) -> Vec<f64> {
    let spans = count - degree;
    let mut knots = vec![0.0; degree + 1];
    knots.extend((1..spans).map(|j| j as f64 / spans as f64));
    knots.extend(std::iter::repeat_n(1.0, degree + 1));
    knots
}

/// Greville abscissae of the knot vector, scaled onto `[lo, hi]`.
pub fn greville_abscissae(count: usize, degree: usize, lo: f64, hi: f64) -> Vec<f64> {
    let knots = clamped_uniform_knots(count, degree);
    (0..count)
        .map(|i| {
            let g = knots[i + 1..=i + degree].iter().sum::<f64>() / degree as f64;
            lo + g * (hi - lo)
        })
        .collect()
}

/// Index `s` with `knots[s] <= t < knots[s + 1]`, restricted to the valid
/// spans `degree..count` so that `t = 1` falls in the last one.
fn find_span(knots: &[f64], degree: usize, count: usize, t: f64) -> usize {
    if t >= knots[count] {
        return count - 1;
    }
    if t <= knots[degree] {
        return degree;
    }
    let (mut lo, mut hi) = (degree, count);
    while hi - lo > 1 {
        let mid = (lo + hi) / 2;
        if t < knots[mid] {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    lo
}

/// Values of the `degree + 1` basis functions that are non-zero at `t`,
/// together with the index of the first one.
pub fn nonzero_basis(knots: &[f64], degree: usize, count: usize, t: f64) -> (usize, Vec<f64>) {
    let span = find_span(knots, degree, count, t);
    let mut n = vec![0.0; degree + 1];
    let mut left = vec![0.0; degree + 1];
    let mut right = vec![0.0; degree + 1];
    n[0] = 1.0;
    for j in 1..=degree {
        left[j] = t - knots[span + 1 - j];
        right[j] = knots[span + j] - t;
        let mut saved = 0.0;
        for r in 0..j {
            let temp = n[r] / (right[r + 1] + left[j - r]);
            n[r] = saved + right[r + 1] * temp;
            saved = left[j - r] * temp;
        }
        n[j] = saved;
    }
    (span - degree, n)
}

impl BSplineCurve {
    pub fn new(degree: usize, points: Vec<[f64; 2]>) -> Result<Self, CurveError> {
        if degree == 0 {
            return Err(CurveError::ZeroDegree);
        }
        if points.len() < degree + 1 {
            return Err(CurveError::TooFewPoints {
                need: degree + 1,
                degree,
                got: points.len(),
            });
        }
        for (i, p) in points.iter().enumerate() {
            if !(p[0].is_finite() && p[1].is_finite()) {
                return Err(CurveError::NonFinite(i));
            }
            if i > 0 && p[0] < points[i - 1][0] {
                return Err(CurveError::Unordered {
                    index: i,
                    x: p[0],
                    prev: points[i - 1][0],
                });
            }
        }
        let knots = clamped_uniform_knots(points.len(), degree);
        let (lo, hi) = (points[0][0], points[points.len() - 1][0]);
        let linear_x = hi > lo
            && greville_abscissae(points.len(), degree, lo, hi)
                .iter()
                .zip(&points)
                .all(|(g, p)| (g - p[0]).abs() <= 1e-12 * (hi - lo).max(1.0));
        Ok(Self {
            degree,
            points,
            knots,
            linear_x,
        })
    }

    /// Control points placed at the Greville abscissae of `[lo, hi]`.
    pub fn with_forces(degree: usize, lo: f64, hi: f64, forces: &[f64]) -> Result<Self, CurveError> {
        if forces.len() < degree + 1 {
            return Err(CurveError::TooFewPoints {
                need: degree + 1,
                degree,
                got: forces.len(),
            });
        }
        let xs = greville_abscissae(forces.len(), degree, lo, hi);
        Self::new(degree, xs.into_iter().zip(forces).map(|(x, &f)| [x, f]).collect())
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn control_points(&self) -> &[[f64; 2]] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn domain(&self) -> (f64, f64) {
        (self.points[0][0], self.points[self.points.len() - 1][0])
    }

    /// Curve point at parameter `t` (de Boor's algorithm).
    pub fn point_at(&self, t: f64) -> [f64; 2] {
        let p = self.degree;
        let t = t.clamp(0.0, 1.0);
        let k = find_span(&self.knots, p, self.points.len(), t);
        let mut d: Vec<[f64; 2]> = (0..=p).map(|j| self.points[j + k - p]).collect();
        for r in 1..=p {
            for j in (r..=p).rev() {
                let i = j + k - p;
                let denom = self.knots[i + p + 1 - r] - self.knots[i];
                let alpha = if denom == 0.0 {
                    0.0
                } else {
                    (t - self.knots[i]) / denom
                };
                d[j] = [
                    (1.0 - alpha) * d[j - 1][0] + alpha * d[j][0],
                    (1.0 - alpha) * d[j - 1][1] + alpha * d[j][1],
                ];
            }
        }
        d[p]
    }

    /// Parameter at which the curve reaches displacement `d` (clamped).
    pub fn parameter_at(&self, d: f64) -> f64 {
        let (lo, hi) = self.domain();
        if hi <= lo {
            return 0.0;
        }
        if self.linear_x {
            return ((d - lo) / (hi - lo)).clamp(0.0, 1.0);
        }
        if d <= lo {
            return 0.0;
        }
        if d >= hi {
            return 1.0;
        }
        let (mut a, mut b) = (0.0_f64, 1.0_f64);
        for _ in 0..200 {
            let mid = 0.5 * (a + b);
            if mid <= a || mid >= b {
                break;
            }
            if self.point_at(mid)[0] < d {
                a = mid;
            } else {
                b = mid;
            }
        }
        0.5 * (a + b)
    }

    /// Force at displacement `d`; errors outside the control-point span.
    pub fn eval(&self, d: f64) -> Result<f64, CurveError> {
        let (lo, hi) = self.domain();
        if !(d >= lo - DOMAIN_SLACK && d <= hi + DOMAIN_SLACK) {
            return Err(CurveError::Domain { d, lo, hi });
        }
        Ok(self.eval_clamped(d))
    }

    /// Force at `d`, holding the end values outside the domain.
    pub fn eval_clamped(&self, d: f64) -> f64 {
        self.point_at(self.parameter_at(d))[1]
    }

    pub fn sample(&self, displacements: &[f64]) -> Vec<f64> {
        displacements.iter().map(|&d| self.eval_clamped(d)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn knot_vector_shape() {
        let k = clamped_uniform_knots(6, 3);
        assert_eq!(k, vec![0.0, 0.0, 0.0, 0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0, 1.0, 1.0, 1.0]);
        let g = greville_abscissae(4, 3, 0.0, 3.0);
        assert_eq!(g, vec![0.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn constant_spline_is_constant() {
        let c = BSplineCurve::with_forces(3, 0.0, 4.0, &[50.0; 15]).unwrap();
        for i in 0..=400 {
            let v = c.eval(i as f64 * 0.01).unwrap();
            assert!((v - 50.0).abs() < 1e-12);
        }
    }

    #[test]
    fn clamped_ends_interpolate() {
        let f: Vec<f64> = (0..15).map(|i| 30.0 + (i * i) as f64).collect();
        let c = BSplineCurve::with_forces(3, 0.0, 4.0, &f).unwrap();
        assert_eq!(c.eval(0.0).unwrap(), 30.0);
        assert!((c.eval(4.0).unwrap() - f[14]).abs() < 1e-12);
    }

    #[test]
    fn out_of_domain_is_an_error() {
        let c = BSplineCurve::with_forces(3, 0.0, 4.0, &[1.0; 6]).unwrap();
        assert!(matches!(c.eval(4.1), Err(CurveError::Domain { .. })));
        assert!(matches!(c.eval(-0.1), Err(CurveError::Domain { .. })));
        assert_eq!(c.eval_clamped(9.0), 1.0);
    }

    #[test]
    fn construction_guards() {
        assert!(matches!(
            BSplineCurve::new(3, vec![[0.0, 1.0]; 3]),
            Err(CurveError::TooFewPoints { .. })
        ));
        assert!(matches!(
            BSplineCurve::new(2, vec![[0.0, 1.0], [2.0, 1.0], [1.0, 1.0]]),
            Err(CurveError::Unordered { index: 2, .. })
        ));
    }

    #[test]
    fn free_displacements_are_inverted() {
        // Non-Greville placement forces the bisection path.
        let c = BSplineCurve::new(2, vec![[0.5, 20.0], [1.0, 180.0], [5.0, 60.0]]).unwrap();
        for i in 0..=90 {
            let d = 0.5 + i as f64 * 0.05;
            let t = c.parameter_at(d);
            assert!((c.point_at(t)[0] - d).abs() < 1e-9);
        }
        assert_eq!(c.eval_clamped(0.0), 20.0);
        assert_eq!(c.eval_clamped(6.0), 60.0);
    }

    #[test]
    fn basis_partition_of_unity() {
        let knots = clamped_uniform_knots(15, 3);
        for i in 0..=100 {
            let t = i as f64 / 100.0;
            let (_, n) = nonzero_basis(&knots, 3, 15, t);
            assert!((n.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn serde_uses_model_file_shape() {
        let c = BSplineCurve::with_forces(3, 0.0, 4.0, &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let v = serde_json::to_value(&c).unwrap();
        assert_eq!(v["degree"], 3);
        assert_eq!(v["control_points"].as_array().unwrap().len(), 4);
        let back: BSplineCurve = serde_json::from_value(v).unwrap();
        assert_eq!(back, c);
        let bad = serde_json::json!({"degree": 3, "control_points": [[0, 1], [1, 1]]});
        assert!(serde_json::from_value::<BSplineCurve>(bad).is_err());
    }
}
