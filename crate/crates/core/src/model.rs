//! FDVV models: per-velocity force–displacement B-splines plus travel,
//! activation and vibration annotations, and the order-selection machinery
//! that fits them.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bspline::{nonzero_basis, BSplineCurve, CurveError, DEFAULT_DEGREE};
use crate::capture::PressSegment;
use crate::grid::DisplacementGrid;
use crate::vibration::VibrationDescriptor;

/// Complexity penalty multiplying the usual BIC parameter term.
pub const DEFAULT_PENALTY: f64 = 2.5;
/// Control-point count range searched by default.
pub const DEFAULT_K_RANGE: (usize, usize) = (4, 30);
/// Floor on the residual variance (cN²) so that exact fits keep a finite
/// likelihood and compare equal.
pub const VARIANCE_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FitError {
    #[error("need k >= degree + 1 = {need}, got k = {k}")]
    TooFewControlPoints { k: usize, need: usize },
    #[error("segment has {bins} bins, fewer than k = {k}")]
    TooFewBins { bins: usize, k: usize },
    #[error("least-squares system is rank deficient for k = {k} (condition {condition:.3e})")]
    RankDeficient { k: usize, condition: f64 },
    #[error("no feasible control-point count in [{k_min}, {k_max}]")]
    EmptyRange { k_min: usize, k_max: usize },
    #[error(transparent)]
    Curve(#[from] CurveError),
}

/// One invariant violation, addressed by JSON field path.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

impl FieldError {
    pub fn new(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            field: field.into(),
            message: message.into(),
        }
    }
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model: {}", summarize(.0))]
    Invalid(Vec<FieldError>),
    #[error("no velocities supplied")]
    NoVelocities,
    #[error("inconsistent travel ranges: {0} mm and {1} mm")]
    InconsistentTravel(f64, f64),
    #[error("fit failed at {velocity} mm/s: {source}")]
    Fit { velocity: f64, source: FitError },
    #[error("malformed model file: {0}")]
    Json(#[from] serde_json::Error),
}

fn summarize(errors: &[FieldError]) -> String {
    errors
        .iter()
        .map(|e| format!("{}: {}", e.field, e.message))
        .collect::<Vec<_>>()
        .join("; ")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub n: usize,
    pub k: usize,
    pub log_likelihood: f64,
    pub rmse: f64,
    pub penalty: f64,
    pub bic_star: f64,
}

/// `ln(n) * k * P - 2 ln L`.
pub fn bic_star(n: usize, k: usize, log_likelihood: f64, penalty: f64) -> f64 {
    assert!(n >= 1 && k >= 1, "bic_star needs n >= 1 and k >= 1");
    (n as f64).ln() * k as f64 * penalty - 2.0 * log_likelihood
}

/// Maximized log-likelihood of `n` residuals under an i.i.d. Gaussian with
/// the ML variance `rss / n` (floored at [`VARIANCE_FLOOR`]).
pub fn gaussian_log_likelihood(rss: f64, n: usize) -> f64 {
    let n_f = n as f64;
    let var = (rss / n_f).max(VARIANCE_FLOOR);
    -0.5 * n_f * (var.ln() + 1.0 + (2.0 * std::f64::consts::PI).ln())
}

/// Dense design matrix of the clamped uniform basis at displacements `xs`.
pub fn design_matrix(xs: &[f64], lo: f64, hi: f64, k: usize, degree: usize) -> DMatrix<f64> {
    let knots = crate::bspline::clamped_uniform_knots(k, degree);
    let mut a = DMatrix::zeros(xs.len(), k);
    for (row, &x) in xs.iter().enumerate() {
        let t = ((x - lo) / (hi - lo)).clamp(0.0, 1.0);
        let (first, vals) = nonzero_basis(&knots, degree, k, t);
        for (j, v) in vals.into_iter().enumerate() {
            a[(row, first + j)] = v;
        }
    }
    a
}

/// Least-squares fit of `k` control forces (fixed clamped uniform knots,
/// Greville-placed displacements) to a gridded press.
pub fn fit_curve(segment: &PressSegment, k: usize) -> Result<(BSplineCurve, FitReport), FitError> {
    fit_curve_with(segment, k, DEFAULT_DEGREE, DEFAULT_PENALTY)
}

pub fn fit_curve_with(
    segment: &PressSegment,
    k: usize,
    degree: usize,
    penalty: f64,
) -> Result<(BSplineCurve, FitReport), FitError> {
    fit_forces(&segment.grid, &segment.force_per_bin, k, degree, penalty)
}

pub fn fit_forces(
    grid: &DisplacementGrid,
    forces: &[f64],
    k: usize,
    degree: usize,
    penalty: f64,
) -> Result<(BSplineCurve, FitReport), FitError> {
    if k < degree + 1 {
        return Err(FitError::TooFewControlPoints { k, need: degree + 1 });
    }
    let n = forces.len();
    if n < k {
        return Err(FitError::TooFewBins { bins: n, k });
    }
    let xs = grid.centers();
    let hi = grid.travel_range();
    let a = design_matrix(&xs, 0.0, hi, k, degree);
    let b = DVector::from_column_slice(forces);
    let svd = a.clone().svd(true, true);
    let sv = &svd.singular_values;
    let (smax, smin) = (sv.max(), sv.min());
    let condition = if smin > 0.0 { smax / smin } else { f64::INFINITY };
    if condition.is_nan() || condition >= 1e10 {
        return Err(FitError::RankDeficient { k, condition });
    }
    let coef = svd
        .solve(&b, 0.0)
        .map_err(|_| FitError::RankDeficient { k, condition })?;
    let residual = &b - &a * &coef;
    let rss = residual.norm_squared();
    let curve = BSplineCurve::with_forces(degree, 0.0, hi, coef.as_slice())?;
    let log_likelihood = gaussian_log_likelihood(rss, n);
    let report = FitReport {
        n,
        k,
        log_likelihood,
        rmse: (rss / n as f64).sqrt(),
        penalty,
        bic_star: bic_star(n, k, log_likelihood, penalty),
    };
    Ok((curve, report))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderSelection {
    pub best_k: usize,
    pub reports: Vec<FitReport>,
}

impl OrderSelection {
    pub fn best(&self) -> &FitReport {
        self.reports.iter().find(|r| r.k == self.best_k).unwrap()
    }
}

/// Fits every feasible `k` in `[k_min, k_max]` and keeps the BIC* minimizer,
/// preferring the smaller `k` on ties.
pub fn select_order(
    segment: &PressSegment,
    k_range: (usize, usize),
    penalty: f64,
) -> Result<OrderSelection, FitError> {
    select_order_with(segment, k_range, penalty, DEFAULT_DEGREE)
}

pub fn select_order_with(
    segment: &PressSegment,
    (k_min, k_max): (usize, usize),
    penalty: f64,
    degree: usize,
) -> Result<OrderSelection, FitError> {
    let lo = k_min.max(degree + 1);
    let hi = k_max.min(segment.len());
    let mut reports = Vec::new();
    for k in lo..=hi {
        match fit_curve_with(segment, k, degree, penalty) {
            Ok((_, r)) => reports.push(r),
            Err(FitError::RankDeficient { .. }) => continue,
            Err(e) => return Err(e),
        }
    }
    let best = reports
        .iter()
        .fold(None::<&FitReport>, |best, r| match best {
            Some(b) if b.bic_star <= r.bic_star => Some(b),
            _ => Some(r),
        })
        .ok_or(FitError::EmptyRange { k_min, k_max })?;
    Ok(OrderSelection {
        best_k: best.k,
        reports,
    })
}

/// Order selection shared by several curves: the `k` minimizing the summed
/// BIC* over all segments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PooledSelection {
    pub best_k: usize,
    /// `(k, summed BIC*)` for every `k` feasible for all segments.
    pub totals: Vec<(usize, f64)>,
    pub per_segment: Vec<OrderSelection>,
}

pub fn select_order_pooled(
    segments: &[PressSegment],
    k_range: (usize, usize),
    penalty: f64,
) -> Result<PooledSelection, FitError> {
    let per_segment = segments
        .iter()
        .map(|s| select_order(s, k_range, penalty))
        .collect::<Result<Vec<_>, _>>()?;
    let mut totals = Vec::new();
    for k in k_range.0..=k_range.1 {
        let mut sum = 0.0;
        let mut all = true;
        for sel in &per_segment {
            match sel.reports.iter().find(|r| r.k == k) {
                Some(r) => sum += r.bic_star,
                None => all = false,
            }
        }
        if all && !per_segment.is_empty() {
            totals.push((k, sum));
        }
    }
    let best_k = totals
        .iter()
        .fold(None::<(usize, f64)>, |best, &(k, v)| match best {
            Some(b) if b.1 <= v => Some(b),
            _ => Some((k, v)),
        })
        .ok_or(FitError::EmptyRange {
            k_min: k_range.0,
            k_max: k_range.1,
        })?
        .0;
    Ok(PooledSelection {
        best_k,
        totals,
        per_segment,
    })
}

/// A force–displacement curve recorded at one press velocity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VelocityCurve {
    pub velocity_mm_s: f64,
    #[serde(flatten)]
    pub curve: BSplineCurve,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FdvvModel {
    pub button_id: String,
    pub travel_range_mm: f64,
    pub activation_point_mm: f64,
    pub press_curves: Vec<VelocityCurve>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub release_curves: Option<Vec<VelocityCurve>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vibration: Option<VibrationDescriptor>,
}

/// Annotations attached to a fitted model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelAnnotations {
    pub button_id: String,
    pub activation_point_mm: f64,
    pub vibration: Option<VibrationDescriptor>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BuildOptions {
    pub k_range: (usize, usize),
    pub penalty: f64,
    pub degree: usize,
}

impl Default for BuildOptions {
    fn default() -> Self {
        Self {
            k_range: DEFAULT_K_RANGE,
            penalty: DEFAULT_PENALTY,
            degree: DEFAULT_DEGREE,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BuiltModel {
    pub model: FdvvModel,
    /// Order selection per velocity, in model curve order.
    pub selections: Vec<(f64, OrderSelection)>,
}

/// Fits a selected-order curve for each velocity and attaches annotations.
pub fn build_model(
    per_velocity: &[PressSegment],
    annotations: ModelAnnotations,
    options: BuildOptions,
) -> Result<BuiltModel, ModelError> {
    let first = per_velocity.first().ok_or(ModelError::NoVelocities)?;
    let travel = first.grid.travel_range();
    for s in per_velocity {
        if (s.grid.travel_range() - travel).abs() > 1e-9 {
            return Err(ModelError::InconsistentTravel(travel, s.grid.travel_range()));
        }
    }
    let mut sorted: Vec<&PressSegment> = per_velocity.iter().collect();
    sorted.sort_by(|a, b| a.velocity_nominal.total_cmp(&b.velocity_nominal));

    let fit_one = |forces: &[f64], velocity: f64| -> Result<(VelocityCurve, OrderSelection), ModelError> {
        let seg = PressSegment::from_forces(velocity, travel, forces.to_vec());
        let err = |source| ModelError::Fit { velocity, source };
        let sel = select_order_with(&seg, options.k_range, options.penalty, options.degree)
            .map_err(err)?;
        let (curve, _) = fit_curve_with(&seg, sel.best_k, options.degree, options.penalty)
            .map_err(err)?;
        Ok((
            VelocityCurve {
                velocity_mm_s: velocity,
                curve,
            },
            sel,
        ))
    };

    let mut press_curves = Vec::new();
    let mut selections = Vec::new();
    for s in &sorted {
        let (curve, sel) = fit_one(&s.force_per_bin, s.velocity_nominal)?;
        press_curves.push(curve);
        selections.push((s.velocity_nominal, sel));
    }
    let release_curves = if sorted.iter().all(|s| s.release_force_per_bin.is_some()) {
        Some(
            sorted
                .iter()
                .map(|s| {
                    fit_one(s.release_force_per_bin.as_deref().unwrap(), s.velocity_nominal)
                        .map(|(c, _)| c)
                })
                .collect::<Result<Vec<_>, _>>()?,
        )
    } else {
        None
    };
    let model = FdvvModel {
        button_id: annotations.button_id,
        travel_range_mm: travel,
        activation_point_mm: annotations.activation_point_mm,
        press_curves,
        release_curves,
        vibration: annotations.vibration,
    };
    model.validate().map_err(ModelError::Invalid)?;
    Ok(BuiltModel { model, selections })
}

impl FdvvModel {
    pub fn grid(&self) -> DisplacementGrid {
        DisplacementGrid::new(self.travel_range_mm)
    }

    pub fn velocities(&self) -> Vec<f64> {
        self.press_curves.iter().map(|c| c.velocity_mm_s).collect()
    }

    /// Checks every model invariant, collecting all violations.
    pub fn validate(&self) -> Result<(), Vec<FieldError>> {
        let mut errs = Vec::new();
        let travel = self.travel_range_mm;
        if self.button_id.trim().is_empty() {
            errs.push(FieldError::new("button_id", "must not be empty"));
        }
        if !(travel.is_finite() && travel > 0.0 && travel <= crate::MAX_TRAVEL_MM) {
            errs.push(FieldError::new(
                "travel_range_mm",
                format!("must be in (0, {}], got {travel}", crate::MAX_TRAVEL_MM),
            ));
        }
        let ap = self.activation_point_mm;
        if !(ap.is_finite() && ap > 0.0 && ap < travel) {
            errs.push(FieldError::new(
                "activation_point_mm",
                format!("must satisfy 0 < activation point < travel range ({travel}), got {ap}"),
            ));
        }
        if self.press_curves.is_empty() {
            errs.push(FieldError::new("press_curves", "at least one curve is required"));
        }
        let mut check_curves = |name: &str, curves: &[VelocityCurve]| {
            for (i, c) in curves.iter().enumerate() {
                let v = c.velocity_mm_s;
                if !(v.is_finite() && v > 0.0) {
                    errs.push(FieldError::new(
                        format!("{name}[{i}].velocity_mm_s"),
                        format!("must be positive, got {v}"),
                    ));
                }
                if i > 0 && v <= curves[i - 1].velocity_mm_s {
                    errs.push(FieldError::new(
                        format!("{name}[{i}].velocity_mm_s"),
                        "velocities must be strictly increasing",
                    ));
                }
                let (lo, hi) = c.curve.domain();
                if lo.abs() > 1e-9 || (hi - travel).abs() > 1e-9 {
                    errs.push(FieldError::new(
                        format!("{name}[{i}].control_points"),
                        format!("curve must span [0, {travel}] mm, spans [{lo}, {hi}]"),
                    ));
                }
            }
        };
        check_curves("press_curves", &self.press_curves);
        if let Some(rc) = &self.release_curves {
            check_curves("release_curves", rc);
        }
        if let Some(v) = &self.vibration {
            errs.extend(v.validate(travel));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(errs)
        }
    }

    pub fn from_json(text: &str) -> Result<Self, ModelError> {
        let m: FdvvModel = serde_json::from_str(text)?;
        m.validate().map_err(ModelError::Invalid)?;
        Ok(m)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model serialization cannot fail")
    }

    /// Target forces on the grid at `velocity`, linearly interpolated between
    /// the bracketing press curves and clamped outside the recorded span.
    pub fn target_forces(&self, velocity: f64) -> Vec<f64> {
        let centers = self.grid().centers();
        let curves = &self.press_curves;
        let hi = curves.partition_point(|c| c.velocity_mm_s <= velocity);
        if hi == 0 {
            return curves[0].curve.sample(&centers);
        }
        let lo = hi - 1;
        if hi == curves.len() || curves[lo].velocity_mm_s == velocity {
            return curves[lo].curve.sample(&centers);
        }
        let (a, b) = (&curves[lo], &curves[hi]);
        let w = (velocity - a.velocity_mm_s) / (b.velocity_mm_s - a.velocity_mm_s);
        a.curve
            .sample(&centers)
            .into_iter()
            .zip(b.curve.sample(&centers))
            .map(|(fa, fb)| fa + w * (fb - fa))
            .collect()
    }
}
