//! Iterative compensation: repeatedly press the simulated button, compare the
//! measured force with the target curve bin by bin, and correct the actuation
//! signal until the plant's transfer function is cancelled.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::actuation::{ActuationCurve, ActuationError, ActuationTable};
use crate::capture::bin_means;
use crate::grid::{fill_gaps, BIN_MM};
use crate::model::FdvvModel;
use crate::plant::VirtualPlant;
use crate::render::{downstroke_len, run_press, PressTrajectory, RenderError, SimConfig};
use crate::smoothing::{gaussian_smooth, EdgeMode};

pub const DEFAULT_ALPHA: f64 = 0.7;
/// Error above which the larger step gain applies (cN).
pub const GAMMA_SWITCH_CN: f64 = 10.0;
/// Consecutive non-improving iterations that count as divergence.
pub const DIVERGENCE_RUN: usize = 5;
/// Relative drop below the best error that counts as progress.
pub const MIN_PROGRESS: f64 = 0.01;
pub const FINALIZE_SIGMA_MM: f64 = 1.2;
/// Actuation levels of the two calibration pulses.
pub const CALIBRATION_PULSES: (f64, f64) = (40.0, 160.0);

#[derive(Debug, Error)]
pub enum CompensationError {
    #[error("vectors differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("no bins to compare")]
    Empty,
    #[error("alpha must lie in [0, 1], got {0}")]
    Alpha(f64),
    #[error("compensation diverged after {} iterations (errors {:?})", .trace.len(), .trace)]
    Diverged { trace: Vec<f64> },
    #[error("the simulated press measured no force bins")]
    NothingMeasured,
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Actuation(#[from] ActuationError),
    #[error("invalid plant: {0}")]
    Plant(String),
}

/// `alpha * mean|y_d - y_k| + (1 - alpha) * max|y_d - y_k|`.
pub fn error_metric(y_d: &[f64], y_k: &[f64], alpha: f64) -> Result<f64, CompensationError> {
    if y_d.len() != y_k.len() {
        return Err(CompensationError::LengthMismatch(y_d.len(), y_k.len()));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(CompensationError::Alpha(alpha));
    }
    if y_d.is_empty() {
        return Err(CompensationError::Empty);
    }
    let mut sum = 0.0;
    let mut max = 0.0f64;
    for (a, b) in y_d.iter().zip(y_k) {
        let d = (a - b).abs();
        sum += d;
        max = max.max(d);
    }
    Ok(alpha * sum / y_d.len() as f64 + (1.0 - alpha) * max)
}

/// Error over the bins that were actually measured (`Some` in `y_k`).
pub fn measured_error(y_d: &[f64], y_k: &[Option<f64>], alpha: f64) -> Result<f64, CompensationError> {
    if y_d.len() != y_k.len() {
        return Err(CompensationError::LengthMismatch(y_d.len(), y_k.len()));
    }
    let (d, k): (Vec<f64>, Vec<f64>) = y_d
        .iter()
        .zip(y_k)
        .filter_map(|(d, k)| k.map(|k| (*d, k)))
        .unzip();
    error_metric(&d, &k, alpha)
}

/// Step gain as a function of the current error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GammaSchedule {
    Constant { gain: f64 },
    Threshold { switch_cn: f64, high: f64, low: f64 },
}

impl GammaSchedule {
    /// Large steps far from the target, half-size steps near it, both scaled
    /// by the inverse of the estimated plant gain.
    pub fn for_gain(static_gain_estimate: f64) -> Self {
        let g = static_gain_estimate.max(1e-6);
        GammaSchedule::Threshold {
            switch_cn: GAMMA_SWITCH_CN,
            high: 0.8 / g,
            low: 0.4 / g,
        }
    }

    pub fn gain(&self, error: f64) -> f64 {
        match *self {
            GammaSchedule::Constant { gain } => gain,
            GammaSchedule::Threshold {
                switch_cn,
                high,
                low,
            } => {
                if error > switch_cn {
                    high
                } else {
                    low
                }
            }
        }
    }
}

/// Linear actuation-to-force map measured with two pulses at rest.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub gain: f64,
    pub offset: f64,
}

impl Calibration {
    pub fn force_to_u(&self, force: f64) -> f64 {
        (force - self.offset) / self.gain.max(1e-6)
    }
}

/// Holds each calibration pulse for 200 ticks and averages the last 100.
pub fn calibrate(plant: &VirtualPlant) -> Calibration {
    let level = |u: f64| {
        let mut sim = plant.start();
        let f: Vec<f64> = (0..200).map(|_| sim.step(u, 0.0, 1.0)).collect();
        f[100..].iter().sum::<f64>() / 100.0
    };
    let (u1, u2) = CALIBRATION_PULSES;
    let (f1, f2) = (level(u1), level(u2));
    let gain = (f2 - f1) / (u2 - u1);
    Calibration {
        gain,
        offset: f1 - gain * u1,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompensationState {
    pub iteration: usize,
    pub actuation: ActuationCurve,
    /// Measured force per bin; `None` where the press left no sample.
    pub y_k: Vec<Option<f64>>,
    pub y_d: Vec<f64>,
    pub error: f64,
    pub alpha: f64,
    pub gamma: GammaSchedule,
    pub u_max: f64,
}

/// `u + Γ(error) (y_d - y_k)` per bin, clamped to `[0, u_max]`. Bins without
/// a measurement take the difference interpolated from their neighbours.
pub fn update_signals(state: &CompensationState) -> ActuationCurve {
    let g = state.gamma.gain(state.error);
    let diff: Vec<Option<f64>> = state
        .y_d
        .iter()
        .zip(&state.y_k)
        .map(|(d, k)| k.map(|k| d - k))
        .collect();
    let diff = fill_gaps(&diff).unwrap_or_else(|| vec![0.0; diff.len()]);
    let u = state
        .actuation
        .u
        .iter()
        .zip(diff)
        .map(|(u, e)| (u + g * e).clamp(0.0, state.u_max))
        .collect();
    ActuationCurve {
        u,
        ..state.actuation.clone()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompensationOptions {
    pub max_iters: usize,
    pub tol_cn: f64,
    pub alpha: f64,
    /// `None` derives the schedule from calibration pulses.
    pub gamma: Option<GammaSchedule>,
    /// Starting signal; `None` inverts the calibration map.
    #[serde(default)]
    pub initial_u: Option<Vec<f64>>,
    pub rest_ms: usize,
    pub dwell_ms: usize,
    /// Width of the smoothing applied by [`compensate_model`] after averaging runs.
    #[serde(default = "default_finalize_sigma")]
    pub finalize_sigma_mm: f64,
}

fn default_finalize_sigma() -> f64 {
    FINALIZE_SIGMA_MM
}

impl Default for CompensationOptions {
    fn default() -> Self {
        Self {
            max_iters: 12,
            tol_cn: 1.0,
            alpha: DEFAULT_ALPHA,
            gamma: None,
            initial_u: None,
            rest_ms: 30,
            dwell_ms: 30,
            finalize_sigma_mm: FINALIZE_SIGMA_MM,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompensationRun {
    /// Actuation of the lowest-error iteration.
    pub curve: ActuationCurve,
    pub errors: Vec<f64>,
    pub best_iteration: usize,
    pub converged: bool,
    pub calibration: Calibration,
}

/// One simulated press at `velocity`; returns the downstroke force per bin.
pub fn measure_press(
    curve: &ActuationCurve,
    config: &SimConfig,
    plant: &VirtualPlant,
    opts: &CompensationOptions,
) -> Result<Vec<Option<f64>>, CompensationError> {
    let traj = PressTrajectory::constant_velocity(
        config.travel_range_mm,
        curve.velocity_mm_s,
        opts.rest_ms,
        opts.dwell_ms,
        false,
    );
    let trace = run_press(std::slice::from_ref(curve), None, &traj, config, plant)?;
    let down = &trace.records[..downstroke_len(&trace.records)];
    Ok(bin_means(
        &curve.grid,
        down.iter().map(|r| r.filtered_disp),
        down.iter().map(|r| r.plant_force),
    ))
}

/// Runs the compensation loop for one velocity.
pub fn run_compensation(
    model: &FdvvModel,
    plant: &VirtualPlant,
    velocity: f64,
    opts: &CompensationOptions,
) -> Result<CompensationRun, CompensationError> {
    plant.validate().map_err(|e| {
        CompensationError::Plant(
            e.iter()
                .map(|f| format!("{}: {}", f.field, f.message))
                .collect::<Vec<_>>()
                .join("; "),
        )
    })?;
    if !(0.0..=1.0).contains(&opts.alpha) {
        return Err(CompensationError::Alpha(opts.alpha));
    }
    let grid = model.grid();
    let y_d = model.target_forces(velocity);
    let calibration = calibrate(plant);
    let gamma = opts.gamma.unwrap_or(GammaSchedule::for_gain(calibration.gain));
    let u_max = plant.u_max();
    let u0 = match &opts.initial_u {
        Some(u) if u.len() == grid.len() => u.clone(),
        Some(u) => return Err(CompensationError::LengthMismatch(u.len(), grid.len())),
        None => y_d
            .iter()
            .map(|&f| calibration.force_to_u(f).clamp(0.0, u_max))
            .collect(),
    };
    let mut config = SimConfig::for_model(model);
    config.vibration = None;

    let mut curve = ActuationCurve::new(velocity, grid, u0);
    let mut errors = Vec::new();
    let mut best: Option<(f64, usize, ActuationCurve)> = None;
    let mut stalled = 0;
    for iteration in 0..opts.max_iters {
        let press_plant = VirtualPlant {
            seed: plant.seed.wrapping_add(iteration as u64),
            ..plant.clone()
        };
        let y_k = measure_press(&curve, &config, &press_plant, opts)?;
        if y_k.iter().all(Option::is_none) {
            return Err(CompensationError::NothingMeasured);
        }
        let error = measured_error(&y_d, &y_k, opts.alpha)?;
        if let Some(b) = &best {
            stalled = if error > b.0 * (1.0 - MIN_PROGRESS) { stalled + 1 } else { 0 };
        }
        errors.push(error);
        log::debug!("compensation v={velocity} iteration {iteration}: error {error:.3} cN");
        if best.as_ref().is_none_or(|b| error < b.0) {
            best = Some((error, iteration, curve.clone()));
        }
        if error <= opts.tol_cn {
            break;
        }
        if stalled >= DIVERGENCE_RUN {
            return Err(CompensationError::Diverged { trace: errors });
        }
        let state = CompensationState {
            iteration,
            actuation: curve,
            y_k,
            y_d: y_d.clone(),
            error,
            alpha: opts.alpha,
            gamma,
            u_max,
        };
        curve = update_signals(&state);
    }
    let (best_error, best_iteration, curve) = best.expect("at least one iteration runs");
    Ok(CompensationRun {
        curve,
        converged: best_error <= opts.tol_cn,
        errors,
        best_iteration,
        calibration,
    })
}

/// Per-bin mean of repeated runs, then Gaussian smoothing over displacement.
pub fn finalize_actuation(runs: &[ActuationCurve], sigma_mm: f64) -> Result<ActuationCurve, CompensationError> {
    let first = runs.first().ok_or(ActuationError::TooFewCurves { need: 1, got: 0 })?;
    for r in runs {
        if r.grid != first.grid {
            return Err(ActuationError::GridMismatch(first.u.len(), r.u.len()).into());
        }
    }
    let n = runs.len() as f64;
    let mean: Vec<f64> = (0..first.u.len())
        .map(|i| runs.iter().map(|r| r.u[i]).sum::<f64>() / n)
        .collect();
    Ok(ActuationCurve {
        u: gaussian_smooth(&mean, sigma_mm / BIN_MM, EdgeMode::PointReflect),
        ..first.clone()
    })
}

/// Per-velocity results of [`compensate_model`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VelocityReport {
    pub velocity_mm_s: f64,
    pub runs: Vec<CompensationRun>,
}

/// Compensates every model velocity `runs_per_velocity` times (each run with
/// its own noise seed), finalizes each velocity's runs, and assembles the
/// actuation table. Velocities run on separate threads.
pub fn compensate_model(
    model: &FdvvModel,
    plant: &VirtualPlant,
    velocities: &[f64],
    runs_per_velocity: usize,
    opts: &CompensationOptions,
) -> Result<(ActuationTable, Vec<VelocityReport>), CompensationError> {
    let runs_per_velocity = runs_per_velocity.max(1);
    let results: Vec<Result<VelocityReport, CompensationError>> = std::thread::scope(|s| {
        let handles: Vec<_> = velocities
            .iter()
            .map(|&v| {
                s.spawn(move || {
                    let runs = (0..runs_per_velocity)
                        .map(|r| {
                            let p = VirtualPlant {
                                seed: plant.seed.wrapping_add(1000 * r as u64),
                                ..plant.clone()
                            };
                            run_compensation(model, &p, v, opts)
                        })
                        .collect::<Result<Vec<_>, _>>()?;
                    Ok(VelocityReport {
                        velocity_mm_s: v,
                        runs,
                    })
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("compensation thread")).collect()
    });
    let mut reports = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    reports.sort_by(|a, b| a.velocity_mm_s.total_cmp(&b.velocity_mm_s));
    let curves = reports
        .iter()
        .map(|r| {
            let c: Vec<ActuationCurve> = r.runs.iter().map(|x| x.curve.clone()).collect();
            finalize_actuation(&c, opts.finalize_sigma_mm)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let table = ActuationTable {
        button_id: model.button_id.clone(),
        plant_id: plant.plant_id.clone(),
        travel_range_mm: model.travel_range_mm,
        activation_point_mm: Some(model.activation_point_mm),
        vibration: model.vibration.clone(),
        curves,
        interpolated: false,
    };
    Ok((table, reports))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::DisplacementGrid;
    use crate::model::VelocityCurve;
    use crate::bspline::BSplineCurve;

    fn flat_model(force: f64) -> FdvvModel {
        FdvvModel {
            button_id: "flat".into(),
            travel_range_mm: 4.0,
            activation_point_mm: 2.0,
            press_curves: vec![VelocityCurve {
                velocity_mm_s: 100.0,
                curve: BSplineCurve::with_forces(3, 0.0, 4.0, &[force; 6]).unwrap(),
            }],
            release_curves: None,
            vibration: None,
        }
    }

    #[test]
    fn metric_examples() {
        let y = vec![1.0, 2.0, 3.0];
        assert_eq!(error_metric(&y, &y, 0.7).unwrap(), 0.0);
        let d = [0.0, 0.0, 0.0, 0.0];
        let k = [2.0, -2.0, 2.0, 10.0];
        assert!((error_metric(&d, &k, 0.7).unwrap() - 5.8).abs() < 1e-12);
        assert!(matches!(
            error_metric(&d, &k[..3], 0.7),
            Err(CompensationError::LengthMismatch(4, 3))
        ));
    }

    fn state(u: Vec<f64>, y_k: Vec<f64>, y_d: Vec<f64>, gamma: f64) -> CompensationState {
        let g = DisplacementGrid::new(0.05 * u.len() as f64);
        CompensationState {
            iteration: 0,
            actuation: ActuationCurve::new(100.0, g, u),
            y_k: y_k.into_iter().map(Some).collect(),
            y_d,
            error: 0.0,
            alpha: DEFAULT_ALPHA,
            gamma: GammaSchedule::Constant { gain: gamma },
            u_max: 1000.0,
        }
    }

    #[test]
    fn update_arithmetic() {
        let s = state(vec![100.0, 7.0], vec![40.0, 3.0], vec![50.0, 3.0], 0.5);
        assert_eq!(update_signals(&s).u, vec![105.0, 7.0]);
        let s = state(vec![3.0, 9.0], vec![3.0, 9.0], vec![20.0, 30.0], 1.0);
        assert_eq!(update_signals(&s).u, vec![20.0, 30.0]);
    }

    #[test]
    fn unmeasured_bins_follow_neighbours() {
        let mut s = state(vec![0.0; 3], vec![0.0; 3], vec![10.0, 20.0, 30.0], 1.0);
        s.y_k[1] = None;
        assert_eq!(update_signals(&s).u, vec![10.0, 20.0, 30.0]);
        assert!((measured_error(&s.y_d, &s.y_k, 0.5).unwrap() - 25.0).abs() < 1e-12);
    }

    #[test]
    fn gamma_schedule_switches_at_ten() {
        let g = GammaSchedule::for_gain(2.0);
        assert_eq!(g.gain(10.5), 0.4);
        assert_eq!(g.gain(10.0), 0.2);
    }

    #[test]
    fn calibration_recovers_linear_plant() {
        let p = VirtualPlant {
            static_gain: 1.5,
            bias: 4.0,
            nonlinearity: 1.0,
            noise_sigma: 0.0,
            ..VirtualPlant::default()
        };
        let c = calibrate(&p);
        assert!((c.gain - 1.5).abs() < 1e-9);
        assert!((c.offset - 4.0).abs() < 1e-9);
    }

    #[test]
    fn identity_plant_converges_immediately() {
        let run = run_compensation(
            &flat_model(60.0),
            &VirtualPlant::identity(),
            100.0,
            &CompensationOptions::default(),
        )
        .unwrap();
        assert!(run.errors.len() <= 2);
        assert!(run.errors.last().unwrap() < &1e-6);
    }

    #[test]
    fn dead_plant_diverges() {
        let p = VirtualPlant {
            static_gain: 0.0,
            ..VirtualPlant::default()
        };
        let opts = CompensationOptions {
            max_iters: 30,
            ..Default::default()
        };
        match run_compensation(&flat_model(60.0), &p, 100.0, &opts) {
            Err(CompensationError::Diverged { trace }) => assert!(trace.len() > DIVERGENCE_RUN),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn finalize_examples() {
        let g = DisplacementGrid::new(4.0);
        let c = ActuationCurve::new(100.0, g, vec![42.0; 80]);
        let f = finalize_actuation(&vec![c.clone(); 4], 1.2).unwrap();
        assert!(f.u.iter().all(|u| (u - 42.0).abs() < 1e-9));
        let a = ActuationCurve::new(100.0, g, (0..80).map(|i| (i as f64).sin() * 30.0 + 60.0).collect());
        let b = ActuationCurve {
            u: a.u.iter().map(|x| -x + 120.0).collect(),
            ..a.clone()
        };
        let f = finalize_actuation(&[a, b], 1.2).unwrap();
        assert!(f.u.iter().all(|u| (u - 60.0).abs() < 1e-9));
        let other = ActuationCurve::new(100.0, DisplacementGrid::new(3.6), vec![1.0; 72]);
        assert!(finalize_actuation(&[c, other], 1.2).is_err());
    }
}
