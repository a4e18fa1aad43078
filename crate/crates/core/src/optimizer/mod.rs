//! Bayesian optimization of a three-point button design against a simulated
//! temporal-pointing user.

pub mod gp;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::actuation::{ActuationCurve, ActuationTable};
use crate::bspline::BSplineCurve;
use crate::grid::{DisplacementGrid, BIN_MM};
use crate::model::FieldError;
use crate::vibration::{template_id, VibrationDescriptor};
use crate::MAX_TRAVEL_MM;

pub use gp::{bo_step, expected_improvement, BoConfig, BoState, Gp, GpHyper};

#[derive(Debug, Error)]
pub enum OptimizerError {
    #[error("invalid design: {}", .0.iter().map(|e| format!("{}: {}", e.field, e.message)).collect::<Vec<_>>().join("; "))]
    Invalid(Vec<FieldError>),
    #[error("budget must be at least 1")]
    Budget,
    #[error("trials_per_eval must be at least 1")]
    Trials,
}

/// Design variables: three actuation control points and the activation and
/// vibration depths.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ButtonParams {
    pub x1: f64,
    pub x2: f64,
    pub x3: f64,
    pub y1: f64,
    pub y2: f64,
    pub y3: f64,
    pub p_a: f64,
    pub p_v: f64,
}

/// Parameter name, lower bound, upper bound, upper bound excluded.
pub const BOUNDS: [(&str, f64, f64, bool); 8] = [
    ("x1", 0.0, 1.0, true),
    ("x2", 1.0, 3.0, true),
    ("x3", 3.0, MAX_TRAVEL_MM, true),
    ("y1", 20.0, 180.0, false),
    ("y2", 20.0, 180.0, false),
    ("y3", 20.0, 180.0, false),
    ("p_a", 0.5, 5.5, false),
    ("p_v", 0.5, 5.5, false),
];

/// Margin kept below an excluded upper bound.
const OPEN_MARGIN: f64 = 1e-6;

/// Snap pitch and length given to designed buttons.
pub const DESIGN_VIBRATION_HZ: f64 = 239.0;
pub const DESIGN_VIBRATION_MS: f64 = 16.0;

impl ButtonParams {
    pub fn to_array(&self) -> [f64; 8] {
        [self.x1, self.x2, self.x3, self.y1, self.y2, self.y3, self.p_a, self.p_v]
    }

    pub fn from_array(a: [f64; 8]) -> Self {
        Self {
            x1: a[0],
            x2: a[1],
            x3: a[2],
            y1: a[3],
            y2: a[4],
            y3: a[5],
            p_a: a[6],
            p_v: a[7],
        }
    }

    /// Range midpoint of every parameter.
    pub fn midpoint() -> Self {
        Self::from_unit(&[0.5; 8])
    }

    pub fn validate(&self) -> Vec<FieldError> {
        self.to_array()
            .iter()
            .zip(BOUNDS)
            .filter_map(|(&v, (name, lo, hi, open))| {
                let ok = v.is_finite() && v >= lo && if open { v < hi } else { v <= hi };
                (!ok).then(|| {
                    FieldError::new(name, format!("{v} outside [{lo}, {hi}{}", if open { ")" } else { "]" }))
                })
            })
            .collect()
    }

    /// Maps a point of the unit hypercube onto the parameter ranges.
    pub fn from_unit(u: &[f64]) -> Self {
        assert_eq!(u.len(), 8);
        let mut a = [0.0; 8];
        for (i, (_, lo, hi, open)) in BOUNDS.iter().enumerate() {
            let v = lo + u[i].clamp(0.0, 1.0) * (hi - lo);
            a[i] = if *open { v.min(hi - OPEN_MARGIN) } else { v };
        }
        Self::from_array(a)
    }

    pub fn to_unit(&self) -> Vec<f64> {
        self.to_array()
            .iter()
            .zip(BOUNDS)
            .map(|(v, (_, lo, hi, _))| (v - lo) / (hi - lo))
            .collect()
    }

    pub fn random(rng: &mut impl Rng) -> Self {
        let u: Vec<f64> = (0..8).map(|_| rng.random::<f64>()).collect();
        Self::from_unit(&u)
    }
}

/// Quadratic spline through the three control points, flat outside them,
/// sampled on the full-travel grid and carried as a single-velocity table.
pub fn params_to_actuation(params: &ButtonParams) -> Result<ActuationTable, OptimizerError> {
    let errs = params.validate();
    if !errs.is_empty() {
        return Err(OptimizerError::Invalid(errs));
    }
    let curve = BSplineCurve::new(
        2,
        vec![[params.x1, params.y1], [params.x2, params.y2], [params.x3, params.y3]],
    )
    .expect("disjoint ranges keep the control points ordered");
    let grid = DisplacementGrid::new(MAX_TRAVEL_MM);
    let u = curve.sample(&grid.centers());
    Ok(ActuationTable {
        button_id: "bo-design".into(),
        plant_id: "default".into(),
        travel_range_mm: MAX_TRAVEL_MM,
        activation_point_mm: Some(params.p_a),
        vibration: Some(VibrationDescriptor {
            onset_mm: params.p_v,
            duration_ms: DESIGN_VIBRATION_MS,
            frequency_hz: DESIGN_VIBRATION_HZ,
            template_id: template_id(DESIGN_VIBRATION_HZ, 0.0),
        }),
        curves: vec![ActuationCurve::new(100.0, grid, u)],
        interpolated: false,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Difficulty {
    #[default]
    Easy,
    Hard,
}

impl Difficulty {
    pub fn target_speed_px_s(self) -> f64 {
        match self {
            Difficulty::Easy => 100.0,
            Difficulty::Hard => 150.0,
        }
    }

    /// Base asynchrony and motor noise scale with target speed relative to
    /// the easy condition.
    pub fn factor(self) -> f64 {
        self.target_speed_px_s() / 100.0
    }
}

/// How strongly each haptic landmark helps the simulated user.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SalienceWeights {
    pub slope: f64,
    pub proximity: f64,
    /// Actuation units per mm at which the slope term reaches tanh(1).
    pub slope_scale: f64,
    pub proximity_scale_mm: f64,
    /// Half-width of the window around the activation point searched for
    /// the steepest rise (mm).
    pub window_mm: f64,
}

impl Default for SalienceWeights {
    fn default() -> Self {
        Self {
            slope: 1.0,
            proximity: 1.0,
            slope_scale: 60.0,
            proximity_scale_mm: 0.5,
            window_mm: 0.5,
        }
    }
}

/// Stand-in for a participant: timing error shrinks with haptic salience.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimulatedUser {
    pub base_asynchrony: f64,
    pub haptic_gain: f64,
    pub motor_noise_sigma: f64,
    pub seed: u64,
    #[serde(default)]
    pub salience: SalienceWeights,
}

impl Default for SimulatedUser {
    fn default() -> Self {
        Self {
            base_asynchrony: 110.0,
            haptic_gain: 30.0,
            motor_noise_sigma: 20.0,
            seed: 0,
            salience: SalienceWeights::default(),
        }
    }
}

/// Steepest positive actuation slope within the window around the
/// activation point (units per mm).
pub fn activation_sharpness(params: &ButtonParams, table: &ActuationTable, window_mm: f64) -> f64 {
    let c = &table.curves[0];
    let g = &c.grid;
    let lo = (params.p_a - window_mm).max(0.0);
    let hi = (params.p_a + window_mm).min(g.travel_range());
    (0..g.len() - 1)
        .filter(|&i| g.center(i) >= lo && g.center(i + 1) <= hi)
        .map(|i| (c.u[i + 1] - c.u[i]) / BIN_MM)
        .fold(0.0, f64::max)
}

/// `w_s * tanh(sharpness / scale) + w_p * exp(-|p_v - p_a| / scale_p)`.
pub fn salience(params: &ButtonParams, weights: &SalienceWeights) -> Result<f64, OptimizerError> {
    let table = params_to_actuation(params)?;
    let sharp = activation_sharpness(params, &table, weights.window_mm);
    Ok(weights.slope * (sharp / weights.slope_scale).tanh()
        + weights.proximity * (-(params.p_v - params.p_a).abs() / weights.proximity_scale_mm).exp())
}

fn trial_seed(seed: u64, trial: usize) -> u64 {
    seed ^ (trial as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Asynchrony of one trial (ms).
pub fn trial_asynchrony(salience: f64, user: &SimulatedUser, difficulty: Difficulty, trial: usize) -> f64 {
    let k = difficulty.factor();
    let mut rng = ChaCha8Rng::seed_from_u64(trial_seed(user.seed, trial));
    let z: f64 = StandardNormal.sample(&mut rng);
    k * user.base_asynchrony - user.haptic_gain * salience + k * user.motor_noise_sigma * z
}

/// Mean asynchrony over `trials` presses; each trial's noise is drawn from
/// its own seed, so the result does not depend on trial order.
pub fn evaluate_design(
    params: &ButtonParams,
    user: &SimulatedUser,
    difficulty: Difficulty,
    trials: usize,
) -> Result<f64, OptimizerError> {
    if trials == 0 {
        return Err(OptimizerError::Trials);
    }
    let s = salience(params, &user.salience)?;
    let total: f64 = (0..trials)
        .map(|i| trial_asynchrony(s, user, difficulty, i))
        .sum();
    Ok(total / trials as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub budget: usize,
    pub trials_per_eval: usize,
    #[serde(default)]
    pub difficulty: Difficulty,
    #[serde(default)]
    pub user: SimulatedUser,
    #[serde(default)]
    pub bo: BoConfig,
    #[serde(default)]
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            budget: 30,
            trials_per_eval: 20,
            difficulty: Difficulty::Easy,
            user: SimulatedUser::default(),
            bo: BoConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub iteration: usize,
    pub params: ButtonParams,
    pub mean_asynchrony: f64,
    pub incumbent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizeResult {
    pub best: ButtonParams,
    pub best_value: f64,
    pub history: Vec<HistoryEntry>,
    pub state: BoState,
}

impl OptimizeResult {
    pub fn history_json_lines(&self) -> String {
        self.history
            .iter()
            .map(|h| serde_json::to_string(h).expect("history serializes") + "\n")
            .collect()
    }
}

/// Evaluates `budget` designs proposed by the BO loop and returns the
/// incumbent with the full history. `on_step` sees each entry as it lands.
pub fn optimize_with(
    config: &RunConfig,
    mut on_step: impl FnMut(&HistoryEntry),
) -> Result<OptimizeResult, OptimizerError> {
    if config.budget == 0 {
        return Err(OptimizerError::Budget);
    }
    if config.trials_per_eval == 0 {
        return Err(OptimizerError::Trials);
    }
    let mut state = BoState::new(8, config.bo.clone(), config.seed);
    let mut history = Vec::with_capacity(config.budget);
    for iteration in 0..config.budget {
        let x = bo_step(&mut state);
        let params = ButtonParams::from_unit(&x);
        let y = evaluate_design(&params, &config.user, config.difficulty, config.trials_per_eval)?;
        state.observe(x, y);
        let entry = HistoryEntry {
            iteration,
            params,
            mean_asynchrony: y,
            incumbent: state.incumbent().expect("just observed").1,
        };
        on_step(&entry);
        history.push(entry);
    }
    let (i, best_value) = state.incumbent().expect("budget >= 1");
    Ok(OptimizeResult {
        best: history[i].params,
        best_value,
        history,
        state,
    })
}

pub fn optimize(config: &RunConfig) -> Result<OptimizeResult, OptimizerError> {
    optimize_with(config, |_| {})
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plant::VirtualPlant;
    use crate::render::{run_press, PressTrajectory, SimConfig};

    #[test]
    fn constant_levels_give_constant_actuation() {
        let p = ButtonParams {
            y1: 100.0,
            y2: 100.0,
            y3: 100.0,
            ..ButtonParams::midpoint()
        };
        let t = params_to_actuation(&p).unwrap();
        assert!(t.curves[0].u.iter().all(|&u| (u - 100.0).abs() < 1e-9));
        assert_eq!(t.curves[0].u.len(), 124);
    }

    #[test]
    fn unit_mapping_respects_bounds() {
        let hi = ButtonParams::from_unit(&[1.0; 8]);
        assert!(hi.validate().is_empty(), "{:?}", hi.validate());
        assert!(hi.x1 < 1.0 && hi.x3 < MAX_TRAVEL_MM);
        let lo = ButtonParams::from_unit(&[0.0; 8]);
        assert_eq!(lo.x1, 0.0);
        let bad = ButtonParams { x2: 3.0, ..lo };
        assert_eq!(bad.validate()[0].field, "x2");
        assert!(params_to_actuation(&bad).is_err());
    }

    #[test]
    fn random_designs_render() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let plant = VirtualPlant::default();
        for _ in 0..100 {
            let p = ButtonParams::random(&mut rng);
            let t = params_to_actuation(&p).unwrap();
            t.validate().unwrap();
            let cfg = SimConfig::for_table(&t);
            let traj = PressTrajectory::constant_velocity(MAX_TRAVEL_MM, 150.0, 5, 5, true);
            run_press(&t.curves, None, &traj, &cfg, &plant).unwrap();
        }
    }

    #[test]
    fn degenerate_user_returns_base() {
        let u = SimulatedUser {
            haptic_gain: 0.0,
            motor_noise_sigma: 0.0,
            ..Default::default()
        };
        let m = evaluate_design(&ButtonParams::midpoint(), &u, Difficulty::Easy, 27).unwrap();
        assert_eq!(m, u.base_asynchrony);
        assert!(evaluate_design(&ButtonParams::midpoint(), &u, Difficulty::Easy, 0).is_err());
    }

    #[test]
    fn same_seed_same_mean() {
        let u = SimulatedUser::default();
        let p = ButtonParams::from_unit(&[0.3, 0.6, 0.2, 0.9, 0.1, 0.5, 0.4, 0.45]);
        let a = evaluate_design(&p, &u, Difficulty::Hard, 20).unwrap();
        let b = evaluate_design(&p, &u, Difficulty::Hard, 20).unwrap();
        assert_eq!(a, b);
    }

    fn salient() -> ButtonParams {
        // steep rise right at the activation point, vibration at the same depth
        ButtonParams {
            x1: 0.9,
            x2: 2.0,
            x3: 3.1,
            y1: 20.0,
            y2: 20.0,
            y3: 180.0,
            p_a: 2.9,
            p_v: 2.9,
        }
    }

    fn bland() -> ButtonParams {
        ButtonParams {
            y1: 100.0,
            y2: 100.0,
            y3: 100.0,
            p_a: 0.5,
            p_v: 5.5,
            ..ButtonParams::midpoint()
        }
    }

    #[test]
    fn salience_extremes() {
        let w = SalienceWeights::default();
        assert!(salience(&salient(), &w).unwrap() > 1.5);
        assert!(salience(&bland(), &w).unwrap() < 1e-3);
    }

    #[test]
    fn salience_ordering_survives_noise() {
        let mut kept = 0;
        for seed in 0..100 {
            let u = SimulatedUser {
                motor_noise_sigma: 5.0,
                seed,
                ..Default::default()
            };
            let good = evaluate_design(&salient(), &u, Difficulty::Easy, 27).unwrap();
            let bad = evaluate_design(&bland(), &u, Difficulty::Easy, 27).unwrap();
            if good < bad {
                kept += 1;
            }
        }
        assert!(kept >= 95);
    }

    #[test]
    fn budget_one_returns_midpoint() {
        let r = optimize(&RunConfig {
            budget: 1,
            ..Default::default()
        })
        .unwrap();
        assert_eq!(r.history.len(), 1);
        assert_eq!(r.best, ButtonParams::midpoint());
        assert!(optimize(&RunConfig {
            budget: 0,
            ..Default::default()
        })
        .is_err());
    }

    #[test]
    fn run_config_round_trips() {
        let c = RunConfig::default();
        let s = serde_json::to_string(&c).unwrap();
        assert!(s.contains("\"kernel\":\"squared-exponential\""));
        assert_eq!(serde_json::from_str::<RunConfig>(&s).unwrap(), c);
        let minimal: RunConfig = serde_json::from_str(r#"{"budget": 5, "trials_per_eval": 3}"#).unwrap();
        assert_eq!(minimal.bo.candidates, 4096);
    }
}
