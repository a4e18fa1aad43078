//! Discrete-time (1 kHz) simulation of the button controller.
//!
//! Each tick senses the finger's intended depth, limits it to the travel
//! range, smooths it with a moving average, estimates the press velocity,
//! looks up the actuation for the current 0.05 mm bin, drives the plant and
//! emits press events and the vibration channel.

mod preset;
mod trajectory;

pub use preset::{builtin_presets, Hook, HookContext, Preset};
pub use trajectory::{minimum_jerk_shape, PressTrajectory, Profile};

use std::collections::{HashMap, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::capture::bin_means;
use crate::actuation::{select_actuation, slowest, ActuationCurve, ActuationTable};
use crate::model::{FdvvModel, FieldError};
use crate::plant::{PlantSim, VirtualPlant};
use crate::vibration::WaveTemplate;
use crate::MAX_TRAVEL_MM;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RenderError {
    #[error("invalid simulation config: {}", .0.iter().map(|e| format!("{}: {}", e.field, e.message)).collect::<Vec<_>>().join("; "))]
    Config(Vec<FieldError>),
    #[error("travel range mismatch: config has {config} mm, {what} has {found} mm")]
    TravelMismatch {
        config: f64,
        what: &'static str,
        found: f64,
    },
    #[error("no actuation curves")]
    NoCurves,
    #[error("invalid trajectory: {0}")]
    Trajectory(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    #[serde(default = "d::tick")]
    pub tick_ms: f64,
    #[serde(default = "d::ma_window")]
    pub ma_window: usize,
    #[serde(default = "d::velocity_window")]
    pub velocity_window_mm: (f64, f64),
    #[serde(default = "d::min_velocity_samples")]
    pub min_velocity_samples: usize,
    #[serde(default = "d::pretrigger")]
    pub vibration_pretrigger_mm: f64,
    /// Delay between the vibration command and the waveform starting.
    #[serde(default = "d::latency")]
    pub vibration_latency_ms: f64,
    /// Filtered depth below which a finished press re-arms the controller.
    #[serde(default = "d::rearm")]
    pub rearm_mm: f64,
    pub travel_range_mm: f64,
    pub activation_point_mm: f64,
    #[serde(default)]
    pub vibration_onset_mm: Option<f64>,
    #[serde(default)]
    pub vibration: Option<WaveTemplate>,
    #[serde(default)]
    pub presets: Vec<Preset>,
}

mod d {
    pub fn tick() -> f64 {
        1.0
    }
    pub fn ma_window() -> usize {
        25
    }
    pub fn velocity_window() -> (f64, f64) {
        (0.5, 1.0)
    }
    pub fn min_velocity_samples() -> usize {
        3
    }
    pub fn pretrigger() -> f64 {
        0.3
    }
    pub fn latency() -> f64 {
        7.0
    }
    pub fn rearm() -> f64 {
        0.1
    }
}

impl SimConfig {
    pub fn new(travel_range_mm: f64, activation_point_mm: f64) -> Self {
        Self {
            tick_ms: d::tick(),
            ma_window: d::ma_window(),
            velocity_window_mm: d::velocity_window(),
            min_velocity_samples: d::min_velocity_samples(),
            vibration_pretrigger_mm: d::pretrigger(),
            vibration_latency_ms: d::latency(),
            rearm_mm: d::rearm(),
            travel_range_mm,
            activation_point_mm,
            vibration_onset_mm: None,
            vibration: None,
            presets: Vec::new(),
        }
    }

    /// Config carrying the model's travel, activation and vibration onset;
    /// the waveform is a full-amplitude decay at the described pitch.
    pub fn for_model(model: &FdvvModel) -> Self {
        let mut c = Self::new(model.travel_range_mm, model.activation_point_mm);
        if let Some(v) = &model.vibration {
            c.vibration_onset_mm = Some(v.onset_mm);
            c.vibration = Some(WaveTemplate {
                id: v.template_id.clone(),
                frequency_hz: v.frequency_hz,
                duration_ms: v.duration_ms,
                amplitude_start: crate::vibration::MAX_AMPLITUDE_V,
                amplitude_end: 0.0,
                envelope: Default::default(),
            });
        }
        c
    }

    /// Config from an actuation table; activation defaults to mid-travel.
    pub fn for_table(table: &ActuationTable) -> Self {
        let mut c = Self::new(
            table.travel_range_mm,
            table
                .activation_point_mm
                .unwrap_or(0.5 * table.travel_range_mm),
        );
        if let Some(v) = &table.vibration {
            c.vibration_onset_mm = Some(v.onset_mm);
            c.vibration = Some(WaveTemplate {
                id: v.template_id.clone(),
                frequency_hz: v.frequency_hz,
                duration_ms: v.duration_ms,
                amplitude_start: crate::vibration::MAX_AMPLITUDE_V,
                amplitude_end: 0.0,
                envelope: Default::default(),
            });
        }
        c
    }

    pub fn validate(&self) -> Result<(), RenderError> {
        let mut errs = Vec::new();
        let travel = self.travel_range_mm;
        if !(travel > 0.0 && travel <= MAX_TRAVEL_MM) {
            errs.push(FieldError::new(
                "travel_range_mm",
                format!("must be in (0, {MAX_TRAVEL_MM}], got {travel}"),
            ));
        }
        let ap = self.activation_point_mm;
        if !(ap > 0.0 && ap < travel) {
            errs.push(FieldError::new(
                "activation_point_mm",
                format!("must satisfy 0 < activation point < travel range ({travel}), got {ap}"),
            ));
        }
        if self.tick_ms <= 0.0 || !self.tick_ms.is_finite() {
            errs.push(FieldError::new("tick_ms", "must be positive"));
        }
        if self.ma_window == 0 {
            errs.push(FieldError::new("ma_window", "must be at least 1"));
        }
        let (lo, hi) = self.velocity_window_mm;
        if !(lo >= 0.0 && hi > lo) {
            errs.push(FieldError::new("velocity_window_mm", "must be an increasing pair"));
        }
        if self.min_velocity_samples < 2 {
            errs.push(FieldError::new("min_velocity_samples", "a slope needs at least 2 samples"));
        }
        if let Some(o) = self.vibration_onset_mm {
            if !(o > 0.0 && o < travel) {
                errs.push(FieldError::new(
                    "vibration_onset_mm",
                    format!("must lie inside (0, {travel}), got {o}"),
                ));
            }
        }
        if self.vibration_latency_ms < 0.0 {
            errs.push(FieldError::new("vibration_latency_ms", "must be non-negative"));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(RenderError::Config(errs))
        }
    }
}

/// Mean of the last `min(window, seen)` samples.
#[derive(Debug, Clone)]
pub struct MovingAverage {
    window: usize,
    buf: VecDeque<f64>,
}

impl MovingAverage {
    pub fn new(window: usize) -> Self {
        assert!(window >= 1, "moving-average window must be at least 1");
        Self {
            window,
            buf: VecDeque::with_capacity(window),
        }
    }

    pub fn push(&mut self, x: f64) -> f64 {
        if self.buf.len() == self.window {
            self.buf.pop_front();
        }
        self.buf.push_back(x);
        // Summing afresh each tick keeps exact outputs on constant input.
        self.buf.iter().sum::<f64>() / self.buf.len() as f64
    }

    pub fn reset(&mut self) {
        self.buf.clear();
    }
}

/// Least-squares slope (mm/s) of depth against time over `(t_ms, d_mm)`.
pub fn regression_slope(samples: &[(f64, f64)]) -> f64 {
    let n = samples.len() as f64;
    let mt = samples.iter().map(|s| s.0).sum::<f64>() / n;
    let md = samples.iter().map(|s| s.1).sum::<f64>() / n;
    let sxy: f64 = samples.iter().map(|s| (s.0 - mt) * (s.1 - md)).sum();
    let sxx: f64 = samples.iter().map(|s| (s.0 - mt).powi(2)).sum();
    sxy / sxx * 1000.0
}

/// Press-velocity estimate from the depth samples inside a displacement
/// window, resolved once the press leaves the window (downward or by
/// reversing) with enough samples collected.
#[derive(Debug, Clone)]
pub struct VelocityEstimator {
    window: (f64, f64),
    min_samples: usize,
    samples: Vec<(f64, f64)>,
    last: Option<f64>,
    estimate: Option<f64>,
}

impl VelocityEstimator {
    pub fn new(window: (f64, f64), min_samples: usize) -> Self {
        Self {
            window,
            min_samples,
            samples: Vec::new(),
            last: None,
            estimate: None,
        }
    }

    pub fn update(&mut self, t_ms: f64, d: f64) -> Option<f64> {
        if self.estimate.is_some() {
            return self.estimate;
        }
        let (lo, hi) = self.window;
        let reversed = self.last.is_some_and(|p| d < p) && !self.samples.is_empty();
        if d >= lo && d <= hi && !reversed {
            self.samples.push((t_ms, d));
        }
        if (d > hi || reversed) && self.samples.len() >= self.min_samples {
            self.estimate = Some(regression_slope(&self.samples));
        }
        self.last = Some(d);
        self.estimate
    }

    pub fn estimate(&self) -> Option<f64> {
        self.estimate
    }

    /// Samples collected so far.
    pub fn samples(&self) -> &[(f64, f64)] {
        &self.samples
    }

    pub fn reset(&mut self) {
        self.samples.clear();
        self.last = None;
        self.estimate = None;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Event {
    Activation,
    VibrationStart,
    BottomOut,
    Release,
    /// Preset-injected vibration (bottom tick or cue).
    VibrationCue,
}

/// One tick of the render loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TickRecord {
    pub t: f64,
    pub raw_disp: f64,
    pub filtered_disp: f64,
    pub est_velocity: Option<f64>,
    pub selected_curve_velocity: f64,
    pub u: f64,
    pub plant_force: f64,
    pub vibration_v: f64,
    pub events: Vec<Event>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderSummary {
    /// Mean over visited bins of |target − rendered| force (cN).
    pub mean_abs_error_cn: f64,
    pub visited_bins: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderTrace {
    pub records: Vec<TickRecord>,
    pub summary: Option<RenderSummary>,
}

impl RenderTrace {
    pub fn to_json_lines(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn events(&self) -> impl Iterator<Item = (f64, Event)> + '_ {
        self.records
            .iter()
            .flat_map(|r| r.events.iter().map(move |e| (r.t, *e)))
    }
}

#[derive(Debug, Clone, Default)]
struct PressFlags {
    engaged: bool,
    activated_at: Option<f64>,
    released_at: Option<f64>,
    vibration_fired: bool,
    bottomed: bool,
}

/// Render-loop state for one simulated button.
#[derive(Debug, Clone)]
pub struct Renderer<'a> {
    config: &'a SimConfig,
    curves: &'a [ActuationCurve],
    plant: PlantSim,
    ma: MovingAverage,
    estimator: VelocityEstimator,
    flags: PressFlags,
    tick: usize,
    prev_raw: f64,
    prev_filtered: f64,
    waveforms: Vec<(f64, WaveTemplate)>,
}

impl<'a> Renderer<'a> {
    pub fn new(
        config: &'a SimConfig,
        curves: &'a [ActuationCurve],
        plant: &VirtualPlant,
    ) -> Result<Self, RenderError> {
        config.validate()?;
        if curves.is_empty() {
            return Err(RenderError::NoCurves);
        }
        for c in curves {
            if (c.grid.travel_range() - config.travel_range_mm).abs() > 1e-9 {
                return Err(RenderError::TravelMismatch {
                    config: config.travel_range_mm,
                    what: "actuation",
                    found: c.grid.travel_range(),
                });
            }
        }
        Ok(Self {
            config,
            curves,
            plant: plant.start(),
            ma: MovingAverage::new(config.ma_window),
            estimator: VelocityEstimator::new(config.velocity_window_mm, config.min_velocity_samples),
            flags: PressFlags::default(),
            tick: 0,
            prev_raw: 0.0,
            prev_filtered: 0.0,
            waveforms: Vec::new(),
        })
    }

    pub fn estimator(&self) -> &VelocityEstimator {
        &self.estimator
    }

    /// Advances one tick with the finger at intended depth `depth_mm`.
    pub fn step(&mut self, depth_mm: f64) -> TickRecord {
        let cfg = self.config;
        let t = self.tick as f64 * cfg.tick_ms;
        let travel = cfg.travel_range_mm;
        let raw = depth_mm.clamp(0.0, travel);
        let filtered = self.ma.push(raw).min(travel);
        let est = self.estimator.update(t, raw);

        let curve = match est {
            Some(v) => select_actuation(self.curves, v),
            None => slowest(self.curves),
        };
        let releasing = filtered < self.prev_filtered;
        let mut u = if releasing {
            curve.release_u_at(filtered)
        } else {
            curve.u_at(filtered)
        };

        let mut events = Vec::new();
        let ap = cfg.activation_point_mm;
        if self.flags.activated_at.is_none() && self.prev_filtered < ap && filtered >= ap {
            self.flags.activated_at = Some(t);
            events.push(Event::Activation);
        }
        if let Some(onset) = cfg.vibration_onset_mm {
            if !self.flags.vibration_fired && filtered >= onset - cfg.vibration_pretrigger_mm {
                self.flags.vibration_fired = true;
                events.push(Event::VibrationStart);
                if let Some(w) = &cfg.vibration {
                    self.waveforms.push((t + cfg.vibration_latency_ms, w.clone()));
                }
            }
        }
        let bottom_now = !self.flags.bottomed && raw >= travel - 1e-9;
        if bottom_now {
            self.flags.bottomed = true;
            events.push(Event::BottomOut);
        }
        if self.flags.activated_at.is_some() && self.flags.released_at.is_none() && filtered < ap {
            self.flags.released_at = Some(t);
            events.push(Event::Release);
        }

        let ctx = HookContext {
            t_ms: t,
            filtered_disp: filtered,
            est_velocity: est,
            since_activation_ms: self.flags.activated_at.map(|a| t - a),
            since_release_ms: self.flags.released_at.map(|r| t - r),
            bottomed_out: self.flags.bottomed,
        };
        for preset in &cfg.presets {
            for hook in &preset.hooks {
                u = hook.adjust_u(u, &ctx);
                if let Some(w) = hook.cue(&ctx, self.prev_filtered, bottom_now) {
                    events.push(Event::VibrationCue);
                    self.waveforms.push((t + cfg.vibration_latency_ms, w));
                }
            }
        }
        u = u.max(0.0);

        let keycap_velocity = (raw - self.prev_raw) / cfg.tick_ms * 1000.0;
        let plant_force = self.plant.step(u, keycap_velocity, cfg.tick_ms);

        let vibration_v = self
            .waveforms
            .iter()
            .filter(|(start, w)| t >= *start && t - start <= w.duration_ms)
            .map(|(start, w)| w.value_at(t - start))
            .sum();
        self.waveforms.retain(|(start, w)| t - start <= w.duration_ms);

        if filtered >= cfg.rearm_mm {
            self.flags.engaged = true;
        } else if self.flags.engaged {
            self.flags = PressFlags::default();
            self.estimator.reset();
        }

        self.prev_raw = raw;
        self.prev_filtered = filtered;
        self.tick += 1;
        TickRecord {
            t,
            raw_disp: raw,
            filtered_disp: filtered,
            est_velocity: est,
            selected_curve_velocity: curve.velocity_mm_s,
            u,
            plant_force,
            vibration_v,
            events,
        }
    }
}

/// Index one past the first deepest filtered sample: the downstroke.
pub fn downstroke_len(records: &[TickRecord]) -> usize {
    let mut best = (0, f64::MIN);
    for (i, r) in records.iter().enumerate() {
        if r.filtered_disp > best.1 {
            best = (i, r.filtered_disp);
        }
    }
    (best.0 + 1).min(records.len())
}

/// Runs a whole trajectory. With a `target` model, the summary compares the
/// rendered downstroke force with the model at the rendered curve's velocity.
pub fn run_press(
    curves: &[ActuationCurve],
    target: Option<&FdvvModel>,
    trajectory: &PressTrajectory,
    config: &SimConfig,
    plant: &VirtualPlant,
) -> Result<RenderTrace, RenderError> {
    let mut r = Renderer::new(config, curves, plant)?;
    if let Some(m) = target {
        if (m.travel_range_mm - config.travel_range_mm).abs() > 1e-9 {
            return Err(RenderError::TravelMismatch {
                config: config.travel_range_mm,
                what: "model",
                found: m.travel_range_mm,
            });
        }
    }
    let records: Vec<TickRecord> = trajectory.depths().map(|d| r.step(d)).collect();
    let summary = target.and_then(|m| summarize(m, &records));
    Ok(RenderTrace { records, summary })
}

fn summarize(model: &FdvvModel, records: &[TickRecord]) -> Option<RenderSummary> {
    if records.is_empty() {
        return None;
    }
    let grid = model.grid();
    let mut cache: HashMap<u64, Vec<f64>> = HashMap::new();
    let mut targets = Vec::with_capacity(records.len());
    for r in records {
        let v = r.selected_curve_velocity;
        let curve = cache
            .entry(v.to_bits())
            .or_insert_with(|| model.target_forces(v));
        targets.push(curve[grid.bin_clamped(r.filtered_disp)]);
    }
    let down = &records[..downstroke_len(records)];
    let disp = || down.iter().map(|r| r.filtered_disp);
    let force = bin_means(&grid, disp(), down.iter().map(|r| r.plant_force));
    let target = bin_means(&grid, disp(), targets.iter().copied());
    let diffs: Vec<f64> = force
        .iter()
        .zip(&target)
        .filter_map(|(f, t)| Some((f.as_ref()? - t.as_ref()?).abs()))
        .collect();
    if diffs.is_empty() {
        return None;
    }
    Some(RenderSummary {
        mean_abs_error_cn: diffs.iter().sum::<f64>() / diffs.len() as f64,
        visited_bins: diffs.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::DisplacementGrid;

    fn flat_curves(travel: f64, vels: &[f64], u: f64) -> Vec<ActuationCurve> {
        let g = DisplacementGrid::new(travel);
        vels.iter()
            .map(|&v| ActuationCurve::new(v, g, vec![u; g.len()]))
            .collect()
    }

    #[test]
    fn moving_average_step_response() {
        let mut ma = MovingAverage::new(25);
        for _ in 0..30 {
            assert_eq!(ma.push(2.5), 2.5);
        }
        let mut ma = MovingAverage::new(25);
        for _ in 0..10 {
            ma.push(0.0);
        }
        let out: Vec<f64> = (0..30).map(|_| ma.push(1.0)).collect();
        assert!(out[23] < 1.0);
        assert_eq!(out[24], 1.0);
    }

    #[test]
    fn constant_velocity_estimate() {
        let traj = PressTrajectory::constant_velocity(4.0, 100.0, 5, 0, false);
        let mut e = VelocityEstimator::new((0.5, 1.0), 3);
        let mut last = None;
        for s in &traj.samples {
            last = e.update(s[0], s[1]);
        }
        assert!((last.unwrap() - 100.0).abs() <= 2.0);
        assert!(e.samples().iter().all(|s| (0.5..=1.0).contains(&s.1)));
    }

    #[test]
    fn shallow_press_stays_pending() {
        let mut e = VelocityEstimator::new((0.5, 1.0), 3);
        let traj = PressTrajectory::constant_velocity(0.4, 50.0, 2, 5, true);
        for s in &traj.samples {
            assert_eq!(e.update(s[0], s[1]), None);
        }
    }

    #[test]
    fn limiter_and_bottom_out() {
        let cfg = SimConfig::new(4.0, 2.0);
        let curves = flat_curves(4.0, &[100.0], 50.0);
        let traj = PressTrajectory::constant_velocity(7.0, 100.0, 0, 50, false);
        let tr = run_press(&curves, None, &traj, &cfg, &VirtualPlant::identity()).unwrap();
        assert!(tr.records.iter().all(|r| r.filtered_disp <= 4.0));
        assert_eq!(tr.records.last().unwrap().filtered_disp, 4.0);
        assert_eq!(tr.events().filter(|e| e.1 == Event::BottomOut).count(), 1);
    }

    #[test]
    fn vibration_pretrigger_and_latency() {
        let mut cfg = SimConfig::new(4.0, 1.0);
        cfg.vibration_onset_mm = Some(2.0);
        cfg.vibration = Some(WaveTemplate {
            id: "w".into(),
            frequency_hz: 239.0,
            duration_ms: 16.0,
            amplitude_start: 2.43,
            amplitude_end: 0.0,
            envelope: Default::default(),
        });
        let curves = flat_curves(4.0, &[50.0], 10.0);
        let traj = PressTrajectory::constant_velocity(4.0, 20.0, 0, 30, true);
        let tr = run_press(&curves, None, &traj, &cfg, &VirtualPlant::identity()).unwrap();
        let starts: Vec<&TickRecord> = tr
            .records
            .iter()
            .filter(|r| r.events.contains(&Event::VibrationStart))
            .collect();
        assert_eq!(starts.len(), 1);
        assert!((starts[0].filtered_disp - 1.7).abs() <= 0.05);
        let t0 = starts[0].t;
        let first_wave = tr.records.iter().find(|r| r.vibration_v != 0.0).unwrap();
        assert!(first_wave.t > t0 + 7.0 - 1e-9 && first_wave.t <= t0 + 8.0);
    }

    #[test]
    fn single_activation_and_release() {
        let cfg = SimConfig::new(4.0, 2.0);
        let curves = flat_curves(4.0, &[50.0, 150.0], 20.0);
        let traj = PressTrajectory::constant_velocity(4.0, 100.0, 10, 20, true);
        let tr = run_press(&curves, None, &traj, &cfg, &VirtualPlant::default()).unwrap();
        let ev: Vec<Event> = tr.events().map(|e| e.1).collect();
        assert_eq!(ev.iter().filter(|&&e| e == Event::Activation).count(), 1);
        assert_eq!(ev.iter().filter(|&&e| e == Event::Release).count(), 1);
        assert_eq!(tr.records.len(), traj.len());
        for (i, r) in tr.records.iter().enumerate() {
            assert_eq!(r.t, i as f64);
        }
    }

    #[test]
    fn empty_trajectory_gives_empty_trace() {
        let cfg = SimConfig::new(4.0, 2.0);
        let curves = flat_curves(4.0, &[50.0], 20.0);
        let traj = PressTrajectory::recorded([]);
        let tr = run_press(&curves, None, &traj, &cfg, &VirtualPlant::default()).unwrap();
        assert!(tr.records.is_empty());
        assert!(tr.to_json_lines().is_empty());
    }

    #[test]
    fn travel_mismatch_is_rejected() {
        let cfg = SimConfig::new(3.6, 2.0);
        let curves = flat_curves(4.0, &[50.0], 20.0);
        let traj = PressTrajectory::recorded([0.0, 0.1]);
        assert!(matches!(
            run_press(&curves, None, &traj, &cfg, &VirtualPlant::default()),
            Err(RenderError::TravelMismatch { .. })
        ));
    }

    #[test]
    fn presets_shape_the_signal() {
        let mut cfg = SimConfig::new(4.0, 2.0);
        cfg.presets = builtin_presets()
            .into_iter()
            .filter(|p| p.name == "vibration-cues")
            .collect();
        let curves = flat_curves(4.0, &[100.0], 20.0);
        let traj = PressTrajectory::constant_velocity(4.0, 100.0, 0, 30, false);
        let tr = run_press(&curves, None, &traj, &cfg, &VirtualPlant::identity()).unwrap();
        assert_eq!(tr.events().filter(|e| e.1 == Event::VibrationCue).count(), 2);
        assert!(tr.records.iter().any(|r| r.vibration_v != 0.0));
    }
}
