use serde::{Deserialize, Serialize};

use super::{CaptureError, CaptureSession};
use crate::smoothing::{gaussian_smooth, EdgeMode};

/// Microcontroller tick length in the synchronized trace.
pub const TICK_MS: f64 = 1.0;

/// Speeds below this (mm/ms) are treated as the finger resting when
/// estimating the press speed for filter-width conversion.
const MOVING_SPEED_MM_PER_MS: f64 = 0.01;
const MIN_KERNEL_SAMPLES: f64 = 1.0;
const MAX_KERNEL_SAMPLES: f64 = 200.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceSample {
    pub t_ms: f64,
    pub force_cn: f64,
    pub sound: f64,
    pub displacement_mm: f64,
}

/// Force, sound and displacement on a shared uniform 1 ms timeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyncedTrace {
    pub samples: Vec<TraceSample>,
    /// Marker-midpoint depth at rest (mm); displacement is measured from here.
    pub origin_displacement: f64,
}

impl SyncedTrace {
    pub fn displacements(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.displacement_mm).collect()
    }

    /// Mean speed (mm/ms) over the ticks where the keycap is moving.
    pub fn mean_press_speed(&self) -> Option<f64> {
        let speeds: Vec<f64> = self
            .samples
            .windows(2)
            .filter(|w| w[1].displacement_mm.max(w[0].displacement_mm) > 0.05)
            .map(|w| (w[1].displacement_mm - w[0].displacement_mm).abs() / (w[1].t_ms - w[0].t_ms))
            .filter(|&s| s >= MOVING_SPEED_MM_PER_MS)
            .collect();
        if speeds.is_empty() {
            None
        } else {
            Some(speeds.iter().sum::<f64>() / speeds.len() as f64)
        }
    }
}

/// Linear interpolation of `(times, values)` at `query`; clamps outside the span.
pub fn interpolate_linear(times: &[f64], values: &[f64], query: f64) -> f64 {
    assert_eq!(times.len(), values.len());
    assert!(!times.is_empty());
    let hi = times.partition_point(|&t| t <= query);
    if hi == 0 {
        return values[0];
    }
    if hi == times.len() {
        return values[times.len() - 1];
    }
    let lo = hi - 1;
    let w = (query - times[lo]) / (times[hi] - times[lo]);
    values[lo] + w * (values[hi] - values[lo])
}

/// Aligns the motion stream to the microcontroller clock and resamples both
/// onto a uniform 1 ms timeline covering their overlap.
///
/// Displacement is the rest depth (first motion frame) minus the current
/// marker-midpoint depth, floored at zero.
pub fn synchronize(session: &CaptureSession) -> Result<SyncedTrace, CaptureError> {
    let (mcu, mocap, sync) = (&session.mcu, &session.mocap, session.sync);
    if mcu.len() < 2 || mocap.len() < 2 {
        return Err(CaptureError::Sync(
            "both streams need at least two samples".into(),
        ));
    }
    let inside = |t: f64, a: f64, b: f64| t >= a && t <= b;
    let (m0, m1) = (mcu[0].t_ms, mcu[mcu.len() - 1].t_ms);
    let (c0, c1) = (mocap[0].t_ms, mocap[mocap.len() - 1].t_ms);
    if !inside(sync.mcu_t_ms, m0, m1) {
        return Err(CaptureError::Sync(format!(
            "mcu keyframe {} ms outside stream span [{m0}, {m1}]",
            sync.mcu_t_ms
        )));
    }
    if !inside(sync.mocap_t_ms, c0, c1) {
        return Err(CaptureError::Sync(format!(
            "mocap keyframe {} ms outside stream span [{c0}, {c1}]",
            sync.mocap_t_ms
        )));
    }

    let offset = sync.mcu_t_ms - sync.mocap_t_ms;
    let mocap_t: Vec<f64> = mocap.iter().map(|s| s.t_ms + offset).collect();
    let rest = mocap[0].midpoint_depth();
    let disp: Vec<f64> = mocap.iter().map(|s| rest - s.midpoint_depth()).collect();

    let start = m0.max(mocap_t[0]);
    let end = m1.min(mocap_t[mocap_t.len() - 1]);
    if start > end {
        return Err(CaptureError::Sync(format!(
            "streams do not overlap after alignment (offset {offset} ms)"
        )));
    }
    // Keep the microcontroller's tick phase.
    let first = m0 + ((start - m0) / TICK_MS).ceil() * TICK_MS;
    let count = ((end - first) / TICK_MS + 1e-9).floor() as usize + 1;

    let mcu_t: Vec<f64> = mcu.iter().map(|s| s.t_ms).collect();
    let force: Vec<f64> = mcu.iter().map(|s| s.force_cn).collect();
    let sound: Vec<f64> = mcu.iter().map(|s| s.sound).collect();
    let samples = (0..count)
        .map(|i| {
            let t = first + i as f64 * TICK_MS;
            TraceSample {
                t_ms: t,
                force_cn: interpolate_linear(&mcu_t, &force, t),
                sound: interpolate_linear(&mcu_t, &sound, t),
                displacement_mm: interpolate_linear(&mocap_t, &disp, t).max(0.0),
            }
        })
        .collect();
    Ok(SyncedTrace {
        samples,
        origin_displacement: rest,
    })
}

/// Converts a displacement-domain width to samples using the press speed.
pub fn kernel_sigma_samples(sigma_mm: f64, speed_mm_per_ms: Option<f64>) -> f64 {
    match speed_mm_per_ms {
        Some(v) if v > 0.0 => (sigma_mm / v).clamp(MIN_KERNEL_SAMPLES, MAX_KERNEL_SAMPLES),
        _ => MAX_KERNEL_SAMPLES,
    }
}

/// Gaussian smoothing of force and displacement with widths given in mm.
///
/// Each width is converted to a per-sample kernel through the trace's mean
/// press speed. Sound is left untouched.
pub fn filter_trace(
    trace: &SyncedTrace,
    sigma_force_mm: f64,
    sigma_disp_mm: f64,
) -> Result<SyncedTrace, CaptureError> {
    for (name, s) in [("sigma_force", sigma_force_mm), ("sigma_disp", sigma_disp_mm)] {
        if !(s.is_finite() && s > 0.0) {
            return Err(CaptureError::Parameter(format!(
                "{name} must be positive, got {s}"
            )));
        }
    }
    let speed = trace.mean_press_speed();
    let force: Vec<f64> = trace.samples.iter().map(|s| s.force_cn).collect();
    let disp = trace.displacements();
    let force = gaussian_smooth(
        &force,
        kernel_sigma_samples(sigma_force_mm, speed),
        EdgeMode::PointReflect,
    );
    let disp = gaussian_smooth(
        &disp,
        kernel_sigma_samples(sigma_disp_mm, speed),
        EdgeMode::PointReflect,
    );
    let samples = trace
        .samples
        .iter()
        .zip(force.into_iter().zip(disp))
        .map(|(s, (f, d))| TraceSample {
            force_cn: f,
            displacement_mm: d.max(0.0),
            ..*s
        })
        .collect();
    Ok(SyncedTrace {
        samples,
        origin_displacement: trace.origin_displacement,
    })
}
