use serde::{Deserialize, Serialize};

use super::{CaptureError, SyncedTrace};
use crate::grid::{fill_gaps, DisplacementGrid, BIN_MM};
use crate::smoothing::{gaussian_smooth, EdgeMode};

/// Displacement above which the keycap counts as pressed (mm).
pub const PRESS_THRESHOLD_MM: f64 = 0.02;
/// A press is complete when it reaches `travel_range - COMPLETE_MARGIN_MM`.
pub const COMPLETE_MARGIN_MM: f64 = 0.1;

#[derive(Debug, Clone, Copy, Default)]
pub struct SegmentOptions {
    /// Also grid the release (upstroke) half of each press.
    pub include_release: bool,
}

/// One press reduced to the 0.05 mm displacement grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PressSegment {
    pub velocity_nominal: f64,
    pub grid: DisplacementGrid,
    pub force_per_bin: Vec<f64>,
    /// Mean absolute deviation of the microphone from its resting level.
    pub sound_per_bin: Vec<f64>,
    pub complete: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub release_force_per_bin: Option<Vec<f64>>,
    /// Index range of the press in the source trace.
    #[serde(default)]
    pub span: (usize, usize),
}

impl PressSegment {
    pub fn len(&self) -> usize {
        self.force_per_bin.len()
    }

    pub fn is_empty(&self) -> bool {
        self.force_per_bin.is_empty()
    }

    /// A segment from explicit per-bin forces (silent sound channel).
    pub fn from_forces(velocity: f64, travel_range: f64, forces: Vec<f64>) -> Self {
        let grid = DisplacementGrid::new(travel_range);
        assert_eq!(grid.len(), forces.len(), "force vector does not match grid");
        Self {
            velocity_nominal: velocity,
            grid,
            sound_per_bin: vec![0.0; forces.len()],
            force_per_bin: forces,
            complete: true,
            release_force_per_bin: None,
            span: (0, 0),
        }
    }
}

/// Per-bin means of `values` keyed by displacement; `None` for empty bins.
pub fn bin_means(
    grid: &DisplacementGrid,
    displacements: impl IntoIterator<Item = f64>,
    values: impl IntoIterator<Item = f64>,
) -> Vec<Option<f64>> {
    let mut sum = vec![0.0; grid.len()];
    let mut count = vec![0usize; grid.len()];
    for (d, v) in displacements.into_iter().zip(values) {
        let b = grid.bin_clamped(d);
        sum[b] += v;
        count[b] += 1;
    }
    sum.into_iter()
        .zip(count)
        .map(|(s, c)| (c > 0).then(|| s / c as f64))
        .collect()
}

fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.sort_by(|a, b| a.total_cmp(b));
    let m = values.len() / 2;
    if values.len().is_multiple_of(2) {
        0.5 * (values[m - 1] + values[m])
    } else {
        values[m]
    }
}

/// Splits a filtered trace into presses and grids each downstroke.
///
/// A press is a maximal run of samples above [`PRESS_THRESHOLD_MM`]; its
/// downstroke runs up to the first sample of maximum depth.
pub fn segment_and_grid(
    trace: &SyncedTrace,
    travel_range: f64,
    velocity_nominal: f64,
    options: SegmentOptions,
) -> Vec<PressSegment> {
    let grid = DisplacementGrid::new(travel_range);
    let samples = &trace.samples;
    let baseline = median(&mut samples.iter().map(|s| s.sound).collect::<Vec<_>>());

    let mut runs = Vec::new();
    let mut start = None;
    for (i, s) in samples.iter().enumerate() {
        let pressed = s.displacement_mm > PRESS_THRESHOLD_MM;
        match (pressed, start) {
            (true, None) => start = Some(i),
            (false, Some(a)) => {
                runs.push((a, i));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(a) = start {
        runs.push((a, samples.len()));
    }

    runs.into_iter()
        .map(|(a, b)| {
            let press = &samples[a..b];
            let (peak_idx, peak) = press.iter().enumerate().fold((0, f64::MIN), |acc, (i, s)| {
                if s.displacement_mm > acc.1 {
                    (i, s.displacement_mm)
                } else {
                    acc
                }
            });
            let down = &press[..=peak_idx];
            let force = bin_means(
                &grid,
                down.iter().map(|s| s.displacement_mm),
                down.iter().map(|s| s.force_cn),
            );
            let sound = bin_means(
                &grid,
                down.iter().map(|s| s.displacement_mm),
                down.iter().map(|s| (s.sound - baseline).abs()),
            );
            let release_force_per_bin = options.include_release.then(|| {
                let up = &press[peak_idx..];
                fill_gaps(&bin_means(
                    &grid,
                    up.iter().map(|s| s.displacement_mm),
                    up.iter().map(|s| s.force_cn),
                ))
                .unwrap_or_else(|| vec![0.0; grid.len()])
            });
            PressSegment {
                velocity_nominal,
                grid,
                force_per_bin: fill_gaps(&force).unwrap_or_else(|| vec![0.0; grid.len()]),
                sound_per_bin: fill_gaps(&sound).unwrap_or_else(|| vec![0.0; grid.len()]),
                complete: peak >= travel_range - COMPLETE_MARGIN_MM,
                release_force_per_bin,
                span: (a, b),
            }
        })
        .collect()
}

/// Averages the complete presses bin by bin, then smooths over displacement.
pub fn average_presses(
    segments: &[PressSegment],
    sigma_smooth_mm: f64,
) -> Result<PressSegment, CaptureError> {
    if !(sigma_smooth_mm.is_finite() && sigma_smooth_mm >= 0.0) {
        return Err(CaptureError::Parameter(format!(
            "sigma_smooth must be non-negative, got {sigma_smooth_mm}"
        )));
    }
    if let Some(first) = segments.first() {
        for s in segments {
            if s.velocity_nominal != first.velocity_nominal {
                return Err(CaptureError::MixedVelocities(
                    first.velocity_nominal,
                    s.velocity_nominal,
                ));
            }
            if s.len() != first.len() {
                return Err(CaptureError::GridMismatch(first.len(), s.len()));
            }
        }
    }
    let complete: Vec<&PressSegment> = segments.iter().filter(|s| s.complete).collect();
    let first = *complete.first().ok_or(CaptureError::NoCompletePresses)?;
    let n = complete.len() as f64;
    let mean_of = |pick: &dyn Fn(&PressSegment) -> &[f64]| -> Vec<f64> {
        (0..first.len())
            .map(|i| complete.iter().map(|s| pick(s)[i]).sum::<f64>() / n)
            .collect()
    };
    let force = mean_of(&|s| &s.force_per_bin);
    let sound = mean_of(&|s| &s.sound_per_bin);
    let sigma_bins = sigma_smooth_mm / BIN_MM;
    let release = if complete.iter().all(|s| s.release_force_per_bin.is_some()) {
        let r = mean_of(&|s| s.release_force_per_bin.as_deref().unwrap());
        Some(gaussian_smooth(&r, sigma_bins, EdgeMode::PointReflect))
    } else {
        None
    };
    Ok(PressSegment {
        velocity_nominal: first.velocity_nominal,
        grid: first.grid,
        force_per_bin: gaussian_smooth(&force, sigma_bins, EdgeMode::PointReflect),
        sound_per_bin: sound,
        complete: true,
        release_force_per_bin: release,
        span: (0, 0),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::capture::TraceSample;

    fn trace_from(disp: &[f64]) -> SyncedTrace {
        SyncedTrace {
            samples: disp
                .iter()
                .enumerate()
                .map(|(i, &d)| TraceSample {
                    t_ms: i as f64,
                    force_cn: 10.0 * d,
                    sound: 512.0,
                    displacement_mm: d,
                })
                .collect(),
            origin_displacement: 0.0,
        }
    }

    fn triangle(peak: f64, step: f64) -> Vec<f64> {
        let n = (peak / step).round() as usize;
        let mut v: Vec<f64> = (0..=n).map(|i| i as f64 * step).collect();
        v.extend((0..n).rev().map(|i| i as f64 * step));
        v
    }

    #[test]
    fn shallow_press_is_incomplete() {
        let mut d = vec![0.0; 5];
        d.extend(triangle(2.0, 0.01));
        d.extend(vec![0.0; 5]);
        let segs = segment_and_grid(&trace_from(&d), 4.0, 100.0, SegmentOptions::default());
        assert_eq!(segs.len(), 1);
        assert!(!segs[0].complete);
    }

    #[test]
    fn full_press_fills_eighty_bins() {
        let mut d = vec![0.0; 5];
        d.extend(triangle(4.0, 0.01));
        d.extend(vec![0.0; 5]);
        let segs = segment_and_grid(&trace_from(&d), 4.0, 100.0, SegmentOptions::default());
        assert_eq!(segs.len(), 1);
        assert!(segs[0].complete);
        assert_eq!(segs[0].force_per_bin.len(), 80);
        // force = 10 * d, so each bin mean sits near 10 * bin centre
        for (i, f) in segs[0].force_per_bin.iter().enumerate() {
            assert!((f - 10.0 * (i as f64 + 0.5) * 0.05).abs() < 0.1, "bin {i}: {f}");
        }
    }

    #[test]
    fn two_presses_come_out_in_order() {
        let mut d = vec![0.0; 5];
        d.extend(triangle(4.0, 0.02));
        d.extend(vec![0.0; 10]);
        d.extend(triangle(3.0, 0.02));
        d.extend(vec![0.0; 5]);
        let segs = segment_and_grid(&trace_from(&d), 4.0, 100.0, SegmentOptions::default());
        assert_eq!(segs.len(), 2);
        assert!(segs[0].span.0 < segs[1].span.0);
        assert!(segs[0].complete);
        assert!(!segs[1].complete);
    }

    #[test]
    fn release_grid_is_optional() {
        let mut d = vec![0.0; 3];
        d.extend(triangle(4.0, 0.01));
        let tr = trace_from(&d);
        let plain = segment_and_grid(&tr, 4.0, 50.0, SegmentOptions::default());
        assert!(plain[0].release_force_per_bin.is_none());
        let both = segment_and_grid(
            &tr,
            4.0,
            50.0,
            SegmentOptions {
                include_release: true,
            },
        );
        assert_eq!(both[0].release_force_per_bin.as_ref().unwrap().len(), 80);
    }

    #[test]
    fn single_constant_segment_is_its_own_average() {
        let s = PressSegment::from_forces(100.0, 4.0, vec![33.0; 80]);
        let avg = average_presses(std::slice::from_ref(&s), 0.8).unwrap();
        for f in &avg.force_per_bin {
            assert!((f - 33.0).abs() < 1e-9);
        }
    }

    #[test]
    fn mirrored_segments_average_to_centre() {
        let f: Vec<f64> = (0..80).map(|i| (i as f64 * 0.37).sin() * 20.0 + 40.0).collect();
        let c = 40.0;
        let g: Vec<f64> = f.iter().map(|x| -x + 2.0 * c).collect();
        let avg = average_presses(
            &[
                PressSegment::from_forces(100.0, 4.0, f),
                PressSegment::from_forces(100.0, 4.0, g),
            ],
            0.8,
        )
        .unwrap();
        for v in &avg.force_per_bin {
            assert!((v - c).abs() < 1e-9);
        }
    }

    #[test]
    fn averaging_errors() {
        assert!(matches!(
            average_presses(&[], 0.8),
            Err(CaptureError::NoCompletePresses)
        ));
        let a = PressSegment::from_forces(100.0, 4.0, vec![1.0; 80]);
        let b = PressSegment::from_forces(150.0, 4.0, vec![1.0; 80]);
        assert!(matches!(
            average_presses(&[a.clone(), b], 0.8),
            Err(CaptureError::MixedVelocities(..))
        ));
        let mut c = a;
        c.complete = false;
        assert!(matches!(
            average_presses(&[c], 0.8),
            Err(CaptureError::NoCompletePresses)
        ));
    }
}
