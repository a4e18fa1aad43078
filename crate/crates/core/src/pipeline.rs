//! Capture sessions to press profiles and vibration annotations, and press
//! profiles to a fitted model.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::capture::{
    average_presses, filter_trace, segment_and_grid, synchronize, CaptureError, CaptureSession,
    PressSegment, SegmentOptions, SyncedTrace,
};
use crate::model::{build_model, BuildOptions, BuiltModel, FieldError, ModelAnnotations, ModelError};
use crate::vibration::{
    detect_onset, extract_features, generate_templates, robust_baseline, BurstFeatures,
    VibrationDescriptor, DEFAULT_ONSET_THRESHOLD,
};

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("no capture sessions given")]
    NoSessions,
    #[error("sessions disagree on {what}: {a} vs {b}")]
    Inconsistent { what: &'static str, a: String, b: String },
    #[error("session at {velocity} mm/s: {source}")]
    Session { velocity: f64, source: CaptureError },
    #[error("invalid presses file: {}", .0.iter().map(|e| format!("{}: {}", e.field, e.message)).collect::<Vec<_>>().join("; "))]
    Invalid(Vec<FieldError>),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestOptions {
    pub sigma_force_mm: f64,
    pub sigma_disp_mm: f64,
    pub sigma_smooth_mm: f64,
    pub include_release: bool,
    pub onset_threshold: f64,
}

impl Default for IngestOptions {
    fn default() -> Self {
        Self {
            sigma_force_mm: 1.2,
            sigma_disp_mm: 1.2,
            sigma_smooth_mm: 0.8,
            include_release: false,
            onset_threshold: DEFAULT_ONSET_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VelocityCount {
    pub velocity_mm_s: f64,
    pub presses: usize,
    pub complete: usize,
}

/// Output of ingestion: one averaged press profile per velocity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PressesFile {
    pub button_id: String,
    pub travel_range_mm: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub activation_point_mm: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vibration: Option<VibrationDescriptor>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<BurstFeatures>,
    pub counts: Vec<VelocityCount>,
    pub presses: Vec<PressSegment>,
}

impl PressesFile {
    pub fn validate(&self) -> Result<(), IngestError> {
        let mut errs = Vec::new();
        if self.presses.is_empty() {
            errs.push(FieldError::new("presses", "at least one velocity is required"));
        }
        for (i, p) in self.presses.iter().enumerate() {
            if (p.grid.travel_range() - self.travel_range_mm).abs() > 1e-9 {
                errs.push(FieldError::new(
                    format!("presses[{i}].grid"),
                    format!("travel {} mm differs from {} mm", p.grid.travel_range(), self.travel_range_mm),
                ));
            }
            if p.force_per_bin.len() != p.grid.len() {
                errs.push(FieldError::new(
                    format!("presses[{i}].force_per_bin"),
                    format!("{} values for {} bins", p.force_per_bin.len(), p.grid.len()),
                ));
            }
        }
        if let Some(ap) = self.activation_point_mm {
            if !(ap > 0.0 && ap < self.travel_range_mm) {
                errs.push(FieldError::new("activation_point_mm", "must lie strictly inside the travel range"));
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(IngestError::Invalid(errs))
        }
    }
}

struct Processed {
    velocity: f64,
    raw: SyncedTrace,
    filtered: SyncedTrace,
    segments: Vec<PressSegment>,
}

/// Length of the sound window examined after the onset (ms).
const FEATURE_WINDOW_MS: usize = 60;

/// Synchronizes, filters and segments each session, averages the complete
/// presses per velocity, and measures the snap vibration when present.
pub fn ingest(sessions: &[CaptureSession], opts: &IngestOptions) -> Result<PressesFile, IngestError> {
    let first = sessions.first().ok_or(IngestError::NoSessions)?;
    for s in sessions {
        if s.meta.button_id != first.meta.button_id {
            return Err(IngestError::Inconsistent {
                what: "button_id",
                a: first.meta.button_id.clone(),
                b: s.meta.button_id.clone(),
            });
        }
        if (s.meta.travel_range_mm - first.meta.travel_range_mm).abs() > 1e-9 {
            return Err(IngestError::Inconsistent {
                what: "travel_range_mm",
                a: first.meta.travel_range_mm.to_string(),
                b: s.meta.travel_range_mm.to_string(),
            });
        }
    }
    let travel = first.meta.travel_range_mm;
    let mut processed = Vec::new();
    for s in sessions {
        let velocity = s.meta.nominal_velocity_mm_s;
        let wrap = |source| IngestError::Session { velocity, source };
        let raw = synchronize(s).map_err(wrap)?;
        let filtered = filter_trace(&raw, opts.sigma_force_mm, opts.sigma_disp_mm).map_err(wrap)?;
        let segments = segment_and_grid(
            &filtered,
            travel,
            velocity,
            SegmentOptions {
                include_release: opts.include_release,
            },
        );
        processed.push(Processed {
            velocity,
            raw,
            filtered,
            segments,
        });
    }
    processed.sort_by(|a, b| a.velocity.total_cmp(&b.velocity));

    let mut presses = Vec::new();
    let mut counts = Vec::new();
    for p in &processed {
        let avg = average_presses(&p.segments, opts.sigma_smooth_mm).map_err(|source| IngestError::Session {
            velocity: p.velocity,
            source,
        })?;
        counts.push(VelocityCount {
            velocity_mm_s: p.velocity,
            presses: p.segments.len(),
            complete: p.segments.iter().filter(|s| s.complete).count(),
        });
        presses.push(avg);
    }
    if let Some(w) = presses.windows(2).find(|w| w[0].velocity_nominal == w[1].velocity_nominal) {
        return Err(IngestError::Inconsistent {
            what: "nominal_velocity_mm_s (duplicate)",
            a: w[0].velocity_nominal.to_string(),
            b: w[1].velocity_nominal.to_string(),
        });
    }

    let (vibration, features) = measure_vibration(&processed, &presses, opts);
    let file = PressesFile {
        button_id: first.meta.button_id.clone(),
        travel_range_mm: travel,
        activation_point_mm: None,
        vibration,
        features,
        counts,
        presses,
    };
    file.validate()?;
    Ok(file)
}

/// Onset from the gridded sound of each velocity (median across velocities),
/// features from the slowest session's first complete press.
fn measure_vibration(
    processed: &[Processed],
    averages: &[PressSegment],
    opts: &IngestOptions,
) -> (Option<VibrationDescriptor>, Option<BurstFeatures>) {
    let mut onsets: Vec<f64> = averages
        .iter()
        .filter_map(|a| detect_onset(&a.grid, &a.sound_per_bin, opts.onset_threshold))
        .collect();
    if onsets.is_empty() {
        return (None, None);
    }
    onsets.sort_by(|a, b| a.total_cmp(b));
    let onset = onsets[onsets.len() / 2];

    let features = processed.iter().find_map(|p| {
        let seg = p.segments.iter().find(|s| s.complete)?;
        let (a, b) = seg.span;
        let hit = (a..b).find(|&i| p.filtered.samples[i].displacement_mm >= onset)?;
        let sound: Vec<f64> = p.raw.samples.iter().map(|s| s.sound).collect();
        let (level, _) = robust_baseline(&sound);
        let lo = hit.saturating_sub(FEATURE_WINDOW_MS / 4);
        let hi = (hit + FEATURE_WINDOW_MS).min(sound.len());
        let window: Vec<f64> = sound[lo..hi].iter().map(|x| x - level).collect();
        extract_features(&window, 1000.0).ok()
    });
    let descriptor = features.map(|f| {
        let bank = generate_templates(f);
        VibrationDescriptor {
            onset_mm: onset,
            duration_ms: f.duration_ms,
            frequency_hz: bank[0].frequency_hz,
            template_id: bank[0].id.clone(),
        }
    });
    (descriptor, features)
}

/// Fits a model from a presses file. The activation point comes from the
/// file or, failing that, `activation_point_mm`.
pub fn fit_presses(
    file: &PressesFile,
    activation_point_mm: Option<f64>,
    options: BuildOptions,
) -> Result<BuiltModel, IngestError> {
    file.validate()?;
    let activation = activation_point_mm
        .or(file.activation_point_mm)
        .unwrap_or(0.5 * file.travel_range_mm);
    Ok(build_model(
        &file.presses,
        ModelAnnotations {
            button_id: file.button_id.clone(),
            activation_point_mm: activation,
            vibration: file.vibration.clone(),
        },
        options,
    )?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{clear_like, synth_capture, CaptureRecipe};

    #[test]
    fn clear_like_session_ingests() {
        let mut r = CaptureRecipe::new(clear_like(), 100.0, 5);
        r.presses = 5;
        r.shallow_presses = vec![2];
        let s = synth_capture(&r);
        let f = ingest(&[s], &IngestOptions::default()).unwrap();
        assert_eq!(f.presses.len(), 1);
        assert_eq!(f.counts[0].presses, 5);
        assert_eq!(f.counts[0].complete, 4);
        assert_eq!(f.presses[0].force_per_bin.len(), 80);
        let v = f.vibration.expect("click found");
        assert!((v.onset_mm - 2.4).abs() < 0.3, "{v:?}");
        assert!((v.frequency_hz - 239.0).abs() < 15.0, "{v:?}");
    }

    #[test]
    fn mismatched_sessions_are_rejected() {
        let mut r = CaptureRecipe::new(clear_like(), 100.0, 5);
        r.presses = 2;
        let a = synth_capture(&r);
        let mut b = a.clone();
        b.meta.travel_range_mm = 3.6;
        assert!(matches!(
            ingest(&[a, b], &IngestOptions::default()),
            Err(IngestError::Inconsistent { .. })
        ));
    }
}
