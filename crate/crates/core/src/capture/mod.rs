//! Capture-trace ingestion: parsing raw dual-stream recordings, aligning the
//! motion stream with the microcontroller clock, smoothing, and reducing
//! individual presses to displacement-gridded profiles.

mod segment;
mod sync;

pub use segment::{average_presses, bin_means, segment_and_grid, PressSegment, SegmentOptions};
pub use sync::{filter_trace, interpolate_linear, synchronize, SyncedTrace, TraceSample};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CaptureError {
    #[error("malformed capture file: {0}")]
    Json(#[from] serde_json::Error),
    #[error("malformed record {stream}[{index}]: {reason}")]
    Record {
        stream: &'static str,
        index: usize,
        reason: String,
    },
    #[error("{stream} timestamps not strictly increasing at record {index} ({prev} ms then {t} ms)")]
    NonMonotonic {
        stream: &'static str,
        index: usize,
        prev: f64,
        t: f64,
    },
    #[error("invalid metadata: {0}")]
    Meta(String),
    #[error("sync error: {0}")]
    Sync(String),
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("no complete presses to average")]
    NoCompletePresses,
    #[error("cannot average presses recorded at different velocities ({0} and {1} mm/s)")]
    MixedVelocities(f64, f64),
    #[error("segments have different grids ({0} and {1} bins)")]
    GridMismatch(usize, usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptureMeta {
    pub button_id: String,
    pub nominal_velocity_mm_s: f64,
    pub travel_range_mm: f64,
}

/// One microcontroller sample: time (ms), fingertip force (cN), microphone ADC level.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McuSample {
    pub t_ms: f64,
    pub force_cn: f64,
    pub sound: f64,
}

/// One motion-tracker frame with both keycap markers (mm).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MocapSample {
    pub t_ms: f64,
    pub marker1: [f64; 3],
    pub marker2: [f64; 3],
}

impl MocapSample {
    /// Depth coordinate of the marker midpoint on the press axis (z).
    pub fn midpoint_depth(&self) -> f64 {
        0.5 * (self.marker1[2] + self.marker2[2])
    }
}

/// Clapperboard keyframe seen by both recorders.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyncPair {
    pub mcu_t_ms: f64,
    pub mocap_t_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaptureSession {
    pub meta: CaptureMeta,
    pub mcu: Vec<McuSample>,
    pub mocap: Vec<MocapSample>,
    pub sync: SyncPair,
}

#[derive(Serialize, Deserialize)]
struct CaptureFile<R1, R2> {
    meta: CaptureMeta,
    mcu: Vec<R1>,
    mocap: Vec<R2>,
    sync: SyncPair,
}

impl CaptureSession {
    /// Parses and validates a capture file.
    pub fn parse(bytes: &[u8]) -> Result<Self, CaptureError> {
        let raw: CaptureFile<Value, Value> = serde_json::from_slice(bytes)?;
        let mcu = raw
            .mcu
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let [t_ms, force_cn, sound] = numbers::<3>(v, "mcu", i)?;
                Ok(McuSample {
                    t_ms,
                    force_cn,
                    sound,
                })
            })
            .collect::<Result<Vec<_>, CaptureError>>()?;
        let mocap = raw
            .mocap
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let [t, x1, y1, z1, x2, y2, z2] = numbers::<7>(v, "mocap", i)?;
                Ok(MocapSample {
                    t_ms: t,
                    marker1: [x1, y1, z1],
                    marker2: [x2, y2, z2],
                })
            })
            .collect::<Result<Vec<_>, CaptureError>>()?;
        let session = Self {
            meta: raw.meta,
            mcu,
            mocap,
            sync: raw.sync,
        };
        session.validate()?;
        Ok(session)
    }

    pub fn validate(&self) -> Result<(), CaptureError> {
        let m = &self.meta;
        if !(m.nominal_velocity_mm_s.is_finite() && m.nominal_velocity_mm_s > 0.0) {
            return Err(CaptureError::Meta(format!(
                "nominal_velocity_mm_s must be positive, got {}",
                m.nominal_velocity_mm_s
            )));
        }
        if !(m.travel_range_mm.is_finite() && m.travel_range_mm > 0.0) {
            return Err(CaptureError::Meta(format!(
                "travel_range_mm must be positive, got {}",
                m.travel_range_mm
            )));
        }
        if !(self.sync.mcu_t_ms.is_finite() && self.sync.mocap_t_ms.is_finite()) {
            return Err(CaptureError::Meta("sync timestamps must be finite".into()));
        }
        check_monotonic("mcu", self.mcu.iter().map(|s| s.t_ms))?;
        check_monotonic("mocap", self.mocap.iter().map(|s| s.t_ms))?;
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let file = CaptureFile {
            meta: self.meta.clone(),
            mcu: self
                .mcu
                .iter()
                .map(|s| [s.t_ms, s.force_cn, s.sound])
                .collect(),
            mocap: self
                .mocap
                .iter()
                .map(|s| {
                    let (a, b) = (s.marker1, s.marker2);
                    [s.t_ms, a[0], a[1], a[2], b[0], b[1], b[2]]
                })
                .collect(),
            sync: self.sync,
        };
        serde_json::to_string(&file).expect("capture serialization cannot fail")
    }
}

fn numbers<const N: usize>(
    v: &Value,
    stream: &'static str,
    index: usize,
) -> Result<[f64; N], CaptureError> {
    let bad = |reason: String| CaptureError::Record {
        stream,
        index,
        reason,
    };
    let arr = v
        .as_array()
        .ok_or_else(|| bad(format!("expected an array, got {v}")))?;
    if arr.len() != N {
        return Err(bad(format!("expected {N} numbers, got {}", arr.len())));
    }
    let mut out = [0.0; N];
    for (slot, x) in out.iter_mut().zip(arr) {
        *slot = x
            .as_f64()
            .filter(|f| f.is_finite())
            .ok_or_else(|| bad(format!("non-numeric value {x}")))?;
    }
    Ok(out)
}

fn check_monotonic(
    stream: &'static str,
    times: impl Iterator<Item = f64>,
) -> Result<(), CaptureError> {
    let mut prev: Option<f64> = None;
    for (index, t) in times.enumerate() {
        if let Some(p) = prev {
            if t <= p {
                return Err(CaptureError::NonMonotonic {
                    stream,
                    index,
                    prev: p,
                    t,
                });
            }
        }
        prev = Some(t);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "meta": {"button_id": "b", "nominal_velocity_mm_s": 100, "travel_range_mm": 4},
        "mcu": [[0, 1.5, 512], [1, 1.6, 510]],
        "mocap": [[0, 0,0,10, 1,0,10], [3.90625, 0,0,9.9, 1,0,9.9]],
        "sync": {"mcu_t_ms": 0.5, "mocap_t_ms": 0.5}
    }"#;

    #[test]
    fn minimal_file_loads() {
        let s = CaptureSession::parse(MINIMAL.as_bytes()).unwrap();
        assert_eq!(s.mcu.len(), 2);
        assert_eq!(s.mocap.len(), 2);
        assert_eq!(s.mocap[1].midpoint_depth(), 9.9);
        assert_eq!(s.meta.button_id, "b");
    }

    #[test]
    fn repeated_timestamp_is_rejected() {
        let text = MINIMAL.replace("[[0, 1.5, 512], [1, 1.6, 510]]", "[[0,1,1],[1,1,1],[1,1,1]]");
        match CaptureSession::parse(text.as_bytes()) {
            Err(CaptureError::NonMonotonic { stream, index, .. }) => {
                assert_eq!(stream, "mcu");
                assert_eq!(index, 2);
            }
            other => panic!("expected monotonicity error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_record_is_named() {
        let text = MINIMAL.replace("[3.90625, 0,0,9.9, 1,0,9.9]", "[3.9, 0, 0]");
        let err = CaptureSession::parse(text.as_bytes()).unwrap_err();
        assert!(err.to_string().contains("mocap[1]"), "{err}");
        let text = MINIMAL.replace("[1, 1.6, 510]", "[1, \"x\", 510]");
        let err = CaptureSession::parse(text.as_bytes()).unwrap_err();
        assert!(err.to_string().contains("mcu[1]"), "{err}");
    }

    #[test]
    fn bad_metadata_is_rejected() {
        let text = MINIMAL.replace("\"nominal_velocity_mm_s\": 100", "\"nominal_velocity_mm_s\": -5");
        assert!(matches!(
            CaptureSession::parse(text.as_bytes()),
            Err(CaptureError::Meta(_))
        ));
    }
}
