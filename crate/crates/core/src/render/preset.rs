use serde::{Deserialize, Serialize};

use crate::vibration::{WaveTemplate, MAX_AMPLITUDE_V};

/// Render-loop state visible to preset hooks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HookContext {
    pub t_ms: f64,
    pub filtered_disp: f64,
    pub est_velocity: Option<f64>,
    pub since_activation_ms: Option<f64>,
    pub since_release_ms: Option<f64>,
    pub bottomed_out: bool,
}

/// One behaviour layered over the compensated actuation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Hook {
    /// Stiffens with press speed: `u *= 1 + gain * max(0, v - reference)`.
    VelocityStiffening {
        reference_mm_s: f64,
        gain_per_mm_s: f64,
    },
    /// Adds actuation bumps of width `width_mm` centred on each position.
    Detents {
        positions_mm: Vec<f64>,
        width_mm: f64,
        extra_u: f64,
    },
    /// Short vibration as the keycap hits the bottom.
    BottomTick {
        frequency_hz: f64,
        duration_ms: f64,
        amplitude_v: f64,
    },
    /// Vibration cue when the keycap passes a depth on the way down.
    VibrationCue {
        position_mm: f64,
        frequency_hz: f64,
        duration_ms: f64,
        amplitude_v: f64,
    },
    /// Pushes the keycap back after activation for `hold_ms`.
    AutoReturn { extra_u: f64, hold_ms: f64 },
    /// Scales actuation for `duration_ms` after release.
    Cooldown { duration_ms: f64, scale: f64 },
}

/// A named set of hooks, loaded from a JSON preset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Preset {
    pub name: String,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub description: String,
    pub hooks: Vec<Hook>,
}

fn tick_template(id: &str, frequency_hz: f64, duration_ms: f64, amplitude_v: f64) -> WaveTemplate {
    let a = amplitude_v.clamp(0.0, MAX_AMPLITUDE_V);
    WaveTemplate {
        id: id.into(),
        frequency_hz,
        duration_ms,
        amplitude_start: a,
        amplitude_end: 0.0,
        envelope: Default::default(),
    }
}

impl Hook {
    /// Rewrites the actuation for this tick.
    pub fn adjust_u(&self, u: f64, ctx: &HookContext) -> f64 {
        match *self {
            Hook::VelocityStiffening {
                reference_mm_s,
                gain_per_mm_s,
            } => {
                let v = ctx.est_velocity.unwrap_or(0.0);
                u * (1.0 + gain_per_mm_s * (v - reference_mm_s).max(0.0))
            }
            Hook::Detents {
                ref positions_mm,
                width_mm,
                extra_u,
            } => {
                let hit = positions_mm
                    .iter()
                    .any(|p| (ctx.filtered_disp - p).abs() <= 0.5 * width_mm);
                if hit {
                    u + extra_u
                } else {
                    u
                }
            }
            Hook::AutoReturn { extra_u, hold_ms } => match ctx.since_activation_ms {
                Some(s) if s <= hold_ms && ctx.since_release_ms.is_none() => u + extra_u,
                _ => u,
            },
            Hook::Cooldown { duration_ms, scale } => match ctx.since_release_ms {
                Some(s) if s <= duration_ms => u * scale,
                _ => u,
            },
            Hook::BottomTick { .. } | Hook::VibrationCue { .. } => u,
        }
    }

    /// Vibration to start this tick, given the previous filtered depth.
    pub fn cue(&self, ctx: &HookContext, prev_filtered: f64, bottom_out_now: bool) -> Option<WaveTemplate> {
        match *self {
            Hook::BottomTick {
                frequency_hz,
                duration_ms,
                amplitude_v,
            } if bottom_out_now => Some(tick_template("bottom-tick", frequency_hz, duration_ms, amplitude_v)),
            Hook::VibrationCue {
                position_mm,
                frequency_hz,
                duration_ms,
                amplitude_v,
            } if prev_filtered < position_mm && ctx.filtered_disp >= position_mm => Some(tick_template(
                "vibration-cue",
                frequency_hz,
                duration_ms,
                amplitude_v,
            )),
            _ => None,
        }
    }
}

/// Presets shipped with the library.
pub fn builtin_presets() -> Vec<Preset> {
    [
        include_str!("../../presets/fast-tapping.json"),
        include_str!("../../presets/non-newtonian.json"),
        include_str!("../../presets/multi-level.json"),
        include_str!("../../presets/vibration-cues.json"),
        include_str!("../../presets/dynamic-return.json"),
    ]
    .iter()
    .map(|s| serde_json::from_str(s).expect("bundled preset parses"))
    .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ctx(d: f64) -> HookContext {
        HookContext {
            t_ms: 0.0,
            filtered_disp: d,
            est_velocity: Some(200.0),
            since_activation_ms: None,
            since_release_ms: None,
            bottomed_out: false,
        }
    }

    #[test]
    fn bundled_presets_load() {
        let p = builtin_presets();
        assert_eq!(p.len(), 5);
        assert!(p.iter().all(|x| !x.hooks.is_empty()));
    }

    #[test]
    fn stiffening_and_detents() {
        let s = Hook::VelocityStiffening {
            reference_mm_s: 100.0,
            gain_per_mm_s: 0.01,
        };
        assert_eq!(s.adjust_u(50.0, &ctx(1.0)), 100.0);
        let d = Hook::Detents {
            positions_mm: vec![1.0, 2.0],
            width_mm: 0.2,
            extra_u: 30.0,
        };
        assert_eq!(d.adjust_u(10.0, &ctx(2.05)), 40.0);
        assert_eq!(d.adjust_u(10.0, &ctx(1.5)), 10.0);
    }

    #[test]
    fn cue_fires_on_crossing_only() {
        let h = Hook::VibrationCue {
            position_mm: 1.0,
            frequency_hz: 150.0,
            duration_ms: 10.0,
            amplitude_v: 1.0,
        };
        assert!(h.cue(&ctx(1.02), 0.98, false).is_some());
        assert!(h.cue(&ctx(1.04), 1.02, false).is_none());
    }
}
