use fdvv_core::render::PressTrajectory;
use fdvv_core::MAX_TRAVEL_MM;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum PressProfile {
    #[default]
    ConstantVelocity,
    MinimumJerk,
}

/// A synthetic press described by speed and depth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PressParams {
    pub velocity_mm_s: f64,
    /// Defaults to the travel range.
    #[serde(default)]
    pub depth_mm: Option<f64>,
    #[serde(default)]
    pub profile: PressProfile,
    #[serde(default = "default_rest")]
    pub rest_ms: usize,
    #[serde(default = "default_rest")]
    pub dwell_ms: usize,
    #[serde(default)]
    pub with_return: bool,
}

fn default_rest() -> usize {
    30
}

impl PressParams {
    pub fn new(velocity_mm_s: f64) -> Self {
        Self {
            velocity_mm_s,
            depth_mm: None,
            profile: PressProfile::ConstantVelocity,
            rest_ms: default_rest(),
            dwell_ms: default_rest(),
            with_return: false,
        }
    }

    /// For the minimum-jerk profile the velocity is the peak speed.
    pub fn trajectory(&self, travel_range_mm: f64) -> Result<PressTrajectory, String> {
        let v = self.velocity_mm_s;
        if !(v.is_finite() && v > 0.0 && v <= 2000.0) {
            return Err(format!("velocity must be in (0, 2000] mm/s, got {v}"));
        }
        let depth = self.depth_mm.unwrap_or(travel_range_mm);
        if !(0.0..=MAX_TRAVEL_MM).contains(&depth) {
            return Err(format!("depth must be in [0, {MAX_TRAVEL_MM}] mm, got {depth}"));
        }
        Ok(match self.profile {
            PressProfile::ConstantVelocity => {
                PressTrajectory::constant_velocity(depth, v, self.rest_ms, self.dwell_ms, self.with_return)
            }
            PressProfile::MinimumJerk => PressTrajectory::minimum_jerk(depth, v, self.dwell_ms),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_to_full_travel() {
        let t = PressParams::new(100.0).trajectory(4.0).unwrap();
        assert_eq!(t.depths().fold(0.0, f64::max), 4.0);
        assert_eq!(t.len(), 30 + 40 + 30);
    }

    #[test]
    fn rejects_nonsense() {
        assert!(PressParams::new(0.0).trajectory(4.0).is_err());
        let mut p = PressParams::new(100.0);
        p.depth_mm = Some(9.0);
        assert!(p.trajectory(4.0).is_err());
    }
}
