use serde::{Deserialize, Serialize};

use super::RenderError;
use crate::MAX_TRAVEL_MM;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Profile {
    ConstantVelocity,
    MinimumJerk,
    Recorded,
}

/// Intended keycap depth of the finger, one sample per 1 ms tick.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PressTrajectory {
    pub profile: Profile,
    /// `[t_ms, d_mm]` pairs.
    pub samples: Vec<[f64; 2]>,
}

impl PressTrajectory {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn depths(&self) -> impl Iterator<Item = f64> + '_ {
        self.samples.iter().map(|s| s[1])
    }

    fn from_depths(profile: Profile, depths: impl IntoIterator<Item = f64>) -> Self {
        Self {
            profile,
            samples: depths
                .into_iter()
                .enumerate()
                .map(|(i, d)| [i as f64, d])
                .collect(),
        }
    }

    /// A recorded depth series, resampled nowhere: one value per tick.
    pub fn recorded(depths: impl IntoIterator<Item = f64>) -> Self {
        Self::from_depths(Profile::Recorded, depths)
    }

    /// Rest, linear descent to `depth` at `velocity_mm_s`, dwell, and (when
    /// `with_return`) a linear ascent at the same speed followed by rest.
    pub fn constant_velocity(
        depth: f64,
        velocity_mm_s: f64,
        rest_ms: usize,
        dwell_ms: usize,
        with_return: bool,
    ) -> Self {
        assert!(velocity_mm_s > 0.0 && depth >= 0.0);
        let step = velocity_mm_s / 1000.0;
        let ramp = (depth / step - 1e-9).ceil().max(0.0) as usize;
        let mut d = vec![0.0; rest_ms];
        d.extend((1..=ramp).map(|i| (i as f64 * step).min(depth)));
        d.extend(std::iter::repeat_n(depth, dwell_ms));
        if with_return {
            d.extend((1..=ramp).map(|i| (depth - i as f64 * step).max(0.0)));
            d.extend(std::iter::repeat_n(0.0, rest_ms));
        }
        Self::from_depths(Profile::ConstantVelocity, d)
    }

    /// Minimum-jerk descent from 0 to `depth` whose peak speed is
    /// `peak_velocity_mm_s`, followed by `dwell_ms` at the bottom.
    pub fn minimum_jerk(depth: f64, peak_velocity_mm_s: f64, dwell_ms: usize) -> Self {
        assert!(peak_velocity_mm_s > 0.0 && depth > 0.0);
        let duration_ms = 1.875 * depth / peak_velocity_mm_s * 1000.0;
        let n = duration_ms.ceil() as usize;
        let mut d: Vec<f64> = (0..=n)
            .map(|i| depth * minimum_jerk_shape((i as f64 / duration_ms).min(1.0)))
            .collect();
        d.extend(std::iter::repeat_n(depth, dwell_ms));
        Self::from_depths(Profile::MinimumJerk, d)
    }

    pub fn validate(&self) -> Result<(), RenderError> {
        for (i, s) in self.samples.iter().enumerate() {
            let [t, d] = *s;
            if !(t.is_finite() && d.is_finite()) {
                return Err(RenderError::Trajectory(format!("sample {i} is not finite")));
            }
            if !(0.0..=MAX_TRAVEL_MM).contains(&d) {
                return Err(RenderError::Trajectory(format!(
                    "sample {i}: depth {d} mm outside [0, {MAX_TRAVEL_MM}]"
                )));
            }
            if i > 0 && (t - self.samples[i - 1][0] - 1.0).abs() > 1e-9 {
                return Err(RenderError::Trajectory(format!(
                    "sample {i}: ticks must advance by exactly 1 ms"
                )));
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, RenderError> {
        let t: Self =
            serde_json::from_str(text).map_err(|e| RenderError::Trajectory(e.to_string()))?;
        t.validate()?;
        Ok(t)
    }
}

/// `10s^3 - 15s^4 + 6s^5`.
pub fn minimum_jerk_shape(s: f64) -> f64 {
    s * s * s * (10.0 - 15.0 * s + 6.0 * s * s)
}
