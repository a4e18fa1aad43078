//! Parametric stand-in for the force actuator: a monotone static map with
//! damping and saturation, followed by a first-order lag and sensor noise.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::model::FieldError;

/// Upper bound on actuation when the plant never saturates.
pub const U_CAP: f64 = 1000.0;
/// Actuation units at which the shaping curve is normalized (shape(100) = 100).
const SHAPE_SCALE: f64 = 100.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VirtualPlant {
    #[serde(default = "default_id")]
    pub plant_id: String,
    /// cN per actuation unit at the shaping scale.
    pub static_gain: f64,
    pub bias: f64,
    pub saturation: f64,
    /// Exponent of the monotone shaping curve; 1 is linear.
    pub nonlinearity: f64,
    pub lag_constant_ms: f64,
    /// cN per mm/s of keycap velocity.
    pub damping_coeff: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

fn default_id() -> String {
    "default".into()
}

impl Default for VirtualPlant {
    fn default() -> Self {
        Self {
            plant_id: default_id(),
            static_gain: 0.85,
            bias: 3.0,
            saturation: 440.0,
            nonlinearity: 1.15,
            lag_constant_ms: 0.8,
            damping_coeff: 0.01,
            noise_sigma: 0.3,
            seed: 7,
        }
    }
}

impl VirtualPlant {
    /// Unit gain, linear, instantaneous and noiseless.
    pub fn identity() -> Self {
        Self {
            plant_id: "identity".into(),
            static_gain: 1.0,
            bias: 0.0,
            saturation: 440.0,
            nonlinearity: 1.0,
            lag_constant_ms: 0.0,
            damping_coeff: 0.0,
            noise_sigma: 0.0,
            seed: 0,
        }
    }

    pub fn noiseless(&self) -> Self {
        Self {
            noise_sigma: 0.0,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<(), Vec<FieldError>> {
        let mut errs = Vec::new();
        let mut need = |ok: bool, field: &str, msg: &str| {
            if !ok {
                errs.push(FieldError::new(field, msg));
            }
        };
        need(
            self.static_gain.is_finite() && self.static_gain >= 0.0,
            "static_gain",
            "must be finite and non-negative",
        );
        need(self.bias.is_finite(), "bias", "must be finite");
        need(
            self.saturation.is_finite() && self.saturation > 0.0,
            "saturation",
            "must be positive",
        );
        need(
            self.nonlinearity.is_finite() && self.nonlinearity > 0.0,
            "nonlinearity",
            "must be positive",
        );
        need(
            self.lag_constant_ms.is_finite() && self.lag_constant_ms >= 0.0,
            "lag_constant_ms",
            "must be non-negative",
        );
        need(self.damping_coeff.is_finite(), "damping_coeff", "must be finite");
        need(
            self.noise_sigma.is_finite() && self.noise_sigma >= 0.0,
            "noise_sigma",
            "must be non-negative",
        );
        if errs.is_empty() {
            Ok(())
        } else {
            Err(errs)
        }
    }

    pub fn shape(&self, u: f64) -> f64 {
        SHAPE_SCALE * (u.max(0.0) / SHAPE_SCALE).powf(self.nonlinearity)
    }

    fn shape_inverse(&self, s: f64) -> f64 {
        SHAPE_SCALE * (s.max(0.0) / SHAPE_SCALE).powf(1.0 / self.nonlinearity)
    }

    /// Force the plant settles to under constant `u` and keycap velocity.
    pub fn static_force(&self, u: f64, velocity_mm_s: f64) -> f64 {
        (self.bias + self.static_gain * self.shape(u) + self.damping_coeff * velocity_mm_s)
            .clamp(0.0, self.saturation)
    }

    /// Largest useful actuation: the level that reaches saturation at rest.
    pub fn u_max(&self) -> f64 {
        if self.static_gain <= 0.0 {
            return U_CAP;
        }
        self.shape_inverse((self.saturation - self.bias) / self.static_gain)
            .min(U_CAP)
    }

    /// Per-tick retention of the lag state.
    pub fn lag_retention(&self, dt_ms: f64) -> f64 {
        if self.lag_constant_ms > 0.0 {
            (-dt_ms / self.lag_constant_ms).exp()
        } else {
            0.0
        }
    }

    /// Noise-free response after one tick of `dt_ms` from `prev_force`.
    pub fn respond(&self, u: f64, velocity_mm_s: f64, prev_force: f64, dt_ms: f64) -> f64 {
        let a = self.lag_retention(dt_ms);
        a * prev_force + (1.0 - a) * self.static_force(u, velocity_mm_s)
    }

    pub fn start(&self) -> PlantSim {
        PlantSim::new(self.clone())
    }
}

/// A running plant: lag state plus its own noise stream.
#[derive(Debug, Clone)]
pub struct PlantSim {
    plant: VirtualPlant,
    state: f64,
    rng: ChaCha8Rng,
    noise: Option<Normal<f64>>,
}

impl PlantSim {
    pub fn new(plant: VirtualPlant) -> Self {
        let noise = (plant.noise_sigma > 0.0).then(|| Normal::new(0.0, plant.noise_sigma).unwrap());
        let state = plant.static_force(0.0, 0.0);
        Self {
            rng: ChaCha8Rng::seed_from_u64(plant.seed),
            plant,
            state,
            noise,
        }
    }

    pub fn plant(&self) -> &VirtualPlant {
        &self.plant
    }

    /// Noise-free lag state (cN).
    pub fn state(&self) -> f64 {
        self.state
    }

    pub fn reset(&mut self) {
        self.state = self.plant.static_force(0.0, 0.0);
    }

    /// Advances one tick and returns the sensed force.
    pub fn step(&mut self, u: f64, velocity_mm_s: f64, dt_ms: f64) -> f64 {
        self.state = self.plant.respond(u, velocity_mm_s, self.state, dt_ms);
        let n = self.noise.map_or(0.0, |d| d.sample(&mut self.rng));
        (self.state + n).clamp(0.0, self.plant.saturation)
    }
}
