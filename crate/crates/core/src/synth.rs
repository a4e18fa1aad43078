//! Synthetic buttons and recordings: commodity-style force–displacement
//! shapes, known-spline test data, and dual-stream capture files produced by
//! pressing a shape at a constant speed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::bspline::{BSplineCurve, DEFAULT_DEGREE};
use crate::capture::{CaptureMeta, CaptureSession, McuSample, MocapSample, PressSegment, SyncPair};
use crate::grid::DisplacementGrid;
use crate::model::{fit_forces, DEFAULT_PENALTY};
use crate::smoothing::{gaussian_smooth, EdgeMode};

/// Force–displacement shape: a preloaded spring, an optional tactile bump and
/// an exponential bottom-out wall, stiffened linearly with press speed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ButtonShape {
    pub name: String,
    pub travel_range_mm: f64,
    pub activation_point_mm: f64,
    pub preload_cn: f64,
    pub spring_cn_per_mm: f64,
    pub bump_cn: f64,
    pub bump_at_mm: f64,
    pub bump_width_mm: f64,
    pub wall_cn: f64,
    pub wall_scale_mm: f64,
    /// cN added per mm/s of press speed.
    pub damping_cn_per_mm_s: f64,
    /// Depth of the snap click, if the button clicks.
    pub click_at_mm: Option<f64>,
}

impl ButtonShape {
    pub fn force(&self, d: f64) -> f64 {
        let bump = if self.bump_cn != 0.0 {
            self.bump_cn * (-(d - self.bump_at_mm).powi(2) / (2.0 * self.bump_width_mm.powi(2))).exp()
        } else {
            0.0
        };
        self.preload_cn
            + self.spring_cn_per_mm * d
            + bump
            + self.wall_cn * ((d - self.travel_range_mm) / self.wall_scale_mm).exp()
    }

    /// Resisting force at depth `d` while pressed at `velocity_mm_s`.
    pub fn force_at(&self, d: f64, velocity_mm_s: f64) -> f64 {
        self.force(d) + self.damping_cn_per_mm_s * velocity_mm_s
    }

    /// Copy with every shape parameter scaled by an independent factor in
    /// `[1 - spread, 1 + spread]`.
    pub fn jittered(&self, rng: &mut impl Rng, spread: f64) -> Self {
        let mut j = |x: f64| x * (1.0 + spread * (2.0 * rng.random::<f64>() - 1.0));
        Self {
            preload_cn: j(self.preload_cn),
            spring_cn_per_mm: j(self.spring_cn_per_mm),
            bump_cn: j(self.bump_cn),
            bump_at_mm: j(self.bump_at_mm),
            bump_width_mm: j(self.bump_width_mm),
            wall_cn: j(self.wall_cn),
            wall_scale_mm: j(self.wall_scale_mm),
            ..self.clone()
        }
    }

    pub fn grid(&self) -> DisplacementGrid {
        DisplacementGrid::new(self.travel_range_mm)
    }

    /// Forces at the bin centres at `velocity_mm_s`.
    pub fn sample(&self, velocity_mm_s: f64) -> Vec<f64> {
        self.grid()
            .centers()
            .into_iter()
            .map(|d| self.force_at(d, velocity_mm_s))
            .collect()
    }
}

#[allow(clippy::too_many_arguments)]
fn shape(
    name: &str,
    travel: f64,
    activation: f64,
    preload: f64,
    spring: f64,
    bump: (f64, f64, f64),
    wall: (f64, f64),
    click: Option<f64>,
) -> ButtonShape {
    ButtonShape {
        name: name.into(),
        travel_range_mm: travel,
        activation_point_mm: activation,
        preload_cn: preload,
        spring_cn_per_mm: spring,
        bump_cn: bump.0,
        bump_at_mm: bump.1,
        bump_width_mm: bump.2,
        wall_cn: wall.0,
        wall_scale_mm: wall.1,
        damping_cn_per_mm_s: 0.04,
        click_at_mm: click,
    }
}

/// Tactile with a pronounced bump and an audible snap.
pub fn clear_like() -> ButtonShape {
    shape("mx-clear-like", 4.0, 2.0, 30.0, 8.0, (28.0, 1.2, 0.5), (60.0, 0.25), Some(2.4))
}

/// Six commodity-style buttons: four 4 mm mechanical switches (two tactile,
/// two linear), a 3.6 mm laptop membrane key and a 2.2 mm low-travel key.
pub fn six_button_styles() -> Vec<ButtonShape> {
    vec![
        clear_like(),
        shape("mx-brown-like", 4.0, 2.0, 28.0, 6.0, (18.0, 1.1, 0.35), (50.0, 0.25), Some(2.3)),
        shape("mx-black-like", 4.0, 2.0, 40.0, 10.0, (0.0, 2.0, 0.5), (70.0, 0.25), None),
        shape("mx-red-like", 4.0, 2.0, 30.0, 7.0, (0.0, 2.0, 0.5), (50.0, 0.25), None),
        shape("laptop-membrane-like", 3.6, 1.8, 25.0, 5.0, (35.0, 1.4, 0.4), (60.0, 0.2), Some(1.9)),
        shape("low-travel-like", 2.2, 1.1, 30.0, 6.0, (30.0, 0.7, 0.2), (70.0, 0.12), Some(1.0)),
    ]
}

/// Observation noise on averaged per-bin forces (cN).
pub const SUITE_NOISE_CN: f64 = 0.1;
/// Control points of the suite's ground-truth splines.
pub const SUITE_TRUTH_K: usize = 15;

/// Least-squares projection of a shape onto a `k`-point cubic spline.
pub fn spline_truth(shape: &ButtonShape, velocity_mm_s: f64, k: usize) -> BSplineCurve {
    fit_forces(&shape.grid(), &shape.sample(velocity_mm_s), k, DEFAULT_DEGREE, DEFAULT_PENALTY)
        .expect("shape grid supports the fit")
        .0
}

/// One seeded six-button dataset: each style jittered by ±10%, projected on a
/// 15-point spline, sampled on its grid at 100 mm/s and perturbed with
/// Gaussian noise. Returns the noisy segments and their ground truths.
pub fn six_button_suite(seed: u64) -> Vec<(PressSegment, BSplineCurve)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, SUITE_NOISE_CN).unwrap();
    six_button_styles()
        .iter()
        .map(|s| {
            let s = s.jittered(&mut rng, 0.1);
            let truth = spline_truth(&s, 100.0, SUITE_TRUTH_K);
            let clean = truth.sample(&s.grid().centers());
            let forces = clean.iter().map(|f| f + noise.sample(&mut rng)).collect();
            (PressSegment::from_forces(100.0, s.travel_range_mm, forces), truth)
        })
        .collect()
}

/// A random `k`-point spline on `[0, travel]`: a rising baseline with
/// independent offsets at each control point.
pub fn random_spline(k: usize, travel: f64, rng: &mut impl Rng) -> BSplineCurve {
    let forces: Vec<f64> = (0..k)
        .map(|i| 30.0 + 40.0 * i as f64 / (k - 1) as f64 + rng.random_range(-20.0..20.0))
        .collect();
    BSplineCurve::with_forces(DEFAULT_DEGREE, 0.0, travel, &forces).unwrap()
}

/// Grid samples of a random `k`-point spline plus Gaussian noise.
pub fn known_spline_segment(k: usize, travel: f64, noise_cn: f64, seed: u64) -> (PressSegment, BSplineCurve) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let truth = random_spline(k, travel, &mut rng);
    let grid = DisplacementGrid::new(travel);
    let noise = Normal::new(0.0, noise_cn.max(1e-300)).unwrap();
    let forces = truth
        .sample(&grid.centers())
        .into_iter()
        .map(|f| if noise_cn > 0.0 { f + noise.sample(&mut rng) } else { f })
        .collect();
    (PressSegment::from_forces(100.0, travel, forces), truth)
}

/// How a synthetic recording session is performed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptureRecipe {
    pub shape: ButtonShape,
    pub velocity_mm_s: f64,
    pub presses: usize,
    /// Presses (by index) that stop short of the bottom.
    pub shallow_presses: Vec<usize>,
    pub rest_ms: f64,
    pub dwell_ms: f64,
    pub force_noise_cn: f64,
    pub marker_noise_mm: f64,
    pub sound_noise: f64,
    pub click_amplitude: f64,
    pub click_frequency_hz: f64,
    pub click_duration_ms: f64,
    /// Motion clock minus microcontroller clock (ms).
    pub clock_offset_ms: f64,
    pub seed: u64,
}

impl CaptureRecipe {
    pub fn new(shape: ButtonShape, velocity_mm_s: f64, seed: u64) -> Self {
        Self {
            shape,
            velocity_mm_s,
            presses: 15,
            shallow_presses: vec![4, 11],
            rest_ms: 120.0,
            dwell_ms: 100.0,
            force_noise_cn: 0.6,
            marker_noise_mm: 0.004,
            sound_noise: 2.0,
            click_amplitude: 120.0,
            click_frequency_hz: 239.0,
            click_duration_ms: 16.0,
            clock_offset_ms: 997.3,
            seed,
        }
    }
}

/// Finger depth over time: rest, descent, dwell, ascent, per press.
/// Returns depth and signed velocity (mm/s, positive downward) per ms.
fn press_profile(recipe: &CaptureRecipe) -> (Vec<f64>, Vec<f64>, Vec<(usize, usize)>) {
    let step = recipe.velocity_mm_s / 1000.0;
    let mut depth = Vec::new();
    let mut presses = Vec::new();
    let rest = recipe.rest_ms.round() as usize;
    let dwell = recipe.dwell_ms.round() as usize;
    depth.extend(std::iter::repeat_n(0.0, rest));
    for p in 0..recipe.presses {
        let bottom = if recipe.shallow_presses.contains(&p) {
            0.6 * recipe.shape.travel_range_mm
        } else {
            recipe.shape.travel_range_mm
        };
        let ramp = (bottom / step).ceil() as usize;
        let start = depth.len();
        depth.extend((1..=ramp).map(|i| (i as f64 * step).min(bottom)));
        depth.extend(std::iter::repeat_n(bottom, dwell));
        depth.extend((1..=ramp).map(|i| (bottom - i as f64 * step).max(0.0)));
        presses.push((start, depth.len()));
        depth.extend(std::iter::repeat_n(0.0, rest));
    }
    let mut vel = vec![0.0; depth.len()];
    for i in 1..depth.len() {
        vel[i] = (depth[i] - depth[i - 1]) * 1000.0;
    }
    (depth, vel, presses)
}

/// Records a synthetic session: 1 kHz force and sound, 256 Hz markers.
///
/// Force noise is band-limited before sampling, the release stroke rests on a
/// softer curve, and a decaying click is added to the sound channel the first
/// time each press passes the shape's click depth.
pub fn synth_capture(recipe: &CaptureRecipe) -> CaptureSession {
    let mut rng = ChaCha8Rng::seed_from_u64(recipe.seed);
    let (depth, vel, _) = press_profile(recipe);
    let n = depth.len();
    let shape = &recipe.shape;

    let white: Vec<f64> = {
        let nd = Normal::new(0.0, recipe.force_noise_cn.max(1e-300)).unwrap();
        (0..n).map(|_| nd.sample(&mut rng)).collect()
    };
    let noise = gaussian_smooth(&white, 1.0, EdgeMode::Mirror);
    let sound_noise = Normal::new(0.0, recipe.sound_noise.max(1e-300)).unwrap();

    let mut click_start: Option<usize> = None;
    let mut mcu = Vec::with_capacity(n);
    for i in 0..n {
        let d = depth[i];
        let touching = d > 0.0;
        let force = if !touching {
            0.0
        } else if vel[i] < 0.0 {
            0.8 * shape.force(d)
        } else {
            shape.force_at(d, vel[i].max(0.0))
        };
        if let Some(c) = shape.click_at_mm {
            let prev = if i > 0 { depth[i - 1] } else { 0.0 };
            if vel[i] > 0.0 && prev < c && d >= c {
                click_start = Some(i);
            }
        }
        let mut sound = 512.0 + sound_noise.sample(&mut rng);
        if let Some(s) = click_start {
            let t = (i - s) as f64;
            if t <= recipe.click_duration_ms {
                let env = 1.0 - 0.8 * t / recipe.click_duration_ms;
                sound += recipe.click_amplitude
                    * env
                    * (std::f64::consts::TAU * recipe.click_frequency_hz * t / 1000.0).sin();
            }
        }
        mcu.push(McuSample {
            t_ms: i as f64,
            force_cn: if touching { (force + noise[i]).max(0.0) } else { noise[i].abs() * 0.1 },
            sound,
        });
    }

    let marker = Normal::new(0.0, recipe.marker_noise_mm.max(1e-300)).unwrap();
    let frame_ms = 1000.0 / 256.0;
    let frames = ((n - 1) as f64 / frame_ms).floor() as usize + 1;
    let rest_z = 25.0;
    let mut mocap = Vec::with_capacity(frames);
    for f in 0..frames {
        let t = f as f64 * frame_ms;
        let i = t.floor() as usize;
        let w = t - i as f64;
        let d = if i + 1 < n {
            depth[i] * (1.0 - w) + depth[i + 1] * w
        } else {
            depth[n - 1]
        };
        let tilt = 0.02;
        let mut jitter = || {
            if recipe.marker_noise_mm > 0.0 {
                marker.sample(&mut rng)
            } else {
                0.0
            }
        };
        let (z1, z2) = if f == 0 {
            (rest_z + tilt, rest_z - tilt)
        } else {
            (rest_z + tilt - d + jitter(), rest_z - tilt - d + jitter())
        };
        mocap.push(MocapSample {
            t_ms: t + recipe.clock_offset_ms,
            marker1: [-6.0, 0.0, z1],
            marker2: [6.0, 0.0, z2],
        });
    }

    let sync_mcu = 20.0;
    CaptureSession {
        meta: CaptureMeta {
            button_id: shape.name.clone(),
            nominal_velocity_mm_s: recipe.velocity_mm_s,
            travel_range_mm: shape.travel_range_mm,
        },
        mcu,
        mocap,
        sync: SyncPair {
            mcu_t_ms: sync_mcu,
            mocap_t_ms: sync_mcu + recipe.clock_offset_ms,
        },
    }
}

/// Capture protocol velocities (mm/s).
pub const PROTOCOL_VELOCITIES: [f64; 4] = [50.0, 100.0, 150.0, 200.0];

/// One session per protocol velocity for `shape`.
pub fn protocol_captures(shape: &ButtonShape, seed: u64) -> Vec<CaptureSession> {
    PROTOCOL_VELOCITIES
        .iter()
        .enumerate()
        .map(|(i, &v)| synth_capture(&CaptureRecipe::new(shape.clone(), v, seed.wrapping_add(i as u64))))
        .collect()
}

/// Rounds every stream value to `decimals` places for compact files.
pub fn round_session(session: &CaptureSession, decimals: i32) -> CaptureSession {
    let s = 10f64.powi(decimals);
    let r = |x: f64| (x * s).round() / s;
    CaptureSession {
        meta: session.meta.clone(),
        mcu: session
            .mcu
            .iter()
            .map(|m| McuSample {
                t_ms: m.t_ms,
                force_cn: r(m.force_cn),
                sound: r(m.sound),
            })
            .collect(),
        mocap: session
            .mocap
            .iter()
            .map(|m| MocapSample {
                t_ms: m.t_ms,
                marker1: m.marker1.map(r),
                marker2: m.marker2.map(r),
            })
            .collect(),
        sync: session.sync,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn styles_are_plausible() {
        for s in six_button_styles() {
            let f = s.sample(100.0);
            assert_eq!(f.len(), s.grid().len());
            assert!(f.iter().all(|&x| x > 10.0 && x < 440.0), "{}", s.name);
            assert!(s.activation_point_mm < s.travel_range_mm);
            assert!(f[f.len() - 1] > f[0]);
        }
    }

    #[test]
    fn capture_has_nominal_rates() {
        let mut r = CaptureRecipe::new(clear_like(), 100.0, 1);
        r.presses = 2;
        let c = synth_capture(&r);
        assert!(c.validate().is_ok());
        let dur = c.mcu.last().unwrap().t_ms;
        let rate = c.mocap.len() as f64 / (dur / 1000.0);
        assert!((rate - 256.0).abs() < 2.0, "{rate}");
    }

    #[test]
    fn suite_is_seeded() {
        assert_eq!(six_button_suite(3), six_button_suite(3));
        assert_ne!(six_button_suite(3)[0].0, six_button_suite(4)[0].0);
    }
}
