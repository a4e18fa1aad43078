//! Discrete Gaussian smoothing with selectable boundary extension.

/// How the signal is extended past its ends before convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EdgeMode {
    /// Whole-sample mirror: `c b | a b c`.
    Mirror,
    /// Odd reflection about the end sample: `2a-c 2a-b | a b c`. Keeps affine
    /// signals (constant offsets and linear trends) unchanged.
    #[default]
    PointReflect,
    /// Wrap around; the output mean equals the input mean.
    Periodic,
}

/// Normalized Gaussian taps truncated at four standard deviations.
#[derive(Debug, Clone)]
pub struct GaussianKernel {
    taps: Vec<f64>,
    radius: usize,
}

impl GaussianKernel {
    /// `None` unless `sigma_samples` is finite and positive.
    pub fn new(sigma_samples: f64) -> Option<Self> {
        if !(sigma_samples.is_finite() && sigma_samples > 0.0) {
            return None;
        }
        let radius = (4.0 * sigma_samples).ceil().max(1.0) as usize;
        let mut taps: Vec<f64> = (0..=2 * radius)
            .map(|i| {
                let x = i as f64 - radius as f64;
                (-0.5 * (x / sigma_samples).powi(2)).exp()
            })
            .collect();
        let total: f64 = taps.iter().sum();
        taps.iter_mut().for_each(|t| *t /= total);
        Some(Self { taps, radius })
    }

    pub fn taps(&self) -> &[f64] {
        &self.taps
    }

    pub fn radius(&self) -> usize {
        self.radius
    }

    pub fn apply(&self, signal: &[f64], mode: EdgeMode) -> Vec<f64> {
        let n = signal.len();
        if n == 0 {
            return Vec::new();
        }
        if n == 1 {
            return signal.to_vec();
        }
        let r = self.radius as isize;
        (0..n as isize)
            .map(|i| {
                self.taps
                    .iter()
                    .enumerate()
                    .map(|(j, w)| w * extended(signal, i + j as isize - r, mode))
                    .sum()
            })
            .collect()
    }
}

/// Smooths `signal` with a Gaussian of standard deviation `sigma_samples`.
/// Non-positive sigma leaves the signal unchanged.
pub fn gaussian_smooth(signal: &[f64], sigma_samples: f64, mode: EdgeMode) -> Vec<f64> {
    match GaussianKernel::new(sigma_samples) {
        Some(k) => k.apply(signal, mode),
        None => signal.to_vec(),
    }
}

fn extended(s: &[f64], i: isize, mode: EdgeMode) -> f64 {
    let n = s.len() as isize;
    if (0..n).contains(&i) {
        return s[i as usize];
    }
    match mode {
        EdgeMode::Periodic => s[i.rem_euclid(n) as usize],
        EdgeMode::Mirror => {
            let period = 2 * (n - 1);
            let k = i.rem_euclid(period);
            s[(if k < n { k } else { period - k }) as usize]
        }
        EdgeMode::PointReflect => {
            if i < 0 {
                2.0 * s[0] - extended(s, -i, mode)
            } else {
                2.0 * s[(n - 1) as usize] - extended(s, 2 * (n - 1) - i, mode)
            }
        }
    }
}
