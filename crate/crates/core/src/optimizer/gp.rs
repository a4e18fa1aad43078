//! Gaussian-process surrogate on the unit hypercube and the expected
//! improvement loop that proposes the next design.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Kernel {
    #[default]
    SquaredExponential,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Acquisition {
    #[default]
    ExpectedImprovement,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BoConfig {
    pub kernel: Kernel,
    pub acquisition: Acquisition,
    pub candidates: usize,
    /// Improvement margin, in units of the objective.
    pub xi: f64,
    /// Length scales tried when maximizing the marginal likelihood.
    pub lengthscales: Vec<f64>,
    /// Noise variances (on standardized targets) tried alongside; a fixed
    /// value skips the search.
    pub noise: Option<f64>,
    pub noise_grid: Vec<f64>,
    pub jitter: f64,
}

impl Default for BoConfig {
    fn default() -> Self {
        Self {
            kernel: Kernel::SquaredExponential,
            acquisition: Acquisition::ExpectedImprovement,
            candidates: 4096,
            xi: 0.0,
            lengthscales: vec![0.1, 0.2, 0.35, 0.5, 0.75, 1.0, 1.5],
            noise: None,
            noise_grid: vec![1e-6, 1e-4, 1e-2, 0.05, 0.2],
            jitter: 1e-10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GpHyper {
    pub lengthscale: f64,
    pub noise: f64,
    pub log_marginal_likelihood: f64,
}

/// Fitted GP with a unit-variance squared-exponential kernel on
/// standardized targets.
#[derive(Debug, Clone)]
pub struct Gp {
    xs: Vec<Vec<f64>>,
    chol: Cholesky<f64, Dyn>,
    alpha: DVector<f64>,
    mean: f64,
    scale: f64,
    pub hyper: GpHyper,
}

fn se(a: &[f64], b: &[f64], lengthscale: f64) -> f64 {
    let r2: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
    (-0.5 * r2 / (lengthscale * lengthscale)).exp()
}

fn standardize(ys: &[f64]) -> (f64, f64, DVector<f64>) {
    let n = ys.len() as f64;
    let mean = ys.iter().sum::<f64>() / n;
    let var = ys.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / n;
    let scale = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };
    let z = DVector::from_iterator(ys.len(), ys.iter().map(|y| (y - mean) / scale));
    (mean, scale, z)
}

impl Gp {
    /// Fits with fixed hyperparameters; `None` when the kernel matrix is not
    /// positive definite.
    pub fn fit_with(xs: &[Vec<f64>], ys: &[f64], lengthscale: f64, noise: f64, jitter: f64) -> Option<Self> {
        if xs.is_empty() || xs.len() != ys.len() {
            return None;
        }
        let n = xs.len();
        let (mean, scale, z) = standardize(ys);
        let k = DMatrix::from_fn(n, n, |i, j| {
            se(&xs[i], &xs[j], lengthscale) + if i == j { noise + jitter } else { 0.0 }
        });
        let chol = Cholesky::new(k)?;
        let alpha = chol.solve(&z);
        let log_det: f64 = chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum();
        let lml = -0.5 * z.dot(&alpha) - log_det - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();
        if !lml.is_finite() {
            return None;
        }
        Some(Self {
            xs: xs.to_vec(),
            chol,
            alpha,
            mean,
            scale,
            hyper: GpHyper {
                lengthscale,
                noise,
                log_marginal_likelihood: lml,
            },
        })
    }

    /// Fits every hyperparameter pair of the config and keeps the one with
    /// the highest marginal likelihood.
    pub fn fit(xs: &[Vec<f64>], ys: &[f64], config: &BoConfig) -> Option<Self> {
        let noises = match config.noise {
            Some(n) => vec![n],
            None => config.noise_grid.clone(),
        };
        let mut best: Option<Self> = None;
        for &l in &config.lengthscales {
            for &nz in &noises {
                if let Some(gp) = Self::fit_with(xs, ys, l, nz, config.jitter) {
                    let better = best
                        .as_ref()
                        .is_none_or(|b| gp.hyper.log_marginal_likelihood > b.hyper.log_marginal_likelihood);
                    if better {
                        best = Some(gp);
                    }
                }
            }
        }
        best
    }

    /// Posterior mean and variance of the latent objective at `x`.
    pub fn predict(&self, x: &[f64]) -> (f64, f64) {
        let ks = DVector::from_iterator(self.xs.len(), self.xs.iter().map(|xi| se(xi, x, self.hyper.lengthscale)));
        let mu = ks.dot(&self.alpha);
        let v = self
            .chol
            .l_dirty()
            .solve_lower_triangular(&ks)
            .expect("cholesky factor has a positive diagonal");
        let var = (1.0 - v.dot(&v)).max(0.0);
        (self.mean + self.scale * mu, self.scale * self.scale * var)
    }
}

/// Expected improvement below `best` for a Gaussian posterior.
pub fn expected_improvement(mu: f64, var: f64, best: f64, xi: f64) -> f64 {
    let sd = var.sqrt();
    let gain = best - mu - xi;
    if sd < 1e-12 {
        return gain.max(0.0);
    }
    let z = gain / sd;
    let n = Normal::standard();
    gain * n.cdf(z) + sd * n.pdf(z)
}

const PRIMES: [u64; 16] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53];

fn radical_inverse(mut i: u64, base: u64) -> f64 {
    let mut f = 1.0;
    let mut r = 0.0;
    while i > 0 {
        f /= base as f64;
        r += f * (i % base) as f64;
        i /= base;
    }
    r
}

/// The `index`-th point of the Halton sequence in `dim` dimensions.
pub fn halton(index: u64, dim: usize) -> Vec<f64> {
    assert!(dim <= PRIMES.len(), "at most {} dimensions", PRIMES.len());
    PRIMES[..dim].iter().map(|&b| radical_inverse(index, b)).collect()
}

/// Observations gathered so far, on the unit hypercube.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoState {
    pub dim: usize,
    pub xs: Vec<Vec<f64>>,
    pub ys: Vec<f64>,
    pub config: BoConfig,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hyper: Option<GpHyper>,
}

impl BoState {
    pub fn new(dim: usize, config: BoConfig, seed: u64) -> Self {
        Self {
            dim,
            xs: Vec::new(),
            ys: Vec::new(),
            config,
            seed,
            hyper: None,
        }
    }

    pub fn observe(&mut self, x: Vec<f64>, y: f64) {
        assert_eq!(x.len(), self.dim);
        self.xs.push(x);
        self.ys.push(y);
    }

    /// Index and value of the lowest observation.
    pub fn incumbent(&self) -> Option<(usize, f64)> {
        self.ys
            .iter()
            .copied()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(&b.1))
    }

    fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed ^ (self.xs.len() as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
    }

    /// Shifted Halton candidates for this step.
    pub fn candidates(&self) -> Vec<Vec<f64>> {
        let mut rng = self.rng();
        let shift: Vec<f64> = (0..self.dim).map(|_| rng.random::<f64>()).collect();
        (1..=self.config.candidates as u64)
            .map(|i| {
                halton(i, self.dim)
                    .into_iter()
                    .zip(&shift)
                    .map(|(h, s)| (h + s).fract())
                    .collect()
            })
            .collect()
    }
}

/// Next point to evaluate: the midpoint first, then a Halton point, then the
/// expected-improvement maximizer over the candidate set.
pub fn bo_step(state: &mut BoState) -> Vec<f64> {
    match state.xs.len() {
        0 => return vec![0.5; state.dim],
        1 => return halton(2, state.dim),
        _ => {}
    }
    let Some(gp) = Gp::fit(&state.xs, &state.ys, &state.config) else {
        log::warn!("surrogate fit failed on {} observations; proposing a random design", state.xs.len());
        let mut rng = state.rng();
        return (0..state.dim).map(|_| rng.random::<f64>()).collect();
    };
    state.hyper = Some(gp.hyper);
    let best = state.incumbent().map(|(_, y)| y).unwrap_or(f64::INFINITY);
    let mut top: Option<(f64, Vec<f64>)> = None;
    for c in state.candidates() {
        let (mu, var) = gp.predict(&c);
        let ei = expected_improvement(mu, var, best, state.config.xi);
        if top.as_ref().is_none_or(|(e, _)| ei > *e) {
            top = Some((ei, c));
        }
    }
    top.map(|(_, c)| c).expect("candidate set is not empty")
}
