//! Output heads on top of an [`Mlp`](super::Mlp): a diagonal Gaussian for
//! the dynamics models and a tanh-squashed Gaussian for the actor.

use std::f64::consts::PI;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;
const TANH_EPS: f64 = 1e-6;

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Smooth map of `x` onto `(lo, hi)`: `lo + (hi − lo)·sigmoid(x)`.
/// Returns the value and its derivative.
pub fn soft_clamp(x: f64, lo: f64, hi: f64) -> (f64, f64) {
    let s = sigmoid(x);
    (lo + (hi - lo) * s, (hi - lo) * s * (1.0 - s))
}

/// Diagonal Gaussian over `dim` outputs. The network emits `2·dim` values:
/// the mean followed by the raw log-std, which is soft-clamped into
/// `[ln σ_min, ln σ_max]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianHead {
    pub dim: usize,
    pub log_std_min: f64,
    pub log_std_max: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianOut {
    pub mean: Vec<f64>,
    pub log_std: Vec<f64>,
    /// d log_std / d raw, per output dimension.
    pub d_log_std: Vec<f64>,
}

impl GaussianOut {
    pub fn std(&self) -> Vec<f64> {
        self.log_std.iter().map(|l| l.exp()).collect()
    }
}

impl GaussianHead {
    pub const SIGMA_MIN: f64 = 1e-3;
    pub const SIGMA_MAX: f64 = 10.0;

    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            log_std_min: Self::SIGMA_MIN.ln(),
            log_std_max: Self::SIGMA_MAX.ln(),
        }
    }

    pub fn with_bounds(dim: usize, log_std_min: f64, log_std_max: f64) -> Self {
        Self {
            dim,
            log_std_min,
            log_std_max,
        }
    }

    pub fn raw_dim(&self) -> usize {
        2 * self.dim
    }

    pub fn split(&self, raw: &[f64]) -> GaussianOut {
        debug_assert_eq!(raw.len(), self.raw_dim());
        let (mean, ls_raw) = raw.split_at(self.dim);
        let (log_std, d_log_std) = ls_raw
            .iter()
            .map(|&x| soft_clamp(x, self.log_std_min, self.log_std_max))
            .unzip();
        GaussianOut {
            mean: mean.to_vec(),
            log_std,
            d_log_std,
        }
    }

    /// Negative log-likelihood of `target` summed over dimensions, with the
    /// gradient with respect to the raw network output.
    pub fn nll(&self, raw: &[f64], target: &[f64]) -> (f64, Vec<f64>) {
        let g = self.split(raw);
        let mut loss = 0.0;
        let mut d_raw = vec![0.0; self.raw_dim()];
        for j in 0..self.dim {
            let inv_var = (-2.0 * g.log_std[j]).exp();
            let diff = target[j] - g.mean[j];
            loss += 0.5 * diff * diff * inv_var + g.log_std[j] + HALF_LN_2PI;
            d_raw[j] = -diff * inv_var;
            d_raw[self.dim + j] = (1.0 - diff * diff * inv_var) * g.d_log_std[j];
        }
        (loss, d_raw)
    }
}

/// Reparameterized sample of a tanh-squashed diagonal Gaussian.
#[derive(Debug, Clone, PartialEq)]
pub struct SquashedSample {
    /// Action in `[-1, 1]^d`.
    pub action: Vec<f64>,
    pub log_prob: f64,
    noise: Vec<f64>,
    std: Vec<f64>,
    d_log_std: Vec<f64>,
}

impl SquashedSample {
    /// Gradient with respect to the raw head output of
    /// `d_action · action + d_log_prob · log_prob`, holding the noise fixed.
    pub fn backward(&self, d_action: &[f64], d_log_prob: f64) -> Vec<f64> {
        let d = self.action.len();
        let mut d_raw = vec![0.0; 2 * d];
        for j in 0..d {
            let t = self.action[j];
            let one_minus = 1.0 - t * t;
            // d(log_prob)/du from the -ln(1 - tanh² u + eps) correction.
            let dlp_du = 2.0 * t * one_minus / (one_minus + TANH_EPS);
            let d_u = d_action[j] * one_minus + d_log_prob * dlp_du;
            d_raw[j] = d_u;
            let d_ls = d_u * self.std[j] * self.noise[j] - d_log_prob;
            d_raw[d + j] = d_ls * self.d_log_std[j];
        }
        d_raw
    }
}

/// Actor head: `a = tanh(μ + σ·ε)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SquashedGaussianHead {
    pub gaussian: GaussianHead,
}

impl SquashedGaussianHead {
    pub fn new(dim: usize) -> Self {
        Self {
            gaussian: GaussianHead::with_bounds(dim, -5.0, 1.0),
        }
    }

    pub fn dim(&self) -> usize {
        self.gaussian.dim
    }

    pub fn raw_dim(&self) -> usize {
        self.gaussian.raw_dim()
    }

    pub fn sample(&self, raw: &[f64], noise: &[f64]) -> SquashedSample {
        let g = self.gaussian.split(raw);
        let std = g.std();
        let mut action = Vec::with_capacity(self.dim());
        let mut log_prob = 0.0;
        for j in 0..self.dim() {
            let u = g.mean[j] + std[j] * noise[j];
            let t = u.tanh();
            log_prob += -0.5 * noise[j] * noise[j] - g.log_std[j] - HALF_LN_2PI - (1.0 - t * t + TANH_EPS).ln();
            action.push(t);
        }
        SquashedSample {
            action,
            log_prob,
            noise: noise.to_vec(),
            std,
            d_log_std: g.d_log_std,
        }
    }

    pub fn mode(&self, raw: &[f64]) -> Vec<f64> {
        raw[..self.dim()].iter().map(|m| m.tanh()).collect()
    }
}

/// Log density of `N(mean, std²)` at `x`, for tests and diagnostics.
pub fn normal_log_pdf(x: f64, mean: f64, std: f64) -> f64 {
    let z = (x - mean) / std;
    -0.5 * z * z - std.ln() - 0.5 * (2.0 * PI).ln()
}
