//! Gaussian diffusion arithmetic for the variance-preserving label process.
//!
//! Indexing is reversed relative to the usual image-diffusion convention:
//! `t = 0` is (nearly) pure noise and `t = T` is (nearly) the clean label, so
//! `alpha_bar` and the signal-to-noise ratio both increase with `t`.

mod gamma;

pub use gamma::{GammaNodes, GammaPoint, TrainableGamma};

use std::f64::consts::FRAC_PI_2;

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor;

pub const DEFAULT_COSINE_OFFSET: f64 = 0.008;
pub const DEFAULT_CLIP: (f64, f64) = (1e-4, 0.999);

/// Fixed schedule `alpha_bar[0..=T]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteSchedule {
    steps: usize,
    offset: f64,
    clip: (f64, f64),
    alpha_bar: Vec<f64>,
}

/// Mean weights and variance of `q(z_t | z_{t-1}, y)`:
/// mean `a * u_y + b * z_{t-1}`, variance `c`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PosteriorCoefficients {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

/// Coefficients from a consecutive pair, `alpha_bar_t` (current, less noisy)
/// and `alpha_bar_prev` (previous, noisier).
pub fn posterior_from_pair(alpha_bar_t: f64, alpha_bar_prev: f64) -> PosteriorCoefficients {
    let alpha_prev = alpha_bar_prev / alpha_bar_t;
    let denom = 1.0 - alpha_bar_prev;
    PosteriorCoefficients {
        a: alpha_bar_t.sqrt() * (1.0 - alpha_prev) / denom,
        b: alpha_prev.sqrt() * (1.0 - alpha_bar_t) / denom,
        c: ((1.0 - alpha_bar_t) * (1.0 - alpha_prev) / denom).max(0.0),
    }
}

pub fn snr_of(alpha_bar: f64) -> f64 {
    alpha_bar / (1.0 - alpha_bar)
}

impl DiscreteSchedule {
    /// Cosine schedule, time-reversed and clipped:
    /// `alpha_bar[t] = clip(f(T - t) / f(0))`, `f(u) = cos^2(((u / T) + s) / (1 + s) * pi / 2)`.
    pub fn cosine(steps: usize, offset: f64, clip: (f64, f64)) -> Result<Self> {
        let (lo, hi) = clip;
        if steps == 0 {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        if !(0.0 < lo && lo < hi && hi < 1.0) {
            return Err(Error::Config(format!(
                "clip bounds must satisfy 0 < lo < hi < 1, got ({lo}, {hi})"
            )));
        }
        if !(offset >= 0.0 && offset.is_finite()) {
            return Err(Error::Config(format!("cosine offset {offset} must be >= 0")));
        }
        let f = |u: f64| (((u / steps as f64) + offset) / (1.0 + offset) * FRAC_PI_2).cos().powi(2);
        let f0 = f(0.0);
        let alpha_bar = (0..=steps)
            .map(|t| (f((steps - t) as f64) / f0).clamp(lo, hi))
            .collect();
        Ok(Self {
            steps,
            offset,
            clip,
            alpha_bar,
        })
    }

    pub fn default_cosine(steps: usize) -> Result<Self> {
        Self::cosine(steps, DEFAULT_COSINE_OFFSET, DEFAULT_CLIP)
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn offset(&self) -> f64 {
        self.offset
    }

    pub fn clip(&self) -> (f64, f64) {
        self.clip
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bar
            .get(t)
            .copied()
            .ok_or_else(|| Error::range("t", t, format!("[0, {}]", self.steps)))
    }

    /// `alpha_{t-1} = alpha_bar_{t-1} / alpha_bar_t`.
    pub fn alpha_prev(&self, t: usize) -> Result<f64> {
        self.check_step(t)?;
        Ok(self.alpha_bar[t - 1] / self.alpha_bar[t])
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps {
            return Err(Error::range("t", t, format!("[1, {}]", self.steps)));
        }
        Ok(())
    }

    pub fn posterior_coefficients(&self, t: usize) -> Result<PosteriorCoefficients> {
        self.check_step(t)?;
        Ok(posterior_from_pair(self.alpha_bar[t], self.alpha_bar[t - 1]))
    }

    pub fn snr(&self, t: usize) -> Result<f64> {
        Ok(snr_of(self.alpha_bar(t)?))
    }

    /// `SNR(t) - SNR(t - 1)` for `1 <= t <= T`.
    pub fn snr_diff(&self, t: usize) -> Result<f64> {
        self.check_step(t)?;
        Ok(snr_of(self.alpha_bar[t]) - snr_of(self.alpha_bar[t - 1]))
    }
}

/// Draws `z = sqrt(alpha_bar) u + sqrt(1 - alpha_bar) eps` for every row of
/// `u` (any leading shape; the noise is elementwise).
pub fn sample_q_marginal(u: &Tensor, alpha_bar: f64, stream: &mut RngStream) -> Result<Tensor> {
    if !(0.0 < alpha_bar && alpha_bar < 1.0) {
        return Err(Error::range("alpha_bar", alpha_bar, "(0, 1)"));
    }
    let (s, n) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    Ok(u.map(|v| s * v + n * stream.normal()))
}

/// Per-row variant of [`sample_q_marginal`] with one `alpha_bar` per row.
pub fn sample_q_marginal_rows(u: &Tensor, alpha_bars: &[f64], stream: &mut RngStream) -> Result<Tensor> {
    if alpha_bars.len() != u.rows() {
        return Err(Error::shape("sample_q_marginal_rows", u.shape(), &[alpha_bars.len()]));
    }
    let mut out = u.clone();
    for (r, &ab) in alpha_bars.iter().enumerate() {
        if !(0.0 < ab && ab < 1.0) {
            return Err(Error::range("alpha_bar", ab, "(0, 1)"));
        }
        let (s, n) = (ab.sqrt(), (1.0 - ab).sqrt());
        for v in out.row_mut(r) {
            *v = s * *v + n * stream.normal();
        }
    }
    Ok(out)
}

/// `KL(N(sqrt(ab0) u, (1 - ab0) I) || N(0, I))` in closed form.
pub fn gaussian_kl_to_standard(u: &[f64], alpha_bar0: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&alpha_bar0) {
        return Err(Error::range("alpha_bar0", alpha_bar0, "[0, 1)"));
    }
    let d = u.len() as f64;
    let norm2: f64 = u.iter().map(|v| v * v).sum();
    Ok(0.5 * (alpha_bar0 * norm2 + d * (1.0 - alpha_bar0) - d - d * (1.0 - alpha_bar0).ln()))
}

#[cfg(test)]
mod tests;
