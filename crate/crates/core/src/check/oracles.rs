//! Independent reference computations used by the `check` suite and tests.
//! None of these call into the closed forms they are used to verify.

use crate::rng::RngStream;

/// Moments of a 1-d density given by its log on a grid.
fn grid_moments(lo: f64, hi: f64, n: usize, log_density: &dyn Fn(f64) -> f64) -> (f64, f64) {
    let h = (hi - lo) / (n - 1) as f64;
    let logs: Vec<f64> = (0..n).map(|i| log_density(lo + i as f64 * h)).collect();
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (mut w, mut m1, mut m2) = (0.0, 0.0, 0.0);
    for (i, l) in logs.iter().enumerate() {
        let z = lo + i as f64 * h;
        let p = (l - max).exp();
        w += p;
        m1 += p * z;
        m2 += p * z * z;
    }
    let mean = m1 / w;
    (mean, m2 / w - mean * mean)
}

/// Mean and variance of the density proportional to
/// `N(z | sqrt(ab_t) u, 1 - ab_t) * N(z_prev | sqrt(alpha) z, 1 - alpha)` with
/// `alpha = ab_prev / ab_t`, found by quadrature on a two-pass grid.
pub fn bayes_posterior_grid(ab_t: f64, ab_prev: f64, u: f64, z_prev: f64) -> (f64, f64) {
    let alpha = ab_prev / ab_t;
    let prior_mu = ab_t.sqrt() * u;
    let prior_var = 1.0 - ab_t;
    let lik_var = 1.0 - alpha;
    let log_density = |z: f64| {
        let a = z - prior_mu;
        let b = z_prev - alpha.sqrt() * z;
        -a * a / (2.0 * prior_var) - b * b / (2.0 * lik_var)
    };
    let prior_sd = prior_var.sqrt();
    let lik_center = z_prev / alpha.sqrt();
    let lik_sd = (lik_var / alpha).sqrt();
    let lo = (prior_mu - 12.0 * prior_sd).min(lik_center - 12.0 * lik_sd);
    let hi = (prior_mu + 12.0 * prior_sd).max(lik_center + 12.0 * lik_sd);
    let (m, v) = grid_moments(lo, hi, 200_001, &log_density);
    let sd = v.max(1e-300).sqrt();
    grid_moments(m - 14.0 * sd, m + 14.0 * sd, 200_001, &log_density)
}

/// `(a, b, c)` recovered from grid posteriors: the mean is linear in
/// `(u, z_prev)`, so probing unit inputs isolates each weight.
pub fn bayes_coefficients_grid(ab_t: f64, ab_prev: f64) -> (f64, f64, f64) {
    let (m0, c) = bayes_posterior_grid(ab_t, ab_prev, 0.0, 0.0);
    let (mu, _) = bayes_posterior_grid(ab_t, ab_prev, 1.0, 0.0);
    let (mz, _) = bayes_posterior_grid(ab_t, ab_prev, 0.0, 1.0);
    (mu - m0, mz - m0, c)
}

/// Monte-Carlo estimate of `KL(N(sqrt(ab0) u, (1 - ab0) I) || N(0, I))` as the
/// sample mean of `log q(z) - log p(z)` under `z ~ q`.
pub fn monte_carlo_kl(u: &[f64], alpha_bar0: f64, samples: usize, stream: &mut RngStream) -> f64 {
    let var = 1.0 - alpha_bar0;
    let sd = var.sqrt();
    let mu: Vec<f64> = u.iter().map(|v| alpha_bar0.sqrt() * v).collect();
    let mut total = 0.0;
    for _ in 0..samples {
        let mut lr = 0.0;
        for m in &mu {
            let e = stream.normal();
            let z = m + sd * e;
            lr += -0.5 * e * e - 0.5 * var.ln() + 0.5 * z * z;
        }
        total += lr;
    }
    total / samples as f64
}

/// Central difference of a scalar function.
pub fn central_difference(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

/// Trains a plain perceptron (one weight vector per class, multiclass update)
/// and returns its training accuracy.
pub fn perceptron_accuracy(points: &[Vec<f64>], labels: &[usize], classes: usize, epochs: usize) -> f64 {
    let d = points.first().map_or(0, Vec::len);
    let mut w = vec![vec![0.0; d + 1]; classes];
    let score = |w: &[f64], x: &[f64]| w[d] + w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    for _ in 0..epochs {
        let mut mistakes = 0;
        for (x, &y) in points.iter().zip(labels) {
            let pred = (0..classes)
                .max_by(|&a, &b| score(&w[a], x).total_cmp(&score(&w[b], x)).then(b.cmp(&a)))
                .unwrap();
            if pred != y {
                mistakes += 1;
                for k in 0..d {
                    w[y][k] += x[k];
                    w[pred][k] -= x[k];
                }
                w[y][d] += 1.0;
                w[pred][d] -= 1.0;
            }
        }
        if mistakes == 0 {
            break;
        }
    }
    let correct = points
        .iter()
        .zip(labels)
        .filter(|(x, &y)| {
            (0..classes)
                .max_by(|&a, &b| score(&w[a], x).total_cmp(&score(&w[b], x)).then(b.cmp(&a)))
                .unwrap()
                == y
        })
        .count();
    correct as f64 / points.len() as f64
}

/// Sample mean and (biased) variance.
pub fn moments(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    (m, xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n)
}
