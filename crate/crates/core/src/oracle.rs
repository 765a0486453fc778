//! Brute-force reference computations backing the test suite.
//!
//! Nothing in this module is used by the model or training paths; each
//! function recomputes a quantity by an independent route (sampling or
//! numerical search) so the closed forms in [`crate::latent`] can be checked
//! against something that does not share their code.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::latent::DiagGaussian;

/// A Monte-Carlo estimate with its standard error.
#[derive(Debug, Clone, Copy)]
pub struct McEstimate {
    pub estimate: f64,
    pub std_error: f64,
}

/// Monte-Carlo estimate of E_q[log q(z) - log p(z)] by sampling z ~ q.
///
/// Intended sample counts are 1e5 and up; the returned standard error is the
/// sample standard deviation divided by sqrt(samples).
pub fn mc_kl_oracle(q: &DiagGaussian, p: &DiagGaussian, samples: usize, seed: u64) -> McEstimate {
    assert_eq!(q.dim(), p.dim(), "mc_kl_oracle: dimension mismatch");
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let dim = q.dim();
    let sigma = q.sigma();
    // Welford running mean / M2 keeps the variance accumulation stable over
    // millions of samples.
    let mut mean = 0.0;
    let mut m2 = 0.0;
    let mut z = vec![0.0; dim];
    for i in 0..samples {
        for d in 0..dim {
            let e: f64 = rng.sample(rand_distr::StandardNormal);
            z[d] = q.mu[d] + sigma[d] * e;
        }
        let val = q.log_density(&z).unwrap() - p.log_density(&z).unwrap();
        let delta = val - mean;
        mean += delta / (i + 1) as f64;
        m2 += delta * (val - mean);
    }
    let var = if samples > 1 {
        m2 / (samples - 1) as f64
    } else {
        0.0
    };
    McEstimate {
        estimate: mean,
        std_error: (var / samples as f64).sqrt(),
    }
}

/// Sum of scalar KL divergences from n posteriors to one candidate prior.
fn sum_kl_to_prior(mus: &[f64], sigmas: &[f64], prior_mu: f64, prior_log_sigma: f64) -> f64 {
    let prior_var = (2.0 * prior_log_sigma).exp();
    let mut acc = 0.0;
    for (&m, &s) in mus.iter().zip(sigmas) {
        let var = s * s;
        let diff = m - prior_mu;
        acc += 0.5 * ((prior_var / var).ln() + (var + diff * diff) / prior_var - 1.0);
    }
    acc
}

/// Numerically minimizes sum_i KL(N(mu_i, sigma_i^2) || N(mu', sigma'^2))
/// over the prior parameters (mu', sigma') for one scalar latent dimension.
///
/// Plain compass search over (mu', log sigma') with step halving; the
/// objective is smooth and unimodal, so this converges well past the 1e-4
/// accuracy the tests need. Deliberately knows nothing about the closed-form
/// minimizer.
pub fn min_sum_kl_scalar(mus: &[f64], sigmas: &[f64]) -> f64 {
    assert!(!mus.is_empty() && mus.len() == sigmas.len());
    let mut mu = mus.iter().sum::<f64>() / mus.len() as f64 + 0.1;
    let mut ls = sigmas.iter().map(|s| s.ln()).sum::<f64>() / sigmas.len() as f64 + 0.1;
    let mut best = sum_kl_to_prior(mus, sigmas, mu, ls);
    let mut step = 1.0;
    while step > 1e-10 {
        let mut improved = false;
        for (dm, dl) in [(step, 0.0), (-step, 0.0), (0.0, step), (0.0, -step)] {
            let candidate = sum_kl_to_prior(mus, sigmas, mu + dm, ls + dl);
            if candidate < best {
                best = candidate;
                mu += dm;
                ls += dl;
                improved = true;
            }
        }
        if !improved {
            step *= 0.5;
        }
    }
    best
}

/// Central finite difference (f(x+h) - f(x-h)) / 2h of a scalar function.
pub fn central_difference<F: FnMut(f64) -> f64>(mut f: F, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}
