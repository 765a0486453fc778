//! Closed-form diagonal-Gaussian algebra for the hybrid latent variable
//! mechanism.
//!
//! Everything here operates on explicit `(mu, log_var)` vectors so it can be
//! cross-checked against brute-force references (see [`crate::oracle`])
//! independently of the network code. All functions are pure.

use crate::error::{Error, Result};

/// A diagonal Gaussian N(mu, diag(exp(log_var))) over the latent space.
///
/// Storing the log of the variance keeps the variance strictly positive and
/// matches what the recognition / prior heads produce.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagGaussian {
    pub mu: Vec<f64>,
    pub log_var: Vec<f64>,
}

impl DiagGaussian {
    pub fn new(mu: Vec<f64>, log_var: Vec<f64>) -> Result<Self> {
        if mu.is_empty() {
            return Err(Error::contract("DiagGaussian::new", "dimension must be >= 1"));
        }
        if mu.len() != log_var.len() {
            return Err(Error::DimensionMismatch {
                op: "DiagGaussian::new",
                left: mu.len(),
                right: log_var.len(),
            });
        }
        if log_var.iter().any(|v| !v.is_finite()) {
            return Err(Error::contract(
                "DiagGaussian::new",
                "log_var entries must be finite",
            ));
        }
        Ok(DiagGaussian { mu, log_var })
    }

    /// The standard normal N(0, I) of the given dimension.
    pub fn standard(dim: usize) -> Self {
        DiagGaussian {
            mu: vec![0.0; dim],
            log_var: vec![0.0; dim],
        }
    }

    /// Convenience constructor for a scalar Gaussian from mean and variance.
    pub fn scalar(mu: f64, var: f64) -> Result<Self> {
        if !(var > 0.0) {
            return Err(Error::contract("DiagGaussian::scalar", "variance must be > 0"));
        }
        DiagGaussian::new(vec![mu], vec![var.ln()])
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    /// Elementwise variance exp(log_var).
    pub fn var(&self) -> Vec<f64> {
        self.log_var.iter().map(|v| v.exp()).collect()
    }

    /// Elementwise standard deviation exp(log_var / 2).
    pub fn sigma(&self) -> Vec<f64> {
        self.log_var.iter().map(|v| (0.5 * v).exp()).collect()
    }

    /// Log density at `z`, summed over dimensions.
    pub fn log_density(&self, z: &[f64]) -> Result<f64> {
        if z.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                op: "DiagGaussian::log_density",
                left: z.len(),
                right: self.dim(),
            });
        }
        let ln_2pi = (2.0 * std::f64::consts::PI).ln();
        let mut acc = 0.0;
        for i in 0..self.dim() {
            let d = z[i] - self.mu[i];
            acc += -0.5 * (ln_2pi + self.log_var[i]) - 0.5 * d * d * (-self.log_var[i]).exp();
        }
        Ok(acc)
    }
}

/// An ordered set of same-dimension Gaussians with mixing weights.
///
/// Weights must be nonnegative and sum to one (within 1e-9).
#[derive(Debug, Clone)]
pub struct MixtureSpec {
    pub components: Vec<DiagGaussian>,
    pub weights: Vec<f64>,
}

impl MixtureSpec {
    pub fn new(components: Vec<DiagGaussian>, weights: Vec<f64>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::contract("MixtureSpec::new", "empty component list"));
        }
        if components.len() != weights.len() {
            return Err(Error::DimensionMismatch {
                op: "MixtureSpec::new",
                left: components.len(),
                right: weights.len(),
            });
        }
        let dim = components[0].dim();
        if components.iter().any(|c| c.dim() != dim) {
            return Err(Error::contract(
                "MixtureSpec::new",
                "components must share one dimension",
            ));
        }
        if weights.iter().any(|&w| w < 0.0) {
            return Err(Error::contract("MixtureSpec::new", "weights must be >= 0"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::contract(
                "MixtureSpec::new",
                format!("weights must sum to 1, got {total}"),
            ));
        }
        Ok(MixtureSpec {
            components,
            weights,
        })
    }

    /// Uniform weights 1/n over the given components.
    pub fn uniform(components: Vec<DiagGaussian>) -> Result<Self> {
        let n = components.len();
        if n == 0 {
            return Err(Error::contract("MixtureSpec::uniform", "empty component list"));
        }
        let w = vec![1.0 / n as f64; n];
        MixtureSpec::new(components, w)
    }

    pub fn dim(&self) -> usize {
        self.components[0].dim()
    }
}

/// KL divergence D_KL(q || p) between two diagonal Gaussians, summed over
/// dimensions:
///
/// sum_d 1/2 * [ log(var_p / var_q) + (var_q + (mu_q - mu_p)^2) / var_p - 1 ]
pub fn diag_gaussian_kl(q: &DiagGaussian, p: &DiagGaussian) -> Result<f64> {
    if q.dim() != p.dim() {
        return Err(Error::DimensionMismatch {
            op: "diag_gaussian_kl",
            left: q.dim(),
            right: p.dim(),
        });
    }
    let mut acc = 0.0;
    for i in 0..q.dim() {
        let log_ratio = p.log_var[i] - q.log_var[i];
        let var_ratio = (q.log_var[i] - p.log_var[i]).exp();
        let diff = q.mu[i] - p.mu[i];
        acc += 0.5 * (log_ratio + var_ratio + diff * diff * (-p.log_var[i]).exp() - 1.0);
    }
    Ok(acc)
}

/// Additive Gaussian mixing: combines n diagonal Gaussians into a single one
/// with mean sum_i w_i mu_i and variance prod_i var_i^{w_i}, i.e. a weighted
/// sum in log-variance space.
pub fn additive_mix(spec: &MixtureSpec) -> Result<DiagGaussian> {
    if spec.components.is_empty() {
        return Err(Error::contract("additive_mix", "empty component list"));
    }
    let dim = spec.dim();
    let mut mu = vec![0.0; dim];
    let mut log_var = vec![0.0; dim];
    for (component, &w) in spec.components.iter().zip(&spec.weights) {
        for d in 0..dim {
            mu[d] += w * component.mu[d];
            log_var[d] += w * component.log_var[d];
        }
    }
    DiagGaussian::new(mu, log_var)
}

/// Reparameterization: z = mu + exp(log_var / 2) * noise, elementwise.
pub fn reparameterize(d: &DiagGaussian, noise: &[f64]) -> Result<Vec<f64>> {
    if noise.len() != d.dim() {
        return Err(Error::DimensionMismatch {
            op: "reparameterize",
            left: noise.len(),
            right: d.dim(),
        });
    }
    Ok(d.mu
        .iter()
        .zip(&d.log_var)
        .zip(noise)
        .map(|((&m, &lv), &e)| m + (0.5 * lv).exp() * e)
        .collect())
}

/// The extreme minimum of sum_i KL(N(mu_i, sigma_i^2) || N(mu', sigma'^2))
/// over the prior parameters, for one scalar latent dimension shared by n
/// posteriors:
///
/// xi = (n/2) * log(1 + [sum_i (mu_i - mu_bar)^2 / n] / sigma_bar^2)
///
/// with mu_bar the mean of the mu_i and sigma_bar the arithmetic mean of the
/// sigma_i. Exact when all sigma_i are equal; an approximation otherwise.
/// Callers with vector latents apply this per dimension and sum.
pub fn xi_minimum(posterior_mus: &[f64], posterior_sigmas: &[f64]) -> Result<f64> {
    let n = posterior_mus.len();
    if n == 0 {
        return Err(Error::contract("xi_minimum", "n must be >= 1"));
    }
    if posterior_sigmas.len() != n {
        return Err(Error::DimensionMismatch {
            op: "xi_minimum",
            left: n,
            right: posterior_sigmas.len(),
        });
    }
    if posterior_sigmas.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::contract("xi_minimum", "all sigma_i must be > 0"));
    }
    let nf = n as f64;
    let mu_bar = posterior_mus.iter().sum::<f64>() / nf;
    let var_mu = posterior_mus
        .iter()
        .map(|&m| (m - mu_bar) * (m - mu_bar))
        .sum::<f64>()
        / nf;
    let sigma_bar = posterior_sigmas.iter().sum::<f64>() / nf;
    Ok(0.5 * nf * (1.0 + var_mu / (sigma_bar * sigma_bar)).ln())
}

/// Upper bound on [`xi_minimum`] valid when all contributing mu_i are
/// nonnegative:
///
/// eta = (n/2) * log(1 + (n-1) * (mu_bar / sigma_bar)^2)
///
/// The nonnegativity precondition is the caller's responsibility; it cannot
/// be checked from the summary statistics alone.
pub fn eta_bound(mu_bar: f64, sigma_bar: f64, n: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::contract("eta_bound", "n must be >= 1"));
    }
    if !(sigma_bar > 0.0) {
        return Err(Error::contract("eta_bound", "sigma_bar must be > 0"));
    }
    let nf = n as f64;
    let ratio = mu_bar / sigma_bar;
    Ok(0.5 * nf * (1.0 + (nf - 1.0) * ratio * ratio).ln())
}

/// Relaxed KL divergence: max(d_kl - eta/n, 0).
///
/// The KL penalty is switched off once the average divergence drops below
/// eta/n, instead of being pushed all the way to zero.
pub fn relaxed_kl(d_kl: f64, eta: f64, n: usize) -> f64 {
    debug_assert!(n >= 1, "relaxed_kl requires n >= 1");
    debug_assert!(d_kl >= 0.0 && eta >= 0.0, "relaxed_kl inputs are nonnegative");
    (d_kl - eta / n as f64).max(0.0)
}
