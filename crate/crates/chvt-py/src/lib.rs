//! Python bindings for the latent algebra, training primitives and
//! text metrics. Vector arguments are plain Python lists of floats.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use chvt::corpus;
use chvt::latent::{self, DiagGaussian, MixtureSpec};
use chvt::metrics;
use chvt::oracle;
use chvt::train;

fn err<T>(result: chvt::Result<T>) -> PyResult<T> {
    result.map_err(|e| PyValueError::new_err(e.to_string()))
}

/// KL divergence between two diagonal Gaussians given as (mu, log_var)
/// vectors.
#[pyfunction]
fn diag_gaussian_kl(
    mu_q: Vec<f64>,
    log_var_q: Vec<f64>,
    mu_p: Vec<f64>,
    log_var_p: Vec<f64>,
) -> PyResult<f64> {
    let q = err(DiagGaussian::new(mu_q, log_var_q))?;
    let p = err(DiagGaussian::new(mu_p, log_var_p))?;
    err(latent::diag_gaussian_kl(&q, &p))
}

/// Additive Gaussian mixing; weights default to uniform. Returns the mixed
/// (mu, log_var).
#[pyfunction]
#[pyo3(signature = (mus, log_vars, weights=None))]
fn additive_mix(
    mus: Vec<Vec<f64>>,
    log_vars: Vec<Vec<f64>>,
    weights: Option<Vec<f64>>,
) -> PyResult<(Vec<f64>, Vec<f64>)> {
    if mus.len() != log_vars.len() {
        return Err(PyValueError::new_err("mus and log_vars must align"));
    }
    let components: chvt::Result<Vec<DiagGaussian>> = mus
        .into_iter()
        .zip(log_vars)
        .map(|(m, lv)| DiagGaussian::new(m, lv))
        .collect();
    let components = err(components)?;
    let spec = match weights {
        Some(w) => err(MixtureSpec::new(components, w))?,
        None => err(MixtureSpec::uniform(components))?,
    };
    let mixed = err(latent::additive_mix(&spec))?;
    Ok((mixed.mu, mixed.log_var))
}

/// z = mu + exp(log_var / 2) * noise.
#[pyfunction]
fn reparameterize(mu: Vec<f64>, log_var: Vec<f64>, noise: Vec<f64>) -> PyResult<Vec<f64>> {
    let d = err(DiagGaussian::new(mu, log_var))?;
    err(latent::reparameterize(&d, &noise))
}

/// Closed-form extreme minimum of the summed posterior-to-prior KL for one
/// scalar latent dimension.
#[pyfunction]
fn xi_minimum(posterior_mus: Vec<f64>, posterior_sigmas: Vec<f64>) -> PyResult<f64> {
    err(latent::xi_minimum(&posterior_mus, &posterior_sigmas))
}

/// Upper bound (n/2) log(1 + (n-1)(mu_bar/sigma_bar)^2).
#[pyfunction]
fn eta_bound(mu_bar: f64, sigma_bar: f64, n: usize) -> PyResult<f64> {
    err(latent::eta_bound(mu_bar, sigma_bar, n))
}

/// max(d_kl - eta/n, 0).
#[pyfunction]
fn relaxed_kl(d_kl: f64, eta: f64, n: usize) -> f64 {
    latent::relaxed_kl(d_kl, eta, n)
}

/// Monte-Carlo KL estimate; returns (estimate, standard_error).
#[pyfunction]
fn mc_kl_oracle(
    mu_q: Vec<f64>,
    log_var_q: Vec<f64>,
    mu_p: Vec<f64>,
    log_var_p: Vec<f64>,
    samples: usize,
    seed: u64,
) -> PyResult<(f64, f64)> {
    let q = err(DiagGaussian::new(mu_q, log_var_q))?;
    let p = err(DiagGaussian::new(mu_p, log_var_p))?;
    let estimate = oracle::mc_kl_oracle(&q, &p, samples, seed);
    Ok((estimate.estimate, estimate.std_error))
}

/// (minimum loss, branch index), ties to the lowest index.
#[pyfunction]
fn self_separation(branch_losses: Vec<f64>) -> PyResult<(f64, usize)> {
    err(train::self_separation(&branch_losses))
}

/// Linear KL annealing weight.
#[pyfunction]
fn anneal_weight(step: u64, k_ann: u64, lambda_max: f64) -> f64 {
    train::anneal_weight(step, k_ann, lambda_max)
}

/// Unique n-grams over total n-grams across responses (whitespace tokens).
#[pyfunction]
fn distinct_n(responses: Vec<String>, n: usize) -> f64 {
    metrics::distinct_n(&responses, n)
}

/// Corpus BLEU-n with one reference per hypothesis.
#[pyfunction]
fn bleu_n(hypotheses: Vec<String>, references: Vec<String>, n: usize) -> f64 {
    metrics::bleu_n(&hypotheses, &references, n)
}

/// Lowercase + punctuation-splitting + whitespace tokenization.
#[pyfunction]
fn normalize_tokens(text: &str) -> Vec<String> {
    corpus::normalize_tokens(text)
}

/// Token table built from (context, response) training pairs.
#[pyclass(name = "Vocab")]
struct PyVocab {
    inner: corpus::Vocab,
}

#[pymethods]
impl PyVocab {
    #[staticmethod]
    #[pyo3(signature = (pairs, max_size=20000))]
    fn build(pairs: Vec<(String, String)>, max_size: usize) -> PyVocab {
        PyVocab {
            inner: corpus::build_vocab(&pairs, max_size),
        }
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn tokenize(&self, text: &str) -> PyResult<Vec<usize>> {
        err(corpus::tokenize(text, &self.inner))
    }

    fn detokenize(&self, ids: Vec<usize>) -> String {
        corpus::detokenize(&ids, &self.inner)
    }

    fn id(&self, token: &str) -> usize {
        self.inner.id(token)
    }

    fn token(&self, id: usize) -> String {
        self.inner.token(id).to_string()
    }
}

#[pymodule]
fn chvt_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(diag_gaussian_kl, m)?)?;
    m.add_function(wrap_pyfunction!(additive_mix, m)?)?;
    m.add_function(wrap_pyfunction!(reparameterize, m)?)?;
    m.add_function(wrap_pyfunction!(xi_minimum, m)?)?;
    m.add_function(wrap_pyfunction!(eta_bound, m)?)?;
    m.add_function(wrap_pyfunction!(relaxed_kl, m)?)?;
    m.add_function(wrap_pyfunction!(mc_kl_oracle, m)?)?;
    m.add_function(wrap_pyfunction!(self_separation, m)?)?;
    m.add_function(wrap_pyfunction!(anneal_weight, m)?)?;
    m.add_function(wrap_pyfunction!(distinct_n, m)?)?;
    m.add_function(wrap_pyfunction!(bleu_n, m)?)?;
    m.add_function(wrap_pyfunction!(normalize_tokens, m)?)?;
    m.add_class::<PyVocab>()?;
    Ok(())
}
