//! The optimization loop: self-separation over the K discrete branches,
//! KL annealing, and the relaxed KL with its batch-mean eta estimate.
//!
//! One training step builds a single tape over the whole batch. Each example
//! contributes the cross-entropy of its best branch only (gradients flow
//! nowhere else by construction) plus one KL between its sentence-level
//! posterior and prior mixtures. There is deliberately no bag-of-words
//! auxiliary loss.

use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::DialoguePair;
use crate::error::{Error, Result};
use crate::latent::{eta_bound, relaxed_kl};
use crate::model::{Forward, Model};
use crate::tape::{Mat, NodeId, Tape};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlMode {
    Vanilla,
    Relaxed,
}

impl std::str::FromStr for KlMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vanilla" => Ok(KlMode::Vanilla),
            "relaxed" => Ok(KlMode::Relaxed),
            other => Err(Error::Config(format!(
                "kl mode must be 'vanilla' or 'relaxed', got '{other}'"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// KL annealing horizon in steps; lambda ramps linearly from 0 to
    /// `lambda_max` over the first `k_ann` steps and stays there.
    pub k_ann: u64,
    pub lr: f64,
    pub max_steps: u64,
    pub kl_mode: KlMode,
    pub seed: u64,
    pub lambda_max: f64,
}

impl TrainConfig {
    pub fn new() -> Self {
        TrainConfig {
            batch_size: 8,
            k_ann: 20_000,
            lr: 1e-3,
            max_steps: 2_000,
            kl_mode: KlMode::Vanilla,
            seed: 0,
            lambda_max: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k_ann == 0 {
            return Err(Error::Config("k_ann must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.kl_mode == KlMode::Relaxed && self.batch_size < 2 {
            return Err(Error::Config(
                "relaxed KL needs batch_size >= 2 for the batch-mean eta".into(),
            ));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config("lr must be positive".into()));
        }
        if self.max_steps == 0 {
            return Err(Error::Config("max_steps must be >= 1".into()));
        }
        if !(0.0..=f64::MAX).contains(&self.lambda_max) {
            return Err(Error::Config("lambda_max must be nonnegative".into()));
        }
        Ok(())
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::new()
    }
}

/// Per-step diagnostics, one record per line in the step log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    /// Mean over the batch of the selected branch's cross-entropy.
    pub j_ent: f64,
    /// Mean over the batch of the posterior-prior KL.
    pub d_kl: f64,
    /// max(d_kl - eta/b, 0); equals the optimized KL term under relaxed mode.
    pub d_rkl: f64,
    pub lambda: f64,
    /// How many examples in the batch selected each branch.
    pub selected_branch_histogram: Vec<u64>,
}

/// Minimum loss and its branch index; ties break to the lowest index.
pub fn self_separation(branch_losses: &[f64]) -> Result<(f64, usize)> {
    if branch_losses.is_empty() {
        return Err(Error::contract("self_separation", "no branches"));
    }
    if let Some(bad) = branch_losses.iter().find(|l| !l.is_finite()) {
        return Err(Error::contract(
            "self_separation",
            format!("non-finite branch loss {bad}"),
        ));
    }
    let mut best = 0usize;
    for (i, &loss) in branch_losses.iter().enumerate() {
        if loss < branch_losses[best] {
            best = i;
        }
    }
    Ok((branch_losses[best], best))
}

/// Linear KL annealing: min(step / k_ann, 1) * lambda_max.
pub fn anneal_weight(step: u64, k_ann: u64, lambda_max: f64) -> f64 {
    let ramp = (step as f64 / k_ann as f64).min(1.0);
    ramp * lambda_max
}

/// Batch-mean eta: per latent dimension, eta_bound(mean mu, mean sigma, b),
/// summed over dimensions. Used as a constant threshold (no gradient).
pub fn batch_eta(posterior_mus: &Mat, posterior_sigmas: &Mat) -> Result<f64> {
    let b = posterior_mus.nrows();
    if b < 2 {
        return Err(Error::contract("batch_eta", "needs a batch of at least 2"));
    }
    if posterior_sigmas.raw_dim() != posterior_mus.raw_dim() {
        return Err(Error::DimensionMismatch {
            op: "batch_eta",
            left: posterior_mus.len(),
            right: posterior_sigmas.len(),
        });
    }
    let bf = b as f64;
    let mut total = 0.0;
    for d in 0..posterior_mus.ncols() {
        let mu_bar = posterior_mus.column(d).sum() / bf;
        let sigma_bar = posterior_sigmas.column(d).sum() / bf;
        total += eta_bound(mu_bar, sigma_bar, b)?;
    }
    Ok(total)
}

/// Inputs to one batch forward, fully determined so the same loss can be
/// rebuilt (e.g. under parameter perturbation for finite differences).
pub struct BatchPlan {
    /// Fitted to the model window by the caller or here, per example.
    pub pairs: Vec<DialoguePair>,
    /// One reparameterization noise row per example (ignored with CLV off).
    pub noises: Vec<Vec<f64>>,
    pub lambda: f64,
    pub kl_mode: KlMode,
    /// `Some(seed)` enables dropout with that mask stream; `None` runs the
    /// forward deterministically without dropout.
    pub dropout_seed: Option<u64>,
}

/// Forward results for one batch: the tape (backward-ready), the scalar loss
/// node, and the detached diagnostics.
pub struct BatchOutcome {
    pub tape: Tape,
    pub loss: NodeId,
    pub j_ent: f64,
    pub d_kl: f64,
    pub d_rkl: f64,
    pub eta: f64,
    pub selected: Vec<usize>,
}

/// Builds the full training objective for one batch on a single tape:
///
/// loss = mean_b(min_j -log p(r | c, L[j])) + lambda * KL-term
///
/// where the KL-term is the batch-mean posterior-prior KL (vanilla) or its
/// relaxed form max(mean KL - eta/b, 0) with eta treated as a constant.
pub fn batch_forward(model: &Model, plan: &BatchPlan) -> Result<BatchOutcome> {
    if plan.pairs.is_empty() {
        return Err(Error::contract("batch_forward", "empty batch"));
    }
    if plan.kl_mode == KlMode::Relaxed && plan.pairs.len() < 2 && model.config.clv_enabled {
        return Err(Error::contract(
            "batch_forward",
            "relaxed KL needs at least 2 examples",
        ));
    }
    let d = model.config.d_model;
    let k = model.config.n_latents;
    let b = plan.pairs.len();
    let clv = model.config.clv_enabled;

    let mut fwd = match plan.dropout_seed {
        Some(seed) if model.config.dropout > 0.0 => {
            Forward::train(&model.params, model.config.dropout, seed)
        }
        _ => Forward::eval(&model.params),
    };

    let mut selected_nodes: Vec<NodeId> = Vec::with_capacity(b);
    let mut kl_nodes: Vec<NodeId> = Vec::with_capacity(b);
    let mut selected = Vec::with_capacity(b);
    let mut post_mus = Mat::zeros((b, d));
    let mut post_sigmas = Mat::zeros((b, d));

    for (i, raw_pair) in plan.pairs.iter().enumerate() {
        let (pair, _) = raw_pair.fit_to_max_len(model.config.max_len);
        let (z, context_states) = if clv {
            let lp = model.latent_pair(&mut fwd, &pair.context_ids, &pair.response_ids)?;
            let kl = model.kl_node(
                &mut fwd,
                lp.posterior_mu,
                lp.posterior_log_var,
                lp.prior_mu,
                lp.prior_log_var,
            );
            kl_nodes.push(kl);
            for dd in 0..d {
                post_mus[[i, dd]] = fwd.tape.value(lp.posterior_mu)[[0, dd]];
                post_sigmas[[i, dd]] =
                    (0.5 * fwd.tape.value(lp.posterior_log_var)[[0, dd]]).exp();
            }
            let noise = plan.noises.get(i).ok_or_else(|| {
                Error::contract("batch_forward", "missing noise row for example")
            })?;
            let z = model.reparameterize_node(&mut fwd, lp.posterior_mu, lp.posterior_log_var, noise);
            (z, lp.context_states)
        } else {
            let ctx = model.encode_context(&mut fwd, &pair.context_ids)?;
            let z = fwd.tape.constant(Mat::zeros((1, d)));
            (z, ctx.states)
        };

        let latents = model.hlv_node(&mut fwd, z);
        let mut branch_nodes = Vec::with_capacity(k);
        let mut branch_losses = Vec::with_capacity(k);
        for j in 0..k {
            let memory = model.contextual_memory(&mut fwd, context_states, latents, j);
            let decoded = model.decode_logprob(&mut fwd, memory, &pair.response_ids)?;
            let loss_node = fwd.tape.scale(decoded.total_log_prob, -1.0);
            branch_losses.push(fwd.tape.scalar(loss_node));
            branch_nodes.push(loss_node);
        }
        let (_, best) = self_separation(&branch_losses)?;
        selected.push(best);
        selected_nodes.push(branch_nodes[best]);
    }

    let sum_selected = sum_nodes(&mut fwd.tape, &selected_nodes);
    let j_term = fwd.tape.scale(sum_selected, 1.0 / b as f64);
    let j_ent = fwd.tape.scalar(j_term);

    let (loss, d_kl, d_rkl, eta) = if clv {
        let sum_kl = sum_nodes(&mut fwd.tape, &kl_nodes);
        let mean_kl = fwd.tape.scale(sum_kl, 1.0 / b as f64);
        let d_kl = fwd.tape.scalar(mean_kl);
        let eta = if b >= 2 {
            batch_eta(&post_mus, &post_sigmas)?
        } else {
            0.0
        };
        let d_rkl = relaxed_kl(d_kl.max(0.0), eta, b);
        let kl_term = match plan.kl_mode {
            KlMode::Vanilla => mean_kl,
            KlMode::Relaxed => {
                let threshold = eta / b as f64;
                if d_kl > threshold {
                    // Shift by the constant threshold: gradient 1 w.r.t. the
                    // mean KL in the active region.
                    fwd.tape.affine(mean_kl, 1.0, -threshold)
                } else {
                    // Clamped: the KL term contributes no gradient.
                    fwd.tape.scalar_const(0.0)
                }
            }
        };
        let weighted = fwd.tape.scale(kl_term, plan.lambda);
        (fwd.tape.add(j_term, weighted), d_kl, d_rkl, eta)
    } else {
        (j_term, 0.0, 0.0, 0.0)
    };

    Ok(BatchOutcome {
        tape: fwd.tape,
        loss,
        j_ent,
        d_kl,
        d_rkl,
        eta,
        selected,
    })
}

fn sum_nodes(tape: &mut Tape, nodes: &[NodeId]) -> NodeId {
    let mut acc = nodes[0];
    for &n in &nodes[1..] {
        acc = tape.add(acc, n);
    }
    acc
}

/// Adam with bias correction and linear learning-rate warmup.
#[derive(Debug)]
pub struct Adam {
    m: Vec<Mat>,
    v: Vec<Mat>,
    t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(model: &Model) -> Self {
        let zeros: Vec<Mat> = (0..model.params.len())
            .map(|i| Mat::zeros(model.params.value(i).raw_dim()))
            .collect();
        Adam {
            m: zeros.clone(),
            v: zeros,
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step(
        &mut self,
        model: &mut Model,
        grads: &[Option<Mat>],
        lr: f64,
        frozen: &[usize],
    ) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (slot, grad) in grads.iter().enumerate() {
            let Some(g) = grad else { continue };
            if frozen.contains(&slot) {
                continue;
            }
            let m = &mut self.m[slot];
            let v = &mut self.v[slot];
            let p = model.params.value_mut(slot);
            for ((pv, gv), (mv, vv)) in p
                .iter_mut()
                .zip(g.iter())
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                let m_hat = *mv / bc1;
                let v_hat = *vv / bc2;
                *pv -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

/// Owns the model and optimizer state for a run; one logical writer.
pub struct Trainer {
    pub model: Model,
    pub config: TrainConfig,
    adam: Adam,
    rng: ChaCha12Rng,
    data: Vec<DialoguePair>,
    order: Vec<usize>,
    cursor: usize,
    pub step: u64,
    frozen: Vec<usize>,
    pub last_checkpoint: Option<PathBuf>,
}

impl Trainer {
    pub fn new(model: Model, data: Vec<DialoguePair>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if data.is_empty() {
            return Err(Error::contract("Trainer::new", "empty training set"));
        }
        let adam = Adam::new(&model);
        let frozen = model.frozen_slots();
        Ok(Trainer {
            model,
            config,
            adam,
            rng: ChaCha12Rng::seed_from_u64(config.seed),
            data,
            order: Vec::new(),
            cursor: 0,
            step: 0,
            frozen,
            last_checkpoint: None,
        })
    }

    /// Next batch of example indices, reshuffling at epoch boundaries.
    fn next_batch_indices(&mut self) -> Vec<usize> {
        let b = self.config.batch_size.min(self.data.len());
        let mut batch = Vec::with_capacity(b);
        while batch.len() < b {
            if self.cursor >= self.order.len() {
                self.order = (0..self.data.len()).collect();
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            batch.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        batch
    }

    /// Warmed-up learning rate for the current step (linear over the first
    /// 5% of max_steps).
    fn lr_at(&self, step: u64) -> f64 {
        let warmup = (self.config.max_steps / 20).max(1);
        let ramp = ((step + 1) as f64 / warmup as f64).min(1.0);
        self.config.lr * ramp
    }

    /// Runs one optimization step on the next batch.
    pub fn step_once(&mut self) -> Result<StepMetrics> {
        let indices = self.next_batch_indices();
        let pairs: Vec<DialoguePair> = indices.iter().map(|&i| self.data[i].clone()).collect();
        let d = self.model.config.d_model;
        let noises: Vec<Vec<f64>> = (0..pairs.len())
            .map(|_| {
                (0..d)
                    .map(|_| self.rng.sample::<f64, _>(rand_distr::StandardNormal))
                    .collect()
            })
            .collect();
        let dropout_seed = self.rng.random::<u64>();
        let lambda = anneal_weight(self.step, self.config.k_ann, self.config.lambda_max);
        let plan = BatchPlan {
            pairs,
            noises,
            lambda,
            kl_mode: self.config.kl_mode,
            dropout_seed: Some(dropout_seed),
        };
        let mut outcome = batch_forward(&self.model, &plan)?;
        let loss_value = outcome.tape.scalar(outcome.loss);
        if !loss_value.is_finite() || !outcome.j_ent.is_finite() || !outcome.d_kl.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: self.step,
                j_ent: outcome.j_ent,
                d_kl: outcome.d_kl,
                last_checkpoint: self.last_checkpoint.clone(),
            });
        }
        let grads = outcome.tape.backward(outcome.loss, self.model.params.len());
        let lr = self.lr_at(self.step);
        self.adam.step(&mut self.model, &grads, lr, &self.frozen);

        let mut histogram = vec![0u64; self.model.config.n_latents];
        for &j in &outcome.selected {
            histogram[j] += 1;
        }
        let metrics = StepMetrics {
            step: self.step,
            j_ent: outcome.j_ent,
            d_kl: outcome.d_kl,
            d_rkl: outcome.d_rkl,
            lambda,
            selected_branch_histogram: histogram,
        };
        self.step += 1;
        Ok(metrics)
    }
}
