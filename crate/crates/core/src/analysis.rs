//! Posterior-distance study: trains a reconstruction-only conditional
//! variational transformer (posterior latent + decoder, no discrete table,
//! no learned prior network; the KL of the standard objective is taken
//! against N(0, I)) and tracks how far apart the posterior Gaussians of a
//! fixed probe batch sit, epoch by epoch.
//!
//! Two ways of building the sentence latent are compared: from a prepended
//! special-token state ("CLS" style, the begin token doubles as the marker)
//! and from additive mixing over the per-token distributions.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{DialoguePair, BEGIN_ID, SEP_ID};
use crate::error::{Error, Result};
use crate::model::{Forward, Model, ModelConfig};
use crate::tape::NodeId;
use crate::train::{anneal_weight, Adam};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatentVariant {
    ClsToken,
    AdditiveMixing,
}

impl std::str::FromStr for LatentVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cls_token" | "cls" => Ok(LatentVariant::ClsToken),
            "additive_mixing" | "mixing" => Ok(LatentVariant::AdditiveMixing),
            other => Err(Error::Config(format!(
                "variant must be 'cls_token' or 'additive_mixing', got '{other}'"
            ))),
        }
    }
}

/// Mean pairwise L1 distances over the probe batch after one epoch.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochDistances {
    pub epoch: usize,
    /// Mean over unordered pairs of |mu_i - mu_j|_1.
    pub mu_l1: f64,
    /// Mean over unordered pairs of |sigma^2_i - sigma^2_j|_1.
    pub var_l1: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DistanceTrace {
    pub variant: LatentVariant,
    /// One record per completed epoch.
    pub epochs: Vec<EpochDistances>,
}

#[derive(Debug, Clone)]
pub struct StudyConfig {
    pub subset_size: usize,
    pub epochs: usize,
    pub variant: LatentVariant,
    pub batch_size: usize,
    pub lr: f64,
    pub lambda_max: f64,
    pub seed: u64,
    /// Fixed probe batch size; the same examples are re-probed every epoch.
    pub probe_size: usize,
    pub model: ModelConfig,
}

impl StudyConfig {
    pub fn new(vocab_size: usize, variant: LatentVariant) -> Self {
        let mut model = ModelConfig::new(vocab_size);
        // Reconstruction-only CVAE: single branch, table frozen at zero.
        model.n_latents = 1;
        model.dlv_enabled = false;
        StudyConfig {
            subset_size: 2000,
            epochs: 10,
            variant,
            batch_size: 32,
            lr: 1e-3,
            lambda_max: 1.0,
            seed: 0,
            probe_size: 64,
            model,
        }
    }
}

/// The cls variant prepends a marker token to both passes, so pairs must be
/// fitted one position tighter than the raw window.
fn window_for(model: &Model, variant: LatentVariant) -> usize {
    match variant {
        LatentVariant::ClsToken => model.config.max_len - 1,
        LatentVariant::AdditiveMixing => model.config.max_len,
    }
}

/// Posterior (mu, log_var) nodes plus the context states for one pair under
/// the chosen latent construction. There is no prior network here; the
/// objective's KL is against N(0, I).
fn study_latents(
    model: &Model,
    fwd: &mut Forward,
    variant: LatentVariant,
    pair: &DialoguePair,
) -> Result<(NodeId, NodeId, NodeId)> {
    match variant {
        LatentVariant::AdditiveMixing => {
            // Joint pass context ++ [sep] ++ response; per-token recognition
            // distributions over the context positions, additively mixed.
            let joint = model.encode_joint(fwd, &pair.context_ids, &pair.response_ids)?;
            let joint_ctx = fwd.tape.slice_rows(joint.states, 0, joint.context_len);
            let (mus, lvs) = model.recognition_heads(fwd, joint_ctx);
            let (post_mu, post_lv) = model.sentence_latent(fwd, mus, lvs, joint_ctx, "mix.rec.w");
            let ctx = model.encode_context(fwd, &pair.context_ids)?;
            Ok((post_mu, post_lv, ctx.states))
        }
        LatentVariant::ClsToken => {
            // Joint pass [bos] ++ context ++ [sep] ++ response; the latent
            // comes from the heads applied to the bos state only.
            let mut joint_ids = vec![BEGIN_ID];
            joint_ids.extend_from_slice(&pair.context_ids);
            joint_ids.push(SEP_ID);
            joint_ids.extend_from_slice(&pair.response_ids);
            let mut joint_segs = vec![0usize; 1 + pair.context_ids.len()];
            joint_segs.resize(joint_ids.len(), 1);
            let joint = model.encode(fwd, &joint_ids, &joint_segs)?;
            let cls = fwd.tape.slice_rows(joint.states, 0, 1);
            let (post_mu, post_lv) = model.recognition_heads(fwd, cls);

            let mut ctx_ids = vec![BEGIN_ID];
            ctx_ids.extend_from_slice(&pair.context_ids);
            let ctx = model.encode_context(fwd, &ctx_ids)?;
            Ok((post_mu, post_lv, ctx.states))
        }
    }
}

/// Mean over unordered pairs of rows of the summed absolute difference.
/// d(i, i) = 0 and d(i, j) = d(j, i) by construction, so only i < j is
/// visited.
pub fn mean_pairwise_l1(rows: &[Vec<f64>]) -> f64 {
    let n = rows.len();
    if n < 2 {
        return 0.0;
    }
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..n {
        for j in (i + 1)..n {
            total += rows[i]
                .iter()
                .zip(&rows[j])
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>();
            pairs += 1;
        }
    }
    total / pairs as f64
}

/// Posterior (mu, sigma^2) of every probe example in eval mode.
pub fn probe_posteriors(
    model: &Model,
    variant: LatentVariant,
    probe: &[DialoguePair],
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let mut mus = Vec::with_capacity(probe.len());
    let mut vars = Vec::with_capacity(probe.len());
    for pair in probe {
        let (pair, _) = pair.fit_to_max_len(window_for(model, variant));
        let mut fwd = Forward::eval(&model.params);
        let (mu, lv, _) = study_latents(model, &mut fwd, variant, &pair)?;
        mus.push(fwd.tape.value(mu).row(0).to_vec());
        vars.push(fwd.tape.value(lv).row(0).iter().map(|v| v.exp()).collect());
    }
    Ok((mus, vars))
}

/// Runs the study: deterministic subset draw, epoch loop of reconstruction
/// + annealed-KL training, and a fixed-probe distance record per epoch.
pub fn posterior_distance_study(
    pairs: &[DialoguePair],
    config: &StudyConfig,
) -> Result<DistanceTrace> {
    if config.subset_size > pairs.len() {
        return Err(Error::contract(
            "posterior_distance_study",
            format!(
                "subset_size {} exceeds corpus size {}",
                config.subset_size,
                pairs.len()
            ),
        ));
    }
    if config.epochs == 0 {
        return Err(Error::contract("posterior_distance_study", "epochs must be >= 1"));
    }
    let mut model_config = config.model.clone();
    model_config.n_latents = 1;
    model_config.dlv_enabled = false;
    model_config.clv_enabled = true;
    let mut model = Model::new(model_config, config.seed)?;

    let mut rng = ChaCha12Rng::seed_from_u64(config.seed);
    let mut indices: Vec<usize> = (0..pairs.len()).collect();
    indices.shuffle(&mut rng);
    let subset: Vec<DialoguePair> = indices[..config.subset_size]
        .iter()
        .map(|&i| pairs[i].clone())
        .collect();
    let probe: Vec<DialoguePair> = subset
        .iter()
        .take(config.probe_size.min(subset.len()))
        .cloned()
        .collect();

    let batch = config.batch_size.max(1).min(subset.len());
    let steps_per_epoch = subset.len().div_ceil(batch);
    let total_steps = (steps_per_epoch * config.epochs) as u64;
    let k_ann = (total_steps * 3 / 10).max(1);

    let mut adam = Adam::new(&model);
    let frozen = model.frozen_slots();
    let mut order: Vec<usize> = (0..subset.len()).collect();
    let mut step = 0u64;
    let mut epochs = Vec::with_capacity(config.epochs);
    let d = model.config.d_model;

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch) {
            let lambda = anneal_weight(step, k_ann, config.lambda_max);
            let dropout_seed = rng.random::<u64>();
            let mut fwd = if model.config.dropout > 0.0 {
                Forward::train(&model.params, model.config.dropout, dropout_seed)
            } else {
                Forward::eval(&model.params)
            };
            let mut nll_nodes = Vec::with_capacity(chunk.len());
            let mut kl_nodes = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let (pair, _) = subset[i].fit_to_max_len(window_for(&model, config.variant));
                let (post_mu, post_lv, ctx_states) =
                    study_latents(&model, &mut fwd, config.variant, &pair)?;
                let std_mu = fwd.tape.constant(crate::tape::Mat::zeros((1, d)));
                let std_lv = fwd.tape.constant(crate::tape::Mat::zeros((1, d)));
                kl_nodes.push(model.kl_node(&mut fwd, post_mu, post_lv, std_mu, std_lv));
                let noise: Vec<f64> = (0..d)
                    .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
                    .collect();
                let z = model.reparameterize_node(&mut fwd, post_mu, post_lv, &noise);
                let memory = fwd.tape.add_row_broadcast(ctx_states, z);
                let decoded = model.decode_logprob(&mut fwd, memory, &pair.response_ids)?;
                nll_nodes.push(fwd.tape.scale(decoded.total_log_prob, -1.0));
            }
            let scale = 1.0 / chunk.len() as f64;
            let mut nll = nll_nodes[0];
            for &node in &nll_nodes[1..] {
                nll = fwd.tape.add(nll, node);
            }
            let nll = fwd.tape.scale(nll, scale);
            let mut kl = kl_nodes[0];
            for &node in &kl_nodes[1..] {
                kl = fwd.tape.add(kl, node);
            }
            let kl = fwd.tape.scale(kl, scale * lambda);
            let loss = fwd.tape.add(nll, kl);
            let loss_value = fwd.tape.scalar(loss);
            if !loss_value.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step,
                    j_ent: fwd.tape.scalar(nll),
                    d_kl: fwd.tape.scalar(kl),
                    last_checkpoint: None,
                });
            }
            let grads = fwd.tape.backward(loss, model.params.len());
            adam.step(&mut model, &grads, config.lr, &frozen);
            step += 1;
        }

        let (mus, vars) = probe_posteriors(&model, config.variant, &probe)?;
        epochs.push(EpochDistances {
            epoch,
            mu_l1: mean_pairwise_l1(&mus),
            var_l1: mean_pairwise_l1(&vars),
        });
    }

    Ok(DistanceTrace {
        variant: config.variant,
        epochs,
    })
}

/// One JSON record per epoch.
pub fn save_trace(trace: &DistanceTrace, path: &Path) -> Result<()> {
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for record in &trace.epochs {
        let line = serde_json::json!({
            "variant": trace.variant,
            "epoch": record.epoch,
            "mu_l1": record.mu_l1,
            "var_l1": record.var_l1,
        });
        writeln!(file, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Two-panel SVG line plot: mu distances on the left, sigma^2 distances on
/// the right.
pub fn write_trace_svg(trace: &DistanceTrace, path: &Path) -> Result<()> {
    const W: f64 = 380.0;
    const H: f64 = 280.0;
    const PAD: f64 = 42.0;

    let panel = |values: &[f64], x0: f64, title: &str| -> String {
        let max = values.iter().cloned().fold(f64::MIN, f64::max).max(1e-12);
        let n = values.len().max(2);
        let px = |i: usize| x0 + PAD + (W - 2.0 * PAD) * i as f64 / (n - 1) as f64;
        let py = |v: f64| H - PAD - (H - 2.0 * PAD) * (v / max);
        let points: Vec<String> = values
            .iter()
            .enumerate()
            .map(|(i, &v)| format!("{:.2},{:.2}", px(i), py(v)))
            .collect();
        format!(
            concat!(
                "<rect x=\"{x}\" y=\"{y}\" width=\"{w}\" height=\"{h}\" fill=\"none\" stroke=\"#999\"/>",
                "<text x=\"{tx}\" y=\"{ty}\" font-size=\"13\" text-anchor=\"middle\">{title}</text>",
                "<text x=\"{lx}\" y=\"{ly}\" font-size=\"10\" text-anchor=\"end\">{max:.3}</text>",
                "<text x=\"{lx}\" y=\"{by}\" font-size=\"10\" text-anchor=\"end\">0</text>",
                "<polyline fill=\"none\" stroke=\"#2266cc\" stroke-width=\"1.5\" points=\"{pts}\"/>"
            ),
            x = x0 + PAD,
            y = PAD,
            w = W - 2.0 * PAD,
            h = H - 2.0 * PAD,
            tx = x0 + W / 2.0,
            ty = PAD - 12.0,
            title = title,
            lx = x0 + PAD - 4.0,
            ly = PAD + 4.0,
            max = max,
            by = H - PAD,
            pts = points.join(" "),
        )
    };

    let mu: Vec<f64> = trace.epochs.iter().map(|e| e.mu_l1).collect();
    let var: Vec<f64> = trace.epochs.iter().map(|e| e.var_l1).collect();
    let variant = match trace.variant {
        LatentVariant::ClsToken => "cls_token",
        LatentVariant::AdditiveMixing => "additive_mixing",
    };
    let svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{}\" height=\"{}\">{}{}<text x=\"{}\" y=\"{}\" font-size=\"11\" text-anchor=\"middle\">pairwise L1 by epoch ({})</text></svg>",
        2.0 * W,
        H + 20.0,
        panel(&mu, 0.0, "mu distance"),
        panel(&var, W, "sigma^2 distance"),
        W,
        H + 14.0,
        variant,
    );
    fs::write(path, svg).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(ctx: &[usize], resp: &[usize]) -> DialoguePair {
        DialoguePair {
            context_ids: ctx.to_vec(),
            response_ids: resp.to_vec(),
            raw_context: String::new(),
            raw_response: String::new(),
        }
    }

    /// Deterministic toy corpus of short id sequences over a 30-token vocab.
    fn toy_corpus(n: usize, seed: u64) -> Vec<DialoguePair> {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let cl = 2 + rng.random_range(0..4usize);
                let rl = 1 + rng.random_range(0..4usize);
                let ctx: Vec<usize> = (0..cl).map(|_| 5 + rng.random_range(0..25usize)).collect();
                let resp: Vec<usize> = (0..rl).map(|_| 5 + rng.random_range(0..25usize)).collect();
                pair(&ctx, &resp)
            })
            .collect()
    }

    fn tiny_study(variant: LatentVariant) -> StudyConfig {
        let mut config = StudyConfig::new(30, variant);
        config.model.d_model = 16;
        config.model.d_z = 16;
        config.model.d_ff = 32;
        config.model.n_heads = 2;
        config.model.n_layers_enc = 1;
        config.model.n_layers_dec = 1;
        config.model.max_len = 16;
        config.model.dropout = 0.0;
        config.subset_size = 48;
        config.epochs = 3;
        config.batch_size = 16;
        config.probe_size = 16;
        config
    }

    #[test]
    fn pairwise_l1_hand_values() {
        let rows = vec![vec![0.0, 0.0], vec![1.0, 2.0], vec![3.0, 0.0]];
        // d(0,1) = 3, d(0,2) = 3, d(1,2) = 4 -> mean 10/3
        assert!((mean_pairwise_l1(&rows) - 10.0 / 3.0).abs() < 1e-12);
        assert_eq!(mean_pairwise_l1(&rows[..1]), 0.0);
        // Symmetry: reversing the row order changes nothing.
        let mut rev = rows.clone();
        rev.reverse();
        assert_eq!(mean_pairwise_l1(&rows), mean_pairwise_l1(&rev));
    }

    #[test]
    fn trace_has_one_record_per_epoch() {
        let corpus = toy_corpus(60, 1);
        let config = tiny_study(LatentVariant::AdditiveMixing);
        let trace = posterior_distance_study(&corpus, &config).unwrap();
        assert_eq!(trace.epochs.len(), 3);
        for (i, e) in trace.epochs.iter().enumerate() {
            assert_eq!(e.epoch, i + 1);
            assert!(e.mu_l1 >= 0.0 && e.var_l1 >= 0.0);
        }
    }

    #[test]
    fn oversized_subset_rejected() {
        let corpus = toy_corpus(10, 2);
        let mut config = tiny_study(LatentVariant::ClsToken);
        config.subset_size = 100;
        assert!(posterior_distance_study(&corpus, &config).is_err());
    }

    #[test]
    fn zero_initialized_heads_probe_to_zero_distance() {
        let config = tiny_study(LatentVariant::AdditiveMixing);
        let mut model_config = config.model.clone();
        model_config.n_latents = 1;
        model_config.dlv_enabled = false;
        let mut model = Model::new(model_config, 3).unwrap();
        model.params.get_mut("rec.w_d").fill(0.0);
        model.params.get_mut("rec.w_u").fill(0.0);
        let probe = toy_corpus(8, 4);
        let (mus, vars) =
            probe_posteriors(&model, LatentVariant::AdditiveMixing, &probe).unwrap();
        assert_eq!(mean_pairwise_l1(&mus), 0.0);
        assert_eq!(mean_pairwise_l1(&vars), 0.0);
    }

    #[test]
    fn cls_variant_runs_and_probes() {
        let corpus = toy_corpus(60, 5);
        let config = tiny_study(LatentVariant::ClsToken);
        let trace = posterior_distance_study(&corpus, &config).unwrap();
        assert_eq!(trace.epochs.len(), 3);
    }

    #[test]
    fn trace_files_round_trip_and_svg_is_well_formed() {
        let dir = tempfile::tempdir().unwrap();
        let trace = DistanceTrace {
            variant: LatentVariant::AdditiveMixing,
            epochs: vec![
                EpochDistances { epoch: 1, mu_l1: 0.5, var_l1: 0.9 },
                EpochDistances { epoch: 2, mu_l1: 0.7, var_l1: 0.4 },
            ],
        };
        let jsonl = dir.path().join("trace.jsonl");
        save_trace(&trace, &jsonl).unwrap();
        let text = std::fs::read_to_string(&jsonl).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert!(text.contains("\"var_l1\""));

        let svg_path = dir.path().join("trace.svg");
        write_trace_svg(&trace, &svg_path).unwrap();
        let svg = std::fs::read_to_string(&svg_path).unwrap();
        assert!(svg.starts_with("<svg"));
        assert!(svg.contains("polyline"));
        assert!(svg.ends_with("</svg>"));
    }
}
