//! Inference: K-way response generation from the prior and inner-product
//! response selection.
//!
//! One sentence latent is sampled from the prior mixture and shared across
//! all K branches, mirroring training; branch diversity comes from the
//! discrete table, not from sampling noise. The response path is never
//! consulted: everything downstream of the context encoding is generated.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{detokenize, tokenize, Vocab, BEGIN_ID, END_ID, PAD_ID, SEP_ID};
use crate::error::{Error, Result};
use crate::latent::{reparameterize, DiagGaussian};
use crate::model::{Forward, HybridLatentSet, Model};
use crate::tape::Mat;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeMode {
    Greedy,
    TopKSampling,
}

impl std::str::FromStr for DecodeMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "greedy" => Ok(DecodeMode::Greedy),
            "top_k" | "top_k_sampling" => Ok(DecodeMode::TopKSampling),
            other => Err(Error::Config(format!(
                "decode mode must be 'greedy' or 'top_k', got '{other}'"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GenConfig {
    pub decode_mode: DecodeMode,
    pub top_k: usize,
    pub max_new_tokens: usize,
    pub seed: u64,
}

impl GenConfig {
    pub fn greedy(max_new_tokens: usize, seed: u64) -> Self {
        GenConfig {
            decode_mode: DecodeMode::Greedy,
            top_k: 1,
            max_new_tokens,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_new_tokens == 0 {
            return Err(Error::Config("max_new_tokens must be >= 1".into()));
        }
        if self.decode_mode == DecodeMode::TopKSampling && self.top_k == 0 {
            return Err(Error::Config("top_k must be >= 1 when sampling".into()));
        }
        Ok(())
    }
}

/// Greedy argmax with ties broken to the lowest index.
fn argmax(row: &[f64]) -> usize {
    let mut best = 0usize;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn sample_top_k(logits: &[f64], k: usize, rng: &mut ChaCha12Rng) -> usize {
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&a, &b| logits[b].partial_cmp(&logits[a]).unwrap().then(a.cmp(&b)));
    let kept = &order[..k.min(order.len())];
    let max = logits[kept[0]];
    let weights: Vec<f64> = kept.iter().map(|&i| (logits[i] - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut draw = rng.random::<f64>() * total;
    for (w, &i) in weights.iter().zip(kept) {
        draw -= w;
        if draw <= 0.0 {
            return i;
        }
    }
    kept[kept.len() - 1]
}

/// Decodes one response against a fixed contextual memory until the end
/// token or the token budget. The returned sequence includes the end token
/// when it was produced within budget.
fn decode_branch(
    model: &Model,
    memory: &Mat,
    gen: &GenConfig,
    rng: &mut ChaCha12Rng,
) -> Vec<usize> {
    let mut out: Vec<usize> = Vec::new();
    let mut prefix = vec![BEGIN_ID];
    while out.len() < gen.max_new_tokens {
        let mut fwd = Forward::eval(&model.params);
        let mem = fwd.tape.constant(memory.clone());
        let logits = model.decoder_logits(&mut fwd, mem, &prefix);
        let last = fwd.tape.value(logits).row(prefix.len() - 1).to_vec();
        let next = match gen.decode_mode {
            DecodeMode::Greedy => argmax(&last),
            DecodeMode::TopKSampling => sample_top_k(&last, gen.top_k, rng),
        };
        out.push(next);
        if next == END_ID {
            break;
        }
        prefix.push(next);
        if prefix.len() >= model.config.max_len {
            break;
        }
    }
    out
}

/// The prior mixture p(z_s | c) for a context, plus the context states.
fn prior_and_states(model: &Model, context_ids: &[usize]) -> Result<(DiagGaussian, Mat)> {
    let mut fwd = Forward::eval(&model.params);
    let ctx = model.encode_context(&mut fwd, context_ids)?;
    let (mu, lv) = model.prior_heads(&mut fwd, ctx.states);
    let (mu, lv) = model.sentence_latent(&mut fwd, mu, lv, ctx.states, "mix.prior.w");
    let prior = Model::gaussian_value(&fwd, mu, lv);
    let states = fwd.tape.value(ctx.states).clone();
    Ok((prior, states))
}

/// Generates K candidate responses for one context: sample z_s from the
/// prior mixture (zero when the continuous path is disabled), build the
/// hybrid latent set, and decode once per branch.
pub fn generate_k(model: &Model, context_ids: &[usize], gen: &GenConfig) -> Result<Vec<Vec<usize>>> {
    if context_ids.is_empty() {
        return Err(Error::contract("generate_k", "empty context"));
    }
    gen.validate()?;
    let (prior, states) = prior_and_states(model, context_ids)?;
    let mut rng = ChaCha12Rng::seed_from_u64(gen.seed);
    let z_s = if model.config.clv_enabled {
        let noise: Vec<f64> = (0..model.config.d_model)
            .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
            .collect();
        reparameterize(&prior, &noise)?
    } else {
        vec![0.0; model.config.d_model]
    };
    let hlv = HybridLatentSet::build(&z_s, model.params.get("latent.table"));
    let mut candidates = Vec::with_capacity(model.config.n_latents);
    for j in 0..model.config.n_latents {
        let mut memory = states.clone();
        for mut row in memory.rows_mut() {
            for (v, l) in row.iter_mut().zip(hlv.latents.row(j)) {
                *v += l;
            }
        }
        candidates.push(decode_branch(model, &memory, gen, &mut rng));
    }
    Ok(candidates)
}

/// Mask-aware mean over the non-pad rows of an encoder state matrix.
pub fn pool_representation(states: &Mat, mask: &[bool]) -> Result<Vec<f64>> {
    if states.nrows() != mask.len() {
        return Err(Error::DimensionMismatch {
            op: "pool_representation",
            left: states.nrows(),
            right: mask.len(),
        });
    }
    let kept: Vec<usize> = mask
        .iter()
        .enumerate()
        .filter_map(|(i, &m)| m.then_some(i))
        .collect();
    if kept.is_empty() {
        return Err(Error::contract("pool_representation", "all positions masked"));
    }
    let mut pooled = vec![0.0; states.ncols()];
    for &i in &kept {
        for (p, v) in pooled.iter_mut().zip(states.row(i)) {
            *p += v;
        }
    }
    for p in pooled.iter_mut() {
        *p /= kept.len() as f64;
    }
    Ok(pooled)
}

fn encode_and_pool(model: &Model, ids: &[usize]) -> Result<Vec<f64>> {
    let mut fwd = Forward::eval(&model.params);
    let out = model.encode_context(&mut fwd, ids)?;
    let states = fwd.tape.value(out.states);
    let mask = vec![true; states.nrows()];
    pool_representation(states, &mask)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Scores each candidate by the raw inner product of mean-pooled encoder
/// representations against the context and returns the best (ties to the
/// lowest index) together with all scores. Empty candidates score -inf.
pub fn select_response(
    model: &Model,
    context_ids: &[usize],
    candidates: &[Vec<usize>],
) -> Result<(Vec<usize>, Vec<f64>)> {
    if candidates.is_empty() {
        return Err(Error::contract("select_response", "no candidates"));
    }
    let context_vec = encode_and_pool(model, context_ids)?;
    let mut scores = Vec::with_capacity(candidates.len());
    for candidate in candidates {
        let content: Vec<usize> = candidate.iter().copied().filter(|&t| t != END_ID).collect();
        if content.is_empty() {
            scores.push(f64::NEG_INFINITY);
            continue;
        }
        let candidate_vec = encode_and_pool(model, &content)?;
        scores.push(dot(&context_vec, &candidate_vec));
    }
    let best = argmax(&scores);
    Ok((candidates[best].clone(), scores))
}

/// One line of the batch-generation output file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenRecord {
    pub context: String,
    pub candidates: Vec<String>,
    pub scores: Vec<f64>,
    pub selected: usize,
}

/// Strips reserved control tokens before detokenizing for output.
pub fn ids_to_text(ids: &[usize], vocab: &Vocab) -> String {
    let content: Vec<usize> = ids
        .iter()
        .copied()
        .filter(|&t| t != PAD_ID && t != BEGIN_ID && t != END_ID && t != SEP_ID)
        .collect();
    detokenize(&content, vocab)
}

/// Generates and selects for every context, seeded per record so the whole
/// file is reproducible.
pub fn generate_records(
    model: &Model,
    vocab: &Vocab,
    contexts: &[String],
    gen: &GenConfig,
) -> Result<Vec<GenRecord>> {
    let mut records = Vec::with_capacity(contexts.len());
    for (idx, context) in contexts.iter().enumerate() {
        let context_ids = tokenize(context, vocab)?;
        let (fitted, _) = crate::corpus::DialoguePair {
            context_ids,
            response_ids: vec![END_ID],
            raw_context: context.clone(),
            raw_response: String::new(),
        }
        .fit_to_max_len(model.config.max_len);
        let per_record = GenConfig {
            seed: gen
                .seed
                .wrapping_add((idx as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)),
            ..*gen
        };
        let candidates = generate_k(model, &fitted.context_ids, &per_record)?;
        let (_, scores) = select_response(model, &fitted.context_ids, &candidates)?;
        let selected = argmax(&scores);
        records.push(GenRecord {
            context: context.clone(),
            candidates: candidates.iter().map(|c| ids_to_text(c, vocab)).collect(),
            scores,
            selected,
        });
    }
    Ok(records)
}

/// Contexts come either as plain lines or as JSONL objects with a
/// `"context"` field, detected from the first non-empty line.
pub fn load_contexts(path: &Path) -> Result<Vec<String>> {
    #[derive(Deserialize)]
    struct Line {
        context: String,
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let json = matches!(
        text.lines().find(|l| !l.trim().is_empty()),
        Some(l) if l.trim_start().starts_with('{')
    );
    let mut contexts = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        if json {
            let parsed: Line = serde_json::from_str(line)?;
            contexts.push(parsed.context);
        } else {
            contexts.push(line.to_string());
        }
    }
    Ok(contexts)
}

pub fn save_records(records: &[GenRecord], path: &Path) -> Result<()> {
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for record in records {
        let line = serde_json::to_string(record)?;
        writeln!(file, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

pub fn load_records(path: &Path) -> Result<Vec<GenRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::DialoguePair;
    use crate::model::ModelConfig;
    use crate::train::{KlMode, TrainConfig, Trainer};

    fn tiny_model(k: usize, seed: u64) -> Model {
        let mut c = ModelConfig::new(24);
        c.d_model = 16;
        c.d_z = 16;
        c.d_ff = 32;
        c.n_heads = 2;
        c.n_layers_enc = 1;
        c.n_layers_dec = 1;
        c.n_latents = k;
        c.max_len = 16;
        c.dropout = 0.0;
        Model::new(c, seed).unwrap()
    }

    #[test]
    fn k_one_yields_one_response() {
        let model = tiny_model(1, 1);
        let out = generate_k(&model, &[5, 6], &GenConfig::greedy(6, 0)).unwrap();
        assert_eq!(out.len(), 1);
    }

    #[test]
    fn empty_context_rejected() {
        let model = tiny_model(2, 1);
        assert!(generate_k(&model, &[], &GenConfig::greedy(6, 0)).is_err());
    }

    #[test]
    fn greedy_generation_is_deterministic() {
        let model = tiny_model(3, 2);
        let gen = GenConfig::greedy(8, 42);
        let a = generate_k(&model, &[5, 6, 7], &gen).unwrap();
        let b = generate_k(&model, &[5, 6, 7], &gen).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn generation_respects_token_budget() {
        let model = tiny_model(2, 3);
        let gen = GenConfig::greedy(5, 0);
        for seq in generate_k(&model, &[5, 6], &gen).unwrap() {
            assert!(seq.len() <= 5);
            if seq.len() < 5 {
                assert_eq!(*seq.last().unwrap(), END_ID);
            }
        }
    }

    #[test]
    fn top_k_sampling_draws_from_the_head() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let logits = vec![0.0, 5.0, -1.0, 4.9];
        for _ in 0..50 {
            let pick = sample_top_k(&logits, 2, &mut rng);
            assert!(pick == 1 || pick == 3);
        }
    }

    #[test]
    fn pooling_single_token_is_identity() {
        let states = Mat::from_shape_vec((1, 3), vec![0.5, -1.0, 2.0]).unwrap();
        let pooled = pool_representation(&states, &[true]).unwrap();
        assert_eq!(pooled, vec![0.5, -1.0, 2.0]);
    }

    #[test]
    fn pooling_ignores_padding() {
        let real = Mat::from_shape_vec((2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let padded =
            Mat::from_shape_vec((4, 2), vec![1.0, 2.0, 3.0, 4.0, 9.0, 9.0, 9.0, 9.0]).unwrap();
        let a = pool_representation(&real, &[true, true]).unwrap();
        let b = pool_representation(&padded, &[true, true, false, false]).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, vec![2.0, 3.0]);
    }

    #[test]
    fn pooling_rejects_all_pad() {
        let states = Mat::zeros((2, 2));
        assert!(pool_representation(&states, &[false, false]).is_err());
    }

    #[test]
    fn select_single_candidate_returns_it() {
        let model = tiny_model(1, 5);
        let candidate = vec![7, 8, END_ID];
        let (best, scores) = select_response(&model, &[5, 6], &[candidate.clone()]).unwrap();
        assert_eq!(best, candidate);
        assert_eq!(scores.len(), 1);
    }

    #[test]
    fn select_breaks_ties_to_lowest_index() {
        let model = tiny_model(2, 5);
        let candidate = vec![7, 8];
        let (best, scores) =
            select_response(&model, &[5, 6], &[candidate.clone(), candidate.clone()]).unwrap();
        assert_eq!(best, candidate);
        assert_eq!(scores[0], scores[1]);
        assert_eq!(argmax(&scores), 0);
    }

    #[test]
    fn selection_is_consistent_with_returned_scores() {
        let model = tiny_model(3, 6);
        let candidates = vec![vec![7, 8], vec![9, 10, 11], vec![12]];
        let (best, scores) = select_response(&model, &[5, 6, 7], &candidates).unwrap();
        let best_idx = argmax(&scores);
        assert_eq!(best, candidates[best_idx]);
        // Re-scoring the winner against the same set returns the same index.
        let (again, scores2) = select_response(&model, &[5, 6, 7], &candidates).unwrap();
        assert_eq!(again, best);
        assert_eq!(scores, scores2);
    }

    #[test]
    fn branch_specialization_on_one_to_many_corpus() {
        // One context with three distinct memorizable responses; after
        // self-separation training the K = 3 branches must produce at least
        // two distinct outputs.
        let pair = |r: &[usize]| DialoguePair {
            context_ids: vec![5, 6, 7],
            response_ids: r.to_vec(),
            raw_context: String::new(),
            raw_response: String::new(),
        };
        let data = vec![
            pair(&[8, 9, 10]),
            pair(&[11, 12, 13]),
            pair(&[14, 15, 16]),
        ];
        let model = tiny_model(3, 11);
        let config = TrainConfig {
            batch_size: 3,
            k_ann: 120,
            lr: 3e-3,
            max_steps: 400,
            kl_mode: KlMode::Vanilla,
            seed: 4,
            lambda_max: 1.0,
        };
        let mut trainer = Trainer::new(model, data, config).unwrap();
        for _ in 0..400 {
            trainer.step_once().unwrap();
        }
        let outs = generate_k(&trainer.model, &[5, 6, 7], &GenConfig::greedy(6, 1)).unwrap();
        let distinct: std::collections::HashSet<_> = outs.iter().collect();
        assert!(
            distinct.len() >= 2,
            "branches failed to specialize: {outs:?}"
        );
    }

    #[test]
    fn records_round_trip_and_ids_to_text_strips_specials() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gen.jsonl");
        let records = vec![GenRecord {
            context: "hello there".into(),
            candidates: vec!["hi".into(), "hey you".into()],
            scores: vec![0.25, -1.5],
            selected: 0,
        }];
        save_records(&records, &path).unwrap();
        let loaded = load_records(&path).unwrap();
        assert_eq!(loaded[0].context, "hello there");
        assert_eq!(loaded[0].selected, 0);

        let vocab = crate::corpus::build_vocab(&[("a b".into(), "c".into())], 100);
        let text = ids_to_text(&[BEGIN_ID, vocab.id("a"), END_ID], &vocab);
        assert_eq!(text, "a");
    }

    #[test]
    fn context_file_formats() {
        let dir = tempfile::tempdir().unwrap();
        let plain = dir.path().join("ctx.txt");
        std::fs::write(&plain, "hello\nhow are you\n").unwrap();
        let jsonl = dir.path().join("ctx.jsonl");
        std::fs::write(&jsonl, "{\"context\": \"hello\"}\n{\"context\": \"how are you\"}\n")
            .unwrap();
        assert_eq!(load_contexts(&plain).unwrap(), load_contexts(&jsonl).unwrap());
    }
}
