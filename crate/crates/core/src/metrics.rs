//! Automatic evaluation: perplexity, Distinct-n, corpus BLEU-n, mean length,
//! embedding-average relevance (EA) and coherence (Cohe).
//!
//! Text metrics operate on whitespace tokens of already-normalized text.
//! Perplexity is deterministic: the posterior mean (never a sample) feeds
//! the latent and each example is scored on its argmin branch.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::corpus::{normalize_tokens, DialoguePair, Vocab};
use crate::error::{Error, Result};
use crate::infer::GenRecord;
use crate::model::{Forward, Model};
use crate::tape::Mat;
use crate::train::self_separation;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub ppl: f64,
    /// Distinct-1/2/3.
    pub distinct: [f64; 3],
    /// BLEU-1/2/3/4.
    pub bleu: [f64; 4],
    pub mean_len: f64,
    pub ea: f64,
    pub cohe: f64,
    /// Sentences excluded from EA/Cohe (empty or unembeddable).
    pub excluded: usize,
}

impl MetricReport {
    pub fn table(&self) -> String {
        let mut s = String::new();
        s.push_str("metric        value\n");
        s.push_str(&format!("PPL           {:.4}\n", self.ppl));
        for (i, d) in self.distinct.iter().enumerate() {
            s.push_str(&format!("Distinct-{}    {:.4}\n", i + 1, d));
        }
        s.push_str(&format!("Len.          {:.4}\n", self.mean_len));
        for (i, b) in self.bleu.iter().enumerate() {
            s.push_str(&format!("BLEU-{}        {:.4}\n", i + 1, b));
        }
        s.push_str(&format!("EA.           {:.4}\n", self.ea));
        s.push_str(&format!("Cohe.         {:.4}\n", self.cohe));
        s
    }
}

/// Teacher-forced negative log-likelihood of one pair on its best branch,
/// with the posterior mean as the sentence latent. Returns (nll, tokens).
fn pair_nll(model: &Model, pair: &DialoguePair) -> Result<(f64, usize)> {
    let (pair, _) = pair.fit_to_max_len(model.config.max_len);
    let mut fwd = Forward::eval(&model.params);
    let (z, context_states) = if model.config.clv_enabled {
        let lp = model.latent_pair(&mut fwd, &pair.context_ids, &pair.response_ids)?;
        // Posterior mean: reparameterize with zero noise.
        (lp.posterior_mu, lp.context_states)
    } else {
        let ctx = model.encode_context(&mut fwd, &pair.context_ids)?;
        let zero = fwd.tape.constant(Mat::zeros((1, model.config.d_model)));
        (zero, ctx.states)
    };
    let latents = model.hlv_node(&mut fwd, z);
    let mut losses = Vec::with_capacity(model.config.n_latents);
    let mut token_counts = Vec::with_capacity(model.config.n_latents);
    for j in 0..model.config.n_latents {
        let memory = model.contextual_memory(&mut fwd, context_states, latents, j);
        let decoded = model.decode_logprob(&mut fwd, memory, &pair.response_ids)?;
        losses.push(-fwd.tape.scalar(decoded.total_log_prob));
        token_counts.push(fwd.tape.value(decoded.per_token).nrows());
    }
    let (nll, best) = self_separation(&losses)?;
    Ok((nll, token_counts[best]))
}

/// exp(total NLL over response tokens / total response token count),
/// token-weighted so it is independent of how the set is batched.
pub fn perplexity(model: &Model, pairs: &[DialoguePair]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::contract("perplexity", "empty evaluation set"));
    }
    let mut nll = 0.0;
    let mut tokens = 0usize;
    for pair in pairs {
        let (n, t) = pair_nll(model, pair)?;
        nll += n;
        tokens += t;
    }
    Ok((nll / tokens as f64).exp())
}

fn ngrams(tokens: &[String], n: usize) -> Vec<String> {
    if tokens.len() < n {
        return Vec::new();
    }
    tokens.windows(n).map(|w| w.join(" ")).collect()
}

fn whitespace_tokens(text: &str) -> Vec<String> {
    text.split_whitespace().map(|s| s.to_string()).collect()
}

/// Unique n-grams across all responses divided by the total n-gram count;
/// 0 when there are no n-grams at all.
pub fn distinct_n(responses: &[String], n: usize) -> f64 {
    assert!((1..=3).contains(&n), "distinct-n is defined for n in 1..=3");
    let mut unique = HashSet::new();
    let mut total = 0usize;
    for response in responses {
        for gram in ngrams(&whitespace_tokens(response), n) {
            unique.insert(gram);
            total += 1;
        }
    }
    if total == 0 {
        0.0
    } else {
        unique.len() as f64 / total as f64
    }
}

fn counts(grams: &[String]) -> HashMap<&str, usize> {
    let mut map: HashMap<&str, usize> = HashMap::new();
    for g in grams {
        *map.entry(g.as_str()).or_insert(0) += 1;
    }
    map
}

/// Corpus-level BLEU-n with one reference per hypothesis: geometric mean of
/// modified k-gram precisions for k = 1..n, with add-one smoothing on the
/// orders above one and the brevity penalty exp(1 - ref_len/hyp_len) when
/// hypotheses run short.
pub fn bleu_n(hypotheses: &[String], references: &[String], n: usize) -> f64 {
    assert_eq!(
        hypotheses.len(),
        references.len(),
        "one reference per hypothesis"
    );
    assert!((1..=4).contains(&n), "bleu-n is defined for n in 1..=4");
    if hypotheses.is_empty() {
        return 0.0;
    }
    let hyp_tokens: Vec<Vec<String>> = hypotheses.iter().map(|h| whitespace_tokens(h)).collect();
    let ref_tokens: Vec<Vec<String>> = references.iter().map(|r| whitespace_tokens(r)).collect();
    let hyp_len: usize = hyp_tokens.iter().map(|t| t.len()).sum();
    let ref_len: usize = ref_tokens.iter().map(|t| t.len()).sum();
    if hyp_len == 0 {
        return 0.0;
    }

    let mut log_precision_sum = 0.0;
    for k in 1..=n {
        let mut matched = 0usize;
        let mut total = 0usize;
        for (hyp, reference) in hyp_tokens.iter().zip(&ref_tokens) {
            let hyp_grams = ngrams(hyp, k);
            let ref_grams = ngrams(reference, k);
            let ref_counts = counts(&ref_grams);
            total += hyp_grams.len();
            for (gram, count) in counts(&hyp_grams) {
                matched += count.min(*ref_counts.get(gram).unwrap_or(&0));
            }
        }
        let precision = if k >= 2 {
            (matched as f64 + 1.0) / (total as f64 + 1.0)
        } else if total == 0 {
            0.0
        } else {
            matched as f64 / total as f64
        };
        if precision == 0.0 {
            return 0.0;
        }
        log_precision_sum += precision.ln();
    }
    let brevity = if hyp_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    brevity * (log_precision_sum / n as f64).exp()
}

/// Where sentence embeddings come from.
pub enum EmbeddingSource<'a> {
    /// Rows of the model's token embedding table (so the suite needs no
    /// external data); unknown tokens use the `<unk>` row.
    ModelEncoder { model: &'a Model, vocab: &'a Vocab },
    /// A caller-supplied token-to-vector map; tokens without vectors are
    /// skipped.
    ExternalVectors(&'a HashMap<String, Vec<f64>>),
}

impl EmbeddingSource<'_> {
    /// Mean of the token embeddings of a sentence; `None` when nothing is
    /// embeddable.
    fn sentence(&self, text: &str) -> Option<Vec<f64>> {
        let tokens = normalize_tokens(text);
        if tokens.is_empty() {
            return None;
        }
        match self {
            EmbeddingSource::ModelEncoder { model, vocab } => {
                let table = model.params.get("embed.token");
                let mut acc = vec![0.0; table.ncols()];
                for token in &tokens {
                    let row = table.row(vocab.id(token));
                    for (a, v) in acc.iter_mut().zip(row) {
                        *a += v;
                    }
                }
                for a in acc.iter_mut() {
                    *a /= tokens.len() as f64;
                }
                Some(acc)
            }
            EmbeddingSource::ExternalVectors(map) => {
                let mut acc: Option<Vec<f64>> = None;
                let mut count = 0usize;
                for token in &tokens {
                    if let Some(v) = map.get(token) {
                        let acc = acc.get_or_insert_with(|| vec![0.0; v.len()]);
                        for (a, x) in acc.iter_mut().zip(v) {
                            *a += x;
                        }
                        count += 1;
                    }
                }
                acc.map(|mut v| {
                    for a in v.iter_mut() {
                        *a /= count as f64;
                    }
                    v
                })
            }
        }
    }
}

fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        None
    } else {
        Some(dot / (na * nb))
    }
}

pub struct EaCohe {
    pub ea: f64,
    pub cohe: f64,
    pub excluded: usize,
}

/// EA: mean cosine between the embedding averages of each generated
/// response and its reference. Cohe: same against the context. Rows with an
/// empty or unembeddable sentence are excluded and counted.
pub fn ea_cohe(
    contexts: &[String],
    generated: &[String],
    references: &[String],
    source: &EmbeddingSource,
) -> EaCohe {
    assert!(contexts.len() == generated.len() && generated.len() == references.len());
    let mut ea_sum = 0.0;
    let mut cohe_sum = 0.0;
    let mut used = 0usize;
    let mut excluded = 0usize;
    for ((ctx, gen), reference) in contexts.iter().zip(generated).zip(references) {
        let embedded = (
            source.sentence(gen),
            source.sentence(reference),
            source.sentence(ctx),
        );
        let (Some(g), Some(r), Some(c)) = embedded else {
            excluded += 1;
            continue;
        };
        let (Some(ea), Some(cohe)) = (cosine(&g, &r), cosine(&g, &c)) else {
            excluded += 1;
            continue;
        };
        ea_sum += ea;
        cohe_sum += cohe;
        used += 1;
    }
    if used == 0 {
        EaCohe {
            ea: 0.0,
            cohe: 0.0,
            excluded,
        }
    } else {
        EaCohe {
            ea: ea_sum / used as f64,
            cohe: cohe_sum / used as f64,
            excluded,
        }
    }
}

/// Full report over an evaluation split: perplexity from the model,
/// text metrics from the generation records (selected candidates against
/// the split's references).
pub fn report(
    model: &Model,
    pairs: &[DialoguePair],
    records: &[GenRecord],
    source: &EmbeddingSource,
) -> Result<MetricReport> {
    if records.len() != pairs.len() {
        return Err(Error::contract(
            "metrics::report",
            format!(
                "records ({}) and pairs ({}) must align",
                records.len(),
                pairs.len()
            ),
        ));
    }
    let ppl = perplexity(model, pairs)?;
    let selected: Vec<String> = records
        .iter()
        .map(|r| r.candidates[r.selected].clone())
        .collect();
    let references: Vec<String> = pairs
        .iter()
        .map(|p| normalize_tokens(&p.raw_response).join(" "))
        .collect();
    let contexts: Vec<String> = pairs
        .iter()
        .map(|p| normalize_tokens(&p.raw_context).join(" "))
        .collect();
    let distinct = [
        distinct_n(&selected, 1),
        distinct_n(&selected, 2),
        distinct_n(&selected, 3),
    ];
    let bleu = [
        bleu_n(&selected, &references, 1),
        bleu_n(&selected, &references, 2),
        bleu_n(&selected, &references, 3),
        bleu_n(&selected, &references, 4),
    ];
    let mean_len = selected
        .iter()
        .map(|s| whitespace_tokens(s).len() as f64)
        .sum::<f64>()
        / selected.len().max(1) as f64;
    let scores = ea_cohe(&contexts, &selected, &references, source);
    Ok(MetricReport {
        ppl,
        distinct,
        bleu,
        mean_len,
        ea: scores.ea,
        cohe: scores.cohe,
        excluded: scores.excluded,
    })
}

/// Loads external word vectors: one `token v1 v2 ... vd` line per token.
pub fn load_external_vectors(path: &std::path::Path) -> Result<HashMap<String, Vec<f64>>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut map = HashMap::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let token = parts.next().unwrap().to_string();
        let vector: std::result::Result<Vec<f64>, _> = parts.map(|p| p.parse::<f64>()).collect();
        let vector = vector.map_err(|_| {
            Error::Config(format!("{}:{}: bad vector entry", path.display(), lineno + 1))
        })?;
        map.insert(token, vector);
    }
    Ok(map)
}
