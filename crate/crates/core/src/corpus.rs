//! Corpus pipeline: multi-turn dialogues to deduplicated single-turn pairs,
//! vocabulary construction, tokenization and split files.
//!
//! Input formats (one dialogue per line):
//!   - a JSON array of utterance strings, e.g. `["hi there", "hello"]`
//!   - plain text with utterances separated by tabs
//!
//! The format is detected from the first non-empty line of the file.
//!
//! Split files are `context TAB response` lines; the vocabulary file has one
//! `token TAB count` line per non-reserved token, in id order (reserved ids
//! 0..=4 are implicit).

use std::collections::HashMap;
use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const BEGIN_ID: usize = 2;
pub const END_ID: usize = 3;
pub const SEP_ID: usize = 4;

pub const RESERVED_TOKENS: [&str; 5] = ["<pad>", "<unk>", "<bos>", "<eos>", "<sep>"];

/// One (context, response) single-turn training example.
#[derive(Debug, Clone, PartialEq)]
pub struct DialoguePair {
    pub context_ids: Vec<usize>,
    pub response_ids: Vec<usize>,
    pub raw_context: String,
    pub raw_response: String,
}

impl DialoguePair {
    /// Fits the pair into a model window: the response keeps its first
    /// tokens, the context is truncated from the left so the most recent
    /// tokens survive. Returns whether anything was cut.
    ///
    /// Budgets: response <= max_len - 1 (room for the begin/end token) and
    /// context <= max_len - 1 - response (room for the separator in the
    /// joint encoding), with at least one context token kept.
    pub fn fit_to_max_len(&self, max_len: usize) -> (DialoguePair, bool) {
        assert!(max_len >= 3, "max_len too small to hold any pair");
        let mut truncated = false;
        let mut response = self.response_ids.clone();
        if response.len() > max_len - 1 {
            response.truncate(max_len - 1);
            truncated = true;
        }
        let ctx_budget = (max_len - 1).saturating_sub(response.len()).max(1);
        let mut context = self.context_ids.clone();
        if context.len() > ctx_budget {
            context = context[context.len() - ctx_budget..].to_vec();
            truncated = true;
        }
        (
            DialoguePair {
                context_ids: context,
                response_ids: response,
                raw_context: self.raw_context.clone(),
                raw_response: self.raw_response.clone(),
            },
            truncated,
        )
    }
}

/// Token table with fixed reserved ids 0..=4 (pad, unk, begin, end, sep).
#[derive(Debug, Clone)]
pub struct Vocab {
    token_to_id: HashMap<String, usize>,
    id_to_token: Vec<String>,
    counts: Vec<u64>,
}

impl Vocab {
    fn with_reserved() -> Self {
        let id_to_token: Vec<String> = RESERVED_TOKENS.iter().map(|s| s.to_string()).collect();
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocab {
            token_to_id,
            id_to_token,
            counts: vec![0; RESERVED_TOKENS.len()],
        }
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        false // reserved ids are always present
    }

    pub fn id(&self, token: &str) -> usize {
        *self.token_to_id.get(token).unwrap_or(&UNK_ID)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.id_to_token[id]
    }

    pub fn contains(&self, token: &str) -> bool {
        self.token_to_id.contains_key(token)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for id in RESERVED_TOKENS.len()..self.len() {
            out.push_str(&format!("{}\t{}\n", self.id_to_token[id], self.counts[id]));
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut vocab = Vocab::with_reserved();
        for (lineno, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let (token, count) = line.split_once('\t').ok_or_else(|| {
                Error::Config(format!(
                    "{}:{}: expected 'token<TAB>count'",
                    path.display(),
                    lineno + 1
                ))
            })?;
            let count: u64 = count.parse().map_err(|_| {
                Error::Config(format!("{}:{}: bad count '{count}'", path.display(), lineno + 1))
            })?;
            let id = vocab.id_to_token.len();
            vocab.token_to_id.insert(token.to_string(), id);
            vocab.id_to_token.push(token.to_string());
            vocab.counts.push(count);
        }
        Ok(vocab)
    }
}

/// Lowercases, splits punctuation into standalone tokens, then splits on
/// whitespace.
pub fn normalize_tokens(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut current = String::new();
    for c in text.to_lowercase().chars() {
        if c.is_whitespace() {
            if !current.is_empty() {
                tokens.push(std::mem::take(&mut current));
            }
        } else if c.is_ascii_punctuation() {
            if !current.is_empty() {
                tokens.push(std::mem::take(&mut current));
            }
            tokens.push(c.to_string());
        } else {
            current.push(c);
        }
    }
    if !current.is_empty() {
        tokens.push(current);
    }
    tokens
}

/// Tokenizes text into vocabulary ids; unknown tokens map to `<unk>`.
pub fn tokenize(text: &str, vocab: &Vocab) -> Result<Vec<usize>> {
    let tokens = normalize_tokens(text);
    if tokens.is_empty() {
        return Err(Error::contract("tokenize", "empty text"));
    }
    Ok(tokens.iter().map(|t| vocab.id(t)).collect())
}

/// Inverse of [`tokenize`] up to casing and whitespace normalization.
pub fn detokenize(ids: &[usize], vocab: &Vocab) -> String {
    ids.iter()
        .map(|&id| vocab.token(id))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Extracts the T-1 adjacent (context, response) pairs from each multi-turn
/// dialogue, in order. Dialogues with fewer than two utterances are skipped;
/// the second return value counts them.
pub fn extract_pairs(dialogues: &[Vec<String>]) -> (Vec<(String, String)>, usize) {
    let mut pairs = Vec::new();
    let mut skipped = 0usize;
    for dialogue in dialogues {
        if dialogue.len() < 2 {
            skipped += 1;
            continue;
        }
        for window in dialogue.windows(2) {
            pairs.push((window[0].clone(), window[1].clone()));
        }
    }
    (pairs, skipped)
}

/// Removes exact duplicate pairs (after token normalization) keeping first
/// occurrence, shuffles deterministically, and splits by the given ratios.
pub fn dedupe_split(
    pairs: &[(String, String)],
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<(Vec<(String, String)>, Vec<(String, String)>, Vec<(String, String)>)> {
    let (a, b, c) = ratios;
    if !(a >= 0.0 && b >= 0.0 && c >= 0.0) || ((a + b + c) - 1.0).abs() > 1e-9 {
        return Err(Error::contract(
            "dedupe_split",
            format!("ratios must be nonnegative and sum to 1, got {ratios:?}"),
        ));
    }
    let mut seen = HashSet::new();
    let mut unique = Vec::new();
    for (ctx, resp) in pairs {
        let key = (
            normalize_tokens(ctx).join(" "),
            normalize_tokens(resp).join(" "),
        );
        if seen.insert(key) {
            unique.push((ctx.clone(), resp.clone()));
        }
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    unique.shuffle(&mut rng);
    let n = unique.len();
    let n_train = (a * n as f64).round() as usize;
    let n_valid = (b * n as f64).round() as usize;
    let n_train = n_train.min(n);
    let n_valid = n_valid.min(n - n_train);
    let valid = unique.split_off(n_train);
    let (valid, test) = {
        let mut v = valid;
        let t = v.split_off(n_valid.min(v.len()));
        (v, t)
    };
    Ok((unique, valid, test))
}

/// Builds the vocabulary from training pairs only: the `max_size` most
/// frequent normalized tokens (total size including the 5 reserved ids),
/// ties broken lexicographically.
pub fn build_vocab(train_pairs: &[(String, String)], max_size: usize) -> Vocab {
    let mut counts: HashMap<String, u64> = HashMap::new();
    for (ctx, resp) in train_pairs {
        for tok in normalize_tokens(ctx).into_iter().chain(normalize_tokens(resp)) {
            *counts.entry(tok).or_insert(0) += 1;
        }
    }
    let mut ranked: Vec<(String, u64)> = counts.into_iter().collect();
    ranked.sort_by(|(ta, ca), (tb, cb)| cb.cmp(ca).then_with(|| ta.cmp(tb)));

    let mut vocab = Vocab::with_reserved();
    let budget = max_size.saturating_sub(RESERVED_TOKENS.len());
    for (token, count) in ranked.into_iter().take(budget) {
        let id = vocab.id_to_token.len();
        vocab.token_to_id.insert(token.clone(), id);
        vocab.id_to_token.push(token);
        vocab.counts.push(count);
    }
    vocab
}

/// Tokenizes raw pairs, dropping any whose context or response normalizes to
/// nothing; the second return value counts the drops.
pub fn tokenize_pairs(raw: &[(String, String)], vocab: &Vocab) -> (Vec<DialoguePair>, usize) {
    let mut out = Vec::with_capacity(raw.len());
    let mut dropped = 0usize;
    for (ctx, resp) in raw {
        match (tokenize(ctx, vocab), tokenize(resp, vocab)) {
            (Ok(context_ids), Ok(response_ids)) => out.push(DialoguePair {
                context_ids,
                response_ids,
                raw_context: ctx.clone(),
                raw_response: resp.clone(),
            }),
            _ => dropped += 1,
        }
    }
    (out, dropped)
}

/// Reads dialogues from a file, detecting the JSON-array or tab-separated
/// format from the first non-empty line.
pub fn load_dialogues(path: &Path) -> Result<Vec<Vec<String>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let first = text.lines().find(|l| !l.trim().is_empty());
    let json_format = matches!(first, Some(l) if l.trim_start().starts_with('['));
    let mut dialogues = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        if json_format {
            let utterances: Vec<String> = serde_json::from_str(line).map_err(|e| {
                Error::Config(format!(
                    "{}:{}: bad dialogue record: {e}",
                    path.display(),
                    lineno + 1
                ))
            })?;
            dialogues.push(utterances);
        } else {
            dialogues.push(line.split('\t').map(|s| s.to_string()).collect());
        }
    }
    Ok(dialogues)
}

/// Writes `context TAB response` lines.
pub fn save_pairs_tsv(pairs: &[(String, String)], path: &Path) -> Result<()> {
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for (ctx, resp) in pairs {
        // Normalized pairs are single-line; tabs inside raw text would break
        // the format, so flatten them.
        let ctx = ctx.replace(['\t', '\n'], " ");
        let resp = resp.replace(['\t', '\n'], " ");
        writeln!(file, "{ctx}\t{resp}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

pub fn load_pairs_tsv(path: &Path) -> Result<Vec<(String, String)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut pairs = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let (ctx, resp) = line.split_once('\t').ok_or_else(|| {
            Error::Config(format!(
                "{}:{}: expected 'context<TAB>response'",
                path.display(),
                lineno + 1
            ))
        })?;
        pairs.push((ctx.to_string(), resp.to_string()));
    }
    Ok(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(c: &str, r: &str) -> (String, String) {
        (c.to_string(), r.to_string())
    }

    #[test]
    fn extract_adjacent_pairs() {
        let dialogues = vec![vec!["u1".to_string(), "u2".to_string(), "u3".to_string()]];
        let (pairs, skipped) = extract_pairs(&dialogues);
        assert_eq!(pairs, vec![p("u1", "u2"), p("u2", "u3")]);
        assert_eq!(skipped, 0);
    }

    #[test]
    fn single_utterance_dialogue_skipped() {
        let dialogues = vec![vec!["lonely".to_string()]];
        let (pairs, skipped) = extract_pairs(&dialogues);
        assert!(pairs.is_empty());
        assert_eq!(skipped, 1);
    }

    #[test]
    fn pair_count_arithmetic() {
        let dialogues: Vec<Vec<String>> = (0..7)
            .map(|i| (0..5).map(|j| format!("d{i}u{j}")).collect())
            .collect();
        let (pairs, _) = extract_pairs(&dialogues);
        assert_eq!(pairs.len(), 7 * 4);
    }

    #[test]
    fn normalization_splits_punctuation_and_lowercases() {
        assert_eq!(normalize_tokens("Hello there!"), vec!["hello", "there", "!"]);
        assert_eq!(normalize_tokens("don't"), vec!["don", "'", "t"]);
    }

    #[test]
    fn tokenize_round_trips_normalized_text() {
        let pairs = vec![p("Hello there!", "hi hi")];
        let vocab = build_vocab(&pairs, 100);
        let ids = tokenize("Hello there!", &vocab).unwrap();
        assert_eq!(detokenize(&ids, &vocab), "hello there !");
    }

    #[test]
    fn unknown_token_maps_to_unk() {
        let vocab = build_vocab(&[p("a b", "c d")], 100);
        let ids = tokenize("zebra", &vocab).unwrap();
        assert_eq!(ids, vec![UNK_ID]);
    }

    #[test]
    fn empty_text_rejected() {
        let vocab = build_vocab(&[p("a", "b")], 100);
        assert!(tokenize("   ", &vocab).is_err());
    }

    #[test]
    fn vocab_depends_only_on_train_pairs() {
        let train = vec![p("alpha beta", "gamma"), p("beta", "alpha")];
        let v1 = build_vocab(&train, 50);
        let v2 = build_vocab(&train, 50);
        assert_eq!(v1.id_to_token, v2.id_to_token);
        assert!(v1.contains("alpha"));
        assert!(!v1.contains("delta"));
    }

    #[test]
    fn vocab_caps_at_max_size_most_frequent_first() {
        let train = vec![p("a a a b b c", "a b c d")];
        let vocab = build_vocab(&train, RESERVED_TOKENS.len() + 2);
        assert_eq!(vocab.len(), RESERVED_TOKENS.len() + 2);
        assert!(vocab.contains("a"));
        assert!(vocab.contains("b"));
        assert!(!vocab.contains("c"));
        assert!(!vocab.contains("d"));
    }

    #[test]
    fn dedupe_keeps_first_occurrence_and_splits_disjointly() {
        let mut pairs = vec![p("hello", "world"), p("HELLO", "World")];
        for i in 0..98 {
            pairs.push(p(&format!("c{i}"), &format!("r{i}")));
        }
        let (train, valid, test) = dedupe_split(&pairs, (0.8, 0.1, 0.1), 13).unwrap();
        let total = train.len() + valid.len() + test.len();
        assert_eq!(total, 99); // one duplicate removed
        let all: Vec<_> = train.iter().chain(&valid).chain(&test).collect();
        let normalized: HashSet<_> = all
            .iter()
            .map(|(c, r)| (normalize_tokens(c).join(" "), normalize_tokens(r).join(" ")))
            .collect();
        assert_eq!(normalized.len(), total);
        let hello_count = all
            .iter()
            .filter(|(c, _)| normalize_tokens(c).join(" ") == "hello")
            .count();
        assert_eq!(hello_count, 1);
    }

    #[test]
    fn split_is_deterministic_in_seed() {
        let pairs: Vec<_> = (0..60).map(|i| p(&format!("c{i}"), &format!("r{i}"))).collect();
        let s1 = dedupe_split(&pairs, (0.5, 0.25, 0.25), 7).unwrap();
        let s2 = dedupe_split(&pairs, (0.5, 0.25, 0.25), 7).unwrap();
        assert_eq!(s1, s2);
        let s3 = dedupe_split(&pairs, (0.5, 0.25, 0.25), 8).unwrap();
        assert_ne!(s1, s3);
    }

    #[test]
    fn bad_ratios_rejected() {
        let pairs = vec![p("a", "b")];
        assert!(dedupe_split(&pairs, (0.5, 0.2, 0.2), 1).is_err());
    }

    #[test]
    fn vocab_save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        let vocab = build_vocab(&[p("one two two", "three three three")], 100);
        vocab.save(&path).unwrap();
        let loaded = Vocab::load(&path).unwrap();
        assert_eq!(vocab.id_to_token, loaded.id_to_token);
        assert_eq!(vocab.counts, loaded.counts);
    }

    #[test]
    fn dialogue_file_formats() {
        let dir = tempfile::tempdir().unwrap();
        let json_path = dir.path().join("d.jsonl");
        fs::write(&json_path, "[\"hi\", \"hello\"]\n[\"a\", \"b\", \"c\"]\n").unwrap();
        let tsv_path = dir.path().join("d.txt");
        fs::write(&tsv_path, "hi\thello\na\tb\tc\n").unwrap();
        let from_json = load_dialogues(&json_path).unwrap();
        let from_tsv = load_dialogues(&tsv_path).unwrap();
        assert_eq!(from_json, from_tsv);
    }

    #[test]
    fn fit_to_max_len_keeps_recent_context() {
        let pair = DialoguePair {
            context_ids: vec![10, 11, 12, 13, 14],
            response_ids: vec![20, 21],
            raw_context: String::new(),
            raw_response: String::new(),
        };
        let (fitted, truncated) = pair.fit_to_max_len(6);
        assert!(truncated);
        assert_eq!(fitted.response_ids, vec![20, 21]);
        assert_eq!(fitted.context_ids, vec![12, 13, 14]);
        let (unchanged, t2) = pair.fit_to_max_len(10);
        assert!(!t2);
        assert_eq!(unchanged.context_ids, pair.context_ids);
    }
}
