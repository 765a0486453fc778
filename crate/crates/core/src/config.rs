//! Flat `key = value` run configuration with typed keys.
//!
//! Unknown keys are rejected. Command-line flags override file values, and
//! every run persists its fully resolved configuration next to its outputs,
//! so a run directory is reproducible from what it contains.

use std::path::{Path, PathBuf};

use crate::analysis::LatentVariant;
use crate::error::{Error, Result};
use crate::infer::{DecodeMode, GenConfig};
use crate::model::{MixingWeights, ModelConfig};
use crate::train::{KlMode, TrainConfig};

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub seed: u64,

    // Corpus paths (from `prepare` output).
    pub train_path: Option<PathBuf>,
    pub valid_path: Option<PathBuf>,
    pub vocab_path: Option<PathBuf>,

    // Model.
    pub d_model: usize,
    pub d_z: Option<usize>,
    pub n_layers_enc: usize,
    pub n_layers_dec: usize,
    pub n_heads: usize,
    pub n_latents: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub dropout: f64,
    pub mixing_weights: MixingWeights,

    // Training.
    pub batch_size: usize,
    /// Annealing horizon; when unset it defaults to 20,000 capped at 30% of
    /// max_steps for desk-scale runs.
    pub k_ann: Option<u64>,
    pub lr: f64,
    pub max_steps: u64,
    pub kl_mode: KlMode,
    pub lambda_max: f64,
    pub checkpoint_every: u64,

    // Generation.
    pub decode_mode: DecodeMode,
    pub top_k: usize,
    pub max_new_tokens: usize,

    // Ablations.
    pub no_clv: bool,
    pub no_dlv: bool,

    // Posterior-distance study.
    pub study_subset: usize,
    pub study_epochs: usize,
    pub study_probe: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            train_path: None,
            valid_path: None,
            vocab_path: None,
            d_model: 64,
            d_z: None,
            n_layers_enc: 2,
            n_layers_dec: 2,
            n_heads: 4,
            n_latents: 3,
            d_ff: 256,
            max_len: 64,
            dropout: 0.1,
            mixing_weights: MixingWeights::Uniform,
            batch_size: 8,
            k_ann: None,
            lr: 1e-3,
            max_steps: 2000,
            kl_mode: KlMode::Vanilla,
            lambda_max: 1.0,
            checkpoint_every: 500,
            decode_mode: DecodeMode::Greedy,
            top_k: 5,
            max_new_tokens: 16,
            no_clv: false,
            no_dlv: false,
            study_subset: 2000,
            study_epochs: 10,
            study_probe: 64,
        }
    }
}

impl RunConfig {
    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |what: &str| Error::Config(format!("bad value '{value}' for {key}: {what}"));
        macro_rules! parse {
            ($ty:ty) => {
                value.parse::<$ty>().map_err(|e| bad(&e.to_string()))?
            };
        }
        match key {
            "seed" => self.seed = parse!(u64),
            "data.train" => self.train_path = Some(PathBuf::from(value)),
            "data.valid" => self.valid_path = Some(PathBuf::from(value)),
            "data.vocab" => self.vocab_path = Some(PathBuf::from(value)),
            "model.d_model" => self.d_model = parse!(usize),
            "model.d_z" => self.d_z = Some(parse!(usize)),
            "model.n_layers_enc" => self.n_layers_enc = parse!(usize),
            "model.n_layers_dec" => self.n_layers_dec = parse!(usize),
            "model.n_heads" => self.n_heads = parse!(usize),
            "model.k" => self.n_latents = parse!(usize),
            "model.d_ff" => self.d_ff = parse!(usize),
            "model.max_len" => self.max_len = parse!(usize),
            "model.dropout" => self.dropout = parse!(f64),
            "model.mixing_weights" => self.mixing_weights = parse!(MixingWeights),
            "train.batch_size" => self.batch_size = parse!(usize),
            "train.k_ann" => self.k_ann = Some(parse!(u64)),
            "train.lr" => self.lr = parse!(f64),
            "train.max_steps" => self.max_steps = parse!(u64),
            "train.kl_mode" => self.kl_mode = parse!(KlMode),
            "train.lambda_max" => self.lambda_max = parse!(f64),
            "train.checkpoint_every" => self.checkpoint_every = parse!(u64),
            "gen.decode_mode" => self.decode_mode = parse!(DecodeMode),
            "gen.top_k" => self.top_k = parse!(usize),
            "gen.max_new_tokens" => self.max_new_tokens = parse!(usize),
            "ablation.no_clv" => self.no_clv = parse!(bool),
            "ablation.no_dlv" => self.no_dlv = parse!(bool),
            "study.subset" => self.study_subset = parse!(usize),
            "study.epochs" => self.study_epochs = parse!(usize),
            "study.probe" => self.study_probe = parse!(usize),
            other => return Err(Error::Config(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    /// Parses a config file: one `key = value` per line, `#` comments.
    pub fn from_file(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingInput(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!(
                    "{}:{}: expected 'key = value', got '{raw}'",
                    path.display(),
                    lineno + 1
                ))
            })?;
            config.set(key.trim(), value.trim()).map_err(|e| {
                Error::Config(format!("{}:{}: {e}", path.display(), lineno + 1))
            })?;
        }
        Ok(config)
    }

    /// Renders the fully resolved configuration in the same flat format.
    pub fn to_file_string(&self) -> String {
        let mut s = String::new();
        let path = |p: &Option<PathBuf>| {
            p.as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default()
        };
        s.push_str(&format!("seed = {}\n", self.seed));
        if self.train_path.is_some() {
            s.push_str(&format!("data.train = {}\n", path(&self.train_path)));
        }
        if self.valid_path.is_some() {
            s.push_str(&format!("data.valid = {}\n", path(&self.valid_path)));
        }
        if self.vocab_path.is_some() {
            s.push_str(&format!("data.vocab = {}\n", path(&self.vocab_path)));
        }
        s.push_str(&format!("model.d_model = {}\n", self.d_model));
        s.push_str(&format!("model.d_z = {}\n", self.d_z.unwrap_or(self.d_model)));
        s.push_str(&format!("model.n_layers_enc = {}\n", self.n_layers_enc));
        s.push_str(&format!("model.n_layers_dec = {}\n", self.n_layers_dec));
        s.push_str(&format!("model.n_heads = {}\n", self.n_heads));
        s.push_str(&format!("model.k = {}\n", self.n_latents));
        s.push_str(&format!("model.d_ff = {}\n", self.d_ff));
        s.push_str(&format!("model.max_len = {}\n", self.max_len));
        s.push_str(&format!("model.dropout = {}\n", self.dropout));
        let mixing = match self.mixing_weights {
            MixingWeights::Uniform => "uniform",
            MixingWeights::Learned => "learned",
        };
        s.push_str(&format!("model.mixing_weights = {mixing}\n"));
        s.push_str(&format!("train.batch_size = {}\n", self.batch_size));
        s.push_str(&format!("train.k_ann = {}\n", self.resolved_k_ann()));
        s.push_str(&format!("train.lr = {}\n", self.lr));
        s.push_str(&format!("train.max_steps = {}\n", self.max_steps));
        let kl = match self.kl_mode {
            KlMode::Vanilla => "vanilla",
            KlMode::Relaxed => "relaxed",
        };
        s.push_str(&format!("train.kl_mode = {kl}\n"));
        s.push_str(&format!("train.lambda_max = {}\n", self.lambda_max));
        s.push_str(&format!("train.checkpoint_every = {}\n", self.checkpoint_every));
        let decode = match self.decode_mode {
            DecodeMode::Greedy => "greedy",
            DecodeMode::TopKSampling => "top_k",
        };
        s.push_str(&format!("gen.decode_mode = {decode}\n"));
        s.push_str(&format!("gen.top_k = {}\n", self.top_k));
        s.push_str(&format!("gen.max_new_tokens = {}\n", self.max_new_tokens));
        s.push_str(&format!("ablation.no_clv = {}\n", self.no_clv));
        s.push_str(&format!("ablation.no_dlv = {}\n", self.no_dlv));
        s.push_str(&format!("study.subset = {}\n", self.study_subset));
        s.push_str(&format!("study.epochs = {}\n", self.study_epochs));
        s.push_str(&format!("study.probe = {}\n", self.study_probe));
        s
    }

    /// Annealing horizon: explicit value, or 20,000 capped at 30% of
    /// max_steps so short desk runs still see the full ramp.
    pub fn resolved_k_ann(&self) -> u64 {
        match self.k_ann {
            Some(k) => k,
            None => 20_000u64.min((self.max_steps * 3 / 10).max(1)),
        }
    }

    pub fn model_config(&self, vocab_size: usize) -> Result<ModelConfig> {
        if self.no_clv && self.no_dlv {
            return Err(Error::Config(
                "--no-clv and --no-dlv together leave no latent variable".into(),
            ));
        }
        let config = ModelConfig {
            vocab_size,
            d_model: self.d_model,
            d_z: self.d_z.unwrap_or(self.d_model),
            n_layers_enc: self.n_layers_enc,
            n_layers_dec: self.n_layers_dec,
            n_heads: self.n_heads,
            n_latents: if self.no_dlv { 1 } else { self.n_latents },
            d_ff: self.d_ff,
            max_len: self.max_len,
            dropout: self.dropout,
            mixing_weights: self.mixing_weights,
            clv_enabled: !self.no_clv,
            dlv_enabled: !self.no_dlv,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let config = TrainConfig {
            batch_size: self.batch_size,
            k_ann: self.resolved_k_ann(),
            lr: self.lr,
            max_steps: self.max_steps,
            kl_mode: self.kl_mode,
            seed: self.seed,
            lambda_max: self.lambda_max,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn gen_config(&self) -> Result<GenConfig> {
        let config = GenConfig {
            decode_mode: self.decode_mode,
            top_k: self.top_k,
            max_new_tokens: self.max_new_tokens,
            seed: self.seed,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn study_config(&self, vocab_size: usize, variant: LatentVariant) -> crate::analysis::StudyConfig {
        let mut study = crate::analysis::StudyConfig::new(vocab_size, variant);
        study.subset_size = self.study_subset;
        study.epochs = self.study_epochs;
        study.batch_size = self.batch_size;
        study.lr = self.lr;
        study.lambda_max = self.lambda_max;
        study.seed = self.seed;
        study.probe_size = self.study_probe;
        study.model.d_model = self.d_model;
        study.model.d_z = self.d_z.unwrap_or(self.d_model);
        study.model.n_layers_enc = self.n_layers_enc;
        study.model.n_layers_dec = self.n_layers_dec;
        study.model.n_heads = self.n_heads;
        study.model.d_ff = self.d_ff;
        study.model.max_len = self.max_len;
        study.model.dropout = self.dropout;
        study.model.mixing_weights = self.mixing_weights;
        study
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_round_trip_preserves_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.config");
        let mut config = RunConfig::default();
        config.seed = 7;
        config.d_model = 32;
        config.kl_mode = KlMode::Relaxed;
        config.no_clv = true;
        std::fs::write(&path, config.to_file_string()).unwrap();
        let loaded = RunConfig::from_file(&path).unwrap();
        assert_eq!(loaded.seed, 7);
        assert_eq!(loaded.d_model, 32);
        assert_eq!(loaded.kl_mode, KlMode::Relaxed);
        assert!(loaded.no_clv);
    }

    #[test]
    fn unknown_key_rejected() {
        let mut config = RunConfig::default();
        assert!(config.set("model.banana", "3").is_err());
        assert!(config.set("model.d_model", "not_a_number").is_err());
    }

    #[test]
    fn comments_and_blank_lines_ignored() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.config");
        std::fs::write(&path, "# a comment\n\nseed = 3 # trailing\n").unwrap();
        let loaded = RunConfig::from_file(&path).unwrap();
        assert_eq!(loaded.seed, 3);
    }

    #[test]
    fn both_ablations_rejected() {
        let mut config = RunConfig::default();
        config.no_clv = true;
        config.no_dlv = true;
        assert!(config.model_config(100).is_err());
    }

    #[test]
    fn ablation_flags_shape_the_model() {
        let mut config = RunConfig::default();
        config.no_dlv = true;
        let mc = config.model_config(100).unwrap();
        assert_eq!(mc.n_latents, 1);
        assert!(!mc.dlv_enabled);
        assert!(mc.clv_enabled);
    }

    #[test]
    fn k_ann_defaults_to_30_percent_on_desk_runs() {
        let mut config = RunConfig::default();
        config.max_steps = 1000;
        assert_eq!(config.resolved_k_ann(), 300);
        config.max_steps = 1_000_000;
        assert_eq!(config.resolved_k_ann(), 20_000);
        config.k_ann = Some(42);
        assert_eq!(config.resolved_k_ann(), 42);
    }

    #[test]
    fn missing_config_file_is_missing_input() {
        let err = RunConfig::from_file(Path::new("/nope/run.config")).unwrap_err();
        assert!(matches!(err, Error::MissingInput(_)));
    }
}
