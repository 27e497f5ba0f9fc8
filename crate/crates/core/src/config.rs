//! Flat `key = value` experiment configuration.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::augment::AugmentConfig;
use crate::error::{Error, Result};
use crate::model::{Ablation, ModelConfig};
use crate::synth::SynthConfig;
use crate::train::TrainConfig;

/// Contrastive pretraining settings shared by both encoders.
#[derive(Debug, Clone, PartialEq)]
pub struct PretrainSettings {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub tau_d: f64,
    pub tau_a: f64,
}

impl Default for PretrainSettings {
    fn default() -> Self {
        PretrainSettings {
            epochs: 1,
            batch: 32,
            lr: 1e-3,
            tau_d: 0.2,
            tau_a: 0.05,
        }
    }
}

/// Every setting of a run: corpus, data split, model, pretraining,
/// augmentation, fine-tuning and ablations. The global seed drives all of
/// them.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub synth: SynthConfig,
    pub negatives_per_positive: usize,
    pub split: (f64, f64, f64),
    pub vocab_min_count: usize,
    pub model: ModelConfig,
    pub pretrain: PretrainSettings,
    pub augment: AugmentConfig,
    pub train: TrainConfig,
    pub ablations: BTreeSet<Ablation>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            synth: SynthConfig {
                n_industries: 12,
                positives_per_solution: 40,
                ..SynthConfig::default()
            },
            negatives_per_positive: 4,
            split: (0.7, 0.1, 0.2),
            vocab_min_count: 20,
            model: ModelConfig::tiny(),
            pretrain: PretrainSettings::default(),
            augment: AugmentConfig::default(),
            train: TrainConfig {
                epochs: 10,
                batch: 32,
                lr_token: 3e-3,
                lr_scale: 3e-3,
                lr_field: 3e-3,
                seed: 0,
            },
            ablations: BTreeSet::new(),
        }
    }
}

/// Keys accepted in configuration files, in canonical order.
pub const KEYS: [&str; 41] = [
    "seed",
    "n_solutions",
    "n_companies",
    "n_industries",
    "vocab_seed_words",
    "positives_per_solution",
    "text_signal_strength",
    "scale_signal_strength",
    "missing_field_rate",
    "missing_token_rate",
    "negatives_per_positive",
    "train_ratio",
    "val_ratio",
    "test_ratio",
    "vocab_min_count",
    "d_e",
    "token_layers",
    "heads",
    "ff",
    "max_len",
    "field_layers",
    "d_s",
    "buckets",
    "alpha",
    "init_std",
    "pretrain_epochs",
    "pretrain_batch",
    "lr_pretrain",
    "tau_d",
    "tau_a",
    "r_t",
    "r_f",
    "epochs",
    "batch_size",
    "lr_token",
    "lr_scale",
    "lr_field",
    "token_masking",
    "field_masking",
    "company_replacing",
    "ablations",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

impl ExperimentConfig {
    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "seed" => self.seed = parse(key, v)?,
            "n_solutions" => self.synth.n_solutions = parse(key, v)?,
            "n_companies" => self.synth.n_companies = parse(key, v)?,
            "n_industries" => self.synth.n_industries = parse(key, v)?,
            "vocab_seed_words" => self.synth.vocab_seed_words = parse(key, v)?,
            "positives_per_solution" => self.synth.positives_per_solution = parse(key, v)?,
            "text_signal_strength" => self.synth.text_signal_strength = parse(key, v)?,
            "scale_signal_strength" => self.synth.scale_signal_strength = parse(key, v)?,
            "missing_field_rate" => self.synth.missing_field_rate = parse(key, v)?,
            "missing_token_rate" => self.synth.missing_token_rate = parse(key, v)?,
            "negatives_per_positive" => self.negatives_per_positive = parse(key, v)?,
            "train_ratio" => self.split.0 = parse(key, v)?,
            "val_ratio" => self.split.1 = parse(key, v)?,
            "test_ratio" => self.split.2 = parse(key, v)?,
            "vocab_min_count" => self.vocab_min_count = parse(key, v)?,
            "d_e" => self.model.d_e = parse(key, v)?,
            "token_layers" => self.model.token_layers = parse(key, v)?,
            "heads" => self.model.heads = parse(key, v)?,
            "ff" => self.model.ff = parse(key, v)?,
            "max_len" => self.model.max_len = parse(key, v)?,
            "field_layers" => self.model.field_layers = parse(key, v)?,
            "d_s" => self.model.d_s = parse(key, v)?,
            "buckets" => self.model.buckets = parse(key, v)?,
            "alpha" => self.model.alpha = parse(key, v)?,
            "init_std" => self.model.init_std = parse(key, v)?,
            "pretrain_epochs" => self.pretrain.epochs = parse(key, v)?,
            "pretrain_batch" => self.pretrain.batch = parse(key, v)?,
            "lr_pretrain" => self.pretrain.lr = parse(key, v)?,
            "tau_d" => self.pretrain.tau_d = parse(key, v)?,
            "tau_a" => self.pretrain.tau_a = parse(key, v)?,
            "r_t" => self.augment.r_t = parse(key, v)?,
            "r_f" => self.augment.r_f = parse(key, v)?,
            "epochs" => self.train.epochs = parse(key, v)?,
            "batch_size" => self.train.batch = parse(key, v)?,
            "lr_token" => self.train.lr_token = parse(key, v)?,
            "lr_scale" => self.train.lr_scale = parse(key, v)?,
            "lr_field" => self.train.lr_field = parse(key, v)?,
            "token_masking" => self.augment.token_masking = parse(key, v)?,
            "field_masking" => self.augment.field_masking = parse(key, v)?,
            "company_replacing" => self.augment.company_replacing = parse(key, v)?,
            "ablations" => {
                self.ablations = v
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(str::parse)
                    .collect::<Result<_>>()?
            }
            other => {
                return Err(Error::Config(format!(
                    "unknown configuration key `{other}`"
                )))
            }
        }
        Ok(())
    }

    /// Canonical textual value of one key.
    pub fn get(&self, key: &str) -> Result<String> {
        Ok(match key {
            "seed" => self.seed.to_string(),
            "n_solutions" => self.synth.n_solutions.to_string(),
            "n_companies" => self.synth.n_companies.to_string(),
            "n_industries" => self.synth.n_industries.to_string(),
            "vocab_seed_words" => self.synth.vocab_seed_words.to_string(),
            "positives_per_solution" => self.synth.positives_per_solution.to_string(),
            "text_signal_strength" => self.synth.text_signal_strength.to_string(),
            "scale_signal_strength" => self.synth.scale_signal_strength.to_string(),
            "missing_field_rate" => self.synth.missing_field_rate.to_string(),
            "missing_token_rate" => self.synth.missing_token_rate.to_string(),
            "negatives_per_positive" => self.negatives_per_positive.to_string(),
            "train_ratio" => self.split.0.to_string(),
            "val_ratio" => self.split.1.to_string(),
            "test_ratio" => self.split.2.to_string(),
            "vocab_min_count" => self.vocab_min_count.to_string(),
            "d_e" => self.model.d_e.to_string(),
            "token_layers" => self.model.token_layers.to_string(),
            "heads" => self.model.heads.to_string(),
            "ff" => self.model.ff.to_string(),
            "max_len" => self.model.max_len.to_string(),
            "field_layers" => self.model.field_layers.to_string(),
            "d_s" => self.model.d_s.to_string(),
            "buckets" => self.model.buckets.to_string(),
            "alpha" => self.model.alpha.to_string(),
            "init_std" => self.model.init_std.to_string(),
            "pretrain_epochs" => self.pretrain.epochs.to_string(),
            "pretrain_batch" => self.pretrain.batch.to_string(),
            "lr_pretrain" => self.pretrain.lr.to_string(),
            "tau_d" => self.pretrain.tau_d.to_string(),
            "tau_a" => self.pretrain.tau_a.to_string(),
            "r_t" => self.augment.r_t.to_string(),
            "r_f" => self.augment.r_f.to_string(),
            "epochs" => self.train.epochs.to_string(),
            "batch_size" => self.train.batch.to_string(),
            "lr_token" => self.train.lr_token.to_string(),
            "lr_scale" => self.train.lr_scale.to_string(),
            "lr_field" => self.train.lr_field.to_string(),
            "token_masking" => self.augment.token_masking.to_string(),
            "field_masking" => self.augment.field_masking.to_string(),
            "company_replacing" => self.augment.company_replacing.to_string(),
            "ablations" => self
                .ablations
                .iter()
                .map(|a| a.as_str())
                .collect::<Vec<_>>()
                .join(","),
            other => return Err(Error::Config(format!("unknown configuration key `{other}`"))),
        })
    }

    /// Parses `key = value` lines; `#` starts a comment. Unknown or repeated
    /// keys are errors. Unlisted keys keep their defaults.
    pub fn parse(text: &str, path: &Path) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::default();
        let mut seen = BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg,
            };
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected `key = value`, got `{line}`")))?;
            let k = k.trim();
            if !seen.insert(k.to_string()) {
                return Err(err(format!("duplicate key `{k}`")));
            }
            cfg.set(k, v).map_err(|e| err(e.to_string()))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    /// Applies `key=value` overrides.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
            self.set(k.trim(), v)?;
        }
        self.validate()
    }

    /// Propagates the global seed into the sub-configurations and checks
    /// every value.
    pub fn validate(&mut self) -> Result<()> {
        self.synth.seed = self.seed;
        self.train.seed = self.seed;
        self.synth.validate()?;
        self.model.validate()?;
        self.augment.validate()?;
        self.train.validate()?;
        let (a, b, c) = self.split;
        if [a, b, c].iter().any(|r| !(0.0..=1.0).contains(r)) || (a + b + c - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "split ratios ({a}, {b}, {c}) must lie in [0, 1] and sum to 1"
            )));
        }
        let p = &self.pretrain;
        if !(p.tau_d > 0.0) || !(p.tau_a > 0.0) {
            return Err(Error::Config("temperatures must be positive".into()));
        }
        if p.batch == 0 || !(p.lr > 0.0) {
            return Err(Error::Config("pretraining needs batch ≥ 1 and lr > 0".into()));
        }
        crate::model::Variant::from_ablations(&self.ablations)?;
        Ok(())
    }

    /// Canonical `key=value` text covering every key.
    pub fn canonical(&self) -> String {
        let mut out = String::new();
        for k in KEYS {
            writeln!(out, "{k}={}", self.get(k).expect("listed key")).expect("write to string");
        }
        out
    }

    /// Hex SHA-256 of the canonical text.
    pub fn fingerprint(&self) -> String {
        let digest = Sha256::digest(self.canonical().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// First 16 hex digits of the fingerprint, used in file names.
    pub fn short_fingerprint(&self) -> String {
        self.fingerprint()[..16].to_string()
    }

    /// Augmentation settings with the ablation flags applied.
    pub fn effective_augment(&self) -> AugmentConfig {
        let mut a = self.augment;
        a.token_masking &= !self.ablations.contains(&Ablation::NoTokenMasking);
        a.field_masking &= !self.ablations.contains(&Ablation::NoFieldMasking);
        a.company_replacing &= !self.ablations.contains(&Ablation::NoCompanyReplacing);
        a
    }

    pub fn pretraining_enabled(&self) -> bool {
        self.pretrain.epochs > 0 && !self.ablations.contains(&Ablation::NoPretrain)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_round_trip() {
        let mut cfg = ExperimentConfig::default();
        cfg.set("ablations", "no_scale, no_pretrain").unwrap();
        cfg.set("tau_d", "0.35").unwrap();
        cfg.validate().unwrap();
        let back = ExperimentConfig::parse(&cfg.canonical(), Path::new("x")).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.fingerprint(), cfg.fingerprint());
    }

    #[test]
    fn every_key_is_settable() {
        let mut cfg = ExperimentConfig::default();
        for k in KEYS {
            let v = cfg.get(k).unwrap();
            cfg.set(k, &v).unwrap();
        }
        assert_eq!(cfg, ExperimentConfig::default());
    }

    #[test]
    fn unknown_and_duplicate_keys_fail() {
        assert!(ExperimentConfig::parse("lr_tokens = 1", Path::new("x")).is_err());
        assert!(ExperimentConfig::parse("seed = 1\nseed = 2", Path::new("x")).is_err());
        assert!(ExperimentConfig::parse("epochs = two", Path::new("x")).is_err());
        assert!(ExperimentConfig::parse("ablations = no_magic", Path::new("x")).is_err());
    }

    #[test]
    fn comments_and_blanks_are_ignored() {
        let cfg = ExperimentConfig::parse("# reference rates\n\nlr_token = 3e-5  # token level\n", Path::new("x")).unwrap();
        assert_eq!(cfg.train.lr_token, 3e-5);
    }
}
