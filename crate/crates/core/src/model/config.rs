use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Dimensions of every encoder in the matcher.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Token and field representation width.
    pub d_e: usize,
    pub token_layers: usize,
    pub heads: usize,
    pub ff: usize,
    /// Longest token sequence (also the position-embedding table size).
    pub max_len: usize,
    pub field_layers: usize,
    /// Scale embedding width.
    pub d_s: usize,
    /// Soft-discretization buckets per numeric field.
    pub buckets: usize,
    /// Skip coefficient inside the numeric-field encoder.
    pub alpha: f64,
    /// Standard deviation of embedding initialisation.
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_e: 64,
            token_layers: 2,
            heads: 4,
            ff: 128,
            max_len: 128,
            field_layers: 2,
            d_s: 32,
            buckets: 8,
            alpha: 1.0,
            init_std: 0.1,
        }
    }
}

impl ModelConfig {
    /// Small dimensions used by tests and the default quickstart.
    pub fn tiny() -> Self {
        ModelConfig {
            d_e: 16,
            token_layers: 1,
            heads: 2,
            ff: 32,
            max_len: 96,
            field_layers: 1,
            d_s: 8,
            buckets: 4,
            alpha: 1.0,
            init_std: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_e == 0 || self.heads == 0 || self.d_e % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_e = {} must be a positive multiple of heads = {}",
                self.d_e, self.heads
            )));
        }
        for (name, v) in [("ff", self.ff), ("max_len", self.max_len), ("d_s", self.d_s)] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.buckets < 2 {
            return Err(Error::Config(format!("buckets = {} must be at least 2", self.buckets)));
        }
        if !self.alpha.is_finite() || !(self.init_std > 0.0) {
            return Err(Error::Config("alpha must be finite and init_std positive".into()));
        }
        Ok(())
    }
}

/// Components that can be removed for ablation studies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Ablation {
    NoDesc,
    NoAttr,
    NoTextGrouping,
    NoFieldEmbeddings,
    NoScale,
    NoFieldLevel,
    NoPretrain,
    NoTokenMasking,
    NoFieldMasking,
    NoCompanyReplacing,
}

impl Ablation {
    pub const ALL: [Ablation; 10] = [
        Ablation::NoDesc,
        Ablation::NoAttr,
        Ablation::NoTextGrouping,
        Ablation::NoFieldEmbeddings,
        Ablation::NoScale,
        Ablation::NoFieldLevel,
        Ablation::NoPretrain,
        Ablation::NoTokenMasking,
        Ablation::NoFieldMasking,
        Ablation::NoCompanyReplacing,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::NoDesc => "no_desc",
            Ablation::NoAttr => "no_attr",
            Ablation::NoTextGrouping => "no_text_grouping",
            Ablation::NoFieldEmbeddings => "no_field_embeddings",
            Ablation::NoScale => "no_scale",
            Ablation::NoFieldLevel => "no_field_level",
            Ablation::NoPretrain => "no_pretrain",
            Ablation::NoTokenMasking => "no_token_masking",
            Ablation::NoFieldMasking => "no_field_masking",
            Ablation::NoCompanyReplacing => "no_company_replacing",
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown ablation flag `{s}` (expected one of {})",
                    Ablation::ALL.map(Ablation::as_str).join(", ")
                ))
            })
    }
}

/// Which parts of the matcher exist. Built from a set of ablation flags.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Variant {
    pub desc: bool,
    pub attr: bool,
    /// One encoder over a single sequence holding both text groups.
    pub combined_text: bool,
    pub field_embeddings: bool,
    pub scale: bool,
    pub field_level: bool,
}

impl Default for Variant {
    fn default() -> Self {
        Variant::full()
    }
}

impl Variant {
    pub fn full() -> Self {
        Variant {
            desc: true,
            attr: true,
            combined_text: false,
            field_embeddings: true,
            scale: true,
            field_level: true,
        }
    }

    pub fn from_ablations(flags: &BTreeSet<Ablation>) -> Result<Self> {
        let mut v = Variant::full();
        for f in flags {
            match f {
                Ablation::NoDesc => v.desc = false,
                Ablation::NoAttr => v.attr = false,
                Ablation::NoTextGrouping => v.combined_text = true,
                Ablation::NoFieldEmbeddings => v.field_embeddings = false,
                Ablation::NoScale => v.scale = false,
                Ablation::NoFieldLevel => v.field_level = false,
                Ablation::NoPretrain
                | Ablation::NoTokenMasking
                | Ablation::NoFieldMasking
                | Ablation::NoCompanyReplacing => {}
            }
        }
        if v.combined_text && !(v.desc && v.attr) {
            return Err(Error::Config(
                "no_text_grouping cannot be combined with no_desc or no_attr".into(),
            ));
        }
        if !v.desc && !v.attr && !v.scale {
            return Err(Error::Config("ablation removes every matching signal".into()));
        }
        Ok(v)
    }
}
