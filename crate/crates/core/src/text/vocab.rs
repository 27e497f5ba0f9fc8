use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use crate::data::{CompanyRecord, SolutionRecord};
use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const CLS: usize = 1;
pub const SEP: usize = 2;
pub const EOS: usize = 3;
pub const TOKEN_MASK: usize = 4;
pub const FIELD_MASK: usize = 5;
pub const UNK: usize = 6;

/// Reserved tokens, in id order.
pub const RESERVED: [&str; 7] = [
    "[PAD]",
    "[CLS]",
    "[SEP]",
    "[EOS]",
    "[token_mask]",
    "[field_mask]",
    "[UNK]",
];

/// True for ids that only frame a sequence and never carry content.
pub fn is_structural(id: usize) -> bool {
    matches!(id, PAD | CLS | SEP | EOS)
}

/// Lowercased whitespace tokenization.
pub fn words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace().map(str::to_lowercase)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Reserved tokens plus every token occurring at least `min_count` times,
    /// ordered by count descending then token ascending.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, min_count: usize) -> Vocab {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for t in texts {
            for w in words(t) {
                *counts.entry(w).or_insert(0) += 1;
            }
        }
        let mut kept: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(w, c)| *c >= min_count.max(1) && !RESERVED.contains(&w.as_str()))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let tokens = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(kept.into_iter().map(|(w, _)| w))
            .collect();
        Vocab::from_tokens(tokens).expect("reserved prefix and unique tokens by construction")
    }

    /// Builds from an explicit id-ordered token list; the reserved tokens must
    /// come first and every token must be unique.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Vocab> {
        if tokens.len() < RESERVED.len() || tokens.iter().zip(RESERVED).any(|(a, b)| a != b) {
            return Err(Error::invalid(format!(
                "vocabulary must start with the reserved tokens {RESERVED:?}"
            )));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::invalid(format!("duplicate vocabulary token `{t}`")));
            }
        }
        Ok(Vocab { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Id of an already-normalized token; unknown tokens map to `[UNK]`.
    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        words(text).map(|w| self.id(&w)).collect()
    }

    pub fn detokenize(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&i| self.token(i).unwrap_or("[UNK]"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// One token per line; the line number is the id.
    pub fn store(&self, path: &Path) -> Result<()> {
        let mut out = self.tokens.join("\n");
        out.push('\n');
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Vocab> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let tokens: Vec<String> = text.lines().map(str::to_string).collect();
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    msg: "vocabulary tokens must be non-empty and contain no whitespace".into(),
                });
            }
        }
        Vocab::from_tokens(tokens)
    }
}

/// Every text in the records: description values and attribute tags.
pub fn record_texts<'a>(
    solutions: &'a [SolutionRecord],
    companies: &'a [CompanyRecord],
) -> impl Iterator<Item = &'a str> {
    let s = solutions
        .iter()
        .flat_map(|r| r.desc.values().map(String::as_str).chain(r.attr.values().flatten().map(String::as_str)));
    let c = companies
        .iter()
        .flat_map(|r| r.desc.values().map(String::as_str).chain(r.attr.values().flatten().map(String::as_str)));
    s.chain(c)
}

pub fn build_vocab(solutions: &[SolutionRecord], companies: &[CompanyRecord], min_count: usize) -> Vocab {
    Vocab::build(record_texts(solutions, companies), min_count)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_word_corpus() {
        let v = Vocab::build(["Cloud"], 1);
        assert_eq!(v.len(), 8);
        assert_eq!(v.id("cloud"), 7);
        assert_eq!(v.tokenize("CLOUD storage"), vec![7, UNK]);
    }

    #[test]
    fn document_order_does_not_matter() {
        let a = Vocab::build(["b a a", "c d"], 1);
        let b = Vocab::build(["c d", "b a a"], 1);
        assert_eq!(a, b);
        assert_eq!(&a.tokens()[7..], ["a", "b", "c", "d"]);
    }

    #[test]
    fn hapax_tokens_become_unknown() {
        // Counts: retail 3, store 2, cloud 2, erp 1, crm 1, shop 1.
        let docs = [
            "retail store",
            "retail cloud",
            "cloud erp",
            "store crm",
            "retail shop",
        ];
        let v = Vocab::build(docs, 2);
        assert_eq!(&v.tokens()[7..], ["retail", "cloud", "store"]);
        assert_eq!(v.tokenize("erp retail shop"), vec![UNK, 7, UNK]);
    }

    #[test]
    fn reserved_prefix_is_required() {
        assert!(Vocab::from_tokens(vec!["a".into()]).is_err());
        let mut t: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        t.push("[SEP]".into());
        assert!(Vocab::from_tokens(t).is_err());
    }

    #[test]
    fn file_round_trip() {
        let v = Vocab::build(["alpha beta beta"], 1);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vocab.txt");
        v.store(&p).unwrap();
        assert_eq!(Vocab::load(&p).unwrap(), v);
    }
}
