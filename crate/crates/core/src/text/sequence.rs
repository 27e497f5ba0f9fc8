use std::collections::BTreeSet;

use super::vocab::{is_structural, Vocab, CLS, EOS, FIELD_MASK, PAD, SEP};
use crate::data::{CompanyRecord, FieldSchema, SolutionRecord};
use crate::error::{Error, Result};

/// Field id of the leading `[CLS]` token; schema fields are numbered from 1.
pub const CLS_FIELD: usize = 0;
/// Field id carried by padding positions.
pub const PAD_FIELD: usize = usize::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SeqGroup {
    Description,
    Attribute,
    /// Both groups in one sequence: each entity's description fields followed
    /// by its attribute fields.
    Combined,
}

impl SeqGroup {
    pub fn as_str(self) -> &'static str {
        match self {
            SeqGroup::Description => "description",
            SeqGroup::Attribute => "attribute",
            SeqGroup::Combined => "combined",
        }
    }
}

/// Token ids paired with per-token field ids. Layout:
/// `[CLS] s_1 [SEP] … s_F [SEP] [SEP] c_1 [SEP] … c_G [SEP] [SEP] [PAD]…`.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub token_ids: Vec<usize>,
    pub field_ids: Vec<usize>,
    pub attention_mask: Vec<bool>,
    pub group: SeqGroup,
    /// Index of the first company token.
    pub boundary: usize,
    /// `sep_positions[f]` is the position of the trailing `[SEP]` of the field
    /// with id `f + 1`.
    pub sep_positions: Vec<usize>,
    pub n_solution_fields: usize,
    pub n_company_fields: usize,
    /// Per field (index `f` ↔ id `f + 1`): whether content is framed as tags
    /// each closed by `[EOS]`.
    pub tagged: Vec<bool>,
}

/// Content tokens per field, before framing. An empty field renders as
/// `[field_mask]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldContents {
    pub group: SeqGroup,
    pub solution: Vec<Vec<usize>>,
    pub company: Vec<Vec<usize>>,
    pub tagged: Vec<bool>,
}

fn render_text(text: Option<&String>, vocab: &Vocab) -> Vec<usize> {
    text.map(|t| vocab.tokenize(t)).unwrap_or_default()
}

fn render_tags(tags: Option<&Vec<String>>, vocab: &Vocab) -> Vec<usize> {
    let mut out = Vec::new();
    for tag in tags.into_iter().flatten() {
        let ids = vocab.tokenize(tag);
        if !ids.is_empty() {
            out.extend(ids);
            out.push(EOS);
        }
    }
    out
}

impl FieldContents {
    pub fn from_records(
        group: SeqGroup,
        s: &SolutionRecord,
        c: &CompanyRecord,
        schema: &FieldSchema,
        vocab: &Vocab,
    ) -> FieldContents {
        let desc = |fields: &[String], map: &std::collections::BTreeMap<String, String>| -> Vec<Vec<usize>> {
            fields.iter().map(|f| render_text(map.get(f), vocab)).collect()
        };
        let attr = |fields: &[String], map: &std::collections::BTreeMap<String, Vec<String>>| -> Vec<Vec<usize>> {
            fields.iter().map(|f| render_tags(map.get(f), vocab)).collect()
        };
        let (solution, company, tagged) = match group {
            SeqGroup::Description => {
                let n = schema.desc_fields_solution.len() + schema.desc_fields_company.len();
                (
                    desc(&schema.desc_fields_solution, &s.desc),
                    desc(&schema.desc_fields_company, &c.desc),
                    vec![false; n],
                )
            }
            SeqGroup::Attribute => {
                let n = schema.attr_fields_solution.len() + schema.attr_fields_company.len();
                (
                    attr(&schema.attr_fields_solution, &s.attr),
                    attr(&schema.attr_fields_company, &c.attr),
                    vec![true; n],
                )
            }
            SeqGroup::Combined => {
                let mut sol = desc(&schema.desc_fields_solution, &s.desc);
                sol.extend(attr(&schema.attr_fields_solution, &s.attr));
                let mut comp = desc(&schema.desc_fields_company, &c.desc);
                comp.extend(attr(&schema.attr_fields_company, &c.attr));
                let mut tagged = vec![false; schema.desc_fields_solution.len()];
                tagged.extend(vec![true; schema.attr_fields_solution.len()]);
                tagged.extend(vec![false; schema.desc_fields_company.len()]);
                tagged.extend(vec![true; schema.attr_fields_company.len()]);
                (sol, comp, tagged)
            }
        };
        FieldContents {
            group,
            solution,
            company,
            tagged,
        }
    }

    pub fn n_fields(&self) -> usize {
        self.solution.len() + self.company.len()
    }

    fn field_mut(&mut self, f: usize) -> &mut Vec<usize> {
        let ns = self.solution.len();
        if f < ns {
            &mut self.solution[f]
        } else {
            &mut self.company[f - ns]
        }
    }

    fn field(&self, f: usize) -> &[usize] {
        let ns = self.solution.len();
        if f < ns {
            &self.solution[f]
        } else {
            &self.company[f - ns]
        }
    }

    /// Rendered field length: content (or the single `[field_mask]`) without
    /// its `[SEP]`.
    fn rendered_len(&self, f: usize) -> usize {
        self.field(f).len().max(1)
    }

    /// Length after framing.
    pub fn framed_len(&self) -> usize {
        1 + 2 + (0..self.n_fields()).map(|f| self.rendered_len(f) + 1).sum::<usize>()
    }

    /// Smallest framed length reachable by truncation.
    pub fn min_framed_len(&self) -> usize {
        let content: usize = (0..self.n_fields())
            .map(|f| {
                let words = word_count(self.field(f));
                if words == 0 {
                    1
                } else if self.tagged[f] {
                    2
                } else {
                    1
                }
            })
            .sum();
        1 + 2 + self.n_fields() + content
    }

    /// Removes content words from the longest field (most words; ties go to
    /// the lowest field index) one at a time until the framed sequence fits.
    /// Every field keeps at least one word; a tag emptied by removal loses its
    /// `[EOS]` too.
    pub fn truncate_to(&mut self, max_len: usize) -> Result<()> {
        let min = self.min_framed_len();
        if max_len < min {
            return Err(Error::invalid(format!(
                "max_len {max_len} is below the minimum frame size {min}"
            )));
        }
        let mut len = self.framed_len();
        while len > max_len {
            let mut best: Option<(usize, usize)> = None;
            for f in 0..self.n_fields() {
                let w = word_count(self.field(f));
                if w > 1 && best.map_or(true, |(_, bw)| w > bw) {
                    best = Some((f, w));
                }
            }
            let (f, _) = best.expect("min frame check guarantees a removable word");
            let field = self.field_mut(f);
            let last_word = field
                .iter()
                .rposition(|&t| t != EOS)
                .expect("field has words");
            let tag_emptied = last_word + 1 < field.len()
                && field[last_word + 1] == EOS
                && (last_word == 0 || field[last_word - 1] == EOS);
            if tag_emptied {
                field.drain(last_word..last_word + 2);
                len -= 2;
            } else {
                field.remove(last_word);
                len -= 1;
            }
        }
        Ok(())
    }

    pub fn to_sequence(&self) -> TokenSequence {
        let n = self.framed_len();
        let mut token_ids = Vec::with_capacity(n);
        let mut field_ids = Vec::with_capacity(n);
        let mut sep_positions = Vec::with_capacity(self.n_fields());
        token_ids.push(CLS);
        field_ids.push(CLS_FIELD);
        let mut boundary = 0;
        let mut fid = 0;
        for (block, fields) in [&self.solution, &self.company].into_iter().enumerate() {
            if block == 1 {
                boundary = token_ids.len();
            }
            for content in fields {
                fid += 1;
                if content.is_empty() {
                    token_ids.push(FIELD_MASK);
                    field_ids.push(fid);
                } else {
                    token_ids.extend_from_slice(content);
                    field_ids.extend(std::iter::repeat(fid).take(content.len()));
                }
                sep_positions.push(token_ids.len());
                token_ids.push(SEP);
                field_ids.push(fid);
            }
            token_ids.push(SEP);
            field_ids.push(fid.max(CLS_FIELD));
        }
        let len = token_ids.len();
        TokenSequence {
            token_ids,
            field_ids,
            attention_mask: vec![true; len],
            group: self.group,
            boundary,
            sep_positions,
            n_solution_fields: self.solution.len(),
            n_company_fields: self.company.len(),
            tagged: self.tagged.clone(),
        }
    }
}

fn word_count(content: &[usize]) -> usize {
    content.iter().filter(|&&t| t != EOS).count()
}

/// Assembles the sequence of any group, truncated to `max_len`.
pub fn assemble_sequence(
    group: SeqGroup,
    s: &SolutionRecord,
    c: &CompanyRecord,
    schema: &FieldSchema,
    vocab: &Vocab,
    max_len: usize,
) -> Result<TokenSequence> {
    let mut contents = FieldContents::from_records(group, s, c, schema, vocab);
    contents.truncate_to(max_len)?;
    Ok(contents.to_sequence())
}

/// Description sequence: solution then company description fields, each
/// closed by `[SEP]`, each block closed by an extra `[SEP]`. Missing fields
/// render as `[field_mask]`. Over-long inputs are truncated to `max_len`.
pub fn assemble_description(
    s: &SolutionRecord,
    c: &CompanyRecord,
    schema: &FieldSchema,
    vocab: &Vocab,
    max_len: usize,
) -> Result<TokenSequence> {
    assemble_sequence(SeqGroup::Description, s, c, schema, vocab, max_len)
}

/// Attribute sequence: as the description sequence, with every tag closed by
/// `[EOS]`.
pub fn assemble_attribute(
    s: &SolutionRecord,
    c: &CompanyRecord,
    schema: &FieldSchema,
    vocab: &Vocab,
    max_len: usize,
) -> Result<TokenSequence> {
    assemble_sequence(SeqGroup::Attribute, s, c, schema, vocab, max_len)
}

/// Single sequence carrying both text groups.
pub fn assemble_combined(
    s: &SolutionRecord,
    c: &CompanyRecord,
    schema: &FieldSchema,
    vocab: &Vocab,
    max_len: usize,
) -> Result<TokenSequence> {
    assemble_sequence(SeqGroup::Combined, s, c, schema, vocab, max_len)
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    pub fn n_fields(&self) -> usize {
        self.n_solution_fields + self.n_company_fields
    }

    /// Number of non-padding positions; padding is always a suffix.
    pub fn real_len(&self) -> usize {
        self.attention_mask.iter().filter(|&&m| m).count()
    }

    /// Token range of field `f` (0-based) excluding its trailing `[SEP]`.
    pub fn field_span(&self, f: usize) -> std::ops::Range<usize> {
        let end = self.sep_positions[f];
        let start = if f == 0 {
            1
        } else if f == self.n_solution_fields {
            self.boundary
        } else {
            self.sep_positions[f - 1] + 1
        };
        start..end
    }

    /// Recovers the per-field content, dropping padding.
    pub fn contents(&self) -> FieldContents {
        let fields: Vec<Vec<usize>> = (0..self.n_fields())
            .map(|f| {
                let span = &self.token_ids[self.field_span(f)];
                if span == [FIELD_MASK] {
                    Vec::new()
                } else {
                    span.to_vec()
                }
            })
            .collect();
        let (sol, comp) = fields.split_at(self.n_solution_fields);
        FieldContents {
            group: self.group,
            solution: sol.to_vec(),
            company: comp.to_vec(),
            tagged: self.tagged.clone(),
        }
    }

    /// Positions that carry content (not `[CLS]`, `[SEP]`, `[EOS]`, `[PAD]`).
    pub fn content_positions(&self) -> Vec<usize> {
        (0..self.real_len())
            .filter(|&i| !is_structural(self.token_ids[i]))
            .collect()
    }
}

/// Truncates (longest field first) and pads with `[PAD]` to exactly
/// `max_len`. Padding carries [`PAD_FIELD`] and a false attention mask.
pub fn pad_or_truncate(seq: &TokenSequence, max_len: usize) -> Result<TokenSequence> {
    let real = seq.real_len();
    let mut out = if real > max_len {
        let mut contents = seq.contents();
        contents.truncate_to(max_len)?;
        contents.to_sequence()
    } else {
        let mut s = seq.clone();
        s.token_ids.truncate(real);
        s.field_ids.truncate(real);
        s.attention_mask.truncate(real);
        s
    };
    let pad = max_len - out.len();
    out.token_ids.extend(std::iter::repeat(PAD).take(pad));
    out.field_ids.extend(std::iter::repeat(PAD_FIELD).take(pad));
    out.attention_mask.extend(std::iter::repeat(false).take(pad));
    Ok(out)
}

fn violation(msg: impl Into<String>) -> Error {
    Error::Invalid(format!("sequence invariant violated: {}", msg.into()))
}

/// Checks every structural invariant of a [`TokenSequence`].
pub fn check_sequence(seq: &TokenSequence) -> Result<()> {
    let n = seq.len();
    if seq.field_ids.len() != n || seq.attention_mask.len() != n {
        return Err(violation("token, field and mask lengths differ"));
    }
    let nf = seq.n_fields();
    if seq.sep_positions.len() != nf || seq.tagged.len() != nf {
        return Err(violation("field bookkeeping length mismatch"));
    }
    let real = seq.real_len();
    for i in 0..n {
        let is_pad = i >= real;
        if seq.attention_mask[i] == is_pad {
            return Err(violation(format!("padding is not a suffix (position {i})")));
        }
        if is_pad && (seq.token_ids[i] != PAD || seq.field_ids[i] != PAD_FIELD) {
            return Err(violation(format!("padding position {i} is not [PAD]/pad field")));
        }
        if !is_pad && seq.token_ids[i] == PAD {
            return Err(violation(format!("[PAD] inside real tokens at {i}")));
        }
    }
    if real == 0 || seq.token_ids[0] != CLS || seq.field_ids[0] != CLS_FIELD {
        return Err(violation("position 0 must be [CLS] with the [CLS] field id"));
    }
    let mut pos = 1;
    let mut fid = 0;
    for (block, count) in [seq.n_solution_fields, seq.n_company_fields].into_iter().enumerate() {
        if count == 0 {
            return Err(violation("each entity block needs at least one field"));
        }
        if block == 1 && seq.boundary != pos {
            return Err(violation(format!("boundary {} but company block starts at {pos}", seq.boundary)));
        }
        for _ in 0..count {
            fid += 1;
            let start = pos;
            while pos < real && seq.token_ids[pos] != SEP {
                if seq.token_ids[pos] == CLS {
                    return Err(violation(format!("[CLS] inside field {fid}")));
                }
                if seq.field_ids[pos] != fid {
                    return Err(violation(format!("position {pos} has field id {} in field {fid}", seq.field_ids[pos])));
                }
                pos += 1;
            }
            if pos >= real {
                return Err(violation(format!("field {fid} has no trailing [SEP]")));
            }
            if seq.field_ids[pos] != fid || seq.sep_positions[fid - 1] != pos {
                return Err(violation(format!("[SEP] of field {fid} misplaced or mislabeled")));
            }
            check_field_content(&seq.token_ids[start..pos], seq.tagged[fid - 1], fid)?;
            pos += 1;
        }
        if pos >= real || seq.token_ids[pos] != SEP || seq.field_ids[pos] != fid {
            return Err(violation(format!("block {block} lacks its closing [SEP]")));
        }
        pos += 1;
    }
    if pos != real {
        return Err(violation("tokens after the company block"));
    }
    let doubles = (0..real.saturating_sub(1))
        .filter(|&i| seq.token_ids[i] == SEP && seq.token_ids[i + 1] == SEP)
        .count();
    if doubles != 2 {
        return Err(violation(format!("{doubles} double-[SEP] occurrences, expected 2")));
    }
    let distinct: BTreeSet<usize> = seq.field_ids[..real].iter().copied().collect();
    if distinct.len() != nf + 1 {
        return Err(violation("field ids do not partition the fields"));
    }
    Ok(())
}

fn check_field_content(span: &[usize], tagged: bool, fid: usize) -> Result<()> {
    if span.is_empty() {
        return Err(violation(format!("field {fid} is empty")));
    }
    if span.contains(&FIELD_MASK) {
        return if span == [FIELD_MASK] {
            Ok(())
        } else {
            Err(violation(format!("[field_mask] mixed with content in field {fid}")))
        };
    }
    if !tagged {
        return if span.contains(&EOS) {
            Err(violation(format!("[EOS] in untagged field {fid}")))
        } else {
            Ok(())
        };
    }
    if *span.last().expect("non-empty") != EOS {
        return Err(violation(format!("last tag of field {fid} lacks [EOS]")));
    }
    let mut prev_eos = true;
    for &t in span {
        if t == EOS && prev_eos {
            return Err(violation(format!("empty tag in field {fid}")));
        }
        prev_eos = t == EOS;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::super::vocab::TOKEN_MASK;
    use super::*;

    fn contents(sol: &[usize], comp: &[usize]) -> FieldContents {
        FieldContents {
            group: SeqGroup::Description,
            solution: sol.iter().map(|&n| vec![10; n]).collect(),
            company: comp.iter().map(|&n| vec![11; n]).collect(),
            tagged: vec![false; sol.len() + comp.len()],
        }
    }

    #[test]
    fn one_token_fields_frame() {
        let seq = contents(&[1, 1], &[1, 1, 1]).to_sequence();
        assert_eq!(seq.len(), 13);
        assert_eq!(
            seq.token_ids,
            vec![CLS, 10, SEP, 10, SEP, SEP, 11, SEP, 11, SEP, 11, SEP, SEP]
        );
        assert_eq!(seq.field_ids, vec![0, 1, 1, 2, 2, 2, 3, 3, 4, 4, 5, 5, 5]);
        assert_eq!(seq.sep_positions, vec![2, 4, 7, 9, 11]);
        assert_eq!(seq.boundary, 6);
        check_sequence(&seq).unwrap();
    }

    #[test]
    fn truncation_takes_from_longest_field() {
        let mut c = contents(&[50], &[10]);
        let before = c.framed_len();
        c.truncate_to(before - 20).unwrap();
        assert_eq!(c.solution[0].len(), 30);
        assert_eq!(c.company[0].len(), 10);
    }

    #[test]
    fn truncation_alternates_between_tied_fields() {
        let mut c = contents(&[4], &[4]);
        let before = c.framed_len();
        c.truncate_to(before - 3).unwrap();
        assert_eq!((c.solution[0].len(), c.company[0].len()), (2, 3));
    }

    #[test]
    fn frame_too_small_is_an_error() {
        let mut c = contents(&[3], &[3]);
        assert_eq!(c.min_framed_len(), 1 + 2 + 2 + 2);
        assert!(c.truncate_to(6).is_err());
        assert!(c.truncate_to(7).is_ok());
    }

    #[test]
    fn tag_removal_drops_eos() {
        let mut c = FieldContents {
            group: SeqGroup::Attribute,
            solution: vec![vec![10, 11, EOS, 12, EOS]],
            company: vec![vec![13, EOS]],
            tagged: vec![true, true],
        };
        let len = c.framed_len();
        c.truncate_to(len - 2).unwrap();
        assert_eq!(c.solution[0], vec![10, 11, EOS]);
        c.truncate_to(len - 3).unwrap();
        assert_eq!(c.solution[0], vec![10, EOS]);
        check_sequence(&c.to_sequence()).unwrap();
    }

    #[test]
    fn padding_and_identity() {
        let seq = contents(&[2], &[3]).to_sequence();
        let same = pad_or_truncate(&seq, seq.len()).unwrap();
        assert_eq!(same, seq);
        let padded = pad_or_truncate(&seq, seq.len() + 4).unwrap();
        assert_eq!(padded.len(), seq.len() + 4);
        assert_eq!(padded.real_len(), seq.len());
        assert_eq!(&padded.token_ids[seq.len()..], &[PAD; 4]);
        check_sequence(&padded).unwrap();
        let shorter = pad_or_truncate(&padded, seq.len() - 1).unwrap();
        assert_eq!(shorter.len(), seq.len() - 1);
        check_sequence(&shorter).unwrap();
    }

    #[test]
    fn checker_rejects_corruption() {
        let seq = contents(&[2], &[2]).to_sequence();
        let mut bad = seq.clone();
        bad.field_ids[1] = 2;
        assert!(check_sequence(&bad).is_err());
        let mut bad = seq.clone();
        bad.token_ids[1] = SEP;
        assert!(check_sequence(&bad).is_err());
        let mut masked = seq.clone();
        masked.token_ids[1] = TOKEN_MASK;
        check_sequence(&masked).unwrap();
    }
}
