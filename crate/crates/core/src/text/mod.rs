//! Vocabulary and the token sequences fed to the token-level encoders.

mod sequence;
mod vocab;

pub use sequence::{
    assemble_combined, assemble_attribute, assemble_description, assemble_sequence, check_sequence, pad_or_truncate,
    FieldContents, SeqGroup, TokenSequence, CLS_FIELD, PAD_FIELD,
};
pub use vocab::{
    build_vocab, is_structural, record_texts, words, Vocab, CLS, EOS, FIELD_MASK, PAD, RESERVED,
    SEP, TOKEN_MASK, UNK,
};
