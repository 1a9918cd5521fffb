use serde::{Deserialize, Serialize};

use super::vocab::{TokenId, Vocabulary, EOS};
use crate::error::{Error, Result};

/// Which loss a predicted token belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Role {
    /// Source-side token: auto-encoding loss.
    Ae,
    /// Target-side token or the closing `</s>`: translation loss.
    Mt,
    /// Not scored (the target tag, which is always given at inference).
    None,
}

/// A sentence pair laid out as one causal sequence.
///
/// `roles[i]` is the role of predicting `ids[i + 1]` from `ids[..=i]`, so
/// `roles.len() == ids.len() - 1`; the model input is `ids[..len-1]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TranslationExample {
    pub ids: Vec<TokenId>,
    pub roles: Vec<Role>,
    pub src_lang: String,
    pub tgt_lang: String,
}

impl TranslationExample {
    pub fn input(&self) -> &[TokenId] {
        &self.ids[..self.ids.len() - 1]
    }

    pub fn targets(&self) -> &[TokenId] {
        &self.ids[1..]
    }

    pub fn count(&self, role: Role) -> usize {
        self.roles.iter().filter(|r| **r == role).count()
    }
}

/// `<src> x1..xS <tgt> y1..yT </s>` with roles `[AE; S] NONE [MT; T+1]`.
///
/// With `tags == false` the sequence is `x1..xS y1..yT </s>`: `x1` has no
/// predecessor, so there are `S - 1` AE roles followed by `T + 1` MT roles.
pub fn build_example(
    src: &[TokenId],
    tgt: &[TokenId],
    src_lang: &str,
    tgt_lang: &str,
    vocab: &Vocabulary,
    tags: bool,
) -> Result<TranslationExample> {
    if src.is_empty() || tgt.is_empty() {
        return Err(Error::contract("translation examples need a nonempty source and target"));
    }
    let src_tag = vocab.tag(src_lang)?;
    let tgt_tag = vocab.tag(tgt_lang)?;
    let mut ids = Vec::with_capacity(src.len() + tgt.len() + 3);
    let mut roles = Vec::with_capacity(src.len() + tgt.len() + 2);
    if tags {
        ids.push(src_tag);
        ids.extend_from_slice(src);
        ids.push(tgt_tag);
        roles.extend(std::iter::repeat_n(Role::Ae, src.len()));
        roles.push(Role::None);
    } else {
        ids.extend_from_slice(src);
        roles.extend(std::iter::repeat_n(Role::Ae, src.len() - 1));
    }
    ids.extend_from_slice(tgt);
    ids.push(EOS);
    roles.extend(std::iter::repeat_n(Role::Mt, tgt.len() + 1));
    Ok(TranslationExample {
        ids,
        roles,
        src_lang: src_lang.to_string(),
        tgt_lang: tgt_lang.to_string(),
    })
}

/// Decoding prefix: `<src> x1..xS <tgt>`, or just the source without tags.
pub fn lm_prefix(src: &[TokenId], src_lang: &str, tgt_lang: &str, vocab: &Vocabulary, tags: bool) -> Result<Vec<TokenId>> {
    let src_tag = vocab.tag(src_lang)?;
    let tgt_tag = vocab.tag(tgt_lang)?;
    let mut out = Vec::with_capacity(src.len() + 2);
    if tags {
        out.push(src_tag);
    }
    out.extend_from_slice(src);
    if tags {
        out.push(tgt_tag);
    }
    Ok(out)
}

/// Encoder input and decoder target for the baseline. In multilingual mode
/// the target-language tag is prepended to the source.
pub fn build_encdec_example(
    src: &[TokenId],
    tgt: &[TokenId],
    tgt_lang: &str,
    vocab: &Vocabulary,
    multilingual: bool,
) -> Result<(Vec<TokenId>, Vec<TokenId>)> {
    if src.is_empty() || tgt.is_empty() {
        return Err(Error::contract("translation examples need a nonempty source and target"));
    }
    let src_ids = encdec_source(src, tgt_lang, vocab, multilingual)?;
    let mut tgt_ids = tgt.to_vec();
    tgt_ids.push(EOS);
    Ok((src_ids, tgt_ids))
}

/// Encoder input for the baseline at training and inference time.
pub fn encdec_source(src: &[TokenId], tgt_lang: &str, vocab: &Vocabulary, multilingual: bool) -> Result<Vec<TokenId>> {
    let tag = vocab.tag(tgt_lang)?;
    let mut out = Vec::with_capacity(src.len() + 1);
    if multilingual {
        out.push(tag);
    }
    out.extend_from_slice(src);
    Ok(out)
}

/// Decoder input for teacher forcing: `</s>` as the start symbol followed by
/// all but the last target token.
pub fn decoder_input(tgt_ids: &[TokenId]) -> Vec<TokenId> {
    let mut out = Vec::with_capacity(tgt_ids.len());
    out.push(EOS);
    out.extend_from_slice(&tgt_ids[..tgt_ids.len().saturating_sub(1)]);
    out
}

/// How sentence pairs are laid out for a model. `tags` applies to the
/// decoder-only layout; `multilingual` prepends the target tag to the
/// baseline's source.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SequenceFormat {
    pub tags: bool,
    pub multilingual: bool,
}

impl Default for SequenceFormat {
    fn default() -> Self {
        Self {
            tags: true,
            multilingual: false,
        }
    }
}
