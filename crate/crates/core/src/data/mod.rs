//! Tokenization, vocabulary, sequence layouts, corpora, batching, synthetic
//! cipher languages and the missing-word perturbation.

pub mod batch;
pub mod bpe;
pub mod corpus;
pub mod example;
pub mod perturb;
pub mod synth;
mod vocab;
#[cfg(test)]
mod tests;

use std::collections::BTreeSet;

pub use batch::{Batch, BatchStream, ItemRef, Part};
pub use bpe::BpeModel;
pub use corpus::ParallelCorpus;
pub use example::{build_encdec_example, build_example, decoder_input, encdec_source, lm_prefix, Role, SequenceFormat, TranslationExample};
pub use perturb::{perturb_line, perturb_missing_words};
pub use synth::{gen_synthetic_corpus, Reorder, SynthSpec, Synthesizer};
pub use vocab::{tag_token, TokenId, Vocabulary, EOS, PAD, RESERVED_TOKENS, UNK};

/// Independent 64-bit seed for a named stream under `seed` (FNV-1a of the
/// label folded into the seed, then a splitmix64 finalizer).
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    let mut z = seed ^ h.rotate_left(17);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Joint vocabulary covering every subword BPE produces on `lines`, plus every
/// single character seen (with and without the continuation marker) so unseen
/// words never fall back to `<unk>`. Tokens are sorted for determinism.
pub fn build_vocab<S: AsRef<str>>(langs: &[String], bpe: &BpeModel, lines: &[S]) -> crate::Result<Vocabulary> {
    let mut toks = BTreeSet::new();
    for line in lines {
        for w in line.as_ref().split_whitespace() {
            toks.extend(bpe.encode_word(w));
            for c in w.chars() {
                toks.insert(c.to_string());
                toks.insert(format!("{c}{}", bpe::CONTINUATION));
            }
        }
    }
    Vocabulary::new(langs, toks)
}

/// BPE plus vocabulary: text ↔ ids.
#[derive(Clone, Debug)]
pub struct Tokenizer {
    pub bpe: BpeModel,
    pub vocab: Vocabulary,
}

impl Tokenizer {
    pub fn encode(&self, line: &str) -> Vec<TokenId> {
        self.vocab.encode(&self.bpe.encode(line))
    }

    /// Ids back to text, dropping control tokens and joining subwords.
    pub fn decode(&self, ids: &[TokenId]) -> String {
        BpeModel::decode(&self.vocab.decode(ids))
    }
}
