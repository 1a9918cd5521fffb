//! Greedy and beam-search generation over an incremental key/value cache,
//! for both model families, plus pivot chaining and file-level translation.

use std::cmp::Ordering;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::corpus::write_lines;
use crate::data::{encdec_source, lm_prefix, SequenceFormat, TokenId, Tokenizer, Vocabulary, EOS, PAD};
use crate::error::{Error, Result};
use crate::model::checkpoint::Checkpoint;
use crate::model::{EncoderMemory, Family, LayerCache, Model};
use crate::tensor::Float;
use crate::train::checkpoint_format;


#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Strategy {
    Greedy,
    /// Keeps `width` hypotheses ranked by `logP / ((5 + len) / 6)^length_penalty`.
    Beam { width: usize, length_penalty: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    pub strategy: Strategy,
    pub max_new_tokens: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Beam {
                width: 4,
                length_penalty: 0.6,
            },
            max_new_tokens: 64,
        }
    }
}

impl DecodeConfig {
    pub fn greedy(max_new_tokens: usize) -> Self {
        Self {
            strategy: Strategy::Greedy,
            max_new_tokens,
        }
    }

    pub fn beam(width: usize, length_penalty: f64, max_new_tokens: usize) -> Self {
        Self {
            strategy: Strategy::Beam { width, length_penalty },
            max_new_tokens,
        }
    }

    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if self.max_new_tokens == 0 {
            p.push("max_new_tokens must be at least 1".to_string());
        }
        if let Strategy::Beam { width, length_penalty } = self.strategy {
            if width == 0 {
                p.push("beam width must be at least 1".to_string());
            }
            if !length_penalty.is_finite() {
                p.push(format!("length_penalty must be finite, got {length_penalty}"));
            }
        }
        p
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p.join("; ")))
        }
    }
}

/// GNMT length normalizer `((5 + len) / 6)^p`.
pub fn length_penalty(len: usize, p: f64) -> f64 {
    ((5.0 + len as f64) / 6.0).powf(p)
}

/// Decoder caches for every consumed position, the encoder memory for the
/// baseline, and the logits predicting the next token.
#[derive(Clone, Debug)]
pub struct IncrementalState<T: Float = f32> {
    caches: Vec<LayerCache<T>>,
    memory: Option<Arc<EncoderMemory<T>>>,
    len: usize,
    logits: Vec<T>,
}

impl<T: Float> IncrementalState<T> {
    /// Tokens consumed so far.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Next-token logits after the last consumed token.
    pub fn logits(&self) -> &[T] {
        &self.logits
    }

    /// Cached rows in decoder layer `layer`.
    pub fn cache_rows(&self, layer: usize, d_model: usize) -> usize {
        self.caches.get(layer).map_or(0, |c| c.k.len() / d_model)
    }
}

/// Runs `<src_tag> x1..xS <tgt_tag>` through a decoder-only model in one
/// parallel pass. Without tags the prefix is the bare source; a tagless empty
/// source falls back to `</s>` so there is something to condition on.
pub fn prime_prefix<T: Float>(
    model: &Model<T>,
    vocab: &Vocabulary,
    format: SequenceFormat,
    src: &[TokenId],
    src_lang: &str,
    tgt_lang: &str,
) -> Result<IncrementalState<T>> {
    if model.family() != Family::DecoderOnly {
        return Err(Error::contract("prime_prefix needs a decoder-only model"));
    }
    let mut prefix = lm_prefix(src, src_lang, tgt_lang, vocab, format.tags)?;
    if prefix.is_empty() {
        prefix.push(EOS);
    }
    let mut caches = Vec::new();
    let all = model.extend(&mut caches, None, &prefix)?;
    let v = model.config().vocab_size;
    Ok(IncrementalState {
        caches,
        memory: None,
        len: prefix.len(),
        logits: all[all.len() - v..].to_vec(),
    })
}

/// Encodes the source once and feeds the `</s>` start symbol. An empty
/// source becomes `</s>` so the encoder has a row to attend to.
pub fn prime_encdec<T: Float>(model: &Model<T>, vocab: &Vocabulary, format: SequenceFormat, src: &[TokenId], tgt_lang: &str) -> Result<IncrementalState<T>> {
    let mut source = encdec_source(src, tgt_lang, vocab, format.multilingual)?;
    if source.is_empty() {
        source.push(EOS);
    }
    let memory = Arc::new(model.encode_memory(&source)?);
    let mut caches = Vec::new();
    let logits = model.extend(&mut caches, Some(&memory), &[EOS])?;
    Ok(IncrementalState {
        caches,
        memory: Some(memory),
        len: 1,
        logits,
    })
}

/// Primes either family for translating `src` into `tgt_lang`.
pub fn prime<T: Float>(
    model: &Model<T>,
    vocab: &Vocabulary,
    format: SequenceFormat,
    src: &[TokenId],
    src_lang: &str,
    tgt_lang: &str,
) -> Result<IncrementalState<T>> {
    match model.family() {
        Family::DecoderOnly => prime_prefix(model, vocab, format, src, src_lang, tgt_lang),
        Family::EncoderDecoder => prime_encdec(model, vocab, format, src, tgt_lang),
    }
}

/// Consumes `token` and returns the logits for the one after it.
pub fn step<'s, T: Float>(model: &Model<T>, state: &'s mut IncrementalState<T>, token: TokenId) -> Result<&'s [T]> {
    let logits = model.extend(&mut state.caches, state.memory.as_deref(), &[token])?;
    state.len += 1;
    state.logits = logits;
    Ok(&state.logits)
}

/// Log-probabilities with PAD and language tags excluded from generation.
fn masked_log_probs<T: Float>(logits: &[T], vocab: &Vocabulary) -> Vec<f64> {
    let allowed = |i: usize| i != PAD && !vocab.is_tag(i);
    let max = logits
        .iter()
        .enumerate()
        .filter(|(i, _)| allowed(*i))
        .fold(f64::NEG_INFINITY, |m, (_, x)| m.max(x.as_f64()));
    let lse = logits
        .iter()
        .enumerate()
        .filter(|(i, _)| allowed(*i))
        .map(|(_, x)| (x.as_f64() - max).exp())
        .sum::<f64>()
        .ln()
        + max;
    logits
        .iter()
        .enumerate()
        .map(|(i, x)| if allowed(i) { x.as_f64() - lse } else { f64::NEG_INFINITY })
        .collect()
}

/// Index of the largest value; the lowest index wins ties.
fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in xs.iter().enumerate() {
        if *x > xs[best] {
            best = i;
        }
    }
    best
}

/// The `k` best `(token, logp)` pairs, ties broken by lower token id.
fn top_k(xs: &[f64], k: usize) -> Vec<(usize, f64)> {
    let mut idx: Vec<usize> = (0..xs.len()).filter(|&i| xs[i] > f64::NEG_INFINITY).collect();
    idx.sort_by(|&a, &b| xs[b].partial_cmp(&xs[a]).unwrap_or(Ordering::Equal).then(a.cmp(&b)));
    idx.truncate(k);
    idx.into_iter().map(|i| (i, xs[i])).collect()
}

/// Largest number of tokens that can be generated from `state` before the
/// position table runs out (the final token is never fed back).
fn budget<T: Float>(model: &Model<T>, state: &IncrementalState<T>, cfg: &DecodeConfig) -> usize {
    let room = model.config().max_positions.saturating_sub(state.len) + 1;
    cfg.max_new_tokens.min(room)
}

fn greedy<T: Float>(model: &Model<T>, vocab: &Vocabulary, mut state: IncrementalState<T>, cfg: &DecodeConfig) -> Result<Vec<TokenId>> {
    let limit = budget(model, &state, cfg);
    let mut out = Vec::new();
    while out.len() < limit {
        let tok = argmax(&masked_log_probs(state.logits(), vocab));
        if tok == EOS {
            break;
        }
        out.push(tok);
        if out.len() < limit {
            step(model, &mut state, tok)?;
        }
    }
    Ok(out)
}

struct Hyp<T: Float> {
    tokens: Vec<TokenId>,
    logp: f64,
    state: IncrementalState<T>,
}

fn beam<T: Float>(
    model: &Model<T>,
    vocab: &Vocabulary,
    state: IncrementalState<T>,
    cfg: &DecodeConfig,
    width: usize,
    penalty: f64,
) -> Result<Vec<TokenId>> {
    let limit = budget(model, &state, cfg);
    let mut live = vec![Hyp {
        tokens: Vec::new(),
        logp: 0.0,
        state,
    }];
    // (score, tokens without </s>)
    let mut finished: Vec<(f64, Vec<TokenId>)> = Vec::new();
    let score = |logp: f64, len: usize| logp / length_penalty(len, penalty);

    for t in 0..limit {
        // (parent, token, cumulative logp)
        let mut cands: Vec<(usize, usize, f64)> = Vec::new();
        for (h, hyp) in live.iter().enumerate() {
            let lp = masked_log_probs(hyp.state.logits(), vocab);
            for (tok, l) in top_k(&lp, width) {
                cands.push((h, tok, hyp.logp + l));
            }
        }
        cands.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap_or(Ordering::Equal).then((a.0, a.1).cmp(&(b.0, b.1))));
        let mut next = Vec::with_capacity(width);
        for (h, tok, logp) in cands {
            if next.len() + finished.len() >= width {
                break;
            }
            let mut tokens = live[h].tokens.clone();
            if tok == EOS {
                finished.push((score(logp, tokens.len() + 1), tokens));
                continue;
            }
            tokens.push(tok);
            let mut state = live[h].state.clone();
            if t + 1 < limit {
                step(model, &mut state, tok)?;
            }
            next.push(Hyp { tokens, logp, state });
        }
        live = next;
        if live.is_empty() || finished.len() >= width {
            break;
        }
    }
    let best = |xs: Vec<(f64, Vec<TokenId>)>| {
        xs.into_iter()
            .fold(None::<(f64, Vec<TokenId>)>, |b, x| match b {
                Some(b) if b.0 >= x.0 => Some(b),
                _ => Some(x),
            })
            .map(|x| x.1)
    };
    if let Some(tokens) = best(finished) {
        return Ok(tokens);
    }
    Ok(best(live.into_iter().map(|h| (score(h.logp, h.tokens.len()), h.tokens)).collect()).unwrap_or_default())
}

/// Generates from a primed state until `</s>` or the token budget.
pub fn generate<T: Float>(model: &Model<T>, vocab: &Vocabulary, state: IncrementalState<T>, cfg: &DecodeConfig) -> Result<Vec<TokenId>> {
    cfg.validate()?;
    match cfg.strategy {
        Strategy::Greedy => greedy(model, vocab, state, cfg),
        Strategy::Beam { width, length_penalty } => beam(model, vocab, state, cfg, width, length_penalty),
    }
}

/// Decoder-only translation: prime on the tagged source, then generate.
pub fn translate<T: Float>(
    model: &Model<T>,
    vocab: &Vocabulary,
    format: SequenceFormat,
    src: &[TokenId],
    src_lang: &str,
    tgt_lang: &str,
    cfg: &DecodeConfig,
) -> Result<Vec<TokenId>> {
    let state = prime_prefix(model, vocab, format, src, src_lang, tgt_lang)?;
    generate(model, vocab, state, cfg)
}

/// Baseline translation with the encoder memory computed once.
pub fn translate_encdec<T: Float>(
    model: &Model<T>,
    vocab: &Vocabulary,
    format: SequenceFormat,
    src: &[TokenId],
    tgt_lang: &str,
    cfg: &DecodeConfig,
) -> Result<Vec<TokenId>> {
    let state = prime_encdec(model, vocab, format, src, tgt_lang)?;
    generate(model, vocab, state, cfg)
}

/// A trained model with its tokenizer and sequence layout: the unit that
/// translates text.
#[derive(Clone, Debug)]
pub struct System {
    pub model: Model<f32>,
    pub tokenizer: Tokenizer,
    pub format: SequenceFormat,
}

impl System {
    /// Loads a checkpoint written by training, which records its layout.
    pub fn load(model_path: &Path, tokenizer: Tokenizer) -> Result<Self> {
        let ckpt = Checkpoint::load(model_path)?;
        let model = Model::from_checkpoint(&ckpt)?;
        if model.config().vocab_size != tokenizer.vocab.len() {
            return Err(Error::Config(format!(
                "{} was trained with {} tokens but the vocabulary has {}",
                model_path.display(),
                model.config().vocab_size,
                tokenizer.vocab.len()
            )));
        }
        Ok(Self {
            model,
            tokenizer,
            format: checkpoint_format(&ckpt),
        })
    }

    pub fn translate_ids(&self, src: &[TokenId], src_lang: &str, tgt_lang: &str, cfg: &DecodeConfig) -> Result<Vec<TokenId>> {
        let state = prime(&self.model, &self.tokenizer.vocab, self.format, src, src_lang, tgt_lang)?;
        generate(&self.model, &self.tokenizer.vocab, state, cfg)
    }

    /// Text in, detokenized text out.
    pub fn translate_line(&self, line: &str, src_lang: &str, tgt_lang: &str, cfg: &DecodeConfig) -> Result<String> {
        let ids = self.translate_ids(&self.tokenizer.encode(line), src_lang, tgt_lang, cfg)?;
        Ok(self.tokenizer.decode(&ids))
    }

    /// Translates every line independently (in parallel), preserving order.
    pub fn translate_lines<S: AsRef<str> + Sync>(&self, lines: &[S], src_lang: &str, tgt_lang: &str, cfg: &DecodeConfig) -> Result<Vec<String>> {
        cfg.validate()?;
        lines
            .par_iter()
            .map(|l| self.translate_line(l.as_ref(), src_lang, tgt_lang, cfg))
            .collect()
    }
}

/// X → Y with one system, then Y → Z with another, through detokenized text.
pub fn pivot_translate(xy: &System, yz: &System, line: &str, langs: (&str, &str, &str), cfg: &DecodeConfig) -> Result<String> {
    let (x, y, z) = langs;
    let pivot = xy.translate_line(line, x, y, cfg)?;
    yz.translate_line(&pivot, y, z, cfg)
}

pub fn pivot_lines<S: AsRef<str> + Sync>(xy: &System, yz: &System, lines: &[S], langs: (&str, &str, &str), cfg: &DecodeConfig) -> Result<Vec<String>> {
    cfg.validate()?;
    lines.par_iter().map(|l| pivot_translate(xy, yz, l.as_ref(), langs, cfg)).collect()
}

/// File mode: one source sentence per input line, one hypothesis per output
/// line, order preserved.
pub fn translate_file(system: &System, input: &Path, output: &Path, src_lang: &str, tgt_lang: &str, cfg: &DecodeConfig) -> Result<usize> {
    let text = fs::read_to_string(input).map_err(|e| Error::io(input, e))?;
    let lines: Vec<&str> = text.lines().collect();
    let hyps = system.translate_lines(&lines, src_lang, tgt_lang, cfg)?;
    write_lines(output, &hyps)?;
    Ok(hyps.len())
}
