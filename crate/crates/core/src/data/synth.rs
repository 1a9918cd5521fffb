//! Cipher languages over a shared latent sentence distribution.
//!
//! Latent sentences are random walks over a small vocabulary whose transition
//! rows are Zipfian. Each language spells latent words with its own alphabet
//! through a fixed bijection and then applies an involutive local reordering,
//! so any two languages translate into each other exactly.

use std::collections::{BTreeSet, HashMap, HashSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use serde::{Deserialize, Serialize};

use super::corpus::ParallelCorpus;
use super::derive_seed;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reorder {
    None,
    /// Swap words 0↔1, 2↔3, …
    SwapPairs,
    /// Reverse each consecutive run of three words.
    Reverse3,
}

impl Reorder {
    /// Every rule is its own inverse.
    pub fn apply<T>(self, words: &mut [T]) {
        match self {
            Reorder::None => {}
            Reorder::SwapPairs => words.chunks_exact_mut(2).for_each(|c| c.swap(0, 1)),
            Reorder::Reverse3 => words.chunks_exact_mut(3).for_each(|c| c.reverse()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LanguageSpec {
    pub name: String,
    pub alphabet: String,
    #[serde(default = "default_reorder")]
    pub reorder: Reorder,
}

fn default_reorder() -> Reorder {
    Reorder::None
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairSpec {
    pub src: String,
    pub tgt: String,
    #[serde(default)]
    pub train: usize,
    #[serde(default)]
    pub valid: usize,
    #[serde(default)]
    pub test: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub languages: Vec<LanguageSpec>,
    pub pairs: Vec<PairSpec>,
    pub latent_vocab: usize,
    pub min_words: usize,
    pub max_words: usize,
    pub min_word_len: usize,
    pub max_word_len: usize,
    pub zipf_exponent: f64,
    pub disjoint_alphabets: bool,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            languages: vec![
                LanguageSpec {
                    name: "aa".into(),
                    alphabet: "abcdefg".into(),
                    reorder: Reorder::None,
                },
                LanguageSpec {
                    name: "bb".into(),
                    alphabet: "hijklmn".into(),
                    reorder: Reorder::SwapPairs,
                },
            ],
            pairs: vec![PairSpec {
                src: "aa".into(),
                tgt: "bb".into(),
                train: 2000,
                valid: 100,
                test: 500,
            }],
            latent_vocab: 40,
            min_words: 3,
            max_words: 8,
            min_word_len: 2,
            max_word_len: 4,
            zipf_exponent: 1.0,
            disjoint_alphabets: true,
        }
    }
}

pub const SPLITS: [&str; 3] = ["train", "valid", "test"];

impl SynthSpec {
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.languages.is_empty() {
            out.push("no languages defined".to_string());
        }
        let mut names = HashSet::new();
        for l in &self.languages {
            if !names.insert(l.name.as_str()) {
                out.push(format!("language {} defined twice", l.name));
            }
            if l.name.is_empty() || !l.name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
                out.push(format!("language name {:?} must be nonempty [A-Za-z0-9_]", l.name));
            }
            let chars: BTreeSet<char> = l.alphabet.chars().collect();
            if chars.len() != l.alphabet.chars().count() {
                out.push(format!("alphabet of {} repeats a symbol", l.name));
            }
            if chars.iter().any(|c| c.is_whitespace() || matches!(c, '<' | '>' | '@')) {
                out.push(format!("alphabet of {} contains whitespace or a reserved symbol", l.name));
            }
            if chars.is_empty() {
                out.push(format!("alphabet of {} is empty", l.name));
            }
            let capacity: f64 = (self.min_word_len..=self.max_word_len)
                .map(|n| (chars.len() as f64).powi(n as i32))
                .sum();
            if capacity < self.latent_vocab as f64 {
                out.push(format!(
                    "alphabet of {} cannot spell {} distinct words of length {}..={}",
                    l.name, self.latent_vocab, self.min_word_len, self.max_word_len
                ));
            }
        }
        if self.disjoint_alphabets {
            for (i, a) in self.languages.iter().enumerate() {
                for b in &self.languages[i + 1..] {
                    let shared: BTreeSet<char> = a.alphabet.chars().filter(|c| b.alphabet.contains(*c)).collect();
                    if !shared.is_empty() {
                        out.push(format!(
                            "alphabets of {} and {} overlap in {:?}",
                            a.name,
                            b.name,
                            shared.into_iter().collect::<String>()
                        ));
                    }
                }
            }
        }
        for p in &self.pairs {
            for l in [&p.src, &p.tgt] {
                if !names.contains(l.as_str()) {
                    out.push(format!("pair {}-{} names unknown language {l}", p.src, p.tgt));
                }
            }
            if p.src == p.tgt {
                out.push(format!("pair {}-{} translates a language into itself", p.src, p.tgt));
            }
        }
        if self.latent_vocab == 0 {
            out.push("latent_vocab must be positive".to_string());
        }
        if self.min_words == 0 || self.min_words > self.max_words {
            out.push(format!("sentence length range {}..={} is invalid", self.min_words, self.max_words));
        }
        if self.min_word_len == 0 || self.min_word_len > self.max_word_len {
            out.push(format!("word length range {}..={} is invalid", self.min_word_len, self.max_word_len));
        }
        if !(self.zipf_exponent.is_finite() && self.zipf_exponent >= 0.0) {
            out.push(format!("zipf_exponent {} must be finite and nonnegative", self.zipf_exponent));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::config(p.join("; ")))
        }
    }
}

/// A realized cipher language: latent word id ↔ surface word, plus reorder.
#[derive(Clone, Debug)]
pub struct CipherLanguage {
    pub name: String,
    words: Vec<String>,
    lookup: HashMap<String, usize>,
    reorder: Reorder,
}

impl CipherLanguage {
    fn new(spec: &LanguageSpec, cfg: &SynthSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("lexicon/{}", spec.name)));
        let alphabet: Vec<char> = spec.alphabet.chars().collect();
        let mut words = Vec::with_capacity(cfg.latent_vocab);
        let mut lookup = HashMap::with_capacity(cfg.latent_vocab);
        while words.len() < cfg.latent_vocab {
            let len = rng.random_range(cfg.min_word_len..=cfg.max_word_len);
            let w: String = (0..len).map(|_| alphabet[rng.random_range(0..alphabet.len())]).collect();
            if !lookup.contains_key(&w) {
                lookup.insert(w.clone(), words.len());
                words.push(w);
            }
        }
        Self {
            name: spec.name.clone(),
            words,
            lookup,
            reorder: spec.reorder,
        }
    }

    pub fn realize(&self, latent: &[usize]) -> String {
        let mut ws: Vec<&str> = latent.iter().map(|&i| self.words[i].as_str()).collect();
        self.reorder.apply(&mut ws);
        ws.join(" ")
    }

    /// Inverse of [`CipherLanguage::realize`]; `None` if a word is not in the lexicon.
    pub fn to_latent(&self, sentence: &str) -> Option<Vec<usize>> {
        let mut ids: Vec<usize> = sentence
            .split_whitespace()
            .map(|w| self.lookup.get(w).copied())
            .collect::<Option<_>>()?;
        self.reorder.apply(&mut ids);
        Some(ids)
    }

    pub fn lexicon(&self) -> &[String] {
        &self.words
    }
}

/// Generator for latent sentences plus every language's realization.
#[derive(Clone, Debug)]
pub struct Synthesizer {
    spec: SynthSpec,
    seed: u64,
    languages: Vec<CipherLanguage>,
    /// Zipfian distribution over ranks.
    zipf: WeightedIndex<f64>,
    /// Per-word ranking of successors.
    successors: Vec<Vec<usize>>,
}

impl Synthesizer {
    pub fn new(spec: &SynthSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let languages = spec.languages.iter().map(|l| CipherLanguage::new(l, spec, seed)).collect();
        let v = spec.latent_vocab;
        let zipf: Vec<f64> = (0..v).map(|r| 1.0 / ((r + 1) as f64).powf(spec.zipf_exponent)).collect();
        let zipf = WeightedIndex::new(&zipf).expect("positive weights");
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "latent/transitions"));
        let successors = (0..v)
            .map(|_| {
                let mut order: Vec<usize> = (0..v).collect();
                order.shuffle(&mut rng);
                order
            })
            .collect();
        Ok(Self {
            spec: spec.clone(),
            seed,
            languages,
            zipf,
            successors,
        })
    }

    pub fn language(&self, name: &str) -> Option<&CipherLanguage> {
        self.languages.iter().find(|l| l.name == name)
    }

    pub fn languages(&self) -> &[CipherLanguage] {
        &self.languages
    }

    pub fn latent_sentence(&self, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let len = rng.random_range(self.spec.min_words..=self.spec.max_words);
        let mut out = Vec::with_capacity(len);
        let mut w = self.zipf.sample(rng);
        out.push(w);
        while out.len() < len {
            w = self.successors[w][self.zipf.sample(rng)];
            out.push(w);
        }
        out
    }

    /// Parallel corpus for one pair and split; each (pair, split) draws from
    /// its own seeded stream.
    pub fn corpus(&self, pair: &PairSpec, split: &str) -> Result<ParallelCorpus> {
        let n = match split {
            "train" => pair.train,
            "valid" => pair.valid,
            "test" => pair.test,
            other => return Err(Error::config(format!("unknown split {other:?}"))),
        };
        let src = self
            .language(&pair.src)
            .ok_or_else(|| Error::config(format!("unknown language {}", pair.src)))?;
        let tgt = self
            .language(&pair.tgt)
            .ok_or_else(|| Error::config(format!("unknown language {}", pair.tgt)))?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, &format!("sentences/{}-{}/{split}", pair.src, pair.tgt)));
        let mut out = ParallelCorpus::new(&pair.src, &pair.tgt);
        for _ in 0..n {
            let latent = self.latent_sentence(&mut rng);
            out.push(src.realize(&latent), tgt.realize(&latent));
        }
        Ok(out)
    }

    /// Every (split, corpus) with a nonzero size, in spec order.
    pub fn all_corpora(&self) -> Result<Vec<(String, ParallelCorpus)>> {
        let mut out = Vec::new();
        for pair in &self.spec.pairs {
            for split in SPLITS {
                let c = self.corpus(pair, split)?;
                if !c.is_empty() {
                    out.push((split.to_string(), c));
                }
            }
        }
        Ok(out)
    }

    /// Reference translation of `sentence` from `src` into `tgt`.
    pub fn translate(&self, sentence: &str, src: &str, tgt: &str) -> Option<String> {
        let latent = self.language(src)?.to_latent(sentence)?;
        Some(self.language(tgt)?.realize(&latent))
    }
}

/// Convenience wrapper over [`Synthesizer::all_corpora`].
pub fn gen_synthetic_corpus(spec: &SynthSpec, seed: u64) -> Result<Vec<(String, ParallelCorpus)>> {
    Synthesizer::new(spec, seed)?.all_corpora()
}
