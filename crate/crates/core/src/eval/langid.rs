use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAX_NGRAM: usize = 3;
/// Label for inputs with no characters to classify.
pub const UNDETERMINED: &str = "und";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
struct NgramTable {
    counts: BTreeMap<String, u64>,
    total: u64,
}

/// Character 1..3-gram Naive Bayes language identifier.
///
/// Each sentence is wrapped in single spaces so word boundaries show up as
/// n-grams. Per order n, every language shares one event space: the union of
/// n-grams seen in training plus one bucket for anything unseen, with additive
/// smoothing `alpha` over it, so each per-language distribution sums to 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LangIdModel {
    langs: Vec<String>,
    prior: Vec<f64>,
    alpha: f64,
    tables: Vec<Vec<NgramTable>>,
    event_space: [u64; MAX_NGRAM],
}

fn ngrams(text: &str, n: usize) -> impl Iterator<Item = String> + '_ {
    let chars: Vec<char> = text.chars().collect();
    let k = chars.len().saturating_sub(n - 1);
    (0..k).map(move |i| chars[i..i + n].iter().collect())
}

fn padded(line: &str) -> Option<String> {
    let words: Vec<&str> = line.split_whitespace().collect();
    if words.is_empty() {
        None
    } else {
        Some(format!(" {} ", words.join(" ")))
    }
}

impl LangIdModel {
    /// Fits one table set per language with a uniform prior. Languages are
    /// stored sorted by name; that order also breaks score ties.
    pub fn train<S: AsRef<str>>(corpora: &[(String, Vec<S>)], alpha: f64) -> Result<Self> {
        if corpora.is_empty() {
            return Err(Error::config("language id needs at least one language"));
        }
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::config(format!("smoothing alpha must be positive, got {alpha}")));
        }
        let mut by_lang: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
        for (lang, lines) in corpora {
            by_lang.entry(lang.as_str()).or_default().extend(lines.iter().map(|l| l.as_ref()));
        }
        let mut langs = Vec::new();
        let mut tables = Vec::new();
        let mut seen: [BTreeSet<String>; MAX_NGRAM] = Default::default();
        for (lang, lines) in by_lang {
            let texts: Vec<String> = lines.iter().filter_map(|l| padded(l)).collect();
            if texts.is_empty() {
                return Err(Error::config(format!("no non-empty training lines for language {lang:?}")));
            }
            let mut per_order = vec![NgramTable::default(); MAX_NGRAM];
            for t in &texts {
                for n in 1..=MAX_NGRAM {
                    for g in ngrams(t, n) {
                        *per_order[n - 1].counts.entry(g.clone()).or_insert(0) += 1;
                        per_order[n - 1].total += 1;
                        seen[n - 1].insert(g);
                    }
                }
            }
            langs.push(lang.to_string());
            tables.push(per_order);
        }
        let k = langs.len();
        let mut event_space = [0; MAX_NGRAM];
        for n in 0..MAX_NGRAM {
            event_space[n] = seen[n].len() as u64 + 1;
        }
        Ok(Self {
            langs,
            prior: vec![1.0 / k as f64; k],
            alpha,
            tables,
            event_space,
        })
    }

    pub fn langs(&self) -> &[String] {
        &self.langs
    }

    pub fn prior(&self) -> &[f64] {
        &self.prior
    }

    /// Smoothed `ln P(gram | lang)` for an n-gram of order `n`.
    pub fn log_prob(&self, lang: usize, n: usize, gram: &str) -> f64 {
        let t = &self.tables[lang][n - 1];
        let c = t.counts.get(gram).copied().unwrap_or(0) as f64;
        ((c + self.alpha) / (t.total as f64 + self.alpha * self.event_space[n - 1] as f64)).ln()
    }

    /// Unnormalized log posterior per language, or `None` for blank input.
    pub fn scores(&self, text: &str) -> Option<Vec<f64>> {
        let t = padded(text)?;
        let mut s: Vec<f64> = self.prior.iter().map(|p| p.ln()).collect();
        for n in 1..=MAX_NGRAM {
            for g in ngrams(&t, n) {
                for (l, acc) in s.iter_mut().enumerate() {
                    *acc += self.log_prob(l, n, &g);
                }
            }
        }
        Some(s)
    }

    /// Most probable language, or [`UNDETERMINED`] for blank input.
    pub fn classify(&self, text: &str) -> &str {
        let Some(s) = self.scores(text) else {
            return UNDETERMINED;
        };
        let mut best = 0;
        for (i, v) in s.iter().enumerate() {
            if *v > s[best] {
                best = i;
            }
        }
        &self.langs[best]
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}
