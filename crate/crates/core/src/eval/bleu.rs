use std::collections::HashMap;
use std::iter::Sum;
use std::ops::{Add, AddAssign};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAX_ORDER: usize = 4;

/// Sufficient statistics for corpus BLEU-4. Summing per-sentence stats and
/// scoring once is the corpus-level score.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BleuStats {
    pub matches: [u64; MAX_ORDER],
    pub totals: [u64; MAX_ORDER],
    pub hyp_len: u64,
    pub ref_len: u64,
}

fn ngram_counts<'a>(tokens: &'a [&'a str], n: usize) -> HashMap<&'a [&'a str], u64> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

impl BleuStats {
    /// Clipped n-gram statistics for one whitespace-tokenized sentence pair.
    pub fn sentence(hyp: &str, reference: &str) -> Self {
        let h: Vec<&str> = hyp.split_whitespace().collect();
        let r: Vec<&str> = reference.split_whitespace().collect();
        let mut s = BleuStats {
            hyp_len: h.len() as u64,
            ref_len: r.len() as u64,
            ..Default::default()
        };
        for n in 1..=MAX_ORDER {
            let hc = ngram_counts(&h, n);
            let rc = ngram_counts(&r, n);
            s.totals[n - 1] = h.len().saturating_sub(n - 1) as u64;
            s.matches[n - 1] = hc.iter().map(|(g, c)| (*c).min(rc.get(g).copied().unwrap_or(0))).sum();
        }
        s
    }

    pub fn precision(&self, order: usize) -> f64 {
        let i = order - 1;
        if self.totals[i] == 0 {
            0.0
        } else {
            self.matches[i] as f64 / self.totals[i] as f64
        }
    }

    /// `exp(min(0, 1 − r/h))`; zero for an empty hypothesis side.
    pub fn brevity_penalty(&self) -> f64 {
        if self.hyp_len == 0 {
            return 0.0;
        }
        (1.0 - self.ref_len as f64 / self.hyp_len as f64).min(0.0).exp()
    }

    /// BLEU in [0, 100], unsmoothed.
    pub fn score(&self) -> f64 {
        if self.matches.iter().any(|&m| m == 0) {
            return 0.0;
        }
        let log_p: f64 = (1..=MAX_ORDER).map(|n| self.precision(n).ln()).sum::<f64>() / MAX_ORDER as f64;
        100.0 * self.brevity_penalty() * log_p.exp()
    }
}

impl Add for BleuStats {
    type Output = Self;
    fn add(mut self, rhs: Self) -> Self {
        self += rhs;
        self
    }
}

impl AddAssign for BleuStats {
    fn add_assign(&mut self, rhs: Self) {
        for i in 0..MAX_ORDER {
            self.matches[i] += rhs.matches[i];
            self.totals[i] += rhs.totals[i];
        }
        self.hyp_len += rhs.hyp_len;
        self.ref_len += rhs.ref_len;
    }
}

impl Sum for BleuStats {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::default(), Add::add)
    }
}

pub fn corpus_stats<H: AsRef<str>, R: AsRef<str>>(hyps: &[H], refs: &[R]) -> Result<BleuStats> {
    if hyps.len() != refs.len() {
        return Err(Error::contract(format!("{} hypotheses for {} references", hyps.len(), refs.len())));
    }
    Ok(hyps.iter().zip(refs).map(|(h, r)| BleuStats::sentence(h.as_ref(), r.as_ref())).sum())
}

/// Corpus-level BLEU-4 over detokenized, whitespace-split text.
pub fn corpus_bleu<H: AsRef<str>, R: AsRef<str>>(hyps: &[H], refs: &[R]) -> Result<f64> {
    Ok(corpus_stats(hyps, refs)?.score())
}

/// BLEU restricted to the sentences at `indices`.
pub fn subset_bleu<H: AsRef<str>, R: AsRef<str>>(hyps: &[H], refs: &[R], indices: &[usize]) -> Result<f64> {
    if hyps.len() != refs.len() {
        return Err(Error::contract(format!("{} hypotheses for {} references", hyps.len(), refs.len())));
    }
    let mut s = BleuStats::default();
    for &i in indices {
        if i >= hyps.len() {
            return Err(Error::Index {
                what: "subset_bleu",
                index: i,
                bound: hyps.len(),
            });
        }
        s += BleuStats::sentence(hyps[i].as_ref(), refs[i].as_ref());
    }
    Ok(s.score())
}
