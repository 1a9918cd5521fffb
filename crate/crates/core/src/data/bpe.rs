use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Suffix marking a subword that continues into the next one.
pub const CONTINUATION: &str = "@@";

/// Ordered list of symbol merges; earlier merges have priority.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct BpeModel {
    merges: Vec<(String, String)>,
    ranks: HashMap<(String, String), usize>,
}

fn reserved_like(s: &str) -> bool {
    s.len() > 2 && s.starts_with('<') && s.ends_with('>')
}

impl BpeModel {
    pub fn from_merges(merges: Vec<(String, String)>) -> Self {
        let ranks = merges.iter().enumerate().map(|(i, p)| (p.clone(), i)).collect();
        Self { merges, ranks }
    }

    /// Learns up to `num_merges` merges over the whitespace words of `lines`.
    ///
    /// Each step merges the most frequent adjacent symbol pair, ties going to
    /// the lexicographically smallest pair. Learning stops early once no pair
    /// occurs at least twice. Merges that would spell a `<...>` control token
    /// are never learned.
    pub fn train<S: AsRef<str>>(lines: &[S], num_merges: i64) -> Result<Self> {
        if num_merges < 0 {
            return Err(Error::contract(format!("num_merges must be nonnegative, got {num_merges}")));
        }
        let mut freq: BTreeMap<&str, usize> = BTreeMap::new();
        for line in lines {
            for w in line.as_ref().split_whitespace() {
                *freq.entry(w).or_default() += 1;
            }
        }
        if freq.is_empty() {
            return Err(Error::contract("cannot learn BPE from an empty corpus"));
        }
        let mut words: Vec<(Vec<String>, usize)> = freq
            .into_iter()
            .map(|(w, c)| (w.chars().map(String::from).collect(), c))
            .collect();

        let mut merges = Vec::new();
        while merges.len() < num_merges as usize {
            let mut counts: HashMap<(&str, &str), usize> = HashMap::new();
            for (syms, c) in &words {
                for p in syms.windows(2) {
                    *counts.entry((p[0].as_str(), p[1].as_str())).or_default() += c;
                }
            }
            let best = counts
                .into_iter()
                .filter(|((a, b), _)| !reserved_like(&format!("{a}{b}")))
                .max_by(|(pa, ca), (pb, cb)| ca.cmp(cb).then_with(|| pb.cmp(pa)));
            let Some(((a, b), count)) = best else { break };
            if count < 2 {
                break;
            }
            let pair = (a.to_string(), b.to_string());
            for (syms, _) in &mut words {
                merge_all(syms, &pair);
            }
            merges.push(pair);
        }
        Ok(Self::from_merges(merges))
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    /// Splits one word into subwords, marking all but the last with `@@`.
    pub fn encode_word(&self, word: &str) -> Vec<String> {
        let mut syms: Vec<String> = word.chars().map(String::from).collect();
        loop {
            let best = syms
                .windows(2)
                .enumerate()
                .filter_map(|(i, p)| self.ranks.get(&(p[0].clone(), p[1].clone())).map(|r| (*r, i)))
                .min();
            let Some((rank, _)) = best else { break };
            merge_all(&mut syms, &self.merges[rank]);
        }
        let n = syms.len();
        syms.into_iter()
            .enumerate()
            .map(|(i, s)| if i + 1 < n { s + CONTINUATION } else { s })
            .collect()
    }

    pub fn encode(&self, line: &str) -> Vec<String> {
        line.split_whitespace().flat_map(|w| self.encode_word(w)).collect()
    }

    /// Joins subwords back into whitespace-separated words.
    pub fn decode<S: AsRef<str>>(tokens: &[S]) -> String {
        let mut out = String::new();
        let mut glue = false;
        for t in tokens {
            let t = t.as_ref();
            if !out.is_empty() && !glue {
                out.push(' ');
            }
            match t.strip_suffix(CONTINUATION) {
                Some(stem) => {
                    out.push_str(stem);
                    glue = true;
                }
                None => {
                    out.push_str(t);
                    glue = false;
                }
            }
        }
        out
    }

    pub fn to_text(&self) -> String {
        self.merges.iter().map(|(a, b)| format!("{a} {b}\n")).collect()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let merges = text
            .lines()
            .enumerate()
            .map(|(i, l)| {
                let mut it = l.split(' ');
                match (it.next(), it.next(), it.next()) {
                    (Some(a), Some(b), None) if !a.is_empty() && !b.is_empty() => Ok((a.to_string(), b.to_string())),
                    _ => Err(Error::config(format!("BPE line {}: expected \"left right\", got {l:?}", i + 1))),
                }
            })
            .collect::<Result<_>>()?;
        Ok(Self::from_merges(merges))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

/// Replaces every left-to-right occurrence of `pair` in `syms`.
fn merge_all(syms: &mut Vec<String>, pair: &(String, String)) {
    let mut i = 0;
    while i + 1 < syms.len() {
        if syms[i] == pair.0 && syms[i + 1] == pair.1 {
            let right = syms.remove(i + 1);
            syms[i].push_str(&right);
        }
        i += 1;
    }
}
