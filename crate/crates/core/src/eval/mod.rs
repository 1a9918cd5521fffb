//! BLEU, language identification and the off-target / robustness analyses
//! built on them. Everything here works on detokenized text.

pub mod bleu;
pub mod langid;

#[cfg(test)]
mod tests;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{derive_seed, perturb_line, ParallelCorpus};
use crate::decode::{DecodeConfig, System};
use crate::error::{Error, Result};

pub use bleu::{corpus_bleu, corpus_stats, subset_bleu, BleuStats};
pub use langid::{LangIdModel, UNDETERMINED};

/// Missing-word ratios of the standard robustness sweep.
pub const DEFAULT_MISSING_RATIOS: [f64; 3] = [0.0, 0.3, 0.5];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OffTargetReport {
    pub expected: String,
    /// One label per hypothesis.
    pub labels: Vec<String>,
    /// Fraction of hypotheses labeled `expected`.
    pub accuracy: f64,
    /// `(language, fraction)` for every model language plus [`UNDETERMINED`].
    /// Sums to 1 unless there were no hypotheses, in which case all are 0.
    pub ratios: Vec<(String, f64)>,
}

impl OffTargetReport {
    pub fn ratio(&self, lang: &str) -> f64 {
        self.ratios.iter().find(|(l, _)| l == lang).map_or(0.0, |(_, r)| *r)
    }
}

pub fn off_target_report<S: AsRef<str>>(hyps: &[S], expected: &str, model: &LangIdModel) -> OffTargetReport {
    let labels: Vec<String> = hyps.iter().map(|h| model.classify(h.as_ref()).to_string()).collect();
    let n = labels.len();
    let frac = |lang: &str| {
        if n == 0 {
            0.0
        } else {
            labels.iter().filter(|l| *l == lang).count() as f64 / n as f64
        }
    };
    let ratios = model
        .langs()
        .iter()
        .map(String::as_str)
        .chain([UNDETERMINED])
        .map(|l| (l.to_string(), frac(l)))
        .collect();
    OffTargetReport {
        expected: expected.to_string(),
        accuracy: frac(expected),
        labels,
        ratios,
    }
}

/// Indices where both systems produced `expected`-language output; each
/// system is then scored with [`subset_bleu`] on this common subset.
pub fn correct_language_subset<A: AsRef<str>, B: AsRef<str>, R: AsRef<str>>(
    hyps_a: &[A],
    hyps_b: &[B],
    refs: &[R],
    expected: &str,
    model: &LangIdModel,
) -> Result<Vec<usize>> {
    if hyps_a.len() != refs.len() || hyps_b.len() != refs.len() {
        return Err(Error::contract(format!(
            "misaligned lists: {} / {} hypotheses for {} references",
            hyps_a.len(),
            hyps_b.len(),
            refs.len()
        )));
    }
    Ok((0..refs.len())
        .filter(|&i| model.classify(hyps_a[i].as_ref()) == expected && model.classify(hyps_b[i].as_ref()) == expected)
        .collect())
}

/// Drops `⌊ratio·words⌋` words from each line. The stream depends only on
/// `(seed, ratio)`, so every system sees the same perturbed inputs.
pub fn perturbed_sources<S: AsRef<str>>(lines: &[S], ratio: f64, seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("missing/{ratio}")));
    lines.iter().map(|l| perturb_line(l.as_ref(), ratio, &mut rng)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessPoint {
    pub ratio: f64,
    pub bleu: f64,
}

/// Decodes `test` with words missing from the source at each ratio and
/// scores against the untouched references.
pub fn robustness_sweep(system: &System, test: &ParallelCorpus, ratios: &[f64], seed: u64, cfg: &DecodeConfig) -> Result<Vec<RobustnessPoint>> {
    test.validate()?;
    ratios
        .iter()
        .map(|&ratio| {
            if !(0.0..=1.0).contains(&ratio) {
                return Err(Error::config(format!("missing-word ratio {ratio} outside [0, 1]")));
            }
            let src = perturbed_sources(&test.src, ratio, seed);
            let hyps = system.translate_lines(&src, &test.src_lang, &test.tgt_lang, cfg)?;
            Ok(RobustnessPoint {
                ratio,
                bleu: corpus_bleu(&hyps, &test.tgt)?,
            })
        })
        .collect()
}
