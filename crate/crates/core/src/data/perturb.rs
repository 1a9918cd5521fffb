use rand::seq::index;
use rand::Rng;

/// Drops `⌊ratio·len⌋` items chosen uniformly without replacement, keeping
/// survivors in order. Applied to whitespace words before subword encoding.
pub fn perturb_missing_words<T: Clone, R: Rng + ?Sized>(words: &[T], ratio: f64, rng: &mut R) -> Vec<T> {
    let ratio = ratio.clamp(0.0, 1.0);
    // the epsilon keeps products like 0.29 * 100 from flooring one short
    let drop = ((ratio * words.len() as f64 + 1e-9).floor() as usize).min(words.len());
    if drop == 0 {
        return words.to_vec();
    }
    let mut removed = vec![false; words.len()];
    for i in index::sample(rng, words.len(), drop) {
        removed[i] = true;
    }
    words
        .iter()
        .zip(removed)
        .filter(|(_, r)| !r)
        .map(|(w, _)| w.clone())
        .collect()
}

/// Sentence-level wrapper: perturbs the whitespace words of `line`.
pub fn perturb_line<R: Rng + ?Sized>(line: &str, ratio: f64, rng: &mut R) -> String {
    let words: Vec<&str> = line.split_whitespace().collect();
    perturb_missing_words(&words, ratio, rng).join(" ")
}
