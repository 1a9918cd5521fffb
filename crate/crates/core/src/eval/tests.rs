use proptest::prelude::*;

use super::*;
use crate::data::{BpeModel, SequenceFormat, Tokenizer, Vocabulary};
use crate::model::{Family, Model, ModelConfig};

#[test]
fn identical_corpora_score_100() {
    let refs = ["the cat sat on the mat", "a b c d e f"];
    assert!((corpus_bleu(&refs, &refs).unwrap() - 100.0).abs() < 1e-12);
}

#[test]
fn short_hypothesis_hand_case() {
    let got = corpus_bleu(&["a b c d"], &["a b c d e"]).unwrap();
    let want = 100.0 * (1.0f64 - 5.0 / 4.0).exp();
    assert!((got - 77.880_078_307_140_5).abs() < 1e-9, "{got}");
    assert!((got - want).abs() < 1e-12);
}

#[test]
fn disjoint_vocabularies_score_zero() {
    assert_eq!(corpus_bleu(&["x y z w"], &["a b c d"]).unwrap(), 0.0);
    // a missing 4-gram order alone zeroes the score (no smoothing)
    assert_eq!(corpus_bleu(&["a b c"], &["a b c"]).unwrap(), 0.0);
}

#[test]
fn length_mismatch_is_a_contract_error() {
    assert!(matches!(corpus_bleu(&["a"], &["a", "b"]), Err(Error::Contract(_))));
}

#[test]
fn ngram_matches_are_clipped() {
    let s = BleuStats::sentence("the the the the", "the cat");
    assert_eq!(s.matches[0], 1);
    assert_eq!(s.totals, [4, 3, 2, 1]);
    assert_eq!((s.hyp_len, s.ref_len), (4, 2));
    assert_eq!(s.brevity_penalty(), 1.0);
}

#[test]
fn longer_hypotheses_are_not_penalized_for_length() {
    let s = BleuStats::sentence("a b c d e f", "a b c d");
    assert_eq!(s.brevity_penalty(), 1.0);
    assert!(BleuStats::sentence("", "a").brevity_penalty() == 0.0);
}

fn sentence() -> impl Strategy<Value = String> {
    prop::collection::vec(prop::sample::select(vec!["a", "b", "c", "d", "e"]), 0..9).prop_map(|w| w.join(" "))
}

fn pairs() -> impl Strategy<Value = Vec<(String, String)>> {
    prop::collection::vec((sentence(), sentence()), 1..12)
}

proptest! {
    #[test]
    fn stats_are_additive_across_splits(p in pairs(), cut in 0usize..12) {
        let (h, r): (Vec<String>, Vec<String>) = p.into_iter().unzip();
        let cut = cut.min(h.len());
        let whole = corpus_stats(&h, &r).unwrap();
        let split = corpus_stats(&h[..cut], &r[..cut]).unwrap() + corpus_stats(&h[cut..], &r[cut..]).unwrap();
        prop_assert_eq!(whole, split);
        prop_assert_eq!(whole.score(), split.score());
        for n in 0..4 {
            prop_assert!(whole.matches[n] <= whole.totals[n]);
        }
        let bleu = whole.score();
        prop_assert!((0.0..=100.0 + 1e-9).contains(&bleu));
    }

    #[test]
    fn corpus_bleu_ignores_sentence_order(p in pairs(), rot in 0usize..12) {
        let mut q = p.clone();
        q.reverse();
        let rot = rot % q.len();
        q.rotate_left(rot);
        let (h1, r1): (Vec<String>, Vec<String>) = p.into_iter().unzip();
        let (h2, r2): (Vec<String>, Vec<String>) = q.into_iter().unzip();
        prop_assert_eq!(corpus_bleu(&h1, &r1).unwrap(), corpus_bleu(&h2, &r2).unwrap());
    }
}

#[test]
fn subset_bleu_matches_bleu_of_the_selected_lines() {
    let h = ["a b c d e", "x y", "p q r s t"];
    let r = ["a b c d e", "z", "p q r s t u"];
    assert_eq!(subset_bleu(&h, &r, &[0, 2]).unwrap(), corpus_bleu(&[h[0], h[2]], &[r[0], r[2]]).unwrap());
    assert!(subset_bleu(&h, &r, &[3]).is_err());
    assert_eq!(subset_bleu(&h, &r, &[]).unwrap(), 0.0);
}

// Three synthetic languages over disjoint alphabets.
fn lang_lines(alphabet: &str, n: usize, seed: u64) -> Vec<String> {
    use rand::{Rng, SeedableRng};
    let letters: Vec<char> = alphabet.chars().collect();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let words = rng.random_range(1..6);
            (0..words)
                .map(|_| (0..rng.random_range(1..5)).map(|_| letters[rng.random_range(0..letters.len())]).collect::<String>())
                .collect::<Vec<_>>()
                .join(" ")
        })
        .collect()
}

const ALPHABETS: [(&str, &str); 3] = [("xa", "abcdefg"), ("xb", "hijklmn"), ("xc", "opqrstu")];

fn langid() -> LangIdModel {
    let corpora: Vec<(String, Vec<String>)> = ALPHABETS.iter().enumerate().map(|(i, (l, a))| (l.to_string(), lang_lines(a, 200, i as u64))).collect();
    LangIdModel::train(&corpora, 0.5).unwrap()
}

#[test]
fn disjoint_alphabets_are_perfectly_separable() {
    let m = langid();
    assert_eq!(m.langs(), ["xa", "xb", "xc"]);
    for (i, (lang, alphabet)) in ALPHABETS.iter().enumerate() {
        for line in lang_lines(alphabet, 100, 100 + i as u64) {
            assert_eq!(m.classify(&line), *lang, "{line}");
        }
    }
}

#[test]
fn training_lines_classify_as_their_own_language() {
    let m = langid();
    for (i, (lang, alphabet)) in ALPHABETS.iter().enumerate() {
        for line in lang_lines(alphabet, 200, i as u64).iter().take(50) {
            assert_eq!(m.classify(line), *lang);
        }
    }
}

#[test]
fn prior_is_uniform_and_distributions_are_normalized() {
    let m = langid();
    assert!((m.prior().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    assert!(m.prior().iter().all(|p| (p - 1.0 / 3.0).abs() < 1e-12));
    // the union of training n-grams plus one unseen bucket carries all mass
    let mut grams: Vec<std::collections::BTreeSet<String>> = vec![Default::default(); 3];
    for (i, (_, a)) in ALPHABETS.iter().enumerate() {
        for line in lang_lines(a, 200, i as u64) {
            let chars: Vec<char> = format!(" {line} ").chars().collect();
            for n in 1..=3 {
                for w in chars.windows(n) {
                    grams[n - 1].insert(w.iter().collect());
                }
            }
        }
    }
    for lang in 0..3 {
        for n in 1..=3 {
            let seen: f64 = grams[n - 1].iter().map(|g| m.log_prob(lang, n, g).exp()).sum();
            let unseen = m.log_prob(lang, n, "\u{1}\u{2}\u{3}").exp();
            assert!((seen + unseen - 1.0).abs() < 1e-9, "lang {lang} order {n}");
        }
    }
}

#[test]
fn langid_rejects_empty_languages_and_blank_input_is_undetermined() {
    let empty: Vec<(String, Vec<String>)> = vec![("xa".into(), vec!["abc".into()]), ("xb".into(), vec!["  ".into()])];
    assert!(LangIdModel::train(&empty, 1.0).is_err());
    assert!(LangIdModel::train::<String>(&[], 1.0).is_err());
    let m = langid();
    assert_eq!(m.classify("   "), UNDETERMINED);
    let again = LangIdModel::from_json(&m.to_json().unwrap()).unwrap();
    assert_eq!(again, m);
}

#[test]
fn off_target_ratios_form_a_distribution() {
    let m = langid();
    let mut hyps = lang_lines("abcdefg", 30, 7);
    hyps.extend(lang_lines("hijklmn", 10, 8));
    hyps.push(String::new());
    let rep = off_target_report(&hyps, "xa", &m);
    assert_eq!(rep.labels.len(), hyps.len());
    let total: f64 = rep.ratios.iter().map(|(_, r)| r).sum();
    assert!((total - 1.0).abs() < 1e-9);
    assert_eq!(rep.accuracy, rep.ratio("xa"));
    assert!((rep.accuracy - 30.0 / 41.0).abs() < 1e-12);
    assert!((rep.ratio("xb") - 10.0 / 41.0).abs() < 1e-12);
    assert!((rep.ratio(UNDETERMINED) - 1.0 / 41.0).abs() < 1e-12);

    let on = off_target_report(&lang_lines("opqrstu", 20, 9), "xc", &m);
    assert_eq!(on.accuracy, 1.0);
}

#[test]
fn correct_language_subset_needs_both_systems_on_target() {
    let m = langid();
    let on = lang_lines("abcdefg", 12, 1);
    let off = lang_lines("hijklmn", 12, 2);
    let refs = lang_lines("abcdefg", 12, 3);
    assert_eq!(correct_language_subset(&on, &on, &refs, "xa", &m).unwrap(), (0..12).collect::<Vec<_>>());
    assert!(correct_language_subset(&on, &off, &refs, "xa", &m).unwrap().is_empty());

    let mut mixed = on.clone();
    mixed[3] = off[3].clone();
    mixed[7] = off[7].clone();
    let idx = correct_language_subset(&on, &mixed, &refs, "xa", &m).unwrap();
    assert_eq!(idx.len(), 10);
    assert!(!idx.contains(&3) && !idx.contains(&7));
    // identical hypothesis lists score identically on the common subset
    assert_eq!(subset_bleu(&on, &refs, &idx).unwrap(), subset_bleu(&on.clone(), &refs, &idx).unwrap());
    assert!(correct_language_subset(&on, &on[..3], &refs, "xa", &m).is_err());
}

#[test]
fn perturbed_sources_are_seeded() {
    let lines: Vec<String> = (0..20).map(|i| format!("w{i} a b c d e f g h i")).collect();
    let a = perturbed_sources(&lines, 0.3, 4);
    assert_eq!(a, perturbed_sources(&lines, 0.3, 4));
    assert_ne!(a, perturbed_sources(&lines, 0.3, 5));
    assert!(a.iter().all(|l| l.split_whitespace().count() == 7));
    assert_eq!(perturbed_sources(&lines, 0.0, 4), lines);
}

fn system() -> System {
    let vocab = Vocabulary::new(&["aa", "bb"], "abcdefgh".chars().map(|c| c.to_string())).unwrap();
    let cfg = ModelConfig {
        family: Family::DecoderOnly,
        num_layers: 1,
        d_model: 16,
        n_heads: 2,
        d_ffn: 32,
        dropout: 0.0,
        vocab_size: vocab.len(),
        max_positions: 32,
        ..ModelConfig::default()
    };
    System {
        model: Model::new(cfg, 3).unwrap(),
        tokenizer: Tokenizer {
            bpe: BpeModel::from_merges(Vec::new()),
            vocab,
        },
        format: SequenceFormat::default(),
    }
}

#[test]
fn zero_ratio_sweep_reproduces_plain_bleu() {
    let sys = system();
    let mut test = ParallelCorpus::new("aa", "bb");
    for (s, t) in [("a b c d", "e f g h"), ("b c d e f", "a a b"), ("h g f e d c", "c d")] {
        test.push(s.into(), t.into());
    }
    let cfg = DecodeConfig::greedy(8);
    let hyps = sys.translate_lines(&test.src, "aa", "bb", &cfg).unwrap();
    let plain = corpus_bleu(&hyps, &test.tgt).unwrap();
    let sweep = robustness_sweep(&sys, &test, &DEFAULT_MISSING_RATIOS, 9, &cfg).unwrap();
    assert_eq!(sweep.len(), 3);
    assert_eq!(sweep[0].bleu, plain);
    assert_eq!(sweep, robustness_sweep(&sys, &test, &DEFAULT_MISSING_RATIOS, 9, &cfg).unwrap());
    assert!(robustness_sweep(&sys, &test, &[1.5], 9, &cfg).is_err());
}
