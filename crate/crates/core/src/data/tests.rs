use std::collections::{BTreeSet, HashMap};

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::synth::{LanguageSpec, PairSpec};
use super::*;
use crate::error::Error;

fn vocab() -> Vocabulary {
    Vocabulary::new(&["de", "en"], ["x1", "x2", "y1"].map(String::from)).unwrap()
}

#[test]
fn vocabulary_layout_and_round_trip() {
    let v = vocab();
    assert_eq!(v.token(PAD), Some("<pad>"));
    assert_eq!(v.token(EOS), Some("</s>"));
    assert_eq!(v.token(UNK), Some("<unk>"));
    assert_eq!(v.tag("de").unwrap(), 3);
    assert_eq!(v.tag("en").unwrap(), 4);
    assert!(matches!(v.tag("fr"), Err(Error::Config(_))));
    assert!(v.is_tag(4) && !v.is_tag(5));
    for (i, t) in v.tokens().iter().enumerate() {
        assert_eq!(v.id(t), Some(i));
    }
    assert_eq!(Vocabulary::from_text(&v.to_text()).unwrap(), v);
    assert_eq!(v.id_or_unk("zzz"), UNK);
    assert!(Vocabulary::new(&["de"], ["<en>".to_string()]).is_err());
}

#[test]
fn example_layout_with_tags() {
    let v = vocab();
    let (x1, x2, y1) = (v.id("x1").unwrap(), v.id("x2").unwrap(), v.id("y1").unwrap());
    let ex = build_example(&[x1, x2], &[y1], "de", "en", &v, true).unwrap();
    assert_eq!(ex.ids, vec![v.tag("de").unwrap(), x1, x2, v.tag("en").unwrap(), y1, EOS]);
    assert_eq!(ex.roles, vec![Role::Ae, Role::Ae, Role::None, Role::Mt, Role::Mt]);
    assert_eq!(ex.ids.len(), 2 + 1 + 3);
    assert_eq!(ex.input().len(), ex.roles.len());

    let off = build_example(&[x1, x2], &[y1], "de", "en", &v, false).unwrap();
    assert_eq!(off.ids, vec![x1, x2, y1, EOS]);
    assert_eq!(off.roles, vec![Role::Ae, Role::Mt, Role::Mt]);

    assert!(matches!(build_example(&[x1], &[y1], "de", "fr", &v, true), Err(Error::Config(_))));
    assert!(build_example(&[], &[y1], "de", "en", &v, true).is_err());
    assert_eq!(
        lm_prefix(&[x1], "de", "en", &v, true).unwrap(),
        vec![v.tag("de").unwrap(), x1, v.tag("en").unwrap()]
    );
    assert_eq!(lm_prefix(&[], "de", "en", &v, true).unwrap().len(), 2);
}

proptest! {
    #[test]
    fn example_role_counts(s in 1usize..20, t in 1usize..20) {
        let v = vocab();
        let ex = build_example(&vec![5; s], &vec![7; t], "de", "en", &v, true).unwrap();
        prop_assert_eq!(ex.count(Role::Ae), s);
        prop_assert_eq!(ex.count(Role::Mt), t + 1);
        prop_assert_eq!(ex.count(Role::None), 1);
        prop_assert_eq!(ex.ids.len(), s + t + 3);
    }
}

#[test]
fn encdec_layout() {
    let v = vocab();
    let (src, tgt) = build_encdec_example(&[5, 6], &[7], "en", &v, true).unwrap();
    assert_eq!(src, vec![v.tag("en").unwrap(), 5, 6]);
    assert_eq!(tgt, vec![7, EOS]);
    let (src, tgt) = build_encdec_example(&[5, 6], &[7], "en", &v, false).unwrap();
    assert_eq!(src, vec![5, 6]);
    assert_eq!(*tgt.last().unwrap(), EOS);
    assert_eq!(decoder_input(&tgt), vec![EOS, 7]);
}

#[test]
fn bpe_first_merge_by_brute_force_count() {
    // pairs in "aa aa ab": (a,a) twice, (a,b) once
    let m = BpeModel::train(&["aa aa ab"], 1).unwrap();
    assert_eq!(m.merges(), &[("a".to_string(), "a".to_string())]);
    assert_eq!(m.encode("aa ab"), vec!["aa", "a@@", "b"]);

    let chars = BpeModel::train(&["abc abd"], 0).unwrap();
    assert!(chars.merges().is_empty());
    assert_eq!(chars.encode("abc"), vec!["a@@", "b@@", "c"]);
    assert!(matches!(BpeModel::train(&["a"], -1), Err(Error::Contract(_))));
    assert!(BpeModel::train::<&str>(&[], 3).is_err());
}

#[test]
fn bpe_ties_break_lexicographically_and_skip_tags() {
    // (b,a) and (a,b) both occur twice; the smaller pair wins
    let m = BpeModel::train(&["ba ab ba ab"], 1).unwrap();
    assert_eq!(m.merges()[0], ("a".to_string(), "b".to_string()));
    let m = BpeModel::train(&["<x> <x> <x>"], 10).unwrap();
    assert!(m.merges().iter().all(|(a, b)| format!("{a}{b}") != "<x>"));
}

#[test]
fn bpe_file_round_trip() {
    let m = BpeModel::train(&["abab abab cd cd cdcd"], 5).unwrap();
    let back = BpeModel::from_text(&m.to_text()).unwrap();
    assert_eq!(back, m);
    assert!(BpeModel::from_text("a b c\n").is_err());
}

proptest! {
    #[test]
    fn bpe_round_trip_on_training_alphabet(words in proptest::collection::vec("[abcd]{1,6}", 1..8)) {
        let m = BpeModel::train(&["abcd abab cdcd dcba aabb"], 8).unwrap();
        let line = words.join(" ");
        let enc = m.encode(&line);
        prop_assert_eq!(BpeModel::decode(&enc), line.clone());
        prop_assert_eq!(m.encode(&BpeModel::decode(&enc)), enc);
    }

    #[test]
    fn perturbation_removes_floor_of_ratio(n in 0usize..40, ratio in 0.0f64..=1.0, seed in 0u64..100) {
        let words: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let out = perturb_missing_words(&words, ratio, &mut rng);
        prop_assert_eq!(out.len(), n - (ratio * n as f64).floor() as usize);
        prop_assert!(out.windows(2).all(|w| w[0] < w[1]));
    }
}

#[test]
fn perturbation_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let w = ["a", "b", "c", "d"];
    assert_eq!(perturb_missing_words(&w, 0.0, &mut rng), w.to_vec());
    assert_eq!(perturb_missing_words(&w, 0.5, &mut rng).len(), 2);
    assert!(perturb_missing_words(&w, 1.0, &mut rng).is_empty());
    assert_eq!(perturb_line("a b c d", 1.0, &mut rng), "");
}

fn three_languages() -> SynthSpec {
    SynthSpec {
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
            LanguageSpec {
                name: "pp".into(),
                alphabet: "opqrstu".into(),
                reorder: Reorder::Reverse3,
            },
        ],
        pairs: vec![
            PairSpec {
                src: "aa".into(),
                tgt: "pp".into(),
                train: 50,
                valid: 5,
                test: 0,
            },
            PairSpec {
                src: "bb".into(),
                tgt: "pp".into(),
                train: 50,
                valid: 5,
                test: 0,
            },
            PairSpec {
                src: "aa".into(),
                tgt: "bb".into(),
                train: 0,
                valid: 0,
                test: 20,
            },
        ],
        ..SynthSpec::default()
    }
}

#[test]
fn synthetic_corpus_is_deterministic_and_invertible() {
    let spec = three_languages();
    let a = gen_synthetic_corpus(&spec, 7).unwrap();
    let b = gen_synthetic_corpus(&spec, 7).unwrap();
    assert_eq!(a, b);
    let c = gen_synthetic_corpus(&spec, 8).unwrap();
    assert_ne!(a, c);
    let splits: Vec<String> = a.iter().map(|(s, c)| format!("{s}.{}-{}", c.src_lang, c.tgt_lang)).collect();
    assert_eq!(splits, ["train.aa-pp", "valid.aa-pp", "train.bb-pp", "valid.bb-pp", "test.aa-bb"]);

    let synth = Synthesizer::new(&spec, 7).unwrap();
    for (_, corpus) in &a {
        corpus.validate().unwrap();
        let src = synth.language(&corpus.src_lang).unwrap();
        for (s, t) in corpus.src.iter().zip(&corpus.tgt) {
            let latent = src.to_latent(s).unwrap();
            assert_eq!(&src.realize(&latent), s);
            assert_eq!(&synth.translate(s, &corpus.src_lang, &corpus.tgt_lang).unwrap(), t);
        }
    }
}

#[test]
fn synthetic_alphabets_are_disjoint() {
    let spec = three_languages();
    let (_, corpora): (Vec<_>, Vec<_>) = gen_synthetic_corpus(&spec, 1).unwrap().into_iter().unzip();
    let mut seen: HashMap<String, BTreeSet<char>> = HashMap::new();
    for c in &corpora {
        for (lang, lines) in [(&c.src_lang, &c.src), (&c.tgt_lang, &c.tgt)] {
            seen.entry(lang.clone()).or_default().extend(lines.iter().flat_map(|l| l.chars()).filter(|c| *c != ' '));
        }
    }
    let langs: Vec<&String> = seen.keys().collect();
    for (i, a) in langs.iter().enumerate() {
        for b in &langs[i + 1..] {
            assert!(seen[*a].is_disjoint(&seen[*b]), "{a} and {b} share symbols");
        }
    }

    let mut bad = spec.clone();
    bad.languages[1].alphabet = "ahijklm".into();
    assert!(matches!(Synthesizer::new(&bad, 0), Err(Error::Config(_))));
    bad.disjoint_alphabets = false;
    assert!(Synthesizer::new(&bad, 0).is_ok());
}

#[test]
fn corpus_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = ParallelCorpus::new("aa", "bb");
    c.push("ab cd".into(), "hi jk".into());
    c.push("ef".into(), "lm".into());
    c.write(dir.path(), "train").unwrap();
    assert!(dir.path().join("train.aa-bb.aa").exists());
    assert_eq!(ParallelCorpus::read(dir.path(), "train", "aa", "bb").unwrap(), c);
    assert_eq!(ParallelCorpus::read_either(dir.path(), "train", "bb", "aa").unwrap(), c.reversed());
    std::fs::write(dir.path().join("train.aa-bb.bb"), "hi jk\n").unwrap();
    assert!(ParallelCorpus::read(dir.path(), "train", "aa", "bb").is_err());
}

#[test]
fn equal_lengths_give_full_batches() {
    let parts = vec![Part {
        lengths: vec![10; 95],
        weight: 1.0,
    }];
    let items = batch::sample_epoch(&parts, 3, 0);
    let batches = batch::make_batches(&parts, &items, 64, 3);
    assert_eq!(batches.iter().map(|b| b.items.len()).sum::<usize>(), 95);
    assert!(batches.iter().filter(|b| b.items.len() != 6).count() <= 1);
    assert!(batches.iter().all(|b| b.items.len() * b.max_len <= 64));
}

#[test]
fn batch_stream_is_deterministic_and_skips_long_items() {
    let parts = vec![Part {
        lengths: (0..50).map(|i| 3 + i % 17).chain([500]).collect(),
        weight: 1.0,
    }];
    let mut a = BatchStream::new(parts.clone(), 40, 9).unwrap();
    let mut b = BatchStream::new(parts.clone(), 40, 9).unwrap();
    let xs: Vec<Batch> = (0..30).map(|_| a.next_batch()).collect();
    let ys: Vec<Batch> = (0..30).map(|_| b.next_batch()).collect();
    assert_eq!(xs, ys);
    assert!(xs.iter().all(|x| x.items.iter().all(|r| r.index != 50)));
    let mut c = BatchStream::new(parts.clone(), 40, 9).unwrap();
    c.skip(12);
    assert_eq!(c.next_batch(), xs[12]);
    let mut d = BatchStream::new(parts, 40, 10).unwrap();
    assert_ne!((0..30).map(|_| d.next_batch()).collect::<Vec<_>>(), xs);
}

#[test]
fn upsampling_weights_set_draw_ratio() {
    let parts = vec![
        Part {
            lengths: vec![5; 1000],
            weight: 2.0,
        },
        Part {
            lengths: vec![5; 1000],
            weight: 1.0,
        },
    ];
    let mut counts = [0usize; 2];
    for epoch in 0..5 {
        for r in batch::sample_epoch(&parts, 11, epoch) {
            counts[r.part] += 1;
        }
    }
    assert_eq!(counts[0] + counts[1], 10_000);
    let ratio = counts[0] as f64 / counts[1] as f64;
    assert!((ratio - 2.0).abs() < 0.1, "ratio {ratio}");
}

#[test]
fn derived_seeds_differ_by_label() {
    assert_ne!(derive_seed(1, "a"), derive_seed(1, "b"));
    assert_ne!(derive_seed(1, "a"), derive_seed(2, "a"));
    assert_eq!(derive_seed(1, "a"), derive_seed(1, "a"));
}

#[test]
fn tokenizer_round_trip_over_synthetic_text() {
    let spec = three_languages();
    let corpora = gen_synthetic_corpus(&spec, 2).unwrap();
    let lines: Vec<String> = corpora.iter().flat_map(|(_, c)| c.src.iter().chain(&c.tgt).cloned()).collect();
    let bpe = BpeModel::train(&lines, 60).unwrap();
    let langs: Vec<String> = spec.languages.iter().map(|l| l.name.clone()).collect();
    let vocab = build_vocab(&langs, &bpe, &lines).unwrap();
    let tok = Tokenizer { bpe, vocab };
    for l in &lines {
        let ids = tok.encode(l);
        assert!(!ids.contains(&UNK));
        assert_eq!(&tok.decode(&ids), l);
    }
}
