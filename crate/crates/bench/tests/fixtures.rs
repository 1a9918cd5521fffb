use lm4mt::train::{AdamConfig, OptimizerState};
use lm4mt::{Family, Model};
use lm4mt_bench::{config, examples, lm_train_step, random_ids, random_tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn fixtures_are_seeded() {
    assert_eq!(random_ids(3, 5, 1), random_ids(3, 5, 1));
    assert_ne!(random_ids(3, 5, 1), random_ids(3, 5, 2));
    assert_eq!(random_tensor(&[4, 4], 3).data(), random_tensor(&[4, 4], 3).data());
    assert_eq!(examples(2, 7, 4)[0].input().len(), 2 * 7 + 2);
}

#[test]
fn matched_shapes_are_close_in_size() {
    let lm = config(Family::DecoderOnly);
    let ed = config(Family::EncoderDecoder);
    let (a, b) = (lm4mt::model::count_params(&lm) as f64, lm4mt::model::count_params(&ed) as f64);
    assert!((a - b).abs() / a < 0.05, "{a} vs {b}");
}

#[test]
fn train_step_fixture_actually_trains() {
    let batch = examples(4, 6, 7);
    let mut model = Model::<f32>::new(config(Family::DecoderOnly), 1).unwrap();
    model.set_trainable(true);
    let mut opt = OptimizerState::new(AdamConfig::default(), model.params());
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let before = model.params()[0].data().to_vec();
    let first = lm_train_step(&mut model, &mut opt, &batch, &mut rng);
    assert_ne!(model.params()[0].data(), &before[..]);
    let mut last = first;
    for _ in 0..20 {
        last = lm_train_step(&mut model, &mut opt, &batch, &mut rng);
    }
    assert!(last < first, "loss {first} -> {last}");
}
