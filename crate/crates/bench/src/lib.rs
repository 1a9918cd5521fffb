//! Shared fixtures for the benchmarks.

use lm4mt::data::{build_example, SequenceFormat, TranslationExample, Vocabulary};
use lm4mt::model::{matched_encoder_decoder, Family, ModelConfig};
use lm4mt::{Model, Tape, Tensor};
use lm4mt::train::{adam_step, batch_loss, OptimizerState};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const LETTERS: &str = "abcdefghijklmnopqrstuvwxyz";

pub fn vocab() -> Vocabulary {
    Vocabulary::new(&["aa", "bb"], LETTERS.chars().map(|c| c.to_string())).expect("valid vocabulary")
}

/// The learnability-test shape: 4 layers at width 128 (or its matched
/// encoder-decoder).
pub fn config(family: Family) -> ModelConfig {
    let lm = ModelConfig {
        vocab_size: vocab().len(),
        ..ModelConfig::default()
    };
    match family {
        Family::DecoderOnly => lm,
        Family::EncoderDecoder => matched_encoder_decoder(&lm),
    }
}

pub const FORMAT: SequenceFormat = SequenceFormat {
    tags: true,
    multilingual: false,
};

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

/// `n` random letter sequences of length `len`.
pub fn random_ids(n: usize, len: usize, seed: u64) -> Vec<Vec<usize>> {
    let v = vocab();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            (0..len)
                .map(|_| {
                    let i = rng.random_range(0..LETTERS.len());
                    v.id(&LETTERS[i..i + 1]).expect("letter in vocabulary")
                })
                .collect()
        })
        .collect()
}

/// `n` aa→bb examples with `len`-token sides.
pub fn examples(n: usize, len: usize, seed: u64) -> Vec<TranslationExample> {
    let v = vocab();
    let src = random_ids(n, len, seed);
    let tgt = random_ids(n, len, seed + 1);
    src.iter()
        .zip(&tgt)
        .map(|(s, t)| build_example(s, t, "aa", "bb", &v, true).expect("valid example"))
        .collect()
}

/// One decoder-only optimizer step on a packed batch: forward, loss,
/// backward and Adam. Returns the loss. `model` must be trainable
/// ([`Model::set_trainable`]), otherwise there are no gradients to apply.
pub fn lm_train_step(model: &mut Model<f32>, opt: &mut OptimizerState, batch: &[TranslationExample], rng: &mut ChaCha8Rng) -> f32 {
    let mut tape = Tape::new();
    let pv = model.bind(&mut tape);
    let inputs: Vec<&[usize]> = batch.iter().map(|e| e.input()).collect();
    let targets: Vec<usize> = batch.iter().flat_map(|e| e.targets().iter().copied()).collect();
    let roles: Vec<_> = batch.iter().flat_map(|e| e.roles.iter().copied()).collect();
    let logits = model.lm_logits(&mut tape, &pv, &inputs, Some(rng)).expect("forward");
    let loss = batch_loss(&mut tape, logits, &targets, &roles, 1.0).expect("loss");
    tape.backward(loss.total).expect("backward");
    let grads: Vec<Vec<f32>> = pv
        .iter()
        .zip(model.params())
        .map(|(v, p)| tape.grad(*v).map_or_else(|| vec![0.0; p.numel()], <[f32]>::to_vec))
        .collect();
    adam_step(model.params_mut(), &grads, opt, 1e-4, 0.0).expect("adam");
    tape.scalar(loss.total)
}
