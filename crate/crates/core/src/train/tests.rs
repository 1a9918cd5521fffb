use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::data::{Role, TranslationExample, Vocabulary};
use crate::model::checkpoint::{Checkpoint, NamedArray};
use crate::model::{Family, ModelConfig};
use crate::tensor::{Tape, Tensor};
use crate::Error;

#[test]
fn lambda_d_breakpoints() {
    let (alpha, beta) = (0.1, 1000.0);
    assert_eq!(lambda_d(0, alpha, beta), 1.0);
    assert_eq!(lambda_d(100, alpha, beta), 1.0);
    assert!((lambda_d(550, alpha, beta) - 0.5).abs() < 1e-12);
    assert_eq!(lambda_d(1000, alpha, beta), 0.0);
    assert_eq!(lambda_d(1001, alpha, beta), 0.0);
    // alpha = 1 is a step function
    assert_eq!(lambda_d(999, 1.0, beta), 1.0);
    assert_eq!(lambda_d(1000, 1.0, beta), 0.0);
}

proptest! {
    #[test]
    fn lambda_d_is_nonincreasing(alpha in 0.0f64..=1.0, beta in 1.0f64..5000.0, a in 0usize..6000, b in 0usize..6000) {
        let (lo, hi) = (a.min(b), a.max(b));
        let (wl, wh) = (lambda_d(lo, alpha, beta), lambda_d(hi, alpha, beta));
        prop_assert!(wh <= wl);
        prop_assert!((0.0..=1.0).contains(&wl));
    }
}

#[test]
fn learning_rate_schedules() {
    let inv = LrSchedule::InverseSqrt { peak: 1e-3, warmup: 100 };
    assert_eq!(lr_at(0, &inv), 0.0);
    assert!((lr_at(50, &inv) - 5e-4).abs() < 1e-15);
    assert!((lr_at(100, &inv) - 1e-3).abs() < 1e-15);
    assert!((lr_at(400, &inv) - 5e-4).abs() < 1e-15);

    let cos = LrSchedule::Cosine {
        peak: 1e-3,
        warmup: 100,
        floor: 1e-7,
        total: 1100,
    };
    assert!((lr_at(50, &cos) - 5e-4).abs() < 1e-15);
    assert!((lr_at(100, &cos) - 1e-3).abs() < 1e-15);
    assert!((lr_at(600, &cos) - (1e-7 + 0.5 * (1e-3 - 1e-7))).abs() < 1e-15);
    assert!((lr_at(1100, &cos) - 1e-7).abs() < 1e-18);
    assert!((lr_at(5000, &cos) - 1e-7).abs() < 1e-18);
}

#[test]
fn loss_mode_weights_and_names() {
    for m in [LossMode::Mt, LossMode::AeMt, LossMode::DecayAeMt] {
        assert_eq!(m.as_str().parse::<LossMode>().unwrap(), m);
        let json = serde_json::to_string(&m).unwrap();
        assert_eq!(json, format!("\"{}\"", m.as_str()));
    }
    assert_eq!(LossMode::Mt.weight(0, 0.1, 100.0), 0.0);
    assert_eq!(LossMode::AeMt.weight(10_000, 0.1, 100.0), 1.0);
    assert_eq!(LossMode::DecayAeMt.weight(100, 0.1, 100.0), 0.0);
    assert!("ae".parse::<LossMode>().is_err());
}

fn one_param(w: f32) -> Vec<Tensor<f32>> {
    vec![Tensor::new(vec![1], vec![w]).unwrap()]
}

#[test]
fn adam_single_step_hand_case() {
    let mut p = one_param(1.0);
    let mut st = OptimizerState::new(AdamConfig::default(), &p);
    adam_step(&mut p, &[vec![1.0]], &mut st, 0.1, 0.0).unwrap();
    let want = 1.0 - 0.1 / (1.0 + 1e-9);
    assert!((p[0].data()[0] as f64 - want).abs() < 1e-7, "{}", p[0].data()[0]);
    assert_eq!(st.t, 1);
}

#[test]
fn adam_zero_gradient_and_decoupled_decay() {
    let mut p = one_param(1.0);
    let mut st = OptimizerState::new(AdamConfig::default(), &p);
    adam_step(&mut p, &[vec![0.0]], &mut st, 0.1, 0.0).unwrap();
    assert_eq!(p[0].data()[0], 1.0);
    adam_step(&mut p, &[vec![0.0]], &mut st, 0.1, 0.5).unwrap();
    assert!((p[0].data()[0] - 0.95).abs() < 1e-7);
    assert_eq!(st.t, 2);
}

#[test]
fn adam_identical_histories_evolve_identically() {
    let mut p = vec![Tensor::new(vec![2], vec![0.3, -0.2]).unwrap(), Tensor::new(vec![2], vec![0.3, -0.2]).unwrap()];
    let mut st = OptimizerState::new(AdamConfig::default(), &p);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..20 {
        let g: Vec<f32> = (0..2).map(|_| rng.random_range(-1.0..1.0)).collect();
        adam_step(&mut p, &[g.clone(), g], &mut st, 0.01, 0.01).unwrap();
    }
    assert_eq!(p[0].data(), p[1].data());
}

#[test]
fn adam_rejects_non_finite_gradient_without_side_effects() {
    let mut p = vec![Tensor::new(vec![1], vec![1.0]).unwrap(), Tensor::new(vec![1], vec![2.0]).unwrap()];
    let mut st = OptimizerState::new(AdamConfig::default(), &p);
    let err = adam_step(&mut p, &[vec![0.5], vec![f32::NAN]], &mut st, 0.1, 0.0).unwrap_err();
    assert!(matches!(err, Error::NonFinite(_)), "{err}");
    assert_eq!(st.t, 0);
    assert_eq!(p[0].data()[0], 1.0);
}

#[test]
fn clipping_scales_to_the_global_norm() {
    let mut g = vec![vec![3.0f32], vec![4.0]];
    let n = clip_grad_norm(&mut g, 1.0);
    assert!((n - 5.0).abs() < 1e-12);
    assert!((g[0][0] - 0.6).abs() < 1e-6 && (g[1][0] - 0.8).abs() < 1e-6);
    let mut small = vec![vec![0.1f32]];
    clip_grad_norm(&mut small, 1.0);
    assert_eq!(small[0][0], 0.1);
}

/// `<t1> x1 x2 <t2> y1 </s>` over a 4-token vocabulary.
fn tiny_example() -> TranslationExample {
    TranslationExample {
        ids: vec![3, 2, 2, 3, 2, 1],
        roles: vec![Role::Ae, Role::Ae, Role::None, Role::Mt, Role::Mt],
        src_lang: "aa".into(),
        tgt_lang: "bb".into(),
    }
}

#[test]
fn uniform_logits_cost_ln_v_per_scored_token() {
    let ex = tiny_example();
    let mut tape = Tape::<f64>::new();
    let logits = tape.leaf(&Tensor::zeros(vec![5, 4]).with_grad());
    let l = compute_loss(&mut tape, logits, &ex, 1.0).unwrap();
    let ln4 = 1.3862943611198906;
    assert!((tape.scalar(l.total) - 4.0 * ln4).abs() < 1e-12);
    assert!((tape.scalar(l.ae) - 2.0 * ln4).abs() < 1e-12);
    assert!((tape.scalar(l.mt) - 2.0 * ln4).abs() < 1e-12);
}

fn random_logits(rows: usize, cols: usize, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(vec![rows, cols], |_| rng.random_range(-2.0..2.0)).with_grad()
}

#[test]
fn zero_weight_total_equals_translation_part() {
    let ex = tiny_example();
    let x = random_logits(5, 4, 9);

    let mut tape = Tape::<f64>::new();
    let logits = tape.leaf(&x);
    let l = compute_loss(&mut tape, logits, &ex, 0.0).unwrap();
    assert_eq!(tape.scalar(l.total), tape.scalar(l.mt));
    tape.backward(l.total).unwrap();
    let g_total = tape.grad(logits).unwrap().to_vec();

    let mut tape = Tape::<f64>::new();
    let logits = tape.leaf(&x);
    let l = compute_loss(&mut tape, logits, &ex, 0.0).unwrap();
    tape.backward(l.mt).unwrap();
    assert_eq!(g_total, tape.grad(logits).unwrap());
    for (row, role) in ex.roles.iter().enumerate() {
        if *role != Role::Mt {
            assert!(g_total[row * 4..(row + 1) * 4].iter().all(|g| *g == 0.0), "row {row}");
        }
    }
}

#[test]
fn unit_weight_total_is_the_sum() {
    let ex = tiny_example();
    let mut tape = Tape::<f64>::new();
    let logits = tape.leaf(&random_logits(5, 4, 2));
    let l = compute_loss(&mut tape, logits, &ex, 1.0).unwrap();
    assert!((tape.scalar(l.total) - tape.scalar(l.ae) - tape.scalar(l.mt)).abs() < 1e-12);
}

#[test]
fn loss_rejects_misaligned_logits() {
    let mut tape = Tape::<f64>::new();
    let logits = tape.leaf(&Tensor::zeros(vec![4, 4]));
    assert!(matches!(compute_loss(&mut tape, logits, &tiny_example(), 1.0), Err(Error::Contract(_))));
}

#[test]
fn ae_gradients_vanish_past_beta() {
    let plan = TrainPlan {
        loss: LossMode::DecayAeMt,
        alpha: 0.2,
        beta: 300.0,
        ..TrainPlan::default()
    };
    let ex = tiny_example();
    let roles: Vec<Role> = ex.roles.iter().chain(&ex.roles).copied().collect();
    let targets: Vec<usize> = ex.targets().iter().chain(ex.targets()).copied().collect();
    for step in [300, 301, 5000] {
        let mut tape = Tape::<f32>::new();
        let logits = tape.leaf(&random_logits(10, 4, step as u64).cast::<f32>().with_grad());
        let l = batch_loss(&mut tape, logits, &targets, &roles, plan.weight_at(step)).unwrap();
        tape.backward(l.total).unwrap();
        let g = tape.grad(logits).unwrap();
        for (row, role) in roles.iter().enumerate() {
            let zero = g[row * 4..(row + 1) * 4].iter().all(|x| *x == 0.0);
            assert_eq!(zero, *role != Role::Mt, "step {step} row {row}");
        }
    }
    // before beta the AE rows do receive gradient
    let mut tape = Tape::<f32>::new();
    let logits = tape.leaf(&random_logits(10, 4, 1).cast::<f32>().with_grad());
    let l = batch_loss(&mut tape, logits, &targets, &roles, plan.weight_at(299)).unwrap();
    tape.backward(l.total).unwrap();
    assert!(tape.grad(logits).unwrap()[..4].iter().any(|x| *x != 0.0));
}

#[test]
fn batch_loss_is_normalized_by_translation_positions() {
    let ex = tiny_example();
    let mut tape = Tape::<f32>::new();
    let logits = tape.leaf(&Tensor::zeros(vec![5, 4]));
    let l = batch_loss(&mut tape, logits, ex.targets(), &ex.roles, 0.5).unwrap();
    let ln4 = 4f64.ln();
    assert_eq!((l.n_ae, l.n_mt), (2, 2));
    assert!((l.ae - ln4).abs() < 1e-9 && (l.mt - ln4).abs() < 1e-9);
    assert!((tape.scalar(l.total) as f64 - 1.5 * ln4).abs() < 1e-6);
}

fn array_ckpt(name: &str, data: Vec<f32>) -> Checkpoint {
    Checkpoint {
        config: None,
        meta: serde_json::Value::Null,
        arrays: vec![NamedArray {
            name: name.into(),
            shape: vec![data.len()],
            data,
        }],
    }
}

#[test]
fn averaging_checkpoints() {
    let avg = average_checkpoint_data(&[array_ckpt("w", vec![0.0]), array_ckpt("w", vec![2.0])]).unwrap();
    assert_eq!(avg.arrays[0].data, vec![1.0]);

    let same = array_ckpt("w", vec![0.1, -3.7, 1e-3]);
    let avg = average_checkpoint_data(&[same.clone(), same.clone(), same.clone()]).unwrap();
    assert_eq!(avg.arrays, same.arrays);

    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let ckpts: Vec<Checkpoint> = (0..5)
        .map(|_| array_ckpt("w", (0..257).map(|_| rng.random_range(-5.0f32..5.0)).collect()))
        .collect();
    let avg = average_checkpoint_data(&ckpts).unwrap();
    for (j, got) in avg.arrays[0].data.iter().enumerate() {
        let oracle = ckpts.iter().map(|c| c.arrays[0].data[j] as f64).sum::<f64>() / 5.0;
        assert!((*got as f64 - oracle).abs() < 1e-6);
    }

    let err = average_checkpoint_data(&[array_ckpt("w", vec![0.0]), array_ckpt("b", vec![0.0])]).unwrap_err();
    assert!(err.to_string().contains('w'), "{err}");
    assert!(average_checkpoint_data(&[]).is_err());
}

#[test]
fn averaging_checkpoint_files() {
    let dir = tempfile::tempdir().unwrap();
    let paths: Vec<_> = [0.0, 2.0]
        .iter()
        .enumerate()
        .map(|(i, w)| {
            let p = dir.path().join(format!("{i}.bin"));
            array_ckpt("w", vec![*w]).save(&p).unwrap();
            p
        })
        .collect();
    assert_eq!(average_checkpoints(&paths).unwrap().arrays[0].data, vec![1.0]);
    let odd = dir.path().join("odd.bin");
    array_ckpt("u", vec![1.0]).save(&odd).unwrap();
    let err = average_checkpoints(&[paths[0].clone(), odd]).unwrap_err();
    assert!(matches!(&err, Error::Checkpoint { detail, .. } if detail.contains("array w")), "{err}");
}

#[test]
fn plan_problems_are_listed_together() {
    let plan = TrainPlan {
        total_steps: 10,
        alpha: 1.5,
        lr_schedule: LrSchedule::InverseSqrt { peak: 1e-3, warmup: 10 },
        checkpoint_interval: 0,
        ..TrainPlan::default()
    };
    let p = plan.problems();
    assert_eq!(p.len(), 3, "{p:?}");
    assert!(matches!(plan.validate(), Err(Error::Config(_))));
    assert!(TrainPlan::default().validate().is_ok());
    let json = serde_json::to_string(&TrainPlan::default()).unwrap();
    assert_eq!(serde_json::from_str::<TrainPlan>(&json).unwrap(), TrainPlan::default());
    assert!(serde_json::from_str::<TrainPlan>(r#"{"total_step": 3}"#).is_err());
}

const LETTERS: &str = "abcdefghijklmnopqrst";

/// Random strings copied verbatim within one language.
fn copy_data(n_train: usize, n_valid: usize, seed: u64) -> TrainData {
    let vocab = Vocabulary::new(&["aa"], LETTERS.chars().map(|c| c.to_string())).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gen = |n: usize| {
        let src: Vec<Vec<usize>> = (0..n)
            .map(|_| {
                let len = rng.random_range(2..=6);
                (0..len).map(|_| vocab.id(&LETTERS[rng.random_range(0..LETTERS.len())..][..1]).unwrap()).collect()
            })
            .collect();
        PairData {
            src_lang: "aa".into(),
            tgt_lang: "aa".into(),
            tgt: src.clone(),
            src,
            weight: 1.0,
        }
    };
    let train = vec![gen(n_train)];
    let valid = vec![gen(n_valid)];
    TrainData { vocab, train, valid }
}

fn toy_config(family: Family, vocab: usize) -> ModelConfig {
    ModelConfig {
        family,
        num_layers: 2,
        enc_layers: 1,
        dec_layers: 1,
        d_model: 32,
        n_heads: 2,
        d_ffn: 64,
        dropout: 0.0,
        vocab_size: vocab,
        max_positions: 24,
        ..ModelConfig::default()
    }
}

fn toy_plan(steps: usize) -> TrainPlan {
    TrainPlan {
        total_steps: steps,
        max_tokens: 256,
        lr_schedule: LrSchedule::InverseSqrt { peak: 3e-3, warmup: (steps / 4).min(50) },
        alpha: 0.1,
        beta: (steps / 2) as f64,
        checkpoint_interval: 20,
        valid_interval: Some(20),
        seed: 5,
        ..TrainPlan::default()
    }
}

fn without_wall(rows: &[MetricsRow]) -> Vec<MetricsRow> {
    rows.iter().map(|r| MetricsRow { wall_ms: 0, ..r.clone() }).collect()
}

#[test]
fn copy_task_is_learned() {
    let data = copy_data(20000, 200, 3);
    let cfg = ModelConfig {
        d_model: 128,
        n_heads: 4,
        d_ffn: 256,
        ..toy_config(Family::DecoderOnly, data.vocab.len())
    };
    let plan = TrainPlan {
        lr_schedule: LrSchedule::InverseSqrt { peak: 2e-3, warmup: 100 },
        checkpoint_interval: 100,
        valid_interval: Some(250),
        ..toy_plan(2000)
    };
    let out = train_loop(&cfg, &plan, &data, &RunDir::default()).unwrap();
    let stats = validate(&out.model, out.format, &data.vocab, &data.valid, 512).unwrap();
    assert!(stats.mt_accuracy() > 0.99, "MT token accuracy {}", stats.mt_accuracy());
    assert_eq!(out.averaged_steps, vec![1600, 1700, 1800, 1900, 2000]);
    let at_beta = out.metrics.iter().find(|r| r.step as f64 == plan.beta).unwrap();
    assert_eq!(at_beta.lambda_d, 0.0);
    assert_eq!(out.metrics.len(), 2000);
    let ppl: Vec<f64> = out.metrics.iter().filter_map(|r| r.valid_ppl_mt).collect();
    assert_eq!(ppl.len(), 8);
    // epoch-level windows: each half of the run ends lower than it started
    assert!(ppl[3] < ppl[0] && ppl[7] < ppl[4], "{ppl:?}");
}

#[test]
fn training_is_deterministic_and_resumable() {
    let data = copy_data(200, 20, 8);
    for family in [Family::DecoderOnly, Family::EncoderDecoder] {
        let cfg = ModelConfig {
            dropout: 0.1,
            ..toy_config(family, data.vocab.len())
        };
        let plan = toy_plan(60);
        let full = tempfile::tempdir().unwrap();
        let a = train_loop(&cfg, &plan, &data, &RunDir::at(full.path())).unwrap();
        let b = train_loop(&cfg, &plan, &data, &RunDir::default()).unwrap();
        assert_eq!(without_wall(&a.metrics), without_wall(&b.metrics));
        assert_eq!(a.model.params(), b.model.params());
        assert!(full.path().join(MODEL_FILE).exists() && full.path().join(PLAN_FILE).exists());
        assert_eq!(read_metrics(&full.path().join(METRICS_FILE)).unwrap(), a.metrics);

        let part = tempfile::tempdir().unwrap();
        train_loop(&cfg, &TrainPlan { total_steps: 40, ..plan.clone() }, &data, &RunDir::at(part.path())).unwrap();
        let resumed = train_loop(
            &cfg,
            &plan,
            &data,
            &RunDir {
                path: Some(part.path().to_path_buf()),
                resume: true,
            },
        )
        .unwrap();
        assert_eq!(without_wall(&resumed.metrics), without_wall(&a.metrics), "{family}");
        assert_eq!(resumed.last.params(), a.last.params());
        assert_eq!(resumed.model.params(), a.model.params());
    }
}

#[test]
fn divergence_keeps_the_last_good_checkpoint() {
    let data = copy_data(50, 5, 1);
    let cfg = toy_config(Family::DecoderOnly, data.vocab.len());
    let plan = TrainPlan {
        lr_schedule: LrSchedule::InverseSqrt { peak: 1e35, warmup: 0 },
        clip_norm: None,
        checkpoint_interval: 1,
        ..toy_plan(20)
    };
    let dir = tempfile::tempdir().unwrap();
    let err = train_loop(&cfg, &plan, &data, &RunDir::at(dir.path())).unwrap_err();
    let Error::Divergence { step, .. } = err else { panic!("{err}") };
    assert!(step > 1);
    let last_good = dir.path().join(format!("ckpt-{:07}.bin", step - 1));
    assert!(crate::Model::<f32>::load(&last_good).is_ok());
    assert!(!dir.path().join(format!("ckpt-{step:07}.bin")).exists());
}

#[test]
fn config_errors_are_reported_before_training() {
    let data = copy_data(10, 0, 1);
    let cfg = ModelConfig {
        n_heads: 5,
        ..toy_config(Family::DecoderOnly, data.vocab.len() + 1)
    };
    let plan = TrainPlan {
        alpha: -1.0,
        ..toy_plan(10)
    };
    let Err(Error::Config(msg)) = train_loop(&cfg, &plan, &data, &RunDir::default()) else { panic!() };
    assert!(msg.contains("alpha") && msg.contains("vocab") && msg.contains("head"), "{msg}");
}
