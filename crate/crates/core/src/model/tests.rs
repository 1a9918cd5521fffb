use std::sync::Arc;

use super::checkpoint::Checkpoint;
use super::*;
use crate::tensor::gradcheck::check_tape;
use crate::tensor::{AttentionLayout, AttentionMask};

fn tiny(family: Family) -> ModelConfig {
    ModelConfig {
        family,
        num_layers: 2,
        enc_layers: 1,
        dec_layers: 1,
        d_model: 8,
        n_heads: 2,
        d_ffn: 16,
        dropout: 0.0,
        vocab_size: 11,
        max_positions: 12,
        tie_embeddings: true,
    }
}

fn toy() -> ModelConfig {
    ModelConfig {
        family: Family::DecoderOnly,
        num_layers: 4,
        d_model: 128,
        n_heads: 4,
        d_ffn: 512,
        vocab_size: 64,
        max_positions: 64,
        tie_embeddings: true,
        ..ModelConfig::default()
    }
}

#[test]
fn toy_parameter_count_matches_shape_enumeration() {
    let (d, f, v, p, layers) = (128usize, 512usize, 64usize, 64usize, 4usize);
    let attention = 4 * (d * d + d);
    let norms = 2 * 2 * d;
    let ffn = (d * f + f) + (f * d + d);
    let per_layer = attention + norms + ffn;
    assert_eq!(per_layer, 198_272);
    let expected = v * d + p * d + layers * per_layer + 2 * d;
    assert_eq!(expected, 809_728);
    assert_eq!(count_params(&toy()), expected);
    let model = Model::<f32>::new(toy(), 0).unwrap();
    assert_eq!(model.num_params(), expected);
}

#[test]
fn parameter_count_is_linear_in_depth_and_tying() {
    let base = toy();
    let deeper = ModelConfig {
        num_layers: 8,
        ..base.clone()
    };
    assert_eq!(count_params(&deeper) - count_params(&base), 4 * 198_272);
    let untied = ModelConfig {
        tie_embeddings: false,
        ..base.clone()
    };
    assert_eq!(count_params(&untied) - count_params(&base), 128 * 64);
}

#[test]
fn matched_depth_stays_within_two_percent() {
    let encdec = ModelConfig {
        family: Family::EncoderDecoder,
        enc_layers: 3,
        dec_layers: 3,
        ..toy()
    };
    let lm = matched_decoder_only(&encdec);
    let (a, b) = (count_params(&lm) as f64, count_params(&encdec) as f64);
    assert!((a - b).abs() / b < 0.02, "{a} vs {b}");
    assert_eq!(lm.num_layers, 7);

    let baseline = matched_encoder_decoder(&toy());
    let (a, b) = (count_params(&baseline) as f64, count_params(&toy()) as f64);
    assert!((a - b).abs() / b < 0.02, "{a} vs {b}: {baseline:?}");
}

#[test]
fn config_validation_lists_every_problem() {
    let bad = ModelConfig {
        d_model: 10,
        n_heads: 3,
        dropout: 1.0,
        vocab_size: 2,
        ..toy()
    };
    let problems = bad.problems();
    assert_eq!(problems.len(), 3, "{problems:?}");
    assert!(matches!(Model::<f32>::new(bad, 0), Err(Error::Config(_))));
}

#[test]
fn init_follows_layout_rules() {
    let m = Model::<f64>::new(toy(), 3).unwrap();
    let g = m.param("dec.0.ln_attn.g").unwrap();
    assert!(g.data().iter().all(|x| *x == 1.0));
    assert!(m.param("dec.0.attn.bq").unwrap().data().iter().all(|x| *x == 0.0));
    let w = m.param("dec.1.ffn.w1").unwrap().data();
    let mean = w.iter().sum::<f64>() / w.len() as f64;
    let std = (w.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / w.len() as f64).sqrt();
    assert!(mean.abs() < 1e-3 && (std - 0.02).abs() < 1e-3, "mean {mean} std {std}");
    let p = m.param("pos_emb").unwrap().data();
    let std = (p.iter().map(|x| x * x).sum::<f64>() / p.len() as f64).sqrt();
    let want = 0.02 * (m.config().d_model as f64).sqrt();
    assert!((std - want).abs() < 0.1 * want, "position std {std}");
    let again = Model::<f64>::new(toy(), 3).unwrap();
    assert_eq!(m.params()[5].data(), again.params()[5].data());
}

#[test]
fn single_key_attention_returns_projected_value() {
    let m = Model::<f64>::new(tiny(Family::DecoderOnly), 1).unwrap();
    let mut tape = Tape::<f64>::inference();
    let pv = m.bind(&mut tape);
    let idx = m.index.dec[0].attn;
    let p = AttentionParams {
        wq: pv[idx.wq],
        bq: pv[idx.bq],
        wk: pv[idx.wk],
        bk: pv[idx.bk],
        wv: pv[idx.wv],
        bv: pv[idx.bv],
        wo: pv[idx.wo],
        bo: pv[idx.bo],
    };
    let xq = tape.leaf(&Tensor::from_fn(vec![1, 8], |i| i as f64 * 0.1));
    let xkv = tape.leaf(&Tensor::from_fn(vec![1, 8], |i| 1.0 - i as f64 * 0.2));
    let layout = Arc::new(AttentionLayout::single(AttentionMask::full(1, 1)).unwrap());
    let out = multi_head_attention(&mut tape, &p, xq, xkv, &layout, 2, None).unwrap();

    let v = tape.matmul(xkv, p.wv).unwrap();
    let v = tape.add_bias(v, p.bv).unwrap();
    let want = tape.matmul(v, p.wo).unwrap();
    let want = tape.add_bias(want, p.bo).unwrap();
    for (a, b) in tape.value(out).iter().zip(tape.value(want)) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn identity_projection_attention_by_hand() {
    let mut tape = Tape::<f64>::inference();
    let eye = tape.leaf(&Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
    let zero = tape.leaf(&Tensor::zeros(vec![2]));
    let p = AttentionParams {
        wq: eye,
        bq: zero,
        wk: eye,
        bk: zero,
        wv: eye,
        bv: zero,
        wo: eye,
        bo: zero,
    };
    let x = tape.leaf(&Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
    let layout = Arc::new(AttentionLayout::single(AttentionMask::causal(2)).unwrap());
    let out = multi_head_attention(&mut tape, &p, x, x, &layout, 1, None).unwrap();
    // position 1 scores keys 0 and 1 at [0, 1/sqrt(2)]
    let w1 = 1.0 / (1.0 + (-(0.5f64).sqrt()).exp());
    let want = [1.0, 0.0, 1.0 - w1, w1];
    for (a, b) in tape.value(out).iter().zip(want) {
        assert!((a - b).abs() < 1e-5);
    }
}

#[test]
fn zero_weight_layer_is_identity() {
    let mut m = Model::<f64>::new(tiny(Family::DecoderOnly), 2).unwrap();
    let names: Vec<String> = m.names().iter().filter(|n| n.starts_with("dec.0.")).cloned().collect();
    for n in names {
        if !n.contains(".ln_") {
            m.param_mut(&n).unwrap().data_mut().fill(0.0);
        }
    }
    let mut tape = Tape::<f64>::inference();
    let pv = m.bind(&mut tape);
    let x = Tensor::from_fn(vec![4, 8], |i| (i as f64).sin());
    let xv = tape.leaf(&x);
    let out = m.decoder_layer(&mut tape, &pv, 0, xv, &AttentionMask::causal(4), None).unwrap();
    assert_eq!(tape.value(out), x.data());
}

#[test]
fn decoder_layer_is_causal_and_rejects_memory() {
    let m = Model::<f64>::new(tiny(Family::DecoderOnly), 4).unwrap();
    let run = |x: &Tensor<f64>| {
        let mut tape = Tape::<f64>::inference();
        let pv = m.bind(&mut tape);
        let xv = tape.leaf(x);
        let out = m.decoder_layer(&mut tape, &pv, 0, xv, &AttentionMask::causal(5), None).unwrap();
        tape.value(out).to_vec()
    };
    let x = Tensor::from_fn(vec![5, 8], |i| (i as f64 * 0.37).cos());
    let base = run(&x);
    for t in 0..4 {
        let mut y = x.clone();
        y.data_mut()[(t + 1) * 8..].iter_mut().for_each(|v| *v += 1.0);
        let out = run(&y);
        assert_eq!(&out[..(t + 1) * 8], &base[..(t + 1) * 8], "position {t}");
    }

    let mut tape = Tape::<f64>::inference();
    let pv = m.bind(&mut tape);
    let xv = tape.leaf(&x);
    let mem = tape.leaf(&Tensor::zeros(vec![3, 8]));
    let err = m.decoder_layer(&mut tape, &pv, 0, xv, &AttentionMask::causal(5), Some(mem));
    assert!(matches!(err, Err(Error::Contract(_))));
}

/// Finite differences through one complete block, parameters included.
fn layer_gradcheck(family: Family) -> f64 {
    let m = Model::<f64>::new(tiny(family), 5).unwrap();
    let mut inputs = vec![Tensor::from_fn(vec![3, 8], |i| ((i * 7 % 11) as f64 / 5.0) - 1.0)];
    if family == Family::EncoderDecoder {
        inputs.push(Tensor::from_fn(vec![2, 8], |i| ((i * 5 % 7) as f64 / 3.0) - 1.0));
    }
    let n_in = inputs.len();
    inputs.extend(m.params().iter().cloned());
    let weights = Tensor::from_fn(vec![3, 8], |i| ((i * 3 % 13) as f64 / 6.0) - 1.0);
    let report = check_tape(&inputs, 1e-5, |tape, vars| {
        let memory = (n_in == 2).then(|| vars[1]);
        let out = m.decoder_layer(tape, &vars[n_in..], 0, vars[0], &AttentionMask::causal(3), memory)?;
        let w = tape.leaf(&weights);
        let prod = tape.mul(out, w)?;
        Ok(tape.sum(prod))
    })
    .unwrap();
    report.max_relative_error
}

#[test]
fn full_layer_gradients_match_finite_differences() {
    let e = layer_gradcheck(Family::DecoderOnly);
    assert!(e < 1e-3, "decoder-only layer {e}");
    let e = layer_gradcheck(Family::EncoderDecoder);
    assert!(e < 1e-3, "cross-attention layer {e}");
}

#[test]
fn lm_forward_shape_length_and_causality() {
    let m = Model::<f32>::new(tiny(Family::DecoderOnly), 6).unwrap();
    let ids = [3, 5, 7, 9, 4, 1];
    let logits = m.lm4mt_forward(&ids).unwrap();
    assert_eq!(logits.shape(), &[6, 11]);
    for t in 0..ids.len() {
        let mut other = ids;
        other[t] = (other[t] + 1) % 11;
        let out = m.lm4mt_forward(&other).unwrap();
        assert_eq!(&out.data()[..t * 11], &logits.data()[..t * 11], "token {t}");
        assert_ne!(&out.data()[t * 11..(t + 1) * 11], &logits.data()[t * 11..(t + 1) * 11]);
    }
    assert!(matches!(m.lm4mt_forward(&[3; 13]), Err(Error::Length { len: 13, max: 12 })));
    assert!(matches!(m.lm4mt_forward(&[11]), Err(Error::Index { .. })));
    let again = m.lm4mt_forward(&ids).unwrap();
    assert_eq!(again.data(), logits.data());
}

#[test]
fn packed_batch_matches_individual_sequences() {
    let m = Model::<f32>::new(tiny(Family::DecoderOnly), 7).unwrap();
    let seqs: [&[usize]; 3] = [&[3, 4, 5], &[6, 7], &[8, 9, 10, 3]];
    let mut tape = Tape::<f32>::inference();
    let pv = m.bind(&mut tape);
    let packed = m.lm_logits(&mut tape, &pv, &seqs, None).unwrap();
    let mut row = 0;
    for s in seqs {
        let alone = m.lm4mt_forward(s).unwrap();
        let got = &tape.value(packed)[row * 11..(row + s.len()) * 11];
        for (a, b) in got.iter().zip(alone.data()) {
            assert!((a - b).abs() < 1e-5);
        }
        row += s.len();
    }
}

#[test]
fn encdec_forward_visibility() {
    let m = Model::<f32>::new(tiny(Family::EncoderDecoder), 8).unwrap();
    let src = [3, 4, 5, 6];
    let tgt = [1, 7, 8];
    let base = m.encdec_forward(&src, &tgt).unwrap();
    assert_eq!(base.shape(), &[3, 11]);
    for t in 0..tgt.len() {
        let mut other = tgt;
        other[t] = 9;
        let out = m.encdec_forward(&src, &other).unwrap();
        assert_eq!(&out.data()[..t * 11], &base.data()[..t * 11]);
    }
    for s in 0..src.len() {
        let mut other = src;
        other[s] = 10;
        let out = m.encdec_forward(&other, &tgt).unwrap();
        assert_ne!(&out.data()[..11], &base.data()[..11], "source token {s} invisible to step 0");
    }
    assert!(matches!(m.lm4mt_forward(&src), Err(Error::Contract(_))));
}

#[test]
fn encdec_end_to_end_gradients() {
    let m = Model::<f64>::new(tiny(Family::EncoderDecoder), 9).unwrap();
    let report = check_tape(m.params(), 1e-5, |tape, vars| {
        let logits = m.encdec_logits(tape, vars, &[&[3, 4]], &[&[1, 5]], None)?;
        tape.cross_entropy(logits, &[5, 1], &[1.0, 1.0])
    })
    .unwrap();
    assert!(report.max_relative_error < 1e-3, "{}", report.max_relative_error);
}

#[test]
fn cached_extension_matches_full_forward() {
    let m = Model::<f32>::new(tiny(Family::DecoderOnly), 10).unwrap();
    let ids = [3, 5, 7, 9, 4, 6, 8];
    let full = m.lm4mt_forward(&ids).unwrap();
    let mut caches = Vec::new();
    let primed = m.extend(&mut caches, None, &ids[..4]).unwrap();
    assert_eq!(caches[0].k.len(), 4 * 8);
    for (a, b) in primed.iter().zip(&full.data()[..4 * 11]) {
        assert!((a - b).abs() < 1e-5);
    }
    for t in 4..ids.len() {
        let row = m.extend(&mut caches, None, &ids[t..t + 1]).unwrap();
        assert_eq!(caches[1].v.len(), (t + 1) * 8);
        for (a, b) in row.iter().zip(&full.data()[t * 11..(t + 1) * 11]) {
            assert!((a - b).abs() < 1e-5);
        }
    }
    let mut long = Vec::new();
    assert!(matches!(m.extend(&mut long, None, &[3; 13]), Err(Error::Length { .. })));
}

#[test]
fn cached_encdec_extension_matches_full_forward() {
    let m = Model::<f32>::new(tiny(Family::EncoderDecoder), 11).unwrap();
    let src = [3, 4, 5];
    let tgt = [1, 7, 8, 9];
    let full = m.encdec_forward(&src, &tgt).unwrap();
    let memory = m.encode_memory(&src).unwrap();
    let mut caches = Vec::new();
    for (t, &tok) in tgt.iter().enumerate() {
        let row = m.extend(&mut caches, Some(&memory), &[tok]).unwrap();
        for (a, b) in row.iter().zip(&full.data()[t * 11..(t + 1) * 11]) {
            assert!((a - b).abs() < 1e-5);
        }
    }
    let mut fresh = Vec::new();
    assert!(m.extend(&mut fresh, None, &[1]).is_err());
}

#[test]
fn checkpoint_round_trip_and_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let m = Model::<f32>::new(tiny(Family::EncoderDecoder), 12).unwrap();
    m.save(&path, serde_json::json!({"step": 7})).unwrap();
    let back = Model::<f32>::load(&path).unwrap();
    assert_eq!(back.config(), m.config());
    for (a, b) in back.params().iter().zip(m.params()) {
        assert_eq!(a.data(), b.data());
    }
    let ck = Checkpoint::load(&path).unwrap();
    assert_eq!(ck.meta["step"], 7);
    let header = std::fs::read(&path).unwrap();
    let line = header.split(|b| *b == b'\n').next().unwrap();
    assert!(std::str::from_utf8(line).unwrap().contains("\"version\":\"lm4mt-ckpt-1\""));

    let other = Model::<f32>::new(tiny(Family::DecoderOnly), 12).unwrap().to_checkpoint(serde_json::Value::Null);
    assert_eq!(ck.first_mismatch(&other).as_deref(), Some("enc.0.ln_attn.g"));
    assert!(Model::<f32>::from_checkpoint(&Checkpoint {
        config: ck.config.clone(),
        ..other
    })
    .is_err());
}
