use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::ctc::{ctc_loss_on_tape, greedy_decode, LabelSequence, BLANK};
use crate::gradcheck::{check_gradients, GradCheckOptions};

fn tiny(k: usize) -> ModelConfig {
    ModelConfig {
        d_model: 8,
        n_heads: 2,
        d_ff: 16,
        enc_layers: 1,
        dec_layers: 1,
        split_factor: k,
        vocab_size: 6,
        max_source_len: 64,
        seed: 3,
        split_positions: true,
    }
}

fn bare(k: usize) -> ModelConfig {
    ModelConfig {
        enc_layers: 0,
        dec_layers: 0,
        ..tiny(k)
    }
}

fn random_ids(rng: &mut ChaCha8Rng, n: usize, classes: usize) -> Vec<TokenId> {
    (0..n).map(|_| rng.gen_range(3..classes) as TokenId).collect()
}

#[test]
fn embedding_is_scaled_lookup_plus_position() {
    let mut model = Model::<f64>::new(tiny(1)).unwrap();
    let id = model.params().id("embed.tokens").unwrap();
    let mut table = model.params().value(id).clone();
    table.row_mut(4).fill(0.0);
    model.params_mut().set_value(id, table).unwrap();

    let mut tape = Tape::new(model.params());
    let e = model.embed(&mut tape, &[4, 4], &SeqLayout::single(2)).unwrap();
    let v = tape.value(e.states);
    assert_eq!(v.shape(), &[2, 8]);
    let pe = kernels::sinusoidal_positions::<f64>(2, 8);
    assert_eq!(v.row(0), &pe[..8]);
    assert_ne!(v.row(0), v.row(1));
}

#[test]
fn embed_rejects_bad_input() {
    let model = Model::<f32>::new(tiny(1)).unwrap();
    let mut tape = Tape::new(model.params());
    assert_eq!(
        model.embed(&mut tape, &[99], &SeqLayout::single(1)).unwrap_err(),
        ModelError::TokenOutOfRange { id: 99, rows: 7 }
    );
    assert_eq!(model.forward(&[]).unwrap_err(), ModelError::EmptyInput);
    let long = vec![3; 65];
    assert_eq!(
        model.forward(&long).unwrap_err(),
        ModelError::TooLong { len: 65, max: 64 }
    );
}

#[test]
fn zero_layer_stacks_are_identity() {
    let model = Model::<f64>::new(bare(2)).unwrap();
    let mut tape = Tape::new(model.params());
    let e = model.embed(&mut tape, &[3, 4, 5], &SeqLayout::single(3)).unwrap();
    let before = tape.value(e.states).clone();
    let h = model.encode(&mut tape, e).unwrap();
    assert_eq!(tape.value(h.states), &before);

    let s = model.split_states(&mut tape, &h).unwrap();
    let before = tape.value(s.states).clone();
    let d = model.decode_states(&mut tape, &s).unwrap();
    assert_eq!(tape.value(d), &before);
}

#[test]
fn encoder_ignores_padding() {
    let model = Model::<f64>::new(tiny(1)).unwrap();
    let run = |ids: &[TokenId], layout: SeqLayout| {
        let mut tape = Tape::new(model.params());
        let e = model.embed(&mut tape, ids, &layout).unwrap();
        let h = model.encode(&mut tape, e).unwrap();
        tape.value(h.states).clone()
    };
    let plain = run(&[3, 5, 4], SeqLayout::single(3));
    let padded = run(&[3, 5, 4, 1, 1], SeqLayout::new(5, vec![3]));
    assert_eq!(plain.shape(), &[3, 8]);
    for r in 0..3 {
        for (a, b) in plain.row(r).iter().zip(padded.row(r)) {
            assert!((a - b).abs() < 1e-5);
        }
    }
}

#[test]
fn split_shape_and_special_weights() {
    let cfg = ModelConfig {
        d_model: 4,
        n_heads: 1,
        split_factor: 3,
        ..bare(3)
    };
    let model = Model::<f64>::new(cfg.clone()).unwrap();
    let mut tape = Tape::new(model.params());
    let e = model.embed(&mut tape, &[3, 4], &SeqLayout::single(2)).unwrap();
    let s = model.split_states(&mut tape, &e).unwrap();
    assert_eq!(tape.value(s.states).shape(), &[6, 4]);
    assert_eq!(s.mask(), vec![true; 6]);

    // zero weights: every source position yields the bias chunks b1, b2, b3
    let mut model = Model::<f64>::new(ModelConfig {
        split_positions: false,
        ..cfg
    })
    .unwrap();
    let w = model.params().id("split.w").unwrap();
    let b = model.params().id("split.b").unwrap();
    let bias: Vec<f64> = (0..12).map(|i| i as f64 * 0.5).collect();
    model.params_mut().set_value(w, Tensor::zeros(&[4, 12])).unwrap();
    model
        .params_mut()
        .set_value(b, Tensor::new(vec![12], bias.clone()).unwrap())
        .unwrap();
    let mut tape = Tape::new(model.params());
    let e = model.embed(&mut tape, &[3, 4], &SeqLayout::single(2)).unwrap();
    let s = model.split_states(&mut tape, &e).unwrap();
    let v = tape.value(s.states);
    for pos in 0..2 {
        for j in 0..3 {
            assert_eq!(v.row(pos * 3 + j), &bias[j * 4..(j + 1) * 4]);
        }
    }
}

#[test]
fn split_with_identity_weights_is_identity() {
    let mut model = Model::<f64>::new(ModelConfig {
        split_positions: false,
        ..bare(1)
    })
    .unwrap();
    let w = model.params().id("split.w").unwrap();
    model.params_mut().set_value(w, Tensor::identity(8)).unwrap();
    let mut tape = Tape::new(model.params());
    let e = model.embed(&mut tape, &[3, 6, 4], &SeqLayout::single(3)).unwrap();
    let s = model.split_states(&mut tape, &e).unwrap();
    assert_eq!(tape.value(s.states), tape.value(e.states));
}

#[test]
fn decoder_is_not_causal() {
    let model = Model::<f64>::new(tiny(2)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let data: Vec<f64> = (0..6 * 8).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let run = |data: Vec<f64>| {
        let mut tape = Tape::new(model.params());
        let states = tape.input(Tensor::new(vec![6, 8], data).unwrap());
        let s = SplitStates {
            states,
            layout: SeqLayout::single(6),
        };
        let out = model.decode_states(&mut tape, &s).unwrap();
        tape.value(out).clone()
    };
    let base = run(data.clone());
    assert_eq!(base.shape(), &[6, 8]);
    let mut perturbed = data;
    for v in &mut perturbed[5 * 8..] {
        *v += 0.5;
    }
    let moved = run(perturbed);
    let earlier_change: f64 = (0..5 * 8).map(|i| (base.data()[i] - moved.data()[i]).abs()).sum();
    assert!(earlier_change > 1e-6);
}

#[test]
fn projection_width_and_blank_bias() {
    let mut model = Model::<f32>::new(tiny(3)).unwrap();
    let lp = model.forward(&[3, 4]).unwrap();
    assert_eq!(lp.shape(), &[6, 7]);
    for r in 0..lp.rows() {
        let s: f64 = lp.row(r).iter().map(|v| (*v as f64).exp()).sum();
        assert!((s - 1.0).abs() < 1e-6);
    }
    let w = model.params().id("output.w").unwrap();
    let b = model.params().id("output.b").unwrap();
    let mut bias = vec![0.0f32; 7];
    bias[BLANK as usize] = 5.0;
    model.params_mut().set_value(w, Tensor::zeros(&[8, 7])).unwrap();
    model
        .params_mut()
        .set_value(b, Tensor::new(vec![7], bias).unwrap())
        .unwrap();
    assert!(greedy_decode(&model.forward(&[3, 4, 5]).unwrap()).is_empty());
}

#[test]
fn frame_count_is_k_times_source_length() {
    for k in 1..=3 {
        let model = Model::<f32>::new(tiny(k)).unwrap();
        assert_eq!(model.forward(&[3, 4, 5, 6, 3]).unwrap().rows(), 5 * k);
        assert_eq!(model.forward(&[3]).unwrap().rows(), k);
    }
}

#[test]
fn forward_is_deterministic_and_seeded() {
    let a = Model::<f32>::new(tiny(2)).unwrap();
    let b = Model::<f32>::new(tiny(2)).unwrap();
    for ((_, pa), (_, pb)) in a.params().iter().zip(b.params().iter()) {
        assert_eq!(pa.value, pb.value);
    }
    assert_eq!(a.forward(&[3, 4]).unwrap(), a.forward(&[3, 4]).unwrap());
    let c = Model::<f32>::new(ModelConfig { seed: 99, ..tiny(2) }).unwrap();
    assert_ne!(a.forward(&[3, 4]).unwrap(), c.forward(&[3, 4]).unwrap());
}

#[test]
fn batched_forward_matches_single_sentences_bitwise() {
    let model = Model::<f32>::new(tiny(3)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let sentences: Vec<Vec<TokenId>> = (0..7).map(|i| random_ids(&mut rng, 1 + i % 5, 7)).collect();
    let refs: Vec<&[TokenId]> = sentences.iter().map(Vec::as_slice).collect();
    let batch = Batch::from_sources(&refs);
    let batched = model.forward_batch(&batch).unwrap();
    for (s, out) in sentences.iter().zip(&batched) {
        assert_eq!(&model.forward(s).unwrap(), out);
    }
}

#[test]
fn every_parameter_receives_gradient() {
    let model = Model::<f64>::new(tiny(2)).unwrap();
    let batch = Batch::from_sources(&[&[3, 4, 5], &[6, 3]]);
    let targets = vec![
        LabelSequence::new(vec![4, 5]).unwrap(),
        LabelSequence::new(vec![6]).unwrap(),
    ];
    let mut tape = Tape::new(model.params());
    let (logits, frames) = model.forward_logits(&mut tape, &batch.source, &batch.layout()).unwrap();
    let (loss, _) = ctc_loss_on_tape(&mut tape, logits, &frames, &targets).unwrap();
    let grads = tape.backward(loss).unwrap();
    for (id, p) in model.params().iter() {
        let g = grads.get(id).unwrap_or_else(|| panic!("{} has no gradient", p.name));
        assert!(g.data().iter().any(|&v| v != 0.0), "{} gradient is zero", p.name);
    }
}

#[test]
fn full_model_gradient_matches_finite_differences() {
    let mut model = Model::<f64>::new(tiny(2)).unwrap();
    let cfg = model.config().clone();
    let batch = Batch::from_sources(&[&[3, 4, 5], &[6, 3]]);
    let targets = vec![
        LabelSequence::new(vec![4, 4]).unwrap(),
        LabelSequence::new(vec![6]).unwrap(),
    ];
    let layout = batch.layout();
    let probe = Model::<f64>::new(cfg).unwrap();
    let opts = GradCheckOptions {
        samples_per_param: Some(6),
        ..GradCheckOptions::default()
    };
    let report = check_gradients(model.params_mut(), &opts, |tape| {
        let (logits, frames) = probe.forward_logits(tape, &batch.source, &layout)?;
        Ok(ctc_loss_on_tape(tape, logits, &frames, &targets)?.0)
    })
    .unwrap();
    assert!(report.passes(1e-4), "{report:?}");
}

#[test]
fn parameter_count_formula() {
    for cfg in [tiny(1), tiny(3), bare(2), ModelConfig::toy(20)] {
        let model = Model::<f32>::new(cfg.clone()).unwrap();
        assert_eq!(model.params().num_scalars(), cfg.parameter_count());
    }
    // 6+6 layers, d=1024, 16 heads, d_ff=4096, k=3, 32000 tokens + blank;
    // summed by hand per layer type.
    assert_eq!(ModelConfig::large(32000).parameter_count(), 245_080_321);
}

#[test]
fn config_validation() {
    let bad = ModelConfig { n_heads: 3, ..tiny(1) };
    assert!(matches!(bad.validate(), Err(ModelError::Config(_))));
    let bad = ModelConfig {
        split_factor: 0,
        ..tiny(1)
    };
    assert!(matches!(Model::<f32>::new(bad), Err(ModelError::Config(_))));
    assert!(ModelConfig::large(100).validate().is_ok());
}
