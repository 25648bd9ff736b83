use std::fs;

use super::*;
use crate::ctc::{ctc_loss, LabelSequence};
use crate::data::{ToySpec, ToyTask, Vocabulary};
use crate::model::ModelConfig;
use crate::numerics::Tensor;

fn tiny_config(vocab: usize) -> ModelConfig {
    ModelConfig {
        d_model: 8,
        n_heads: 2,
        d_ff: 16,
        enc_layers: 1,
        dec_layers: 1,
        split_factor: 2,
        vocab_size: vocab - 1,
        max_source_len: 16,
        seed: 5,
        split_positions: true,
    }
}

fn fast_cfg() -> TrainingConfig {
    TrainingConfig {
        base_lr: 1e-2,
        warmup_steps: 10,
        total_steps: 100,
        batch_token_budget: 64,
        ..TrainingConfig::default()
    }
}

fn toy_batch(vocab: &Vocabulary) -> Batch {
    let spec = ToySpec {
        task: ToyTask::Copy,
        symbols: 6,
        min_len: 2,
        max_len: 4,
    };
    let pairs = spec.generate(4, 3);
    let sources: Vec<Vec<u32>> = pairs.iter().map(|(s, _)| vocab.tokenize(s)).collect();
    let refs: Vec<&[u32]> = sources.iter().map(Vec::as_slice).collect();
    let mut batch = Batch::from_sources(&refs);
    batch.targets = pairs
        .iter()
        .map(|(_, t)| LabelSequence::new(vocab.tokenize(t)).unwrap())
        .collect();
    batch
}

fn toy_vocab() -> Vocabulary {
    ToySpec {
        symbols: 6,
        ..ToySpec::default()
    }
    .vocabulary()
}

#[test]
fn schedule_values() {
    assert_eq!(lr_schedule(8000, 1e-4, 8000), 1e-4);
    assert_eq!(lr_schedule(4000, 1e-4, 8000), 5e-5);
    assert_eq!(lr_schedule(32000, 1e-4, 8000), 5e-5);
    assert_eq!(lr_schedule(1, 1e-4, 8000), 1e-4 / 8000.0);
    let before = lr_schedule(7999, 1e-4, 8000);
    let after = lr_schedule(8001, 1e-4, 8000);
    assert!(before < 1e-4 && after < 1e-4);
    assert!((before - after).abs() < 1e-8);
}

#[test]
fn config_validation() {
    assert!(TrainingConfig::default().validate().is_ok());
    for bad in [
        TrainingConfig {
            base_lr: 0.0,
            ..TrainingConfig::default()
        },
        TrainingConfig {
            warmup_steps: 0,
            ..TrainingConfig::default()
        },
        TrainingConfig {
            clip_norm: Some(-1.0),
            ..TrainingConfig::default()
        },
    ] {
        assert!(matches!(bad.validate(), Err(TrainingError::Config(_))));
    }
}

#[test]
fn single_sentence_loss_is_per_token() {
    let vocab = toy_vocab();
    let mut model = Model::<f64>::new(tiny_config(vocab.len())).unwrap();
    let src = vocab.tokenize("s1 s2 s3");
    let y = LabelSequence::new(vocab.tokenize("s3 s3 s1")).unwrap();
    let expected = ctc_loss(&model.forward(&src).unwrap(), &y).unwrap() / 3.0;
    let mut batch = Batch::from_sources(&[&src]);
    batch.targets = vec![y];
    let mut opt = OptimizerState::new(model.params());
    let m = train_step(&mut model, &batch, &mut opt, &fast_cfg()).unwrap();
    assert!((m.loss - expected).abs() < 1e-12, "{} vs {expected}", m.loss);
    assert_eq!(m.step, 1);
    assert_eq!(opt.step_count(), 1);
}

#[test]
fn zero_gradient_leaves_parameters_unchanged() {
    let vocab = toy_vocab();
    let mut model = Model::<f64>::new(tiny_config(vocab.len())).unwrap();
    let before = model.params().clone();
    let mut opt = OptimizerState::new(model.params());
    let mut grads = Gradients::new(model.params().len());
    for (id, p) in before.iter() {
        grads.slot(id, p.value.shape());
    }
    opt.update(model.params_mut(), &grads, 1e-3, &fast_cfg());
    for ((_, a), (_, b)) in before.iter().zip(model.params().iter()) {
        assert_eq!(a.value, b.value);
    }
}

#[test]
fn infeasible_sentences_are_skipped_and_counted() {
    let vocab = toy_vocab();
    let mut model = Model::<f32>::new(tiny_config(vocab.len())).unwrap();
    let before = model.params().clone();
    let src = vocab.tokenize("s1");
    let mut batch = Batch::from_sources(&[&src]);
    batch.targets = vec![LabelSequence::new(vocab.tokenize("s1 s2 s3")).unwrap()];
    let mut opt = OptimizerState::new(model.params());
    let m = train_step(&mut model, &batch, &mut opt, &fast_cfg()).unwrap();
    assert_eq!(m.skipped, 1);
    assert_eq!(opt.step_count(), 1);
    for ((_, a), (_, b)) in before.iter().zip(model.params().iter()) {
        assert_eq!(a.value, b.value);
    }
}

#[test]
fn clipping_bounds_the_global_norm() {
    let mut store = crate::numerics::ParamStore::<f64>::new();
    let a = store.insert("a", Tensor::zeros(&[3]));
    let b = store.insert("b", Tensor::zeros(&[2]));
    let mut grads = Gradients::new(2);
    grads.slot(a, &[3]).data_mut().copy_from_slice(&[3.0, 4.0, 12.0]);
    grads.slot(b, &[2]).data_mut().copy_from_slice(&[-84.0, 0.0]);
    let pre = clip_gradients(&mut grads, Some(1.0));
    assert!((pre - 85.0).abs() < 1e-12);
    assert!(grads.norm() <= 1.0 + 1e-6);
    let mut unclipped = grads.clone();
    assert_eq!(clip_gradients(&mut unclipped, None), grads.norm());
}

#[test]
fn loss_decreases_on_a_fixed_batch() {
    let vocab = toy_vocab();
    let mut trainer = Trainer::new(Model::<f32>::new(tiny_config(vocab.len())).unwrap(), fast_cfg()).unwrap();
    let batch = toy_batch(&vocab);
    let losses: Vec<f64> = (0..100).map(|_| trainer.train_step(&batch).unwrap().loss).collect();
    let head: f64 = losses[..10].iter().sum::<f64>() / 10.0;
    let tail: f64 = losses[90..].iter().sum::<f64>() / 10.0;
    assert!(tail < 0.5 * head, "{head} -> {tail}");
}

#[test]
fn training_is_reproducible() {
    let vocab = toy_vocab();
    let batch = toy_batch(&vocab);
    let trace = || {
        let mut t = Trainer::new(Model::<f64>::new(tiny_config(vocab.len())).unwrap(), fast_cfg()).unwrap();
        (0..100)
            .map(|_| t.train_step(&batch).unwrap().loss.to_bits())
            .collect::<Vec<_>>()
    };
    assert_eq!(trace(), trace());
}

#[test]
fn checkpoint_round_trip_and_resume() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    let vocab = toy_vocab();
    let batch = toy_batch(&vocab);
    let cfg = fast_cfg();

    let mut straight = Trainer::new(Model::<f32>::new(tiny_config(vocab.len())).unwrap(), cfg.clone()).unwrap();
    for _ in 0..5 {
        straight.train_step(&batch).unwrap();
    }
    save_checkpoint(
        &path,
        &straight.model,
        Some(&straight.opt),
        straight.step(),
        &vocab,
        "abc",
    )
    .unwrap();
    let loaded = load_checkpoint::<f32>(&path).unwrap();
    assert_eq!(loaded.meta.step, 5);
    assert_eq!(loaded.meta.config_hash, "abc");
    assert_eq!(loaded.vocab, vocab);
    for ((_, a), (_, b)) in straight.model.params().iter().zip(loaded.model.params().iter()) {
        assert_eq!(a.name, b.name);
        assert_eq!(a.value, b.value);
    }
    assert_eq!(loaded.optimizer.as_ref(), Some(&straight.opt));

    let mut resumed = Trainer::resume(loaded, cfg).unwrap();
    for _ in 0..5 {
        let a = straight.train_step(&batch).unwrap();
        let b = resumed.train_step(&batch).unwrap();
        assert_eq!(a.lr, b.lr);
        assert_eq!(a.loss.to_bits(), b.loss.to_bits());
    }
    assert!(!dir
        .path()
        .join(format!("model.ckpt.tmp{}", std::process::id()))
        .exists());
}

#[test]
fn truncated_or_mismatched_checkpoints_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    let vocab = toy_vocab();
    let model = Model::<f32>::new(tiny_config(vocab.len())).unwrap();
    save_checkpoint(&path, &model, None, 0, &vocab, "h").unwrap();
    let bytes = fs::read(&path).unwrap();

    let cut = dir.path().join("cut.ckpt");
    fs::write(&cut, &bytes[..bytes.len() - 10]).unwrap();
    assert!(matches!(
        load_checkpoint::<f32>(&cut),
        Err(TrainingError::Checkpoint { .. })
    ));

    let text = String::from_utf8_lossy(&bytes).into_owned();
    let header_end = text.find('\n').unwrap() + 1;
    let header_len = text[header_end..].find('\n').unwrap();
    let header = &text[header_end..header_end + header_len];
    let changed = header.replace("\"d_ff\":16", "\"d_ff\":12");
    assert_ne!(header, changed);
    let mut forged = bytes[..header_end].to_vec();
    forged.extend_from_slice(changed.as_bytes());
    forged.extend_from_slice(&bytes[header_end + header_len..]);
    let bad = dir.path().join("bad.ckpt");
    fs::write(&bad, forged).unwrap();
    assert!(matches!(
        load_checkpoint::<f32>(&bad),
        Err(TrainingError::Checkpoint { .. })
    ));

    fs::write(&bad, b"not a checkpoint\n").unwrap();
    assert!(load_checkpoint::<f32>(&bad).is_err());
}

#[test]
fn log_writes_json_lines() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("train.log");
    let mut log = TrainLog::new(Some(&path), false).unwrap();
    let m = StepMetrics {
        step: 1,
        loss: 2.5,
        lr: 1e-4,
        grad_norm: 0.5,
        skipped: 0,
        wall_ms: 3.0,
    };
    log.record(&m).unwrap();
    log.record(&StepMetrics { step: 2, ..m.clone() }).unwrap();
    let text = fs::read_to_string(&path).unwrap();
    let lines: Vec<StepMetrics> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0], m);
    assert!(text
        .lines()
        .next()
        .unwrap()
        .starts_with("{\"step\":1,\"loss\":2.5,\"lr\":"));
}
