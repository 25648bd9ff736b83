//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any
//! criterion fails.

use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ctc_nmt::ctc::{greedy_decode, TokenId};
use ctc_nmt::data::{ParallelCorpus, ToySpec, Vocabulary};
use ctc_nmt::evalbench::{bleu, run_bench};
use ctc_nmt::inference::{run_job, DecodeJob, DecodeMode};
use ctc_nmt::model::{Model, ModelConfig};
use ctc_nmt::selfcheck;
use ctc_nmt::training::{load_checkpoint, lr_schedule, save_checkpoint, TrainLog, Trainer, TrainingConfig};

struct Verdict {
    id: usize,
    name: &'static str,
    passed: bool,
    detail: String,
}

impl Verdict {
    fn new(id: usize, name: &'static str, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            id,
            name,
            passed,
            detail: detail.into(),
        }
    }
}

fn oracle_equivalence() -> Verdict {
    let o = selfcheck::ctc_oracle_equivalence(101, 3);
    Verdict::new(
        1,
        "CTC oracle equivalence",
        o.passed && o.seconds < 60.0,
        format!(
            "{} (target, distribution) cases, max |loss - oracle| {:.2e} <= 1e-6, {:.2} s < 60 s {}",
            o.cases, o.max_error, o.seconds, o.detail
        ),
    )
}

fn normalization() -> Verdict {
    let o = selfcheck::ctc_normalization(102);
    Verdict::new(
        2,
        "CTC normalization",
        o.passed,
        format!(
            "{} collapsed outputs, |mass - 1| = {:.2e} <= 1e-6",
            o.cases, o.max_error
        ),
    )
}

fn gradients() -> Verdict {
    let start = Instant::now();
    let c = selfcheck::ctc_gradient_check(103, 40);
    let m = selfcheck::model_gradient_check(104, 20);
    let secs = start.elapsed().as_secs_f64();
    Verdict::new(
        3,
        "gradient correctness",
        c.passed && m.passed && c.cases >= 20 && m.cases >= 20 && secs < 300.0,
        format!(
            "ctc_grad {} instances max rel {:.2e}; model backward {} instances max rel {:.2e} ({}); {:.1} s < 300 s",
            c.cases, c.max_error, m.cases, m.max_error, m.detail, secs
        ),
    )
}

fn shape_law() -> Verdict {
    let o = selfcheck::frame_count_law();
    Verdict::new(
        4,
        "frame count k * T_x",
        o.passed,
        format!("{} (T_x, k) pairs, {} mismatches {}", o.cases, o.max_error, o.detail),
    )
}

fn accuracy(model: &Model<f32>, vocab: &Vocabulary, pairs: &[(String, String)]) -> f64 {
    let correct = pairs
        .iter()
        .filter(|(s, t)| {
            let lp = model
                .forward(&vocab.tokenize(s))
                .expect("held-out source fits the model");
            vocab.detokenize(greedy_decode(&lp).ids()) == *t
        })
        .count();
    correct as f64 / pairs.len() as f64
}

/// Trains the toy model and leaves its checkpoint at `ckpt`.
fn toy_convergence(ckpt: &Path) -> Verdict {
    let spec = ToySpec::default();
    let vocab = spec.vocabulary();
    let train = spec.generate(5000, 1);
    let seen: HashSet<&str> = train.iter().map(|p| p.0.as_str()).collect();
    let held_out: Vec<(String, String)> = spec
        .generate(1000, 2)
        .into_iter()
        .filter(|p| !seen.contains(p.0.as_str()))
        .take(500)
        .collect();
    let (corpus, _) = ParallelCorpus::from_lines(
        train.iter().map(|p| p.0.as_str()),
        train.iter().map(|p| p.1.as_str()),
        &vocab,
    )
    .expect("toy corpus tokenizes");

    let model = Model::<f32>::new(ModelConfig::toy(vocab.len() - 1)).expect("toy config is valid");
    let cfg = TrainingConfig {
        base_lr: 1e-3,
        warmup_steps: 200,
        total_steps: 3000,
        batch_token_budget: 320,
        ..TrainingConfig::default()
    };
    let mut trainer = Trainer::new(model, cfg).expect("training config is valid");
    let mut log = TrainLog::silent();
    let start = Instant::now();
    let mut reached: Option<(u64, f64)> = None;
    let mut last = (0, 0.0);
    let result = trainer.fit(&corpus, &mut log, |t, m| {
        if m.step % 250 == 0 && reached.is_none() {
            let acc = accuracy(&t.model, &vocab, &held_out);
            last = (m.step, acc);
            if acc >= 0.95 {
                reached = Some((m.step, acc));
            }
        }
        Ok(())
    });
    let secs = start.elapsed().as_secs_f64();
    if let Err(e) = result {
        return Verdict::new(5, "toy-task convergence", false, format!("training failed: {e}"));
    }
    save_checkpoint(
        ckpt,
        &trainer.model,
        Some(&trainer.opt),
        trainer.step(),
        &vocab,
        "acceptance",
    )
    .expect("checkpoint is writable");
    let final_acc = accuracy(&trainer.model, &vocab, &held_out);
    let detail = match reached {
        Some((step, acc)) => format!(
            "reversal task, {} held-out pairs: {:.1}% exact at step {step}, {:.1}% after step {}; {:.0} s < 900 s",
            held_out.len(),
            acc * 100.0,
            final_acc * 100.0,
            trainer.step(),
            secs
        ),
        None => format!(
            "best check {:.1}% at step {}, final {:.1}% after {} steps; {:.0} s",
            last.1 * 100.0,
            last.0,
            final_acc * 100.0,
            trainer.step(),
            secs
        ),
    };
    Verdict::new(5, "toy-task convergence", reached.is_some() && secs < 900.0, detail)
}

fn schedule() -> Verdict {
    let got = [4000, 8000, 32000].map(|s| lr_schedule(s, 1e-4, 8000));
    Verdict::new(
        6,
        "learning-rate schedule",
        got == [5e-5, 1e-4, 5e-5],
        format!("steps 4000/8000/32000 -> {:e}/{:e}/{:e}", got[0], got[1], got[2]),
    )
}

fn bench_lines() -> Vec<String> {
    ToySpec::default().generate(1016, 3).into_iter().map(|p| p.0).collect()
}

fn speedup(ckpt: &Path) -> Verdict {
    let lines = bench_lines();
    let job = |mode| DecodeJob {
        lines: lines.clone(),
        mode,
        batch_size: 32,
        checkpoint: ckpt.to_path_buf(),
    };
    let (lat, lat_out) = run_bench(&job(DecodeMode::Latency), 16).expect("latency bench runs");
    let (bat, bat_out) = run_bench(&job(DecodeMode::Batched), 16).expect("batched bench runs");
    let ratio = bat.sentences_per_second / lat.sentences_per_second;
    Verdict::new(
        7,
        "batched throughput >= 1.5x latency",
        ratio >= 1.5 && lat_out == bat_out && bat.sentence_count >= 1000,
        format!(
            "{} timed sentences: latency {:.1} sent/s, batched B=32 {:.1} sent/s, ratio {:.2}; translations identical: {}; host: {}",
            bat.sentence_count,
            lat.sentences_per_second,
            bat.sentences_per_second,
            ratio,
            lat_out == bat_out,
            bat.hardware
        ),
    )
}

fn mode_equivalence(ckpt: &Path) -> Verdict {
    let spec = ToySpec::default();
    let mut lines: Vec<String> = spec.generate(500, 2).into_iter().map(|p| p.0).collect();
    lines.extend(bench_lines());
    lines.insert(7, String::new());
    let job = |mode| DecodeJob {
        lines: lines.clone(),
        mode,
        batch_size: 32,
        checkpoint: ckpt.to_path_buf(),
    };
    let (lat, _) = run_job(&job(DecodeMode::Latency)).expect("latency decode runs");
    let (bat, _) = run_job(&job(DecodeMode::Batched)).expect("batched decode runs");
    let (a, b) = (lat.join("\n"), bat.join("\n"));
    Verdict::new(
        8,
        "latency/batched byte identity",
        a.as_bytes() == b.as_bytes() && lat.len() == lines.len(),
        format!("{} lines, {} output bytes each", lines.len(), a.len()),
    )
}

fn bleu_checks() -> Verdict {
    let same = bleu(&["the cat sat on the mat"], &["the cat sat on the mat"]).unwrap_or(-1.0);
    let short = bleu(&["a b c d"], &["a b c d e"]).unwrap_or(-1.0);
    let none = bleu(&["a b c x y z"], &["a b c d e f"]).unwrap_or(-1.0);

    let spec = ToySpec::default();
    let refs: Vec<String> = spec.generate(100, 4).into_iter().map(|p| p.1).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let hyps: Vec<String> = refs
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let mut w: Vec<&str> = r.split(' ').collect();
            match i % 4 {
                0 => {
                    w.pop();
                }
                1 => {
                    let j = rng.gen_range(0..w.len());
                    w[j] = "s0";
                }
                2 => w.swap(0, 1),
                _ => {}
            }
            w.join(" ")
        })
        .collect();
    let mut pairs: Vec<(&str, &str)> = hyps
        .iter()
        .map(String::as_str)
        .zip(refs.iter().map(String::as_str))
        .collect();
    let score = |p: &[(&str, &str)]| {
        let (h, r): (Vec<&str>, Vec<&str>) = p.iter().copied().unzip();
        bleu(&h, &r).unwrap()
    };
    let before = score(&pairs);
    pairs.shuffle(&mut rng);
    let after = score(&pairs);

    Verdict::new(
        9,
        "BLEU correctness",
        same == 100.0 && (short - 77.88).abs() <= 0.01 && none == 0.0 && before == after && before > 0.0,
        format!(
            "identical {same}, short {short:.4}, no 4-gram match {none}; 100-pair corpus {before:.6} before and {after:.6} after shuffling"
        ),
    )
}

fn checkpoint_round_trip(dir: &Path, ckpt: &Path) -> Verdict {
    let original = load_checkpoint::<f32>(ckpt).expect("toy checkpoint loads");
    let copy = dir.join("copy.ckpt");
    save_checkpoint(
        &copy,
        &original.model,
        original.optimizer.as_ref(),
        original.meta.step,
        &original.vocab,
        "x",
    )
    .expect("checkpoint is writable");
    let reloaded = load_checkpoint::<f32>(&copy).expect("copy loads");
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let classes = original.model.config().classes() as TokenId;
    let mut identical = 0;
    for _ in 0..100 {
        let len = rng.gen_range(1..=20);
        let src: Vec<TokenId> = (0..len).map(|_| rng.gen_range(3..classes)).collect();
        let a = original.model.forward(&src).expect("forward runs");
        let b = reloaded.model.forward(&src).expect("forward runs");
        let same = a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits());
        identical += usize::from(same);
    }
    Verdict::new(
        10,
        "checkpoint round trip",
        identical == 100,
        format!("{identical}/100 random inputs bit-identical after save and load"),
    )
}

fn main() {
    let dir = tempfile::tempdir().expect("temp dir");
    let ckpt: PathBuf = dir.path().join("toy.ckpt");
    let start = Instant::now();

    let mut verdicts = vec![oracle_equivalence(), normalization(), gradients(), shape_law()];
    verdicts.push(toy_convergence(&ckpt));
    verdicts.push(schedule());
    verdicts.push(speedup(&ckpt));
    verdicts.push(mode_equivalence(&ckpt));
    verdicts.push(bleu_checks());
    verdicts.push(checkpoint_round_trip(dir.path(), &ckpt));

    println!();
    for v in &verdicts {
        println!(
            "{} [{:>2}] {}: {}",
            if v.passed { "PASS" } else { "FAIL" },
            v.id,
            v.name,
            v.detail
        );
    }
    let failed: Vec<usize> = verdicts.iter().filter(|v| !v.passed).map(|v| v.id).collect();
    println!(
        "\nacceptance: {}/{} criteria passed in {:.0} s",
        verdicts.len() - failed.len(),
        verdicts.len(),
        start.elapsed().as_secs_f64()
    );
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
