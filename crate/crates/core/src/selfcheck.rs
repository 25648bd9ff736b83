//! Property suites that gate a build: CTC against the exhaustive oracle,
//! gradients against finite differences, and the output length law.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::ctc::{brute_force_loss, ctc_grad, ctc_loss, feasible, LabelSequence, TokenId};
use crate::data::Batch;
use crate::gradcheck::{check_gradients, GradCheckOptions};
use crate::model::{Model, ModelConfig};
use crate::numerics::{kernels, Tensor};

#[derive(Clone, Debug)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub cases: usize,
    /// Largest deviation seen, in the check's own units.
    pub max_error: f64,
    pub tolerance: f64,
    pub seconds: f64,
    pub detail: String,
}

impl CheckOutcome {
    pub fn line(&self) -> String {
        format!(
            "{} {}: {} cases, max error {:.3e} (tolerance {:.0e}), {:.2} s{}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.cases,
            self.max_error,
            self.tolerance,
            self.seconds,
            if self.detail.is_empty() {
                String::new()
            } else {
                format!(" [{}]", self.detail)
            }
        )
    }
}

fn random_log_probs(rng: &mut ChaCha8Rng, frames: usize, classes: usize) -> Tensor<f64> {
    let mut data: Vec<f64> = (0..frames * classes).map(|_| rng.gen_range(-3.0..3.0)).collect();
    for row in data.chunks_mut(classes) {
        kernels::log_softmax_in_place(row);
    }
    Tensor::new(vec![frames, classes], data).expect("shape matches data")
}

/// Every label sequence of length `0..=max_len` over ids `1..=v`.
fn all_labels(v: usize, max_len: usize) -> Vec<LabelSequence> {
    let mut out = vec![Vec::<TokenId>::new()];
    let mut frontier = out.clone();
    for _ in 0..max_len {
        frontier = frontier
            .iter()
            .flat_map(|p| {
                (1..=v as TokenId).map(move |id| {
                    let mut q = p.clone();
                    q.push(id);
                    q
                })
            })
            .collect();
        out.extend(frontier.iter().cloned());
    }
    out.into_iter()
        .map(|ids| LabelSequence::new(ids).expect("ids are non-blank"))
        .collect()
}

/// `ctc_loss` against [`brute_force_loss`] for every feasible target with
/// `|y| ≤ 3` over `V ≤ 3` labels and `T ≤ 6` frames, on random distributions.
pub fn ctc_oracle_equivalence(seed: u64, draws: usize) -> CheckOutcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut cases, mut worst, mut detail) = (0, 0.0f64, String::new());
    for v in 1..=3 {
        let labels = all_labels(v, 3);
        for t in 1..=6 {
            for _ in 0..draws {
                let lp = random_log_probs(&mut rng, t, v + 1);
                for y in labels.iter().filter(|y| feasible(y, t)) {
                    let err = match (ctc_loss(&lp, y), brute_force_loss(&lp, y)) {
                        (Ok(a), Ok(b)) => (a - b).abs(),
                        (a, b) => {
                            detail = format!("V={v} T={t} y={:?}: {a:?} vs {b:?}", y.ids());
                            f64::INFINITY
                        }
                    };
                    if err > worst {
                        worst = err;
                    }
                    cases += 1;
                }
            }
        }
    }
    CheckOutcome {
        name: "ctc oracle equivalence",
        passed: worst <= 1e-6,
        cases,
        max_error: worst,
        tolerance: 1e-6,
        seconds: start.elapsed().as_secs_f64(),
        detail,
    }
}

/// Probability mass over every collapsed output of a `T=4`, `V=2` lattice.
pub fn ctc_normalization(seed: u64) -> CheckOutcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lp = random_log_probs(&mut rng, 4, 3);
    let mut mass = 0.0;
    let mut cases = 0;
    for y in all_labels(2, 4).iter().filter(|y| feasible(y, 4)) {
        if let Ok(loss) = brute_force_loss(&lp, y) {
            mass += (-loss).exp();
        }
        cases += 1;
    }
    let err = (mass - 1.0).abs();
    CheckOutcome {
        name: "ctc normalization",
        passed: err <= 1e-6,
        cases,
        max_error: err,
        tolerance: 1e-6,
        seconds: start.elapsed().as_secs_f64(),
        detail: format!("total mass {mass:.12}"),
    }
}

/// `ctc_grad` against central differences of `ctc_loss` on random logits.
pub fn ctc_gradient_check(seed: u64, instances: usize) -> CheckOutcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = 1e-5;
    let mut worst = 0.0f64;
    let mut done = 0;
    while done < instances {
        let v = rng.gen_range(1..=4);
        let t = rng.gen_range(1..=8);
        let len = rng.gen_range(0..=t.min(4));
        let y = LabelSequence::new((0..len).map(|_| rng.gen_range(1..=v as TokenId)).collect()).unwrap();
        if !feasible(&y, t) {
            continue;
        }
        let logits: Vec<f64> = (0..t * (v + 1)).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let loss_at = |z: &[f64]| {
            let mut z = z.to_vec();
            for row in z.chunks_mut(v + 1) {
                kernels::log_softmax_in_place(row);
            }
            ctc_loss(&Tensor::new(vec![t, v + 1], z).unwrap(), &y).unwrap()
        };
        let mut lp = logits.clone();
        for row in lp.chunks_mut(v + 1) {
            kernels::log_softmax_in_place(row);
        }
        let analytic = ctc_grad(&Tensor::new(vec![t, v + 1], lp).unwrap(), &y).unwrap();
        let (mut diff, mut norm_a, mut norm_n) = (0.0, 0.0, 0.0);
        for i in 0..logits.len() {
            let mut up = logits.clone();
            let mut down = logits.clone();
            up[i] += h;
            down[i] -= h;
            let numeric = (loss_at(&up) - loss_at(&down)) / (2.0 * h);
            let a = analytic.data()[i];
            diff += (a - numeric).powi(2);
            norm_a += a * a;
            norm_n += numeric * numeric;
        }
        let denom = norm_a.sqrt().max(norm_n.sqrt());
        let rel = if denom < 1e-12 { 0.0 } else { diff.sqrt() / denom };
        worst = worst.max(rel);
        done += 1;
    }
    CheckOutcome {
        name: "ctc gradient",
        passed: worst <= 1e-4,
        cases: done,
        max_error: worst,
        tolerance: 1e-4,
        seconds: start.elapsed().as_secs_f64(),
        detail: String::new(),
    }
}

fn random_small_config(rng: &mut ChaCha8Rng) -> ModelConfig {
    let heads = rng.gen_range(1..=2);
    ModelConfig {
        d_model: 4 * heads,
        n_heads: heads,
        d_ff: rng.gen_range(4..=12),
        enc_layers: rng.gen_range(0..=1),
        dec_layers: rng.gen_range(1..=2),
        split_factor: rng.gen_range(1..=3),
        vocab_size: rng.gen_range(3..=5),
        max_source_len: 8,
        seed: rng.gen(),
        split_positions: rng.gen(),
    }
}

/// Full model backward (embedding to CTC loss) against central differences
/// on random tiny configurations and padded batches.
pub fn model_gradient_check(seed: u64, instances: usize) -> CheckOutcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut detail = String::new();
    let mut entries = 0;
    for i in 0..instances {
        let cfg = random_small_config(&mut rng);
        let classes = cfg.classes() as TokenId;
        let k = cfg.split_factor;
        let sentences = rng.gen_range(1..=2);
        let sources: Vec<Vec<TokenId>> = (0..sentences)
            .map(|_| (0..rng.gen_range(1..=3)).map(|_| rng.gen_range(3..classes)).collect())
            .collect();
        let refs: Vec<&[TokenId]> = sources.iter().map(Vec::as_slice).collect();
        let mut batch = Batch::from_sources(&refs);
        batch.targets = sources
            .iter()
            .map(|s| {
                let mut y: Vec<TokenId> = (0..rng.gen_range(1..=s.len()))
                    .map(|_| rng.gen_range(3..classes))
                    .collect();
                while !feasible(&LabelSequence::new(y.clone()).unwrap(), k * s.len()) {
                    y.pop();
                }
                LabelSequence::new(y).unwrap()
            })
            .collect();
        let mut model = Model::<f64>::new(cfg.clone()).expect("valid config");
        let probe = Model::<f64>::new(cfg).expect("valid config");
        let layout = batch.layout();
        let opts = GradCheckOptions {
            step: 1e-4,
            samples_per_param: Some(4),
            seed: i as u64,
        };
        let report = check_gradients(model.params_mut(), &opts, |tape| {
            let (logits, frames) = probe.forward_logits(tape, &batch.source, &layout)?;
            Ok(crate::ctc::ctc_loss_on_tape(tape, logits, &frames, &batch.targets)?.0)
        });
        match report {
            Ok(r) => {
                entries += r.entries_checked;
                if r.max_rel_error > worst {
                    worst = r.max_rel_error;
                    detail = format!("worst parameter {}", r.worst_param);
                }
            }
            Err(e) => {
                worst = f64::INFINITY;
                detail = e.to_string();
            }
        }
    }
    CheckOutcome {
        name: "model gradient",
        passed: worst <= 1e-4,
        cases: instances,
        max_error: worst,
        tolerance: 1e-4,
        seconds: start.elapsed().as_secs_f64(),
        detail: format!("{entries} entries; {detail}"),
    }
}

/// Output frame count equals `k · T` for `T ∈ [1, 64]`, `k ∈ {1, 2, 3}`.
pub fn frame_count_law() -> CheckOutcome {
    let start = Instant::now();
    let mut cases = 0;
    let mut failures = Vec::new();
    for k in 1..=3 {
        let cfg = ModelConfig {
            d_model: 8,
            n_heads: 2,
            d_ff: 8,
            enc_layers: 1,
            dec_layers: 1,
            split_factor: k,
            vocab_size: 5,
            max_source_len: 64,
            seed: k as u64,
            split_positions: true,
        };
        let model = Model::<f32>::new(cfg).expect("valid config");
        for t in 1..=64 {
            let src: Vec<TokenId> = (0..t).map(|i| 3 + (i % 3) as TokenId).collect();
            let frames = model.forward(&src).map(|lp| lp.rows()).unwrap_or(0);
            if frames != k * t {
                failures.push(format!("k={k} T={t}: {frames} frames"));
            }
            cases += 1;
        }
    }
    CheckOutcome {
        name: "frame count law",
        passed: failures.is_empty(),
        cases,
        max_error: failures.len() as f64,
        tolerance: 0.0,
        seconds: start.elapsed().as_secs_f64(),
        detail: failures.join("; "),
    }
}

/// Runs every suite; `quick` trims instance counts.
pub fn run_all(quick: bool) -> Vec<CheckOutcome> {
    let n = if quick { 5 } else { 20 };
    vec![
        ctc_oracle_equivalence(11, if quick { 1 } else { 3 }),
        ctc_normalization(12),
        ctc_gradient_check(13, n * 2),
        model_gradient_check(14, n),
        frame_count_law(),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn label_enumeration() {
        let l = all_labels(2, 3);
        assert_eq!(l.len(), 1 + 2 + 4 + 8);
        assert!(l[0].is_empty());
    }

    #[test]
    fn quick_suites_pass() {
        for outcome in run_all(true) {
            assert!(outcome.passed, "{}", outcome.line());
        }
    }
}
