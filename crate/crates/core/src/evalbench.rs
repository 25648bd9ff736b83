//! Decoding-speed benchmarks and corpus BLEU.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Vocabulary;
use crate::inference::{translate_all, DecodeJob, DecodeMode, InferenceError, TimingTrace};
use crate::model::Model;
use crate::numerics::Scalar;
use crate::training::load_checkpoint;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("contract violation: {0}")]
    Contract(String),
    #[error(transparent)]
    Inference(#[from] InferenceError),
    #[error("report: {0}")]
    Format(String),
}

/// One benchmark run. Field order is the serialized key order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub mode: DecodeMode,
    pub batch_size: usize,
    pub sentence_count: usize,
    pub load_seconds: f64,
    pub translate_seconds: f64,
    pub sentences_per_second: f64,
    /// Output tokens produced per second of translation time.
    pub tokens_per_second: f64,
    pub p50_ms: f64,
    pub p90_ms: f64,
    pub p99_ms: f64,
    pub hardware: String,
    pub config_hash: String,
}

impl BenchReport {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("report serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self, EvalError> {
        toml::from_str(text).map_err(|e| EvalError::Format(e.to_string()))
    }

    /// Checks the throughput and percentile invariants.
    pub fn check(&self) -> Result<(), String> {
        if !(self.translate_seconds > 0.0) {
            return Err("translate_seconds must be positive".into());
        }
        if self.sentences_per_second != self.sentence_count as f64 / self.translate_seconds {
            return Err("sentences_per_second is not sentence_count / translate_seconds".into());
        }
        if !(self.p50_ms <= self.p90_ms && self.p90_ms <= self.p99_ms) {
            return Err("percentiles are not ordered".into());
        }
        Ok(())
    }

    pub fn summary(&self) -> String {
        format!(
            "{} (B={}): {} sentences in {:.3} s, {:.1} sent/s, {:.1} tok/s, per call p50 {:.3} ms p90 {:.3} ms p99 {:.3} ms, load {:.3} s",
            self.mode,
            self.batch_size,
            self.sentence_count,
            self.translate_seconds,
            self.sentences_per_second,
            self.tokens_per_second,
            self.p50_ms,
            self.p90_ms,
            self.p99_ms,
            self.load_seconds
        )
    }
}

/// Nearest-rank percentile of `values`; 0 for an empty slice.
pub fn percentile(values: &[f64], p: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = ((p / 100.0) * sorted.len() as f64).ceil().max(1.0) as usize;
    sorted[rank.min(sorted.len()) - 1]
}

/// Free-text description of the host.
pub fn hardware_note() -> String {
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    format!(
        "{}-{}, {} hardware threads, {} worker threads",
        std::env::consts::ARCH,
        std::env::consts::OS,
        threads,
        rayon::current_num_threads()
    )
}

fn report_from_trace(
    mode: DecodeMode,
    batch_size: usize,
    sentence_count: usize,
    load_seconds: f64,
    trace: &TimingTrace,
    hardware: &str,
    config_hash: &str,
) -> BenchReport {
    let secs = trace.translate_seconds.max(f64::MIN_POSITIVE);
    BenchReport {
        mode,
        batch_size,
        sentence_count,
        load_seconds,
        translate_seconds: secs,
        sentences_per_second: sentence_count as f64 / secs,
        tokens_per_second: trace.output_tokens as f64 / secs,
        p50_ms: percentile(&trace.call_ms, 50.0),
        p90_ms: percentile(&trace.call_ms, 90.0),
        p99_ms: percentile(&trace.call_ms, 99.0),
        hardware: hardware.to_string(),
        config_hash: config_hash.to_string(),
    }
}

/// Benchmarks an already loaded model; see [`run_bench`].
pub fn bench_model<F: Scalar>(
    model: &Model<F>,
    vocab: &Vocabulary,
    lines: &[String],
    mode: DecodeMode,
    batch_size: usize,
    warmup: usize,
) -> Result<(BenchReport, Vec<String>), EvalError> {
    if lines.len() < warmup + 1 {
        return Err(EvalError::Contract(format!(
            "{} input lines but {warmup} warm-up sentences plus at least one timed sentence are needed",
            lines.len()
        )));
    }
    let b = match mode {
        DecodeMode::Latency => 1,
        DecodeMode::Batched => batch_size,
    };
    let (mut out, _) = translate_all(model, vocab, &lines[..warmup], b, 1)?;
    let (timed, trace) = translate_all(model, vocab, &lines[warmup..], b, warmup + 1)?;
    out.extend(timed);
    let report = report_from_trace(mode, b, lines.len() - warmup, 0.0, &trace, &hardware_note(), "");
    Ok((report, out))
}

/// Loads the job's checkpoint (timed separately), translates `warmup`
/// sentences untimed, then times the rest.
///
/// Returns the report and the translations of every input line.
pub fn run_bench(job: &DecodeJob, warmup: usize) -> Result<(BenchReport, Vec<String>), EvalError> {
    let start = Instant::now();
    let ckpt = load_checkpoint::<f32>(&job.checkpoint).map_err(InferenceError::from)?;
    let load_seconds = start.elapsed().as_secs_f64();
    let (mut report, out) = bench_model(&ckpt.model, &ckpt.vocab, &job.lines, job.mode, job.batch_size, warmup)?;
    report.load_seconds = load_seconds;
    report.config_hash = ckpt.meta.config_hash;
    Ok((report, out))
}

fn ngram_counts<'a, 'b>(tokens: &'b [&'a str], n: usize) -> HashMap<&'b [&'a str], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for i in 0..=tokens.len() - n {
            *counts.entry(&tokens[i..i + n]).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus-level BLEU-4 on whitespace tokens, in `[0, 100]`, without smoothing.
pub fn bleu(hypotheses: &[&str], references: &[&str]) -> Result<f64, EvalError> {
    if hypotheses.len() != references.len() {
        return Err(EvalError::Contract(format!(
            "{} hypotheses but {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    let mut matched = [0usize; 4];
    let mut total = [0usize; 4];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for (h, r) in hypotheses.iter().zip(references) {
        let h: Vec<&str> = h.split_whitespace().collect();
        let r: Vec<&str> = r.split_whitespace().collect();
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=4 {
            let hc = ngram_counts(&h, n);
            let rc = ngram_counts(&r, n);
            total[n - 1] += h.len().saturating_sub(n - 1);
            matched[n - 1] += hc
                .iter()
                .map(|(g, &c)| c.min(rc.get(g).copied().unwrap_or(0)))
                .sum::<usize>();
        }
    }
    if ref_len == 0 {
        return Err(EvalError::Contract("every reference is empty".into()));
    }
    if matched.contains(&0) {
        return Ok(0.0);
    }
    let log_precision: f64 = (0..4).map(|i| (matched[i] as f64 / total[i] as f64).ln()).sum::<f64>() / 4.0;
    let brevity = if hyp_len < ref_len {
        1.0 - ref_len as f64 / hyp_len as f64
    } else {
        0.0
    };
    Ok(100.0 * (log_precision + brevity).exp())
}

/// Throughput of each report divided by that of the first.
pub fn speedups(reports: &[BenchReport]) -> Vec<f64> {
    let base = reports.first().map_or(1.0, |r| r.sentences_per_second);
    reports.iter().map(|r| r.sentences_per_second / base).collect()
}

/// Aligned text table with one row per report.
pub fn compare_runs(reports: &[BenchReport]) -> Result<String, EvalError> {
    if reports.len() < 2 {
        return Err(EvalError::Contract("comparison needs at least two reports".into()));
    }
    let header = [
        "run",
        "mode",
        "B",
        "sentences",
        "seconds",
        "sent/s",
        "tok/s",
        "p50 ms",
        "p90 ms",
        "p99 ms",
        "speedup",
    ];
    let mut rows = vec![header.iter().map(|s| s.to_string()).collect::<Vec<_>>()];
    for (i, (r, s)) in reports.iter().zip(speedups(reports)).enumerate() {
        rows.push(vec![
            (i + 1).to_string(),
            r.mode.to_string(),
            r.batch_size.to_string(),
            r.sentence_count.to_string(),
            format!("{:.3}", r.translate_seconds),
            format!("{:.1}", r.sentences_per_second),
            format!("{:.1}", r.tokens_per_second),
            format!("{:.3}", r.p50_ms),
            format!("{:.3}", r.p90_ms),
            format!("{:.3}", r.p99_ms),
            format!("{s:.2}x"),
        ]);
    }
    let widths: Vec<usize> = (0..header.len())
        .map(|c| rows.iter().map(|r| r[c].len()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for row in &rows {
        let cells: Vec<String> = row
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(c, (cell, &w))| {
                if c < 2 {
                    format!("{cell:<w$}")
                } else {
                    format!("{cell:>w$}")
                }
            })
            .collect();
        writeln!(out, "{}", cells.join("  ").trim_end()).unwrap();
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(mode: DecodeMode, sps: f64) -> BenchReport {
        BenchReport {
            mode,
            batch_size: 1,
            sentence_count: 100,
            load_seconds: 0.1,
            translate_seconds: 100.0 / sps,
            sentences_per_second: sps,
            tokens_per_second: 3.0 * sps,
            p50_ms: 1.0,
            p90_ms: 2.0,
            p99_ms: 3.0,
            hardware: "test".into(),
            config_hash: "0".into(),
        }
    }

    #[test]
    fn bleu_examples() {
        assert_eq!(
            bleu(&["a b c d", "x y z w v"], &["a b c d", "x y z w v"]).unwrap(),
            100.0
        );
        let short = bleu(&["a b c d"], &["a b c d e"]).unwrap();
        assert!((short - 100.0 * (-0.25f64).exp()).abs() < 1e-9);
        assert!((short - 77.88).abs() < 0.01);
        assert_eq!(bleu(&["a b c x y z"], &["a b c d e f"]).unwrap(), 0.0);
    }

    #[test]
    fn bleu_contracts() {
        assert!(matches!(bleu(&["a"], &[]), Err(EvalError::Contract(_))));
        assert!(matches!(bleu(&["a"], &[""]), Err(EvalError::Contract(_))));
    }

    #[test]
    fn bleu_clips_repeated_ngrams() {
        // unigram precision 2/7 (the appears twice in the reference)
        let h = "the the the the the the the";
        let r = "the cat is on the mat today";
        assert_eq!(bleu(&[h], &[r]).unwrap(), 0.0);
        let tokens: Vec<&str> = h.split(' ').collect();
        assert_eq!(ngram_counts(&tokens, 1).values().sum::<usize>(), 7);
    }

    #[test]
    fn percentiles_are_nearest_rank() {
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(percentile(&v, 50.0), 50.0);
        assert_eq!(percentile(&v, 90.0), 90.0);
        assert_eq!(percentile(&v, 99.0), 99.0);
        assert_eq!(percentile(&[7.0], 99.0), 7.0);
        assert_eq!(percentile(&[], 50.0), 0.0);
    }

    #[test]
    fn report_toml_has_stable_key_order() {
        let r = report(DecodeMode::Batched, 50.0);
        let text = r.to_toml();
        let keys: Vec<&str> = text.lines().map(|l| l.split(" = ").next().unwrap()).collect();
        assert_eq!(
            keys,
            [
                "mode",
                "batch_size",
                "sentence_count",
                "load_seconds",
                "translate_seconds",
                "sentences_per_second",
                "tokens_per_second",
                "p50_ms",
                "p90_ms",
                "p99_ms",
                "hardware",
                "config_hash"
            ]
        );
        assert_eq!(BenchReport::from_toml(&text).unwrap(), r);
    }

    #[test]
    fn comparison_table() {
        let a = report(DecodeMode::Latency, 40.0);
        let b = report(DecodeMode::Batched, 100.0);
        assert_eq!(speedups(&[a.clone(), a.clone()]), vec![1.0, 1.0]);
        assert_eq!(speedups(&[a.clone(), b.clone()])[1], 100.0 / 40.0);
        let table = compare_runs(&[a.clone(), b, a.clone()]).unwrap();
        assert_eq!(table.lines().count(), 4);
        assert!(table.lines().nth(2).unwrap().ends_with("2.50x"));
        assert!(compare_runs(&[a]).is_err());
    }
}
