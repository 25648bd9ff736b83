//! Translation in latency mode (one sentence per model call) or batched
//! mode (consecutive groups of `B` sentences per call).

use std::path::PathBuf;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ctc::{greedy_decode, TokenId};
use crate::data::{Batch, Vocabulary};
use crate::model::{Model, ModelError};
use crate::numerics::Scalar;
use crate::training::{load_checkpoint, TrainingError};

#[derive(Debug, Error)]
pub enum InferenceError {
    #[error("line {line}: {len} tokens exceeds max_source_len {max}")]
    TooLong { line: usize, len: usize, max: usize },
    #[error("batch size must be at least 1")]
    BatchSize,
    #[error("line {line}: {source}")]
    Model {
        line: usize,
        #[source]
        source: ModelError,
    },
    #[error(transparent)]
    Checkpoint(#[from] TrainingError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodeMode {
    Latency,
    Batched,
}

impl FromStr for DecodeMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "latency" => Ok(Self::Latency),
            "batched" => Ok(Self::Batched),
            other => Err(format!("unknown decode mode `{other}` (expected latency or batched)")),
        }
    }
}

impl std::fmt::Display for DecodeMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Latency => "latency",
            Self::Batched => "batched",
        })
    }
}

#[derive(Clone, Debug)]
pub struct DecodeJob {
    pub lines: Vec<String>,
    pub mode: DecodeMode,
    /// Sentences per call in batched mode; ignored in latency mode.
    pub batch_size: usize,
    pub checkpoint: PathBuf,
}

impl DecodeJob {
    pub fn effective_batch_size(&self) -> usize {
        match self.mode {
            DecodeMode::Latency => 1,
            DecodeMode::Batched => self.batch_size,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TimingTrace {
    pub load_seconds: f64,
    /// Wall time of all translation calls, excluding model load.
    pub translate_seconds: f64,
    /// Duration of each [`translate_batch`] call.
    pub call_ms: Vec<f64>,
    /// Model invocations; empty groups cost none.
    pub model_calls: usize,
    pub output_tokens: usize,
}

/// Tokenizes, pads, runs one forward pass, and greedily decodes `sentences`.
///
/// Empty lines come back empty and take no part in the model call. Line
/// numbers in errors count from `first_line`.
pub fn translate_lines<F: Scalar>(
    model: &Model<F>,
    vocab: &Vocabulary,
    sentences: &[&str],
    first_line: usize,
) -> Result<(Vec<String>, bool), InferenceError> {
    let max = model.config().max_source_len;
    let mut ids: Vec<(usize, Vec<TokenId>)> = Vec::with_capacity(sentences.len());
    for (i, s) in sentences.iter().enumerate() {
        let t = vocab.tokenize(s);
        if t.len() > max {
            return Err(InferenceError::TooLong {
                line: first_line + i,
                len: t.len(),
                max,
            });
        }
        if !t.is_empty() {
            ids.push((i, t));
        }
    }
    let mut out = vec![String::new(); sentences.len()];
    if ids.is_empty() {
        return Ok((out, false));
    }
    let rows: Vec<&[TokenId]> = ids.iter().map(|(_, t)| t.as_slice()).collect();
    let batch = Batch::from_sources(&rows);
    let frames = model.forward_batch(&batch).map_err(|source| InferenceError::Model {
        line: first_line + ids[0].0,
        source,
    })?;
    for ((i, _), lp) in ids.iter().zip(&frames) {
        out[*i] = vocab.detokenize(greedy_decode(lp).ids());
    }
    Ok((out, true))
}

/// [`translate_lines`] with lines numbered from 1.
pub fn translate_batch<F: Scalar>(
    model: &Model<F>,
    vocab: &Vocabulary,
    sentences: &[&str],
) -> Result<Vec<String>, InferenceError> {
    Ok(translate_lines(model, vocab, sentences, 1)?.0)
}

/// Translates `lines` in consecutive groups of `batch_size`, timing each call.
pub fn translate_all<F: Scalar>(
    model: &Model<F>,
    vocab: &Vocabulary,
    lines: &[String],
    batch_size: usize,
    first_line: usize,
) -> Result<(Vec<String>, TimingTrace), InferenceError> {
    if batch_size == 0 {
        return Err(InferenceError::BatchSize);
    }
    let mut out = Vec::with_capacity(lines.len());
    let mut trace = TimingTrace::default();
    let start = Instant::now();
    for (g, group) in lines.chunks(batch_size).enumerate() {
        let refs: Vec<&str> = group.iter().map(String::as_str).collect();
        let call = Instant::now();
        let (translated, invoked) = translate_lines(model, vocab, &refs, first_line + g * batch_size)?;
        trace.call_ms.push(call.elapsed().as_secs_f64() * 1e3);
        trace.model_calls += usize::from(invoked);
        out.extend(translated);
    }
    trace.translate_seconds = start.elapsed().as_secs_f64();
    trace.output_tokens = out.iter().map(|s| s.split_whitespace().count()).sum();
    Ok((out, trace))
}

/// Loads the checkpoint, then translates every line of the job.
pub fn run_job(job: &DecodeJob) -> Result<(Vec<String>, TimingTrace), InferenceError> {
    let start = Instant::now();
    let ckpt = load_checkpoint::<f32>(&job.checkpoint)?;
    let load_seconds = start.elapsed().as_secs_f64();
    let (out, mut trace) = translate_all(&ckpt.model, &ckpt.vocab, &job.lines, job.effective_batch_size(), 1)?;
    trace.load_seconds = load_seconds;
    Ok((out, trace))
}
