//! Connectionist temporal classification.
//!
//! Frames are rows of a `[T × C]` log-probability matrix whose column 0 is
//! the blank. The loss sums, in log space, the probability of every frame
//! sequence that collapses to the target; the gradient comes from the same
//! lattice through forward/backward occupancies.

use thiserror::Error;

use crate::numerics::{kernels, log_add, NumericsError, Scalar, SeqLayout, Tape, Tensor, Var};

pub type TokenId = u32;

/// Id of the blank ("empty") symbol in every vocabulary and output layer.
pub const BLANK: TokenId = 0;

/// Row sums of `exp(log_probs)` must be within this of one.
pub const NORMALIZATION_TOL: f64 = 1e-5;

/// Largest frame-sequence count the brute-force oracle will enumerate.
pub const ORACLE_MAX_PATHS: u64 = 1_000_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CtcError {
    #[error("label sequence contains the blank id at position {position}")]
    InvalidLabel { position: usize },
    #[error("target of length {label_len} cannot be aligned to {frames} frames")]
    Infeasible { label_len: usize, frames: usize },
    #[error("frame {row} is not a log-distribution (probabilities sum to {sum})")]
    NotNormalized { row: usize, sum: f64 },
    #[error("label id {id} outside the {classes}-way output")]
    LabelOutOfRange { id: TokenId, classes: usize },
    #[error("target has zero probability under the given frames")]
    ZeroProbability,
    #[error("brute-force oracle would enumerate {paths} frame sequences (limit {ORACLE_MAX_PATHS})")]
    OracleTooLarge { paths: u128 },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Output tokens with the blanks removed.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub struct LabelSequence(Vec<TokenId>);

impl LabelSequence {
    pub fn new(ids: Vec<TokenId>) -> Result<Self, CtcError> {
        if let Some(position) = ids.iter().position(|&id| id == BLANK) {
            return Err(CtcError::InvalidLabel { position });
        }
        Ok(Self(ids))
    }

    pub fn empty() -> Self {
        Self(Vec::new())
    }

    pub fn ids(&self) -> &[TokenId] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Adjacent pairs of equal labels; each needs a blank frame between.
    pub fn repeat_count(&self) -> usize {
        self.0.windows(2).filter(|w| w[0] == w[1]).count()
    }

    /// Fewest frames that can collapse to this sequence.
    pub fn min_frames(&self) -> usize {
        self.len() + self.repeat_count()
    }
}

/// `[∅, y₁, ∅, y₂, …, yₙ, ∅]`
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExtendedLabels(Vec<TokenId>);

impl ExtendedLabels {
    pub fn ids(&self) -> &[TokenId] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Whether state `s` may be entered directly from `s − 2`.
    fn can_skip(&self, s: usize) -> bool {
        s >= 2 && self.0[s] != BLANK && self.0[s] != self.0[s - 2]
    }
}

pub fn extend_labels(ids: &[TokenId]) -> Result<ExtendedLabels, CtcError> {
    let y = LabelSequence::new(ids.to_vec())?;
    Ok(extend(&y))
}

fn extend(y: &LabelSequence) -> ExtendedLabels {
    let mut out = Vec::with_capacity(2 * y.len() + 1);
    out.push(BLANK);
    for &id in y.ids() {
        out.push(id);
        out.push(BLANK);
    }
    ExtendedLabels(out)
}

/// Frame ids to output tokens: merge adjacent repeats, then drop blanks.
///
/// This is the one place the collapse rule lives; the lattice in
/// [`forward_table`] and the oracle in [`brute_force_loss`] both follow it.
pub fn collapse(frames: &[TokenId]) -> LabelSequence {
    let mut out = Vec::new();
    let mut prev = None;
    for &id in frames {
        if Some(id) != prev && id != BLANK {
            out.push(id);
        }
        prev = Some(id);
    }
    LabelSequence(out)
}

pub fn feasible(y: &LabelSequence, frames: usize) -> bool {
    frames >= y.min_frames()
}

/// Forward (`alpha`) and backward (`beta`) log-probabilities over the
/// extended-label lattice. `beta[t, s]` excludes the emission at frame `t`.
#[derive(Clone, Debug)]
pub struct ForwardTable {
    pub frames: usize,
    pub states: usize,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub total_log_prob: f64,
    labels: ExtendedLabels,
}

impl ForwardTable {
    pub fn alpha(&self, t: usize, s: usize) -> f64 {
        self.alpha[t * self.states + s]
    }

    pub fn beta(&self, t: usize, s: usize) -> f64 {
        self.beta[t * self.states + s]
    }

    pub fn labels(&self) -> &ExtendedLabels {
        &self.labels
    }
}

fn check_frames<F: Scalar>(log_probs: &Tensor<F>, y: &LabelSequence) -> Result<(usize, usize), CtcError> {
    let (t, c) = log_probs.dims2()?;
    for &id in y.ids() {
        if id as usize >= c {
            return Err(CtcError::LabelOutOfRange { id, classes: c });
        }
    }
    if !feasible(y, t) {
        return Err(CtcError::Infeasible {
            label_len: y.len(),
            frames: t,
        });
    }
    Ok((t, c))
}

fn check_normalized<F: Scalar>(log_probs: &Tensor<F>) -> Result<(), CtcError> {
    for row in 0..log_probs.rows() {
        let sum: f64 = log_probs.row(row).iter().map(|v| v.as_f64().exp()).sum();
        if !((sum - 1.0).abs() <= NORMALIZATION_TOL) {
            return Err(CtcError::NotNormalized { row, sum });
        }
    }
    Ok(())
}

/// Runs both lattice passes. `lp(t, c)` yields the log-probability of class
/// `c` at frame `t`.
fn lattice(frames: usize, y: &LabelSequence, lp: impl Fn(usize, usize) -> f64) -> ForwardTable {
    let labels = extend(y);
    let states = labels.len();
    let ninf = f64::NEG_INFINITY;
    let emit = |t: usize, s: usize| lp(t, labels.ids()[s] as usize);

    let mut alpha = vec![ninf; frames * states];
    alpha[0] = emit(0, 0);
    if states > 1 {
        alpha[1] = emit(0, 1);
    }
    for t in 1..frames {
        let (prev, cur) = alpha.split_at_mut(t * states);
        let prev = &prev[(t - 1) * states..];
        for s in 0..states {
            let mut acc = prev[s];
            if s >= 1 {
                acc = log_add(acc, prev[s - 1]);
            }
            if labels.can_skip(s) {
                acc = log_add(acc, prev[s - 2]);
            }
            cur[s] = if acc == ninf { ninf } else { acc + emit(t, s) };
        }
    }

    let mut beta = vec![ninf; frames * states];
    let last = (frames - 1) * states;
    beta[last + states - 1] = 0.0;
    if states > 1 {
        beta[last + states - 2] = 0.0;
    }
    for t in (0..frames - 1).rev() {
        let (cur, next) = beta.split_at_mut((t + 1) * states);
        let cur = &mut cur[t * states..];
        for s in 0..states {
            let mut acc = ninf;
            for succ in [s, s + 1, s + 2] {
                if succ >= states || (succ == s + 2 && !labels.can_skip(succ)) {
                    continue;
                }
                if next[succ] > ninf {
                    acc = log_add(acc, next[succ] + emit(t + 1, succ));
                }
            }
            cur[s] = acc;
        }
    }

    let end = &alpha[last..];
    let total_log_prob = if states > 1 {
        log_add(end[states - 1], end[states - 2])
    } else {
        end[0]
    };
    ForwardTable {
        frames,
        states,
        alpha,
        beta,
        total_log_prob,
        labels,
    }
}

/// Builds the lattice for normalized `log_probs`.
pub fn forward_table<F: Scalar>(log_probs: &Tensor<F>, y: &LabelSequence) -> Result<ForwardTable, CtcError> {
    let (frames, c) = check_frames(log_probs, y)?;
    check_normalized(log_probs)?;
    let data = log_probs.data();
    Ok(lattice(frames, y, |t, k| data[t * c + k].as_f64()))
}

/// `−ln p(y | frames)`.
pub fn ctc_loss<F: Scalar>(log_probs: &Tensor<F>, y: &LabelSequence) -> Result<F, CtcError> {
    let table = forward_table(log_probs, y)?;
    if table.total_log_prob == f64::NEG_INFINITY {
        return Err(CtcError::ZeroProbability);
    }
    Ok(F::from_f64_lossy(-table.total_log_prob))
}

/// Gradient of [`ctc_loss`] with respect to the pre-softmax scores whose
/// log-softmax is `log_probs`.
pub fn ctc_grad<F: Scalar>(log_probs: &Tensor<F>, y: &LabelSequence) -> Result<Tensor<F>, CtcError> {
    let table = forward_table(log_probs, y)?;
    if table.total_log_prob == f64::NEG_INFINITY {
        return Err(CtcError::ZeroProbability);
    }
    let (t, c) = log_probs.dims2()?;
    let probs: Vec<f64> = log_probs.data().iter().map(|v| v.as_f64().exp()).collect();
    let grad = occupancy_grad(&table, &probs, c);
    Ok(Tensor::new(
        vec![t, c],
        grad.into_iter().map(F::from_f64_lossy).collect(),
    )?)
}

/// `softmax − Σ_{s: label(s)=v} γ(t, s)` for every frame and class.
fn occupancy_grad(table: &ForwardTable, probs: &[f64], classes: usize) -> Vec<f64> {
    let mut grad = probs.to_vec();
    let ids = table.labels.ids();
    for t in 0..table.frames {
        for (s, &id) in ids.iter().enumerate() {
            let a = table.alpha(t, s);
            let b = table.beta(t, s);
            if a == f64::NEG_INFINITY || b == f64::NEG_INFINITY {
                continue;
            }
            grad[t * classes + id as usize] -= (a + b - table.total_log_prob).exp();
        }
    }
    grad
}

/// Per-frame argmax (ties to the lowest id), then [`collapse`].
pub fn greedy_decode<F: Scalar>(log_probs: &Tensor<F>) -> LabelSequence {
    let frames: Vec<TokenId> = log_probs.argmax_rows().into_iter().map(|i| i as TokenId).collect();
    collapse(&frames)
}

/// Exhaustive oracle: sums the probability of every frame sequence that
/// collapses to `y`.
pub fn brute_force_loss<F: Scalar>(log_probs: &Tensor<F>, y: &LabelSequence) -> Result<f64, CtcError> {
    let (t, c) = log_probs.dims2()?;
    let paths = (c as u128).checked_pow(t as u32).unwrap_or(u128::MAX);
    if paths > ORACLE_MAX_PATHS as u128 {
        return Err(CtcError::OracleTooLarge { paths });
    }
    let data: Vec<f64> = log_probs.data().iter().map(|v| v.as_f64()).collect();
    let mut frame_ids = vec![0 as TokenId; t];
    let mut total = 0.0f64;
    for mut code in 0..paths as u64 {
        let mut logp = 0.0;
        for (pos, slot) in frame_ids.iter_mut().enumerate() {
            let id = (code % c as u64) as usize;
            code /= c as u64;
            *slot = id as TokenId;
            logp += data[pos * c + id];
        }
        if collapse(&frame_ids) == *y {
            total += logp.exp();
        }
    }
    if total == 0.0 {
        return Err(CtcError::Infeasible {
            label_len: y.len(),
            frames: t,
        });
    }
    Ok(-total.ln())
}

/// Summary of a batched loss evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchLoss {
    /// Σ per-sequence losses, before normalization.
    pub total: f64,
    /// Σ target lengths (at least one).
    pub normalizer: f64,
}

/// Records `Σ_b ctc_loss(log_softmax(logits_b), y_b) / max(1, Σ_b |y_b|)` on
/// the tape.
///
/// `logits` holds the frames of all sequences stacked per `layout`; padded
/// rows do not contribute.
pub fn ctc_loss_on_tape<F: Scalar>(
    tape: &mut Tape<'_, F>,
    logits: Var,
    layout: &SeqLayout,
    targets: &[LabelSequence],
) -> Result<(Var, BatchLoss), CtcError> {
    let value = tape.value(logits);
    let (rows, c) = value.dims2()?;
    if rows != layout.total_rows() || targets.len() != layout.batch_size() {
        return Err(NumericsError::Contract(format!(
            "{} targets and {rows} frame rows do not fit a batch of {} × {}",
            targets.len(),
            layout.batch_size(),
            layout.stride
        ))
        .into());
    }
    let normalizer = targets.iter().map(LabelSequence::len).sum::<usize>().max(1) as f64;
    let mut grad = vec![0.0f64; rows * c];
    let mut total = 0.0;
    for (b, y) in targets.iter().enumerate() {
        let len = layout.lens[b];
        let start = b * layout.stride;
        if len == 0 {
            return Err(CtcError::Infeasible {
                label_len: y.len(),
                frames: 0,
            });
        }
        let mut lp: Vec<f64> = value.data()[start * c..(start + len) * c]
            .iter()
            .map(|v| v.as_f64())
            .collect();
        for row in lp.chunks_mut(c) {
            kernels::log_softmax_in_place(row);
        }
        let lp = Tensor::new(vec![len, c], lp)?;
        check_frames(&lp, y)?;
        let table = lattice(len, y, |t, k| lp.data()[t * c + k]);
        if table.total_log_prob == f64::NEG_INFINITY {
            return Err(CtcError::ZeroProbability);
        }
        total += -table.total_log_prob;
        let probs: Vec<f64> = lp.data().iter().map(|v| v.exp()).collect();
        let g = occupancy_grad(&table, &probs, c);
        for (dst, src) in grad[start * c..(start + len) * c].iter_mut().zip(g) {
            *dst = src / normalizer;
        }
    }
    let grad = Tensor::new(vec![rows, c], grad.into_iter().map(F::from_f64_lossy).collect())?;
    let loss = tape.loss_with_grad(logits, F::from_f64_lossy(total / normalizer), grad)?;
    Ok((loss, BatchLoss { total, normalizer }))
}
