//! Central finite-difference checks of tape gradients.
//!
//! The reference values come from forward evaluations only, so the check is
//! independent of every backward rule it exercises.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::numerics::{ParamStore, Tape, Var};
use crate::Error;

/// Gradient norm treated as zero.
pub const ZERO_NORM: f64 = 1e-8;

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    /// Largest norm-wise relative error over the checked parameter tensors.
    pub max_rel_error: f64,
    /// Parameter whose error was largest.
    pub worst_param: String,
    pub entries_checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Entries sampled per parameter; `None` checks every entry.
    pub samples_per_param: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-3,
            samples_per_param: None,
            seed: 0,
        }
    }
}

/// Compares `backward` against central differences of `forward`.
///
/// `forward` records a computation on a fresh tape and returns a scalar.
/// For each parameter the relative error is `‖a − n‖ / max(‖a‖, ‖n‖)` over
/// the sampled entries, where `a` is the analytic and `n` the numeric
/// gradient. Tensors whose gradients are both below [`ZERO_NORM`] count as
/// exact; such gradients arise where the loss is invariant to a parameter,
/// as with attention key biases.
pub fn check_gradients<Fw>(
    params: &mut ParamStore<f64>,
    opts: &GradCheckOptions,
    forward: Fw,
) -> Result<GradCheckReport, Error>
where
    Fw: Fn(&mut Tape<'_, f64>) -> Result<Var, Error>,
{
    let analytic = {
        let mut tape = Tape::new(&*params);
        let loss = forward(&mut tape)?;
        tape.backward(loss)?
    };
    let eval = |params: &ParamStore<f64>| -> Result<f64, Error> {
        let mut tape = Tape::new(params);
        let loss = forward(&mut tape)?;
        Ok(tape.value(loss).data()[0])
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport::default();
    let ids: Vec<_> = params.iter().map(|(id, _)| id).collect();
    for id in ids {
        let n = params.get(id).value.len();
        let entries: Vec<usize> = match opts.samples_per_param {
            Some(s) if s < n => sample(&mut rng, n, s).into_vec(),
            _ => (0..n).collect(),
        };
        let mut diff2 = 0.0;
        let mut a2 = 0.0;
        let mut n2 = 0.0;
        for e in entries {
            let original = params.get(id).value.data()[e];
            params.get_mut(id).value.data_mut()[e] = original + opts.step;
            let plus = eval(params)?;
            params.get_mut(id).value.data_mut()[e] = original - opts.step;
            let minus = eval(params)?;
            params.get_mut(id).value.data_mut()[e] = original;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = analytic.get(id).map_or(0.0, |g| g.data()[e]);
            diff2 += (a - numeric) * (a - numeric);
            a2 += a * a;
            n2 += numeric * numeric;
            report.entries_checked += 1;
        }
        let denom = a2.sqrt().max(n2.sqrt());
        let rel = if denom < ZERO_NORM { 0.0 } else { diff2.sqrt() / denom };
        if rel >= report.max_rel_error {
            report.max_rel_error = rel;
            report.worst_param = params.get(id).name.clone();
        }
    }
    Ok(report)
}
