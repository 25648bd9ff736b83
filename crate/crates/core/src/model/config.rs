use serde::{Deserialize, Serialize};

use super::ModelError;

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    /// How many output states each source state is split into.
    pub split_factor: usize,
    /// Output classes excluding the blank; the output layer has
    /// `vocab_size + 1` columns.
    pub vocab_size: usize,
    pub max_source_len: usize,
    pub seed: u64,
    /// Add sinusoidal positions to the split sequence.
    #[serde(default = "default_true")]
    pub split_positions: bool,
}

fn default_true() -> bool {
    true
}

impl ModelConfig {
    /// The large submitted configuration: 6+6 layers of width 1024 with 16
    /// heads, 4096-wide feed-forward and a split factor of 3.
    pub fn large(vocab_size: usize) -> Self {
        Self {
            d_model: 1024,
            n_heads: 16,
            d_ff: 4096,
            enc_layers: 6,
            dec_layers: 6,
            split_factor: 3,
            vocab_size,
            max_source_len: 256,
            seed: 1,
            split_positions: true,
        }
    }

    /// Desk-scale configuration for toy tasks.
    pub fn toy(vocab_size: usize) -> Self {
        Self {
            d_model: 64,
            n_heads: 4,
            d_ff: 256,
            enc_layers: 2,
            dec_layers: 2,
            split_factor: 2,
            vocab_size,
            max_source_len: 64,
            seed: 1,
            split_positions: true,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |m: String| Err(ModelError::Config(m));
        if self.d_model < 2 {
            return fail(format!("d_model {} must be at least 2", self.d_model));
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return fail(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.split_factor == 0 {
            return fail("split_factor must be at least 1".into());
        }
        if self.d_ff == 0 || self.vocab_size == 0 || self.max_source_len == 0 {
            return fail("d_ff, vocab_size and max_source_len must be positive".into());
        }
        Ok(())
    }

    /// Output classes including the blank.
    pub fn classes(&self) -> usize {
        self.vocab_size + 1
    }

    /// Number of learned scalars, from the layer formulas.
    pub fn parameter_count(&self) -> usize {
        let d = self.d_model;
        let f = self.d_ff;
        let c = self.classes();
        let k = self.split_factor;
        let attention = 4 * (d * d + d);
        let ffn = d * f + f + f * d + d;
        let norm = 2 * d;
        let embed = c * d;
        let encoder = self.enc_layers * (attention + ffn + 2 * norm);
        let enc_final = if self.enc_layers > 0 { norm } else { 0 };
        let split = d * k * d + k * d;
        let decoder = self.dec_layers * (2 * attention + ffn + 3 * norm);
        let dec_final = if self.dec_layers > 0 { norm } else { 0 };
        let output = d * c + c;
        embed + encoder + enc_final + split + decoder + dec_final + output
    }
}
