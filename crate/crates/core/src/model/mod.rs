//! State-splitting Transformer for non-autoregressive CTC translation.
//!
//! ```text
//! tokens ─ embed ─ encoder ─ h ─ split (affine d → k·d, reshape) ─ s
//!                                                                  │
//!                          log-softmax ─ project ─ decoder(s, cross-attend s)
//! ```
//!
//! A source of `T` tokens yields `k · T` output frames, each a distribution
//! over the vocabulary plus the blank in column 0.

mod config;

pub use config::ModelConfig;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::ctc::TokenId;
use crate::data::Batch;
use crate::numerics::{kernels, NumericsError, ParamId, ParamStore, Scalar, SeqLayout, Tape, Tensor, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("empty source sentence")]
    EmptyInput,
    #[error("source of {len} tokens exceeds max_source_len {max}")]
    TooLong { len: usize, max: usize },
    #[error("token id {id} outside the embedding table of {rows} rows")]
    TokenOutOfRange { id: TokenId, rows: usize },
    #[error("parameter mismatch: {0}")]
    Parameters(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Clone, Copy, Debug)]
struct Norm {
    gain: ParamId,
    bias: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct Attention {
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct FeedForward {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct EncoderLayer {
    attn_norm: Norm,
    attn: Attention,
    ffn_norm: Norm,
    ffn: FeedForward,
}

#[derive(Clone, Copy, Debug)]
struct DecoderLayer {
    self_norm: Norm,
    self_attn: Attention,
    cross_norm: Norm,
    cross_attn: Attention,
    ffn_norm: Norm,
    ffn: FeedForward,
}

#[derive(Clone, Debug)]
struct Weights {
    embed: ParamId,
    encoder: Vec<EncoderLayer>,
    encoder_norm: Option<Norm>,
    split_w: ParamId,
    split_b: ParamId,
    decoder: Vec<DecoderLayer>,
    decoder_norm: Option<Norm>,
    out_w: ParamId,
    out_b: ParamId,
}

struct Registrar<'a, F: Scalar> {
    store: &'a mut ParamStore<F>,
    rng: ChaCha8Rng,
}

impl<F: Scalar> Registrar<'_, F> {
    fn matrix(&mut self, name: &str, rows: usize, cols: usize) -> ParamId {
        self.store.insert_xavier(name, rows, cols, &mut self.rng)
    }

    fn filled(&mut self, name: &str, len: usize, value: f64) -> ParamId {
        self.store
            .insert(name, Tensor::filled(&[len], F::from_f64_lossy(value)))
    }

    fn norm(&mut self, prefix: &str, d: usize) -> Norm {
        Norm {
            gain: self.filled(&format!("{prefix}.gain"), d, 1.0),
            bias: self.filled(&format!("{prefix}.bias"), d, 0.0),
        }
    }

    fn attention(&mut self, prefix: &str, d: usize) -> Attention {
        let mut proj = |n: &str| {
            (
                self.matrix(&format!("{prefix}.w{n}"), d, d),
                self.filled(&format!("{prefix}.b{n}"), d, 0.0),
            )
        };
        let (wq, bq) = proj("q");
        let (wk, bk) = proj("k");
        let (wv, bv) = proj("v");
        let (wo, bo) = proj("o");
        Attention {
            wq,
            bq,
            wk,
            bk,
            wv,
            bv,
            wo,
            bo,
        }
    }

    fn ffn(&mut self, prefix: &str, d: usize, f: usize) -> FeedForward {
        FeedForward {
            w1: self.matrix(&format!("{prefix}.w1"), d, f),
            b1: self.filled(&format!("{prefix}.b1"), f, 0.0),
            w2: self.matrix(&format!("{prefix}.w2"), f, d),
            b2: self.filled(&format!("{prefix}.b2"), d, 0.0),
        }
    }
}

impl Weights {
    fn register<F: Scalar>(cfg: &ModelConfig, store: &mut ParamStore<F>) -> Self {
        let d = cfg.d_model;
        let mut r = Registrar {
            store,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        };
        let embed = r.matrix("embed.tokens", cfg.classes(), d);
        let encoder = (0..cfg.enc_layers)
            .map(|i| {
                let p = format!("encoder.layer{i}");
                EncoderLayer {
                    attn_norm: r.norm(&format!("{p}.attn_norm"), d),
                    attn: r.attention(&format!("{p}.attn"), d),
                    ffn_norm: r.norm(&format!("{p}.ffn_norm"), d),
                    ffn: r.ffn(&format!("{p}.ffn"), d, cfg.d_ff),
                }
            })
            .collect();
        let encoder_norm = (cfg.enc_layers > 0).then(|| r.norm("encoder.final_norm", d));
        let split_w = r.matrix("split.w", d, cfg.split_factor * d);
        let split_b = r.filled("split.b", cfg.split_factor * d, 0.0);
        let decoder = (0..cfg.dec_layers)
            .map(|i| {
                let p = format!("decoder.layer{i}");
                DecoderLayer {
                    self_norm: r.norm(&format!("{p}.self_norm"), d),
                    self_attn: r.attention(&format!("{p}.self_attn"), d),
                    cross_norm: r.norm(&format!("{p}.cross_norm"), d),
                    cross_attn: r.attention(&format!("{p}.cross_attn"), d),
                    ffn_norm: r.norm(&format!("{p}.ffn_norm"), d),
                    ffn: r.ffn(&format!("{p}.ffn"), d, cfg.d_ff),
                }
            })
            .collect();
        let decoder_norm = (cfg.dec_layers > 0).then(|| r.norm("decoder.final_norm", d));
        let out_w = r.matrix("output.w", d, cfg.classes());
        let out_b = r.filled("output.b", cfg.classes(), 0.0);
        Self {
            embed,
            encoder,
            encoder_norm,
            split_w,
            split_b,
            decoder,
            decoder_norm,
            out_w,
            out_b,
        }
    }
}

/// Encoder output **h** over a padded batch.
#[derive(Clone, Debug)]
pub struct EncoderStates {
    pub states: Var,
    pub layout: SeqLayout,
}

impl EncoderStates {
    pub fn mask(&self) -> Vec<bool> {
        self.layout.mask()
    }
}

/// Split states **s**: each encoder state stretched into `k` consecutive
/// states of the same width.
#[derive(Clone, Debug)]
pub struct SplitStates {
    pub states: Var,
    pub layout: SeqLayout,
}

impl SplitStates {
    pub fn mask(&self) -> Vec<bool> {
        self.layout.mask()
    }
}

#[derive(Clone, Debug)]
pub struct Model<F: Scalar> {
    config: ModelConfig,
    params: ParamStore<F>,
    weights: Weights,
    positions: Vec<F>,
}

impl<F: Scalar> Model<F> {
    /// Xavier-initialized model; identical seeds give identical weights.
    pub fn new(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let mut params = ParamStore::new();
        let weights = Weights::register(&config, &mut params);
        let positions = kernels::sinusoidal_positions(config.max_source_len * config.split_factor, config.d_model);
        Ok(Self {
            config,
            params,
            weights,
            positions,
        })
    }

    /// Replaces every parameter with the same-named tensor in `values`.
    /// Names and shapes must match the configuration exactly.
    pub fn from_named(config: ModelConfig, values: Vec<(String, Tensor<F>)>) -> Result<Self, ModelError> {
        let mut model = Self::new(config)?;
        if values.len() != model.params.len() {
            return Err(ModelError::Parameters(format!(
                "configuration defines {} tensors but {} were supplied",
                model.params.len(),
                values.len()
            )));
        }
        for (name, value) in values {
            let id = model
                .params
                .id(&name)
                .ok_or_else(|| ModelError::Parameters(format!("unexpected tensor `{name}`")))?;
            model
                .params
                .set_value(id, value)
                .map_err(|e| ModelError::Parameters(format!("`{name}`: {e}")))?;
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<F> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<F> {
        &mut self.params
    }

    /// Same weights at another precision.
    pub fn cast<G: Scalar>(&self) -> Model<G> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
            weights: self.weights.clone(),
            positions: self.positions.iter().map(|v| G::from_f64_lossy(v.as_f64())).collect(),
        }
    }

    fn check_lengths(&self, layout: &SeqLayout) -> Result<(), ModelError> {
        if layout.lens.is_empty() || layout.lens.contains(&0) {
            return Err(ModelError::EmptyInput);
        }
        if layout.stride > self.config.max_source_len {
            return Err(ModelError::TooLong {
                len: layout.stride,
                max: self.config.max_source_len,
            });
        }
        Ok(())
    }

    fn position_rows(&self, layout: &SeqLayout) -> Vec<F> {
        let d = self.config.d_model;
        let block = &self.positions[..layout.stride * d];
        block.repeat(layout.batch_size())
    }

    /// Token embeddings scaled by `√d_model` plus sinusoidal positions.
    ///
    /// `ids` is a padded `layout.batch_size() × layout.stride` matrix.
    pub fn embed(
        &self,
        tape: &mut Tape<'_, F>,
        ids: &[TokenId],
        layout: &SeqLayout,
    ) -> Result<EncoderStates, ModelError> {
        self.check_lengths(layout)?;
        let rows = self.config.classes();
        if let Some(&id) = ids.iter().find(|&&id| id as usize >= rows) {
            return Err(ModelError::TokenOutOfRange { id, rows });
        }
        if ids.len() != layout.total_rows() {
            return Err(NumericsError::Contract(format!(
                "{} ids for a {}×{} batch",
                ids.len(),
                layout.batch_size(),
                layout.stride
            ))
            .into());
        }
        let idx: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        let scale = F::from_usize(self.config.d_model).unwrap().sqrt();
        let x = tape.embed(self.weights.embed, &idx, scale)?;
        let states = tape.add_const(x, &self.position_rows(layout))?;
        Ok(EncoderStates {
            states,
            layout: layout.clone(),
        })
    }

    fn attention_block(
        &self,
        tape: &mut Tape<'_, F>,
        a: &Attention,
        query_src: Var,
        kv_src: Var,
        q_layout: &SeqLayout,
        kv_layout: &SeqLayout,
    ) -> Result<Var, ModelError> {
        let q = tape.affine(query_src, a.wq, Some(a.bq))?;
        let k = tape.affine(kv_src, a.wk, Some(a.bk))?;
        let v = tape.affine(kv_src, a.wv, Some(a.bv))?;
        let ctx = tape.attention(q, k, v, self.config.n_heads, q_layout, kv_layout)?;
        Ok(tape.affine(ctx, a.wo, Some(a.bo))?)
    }

    fn ffn_block(&self, tape: &mut Tape<'_, F>, f: &FeedForward, x: Var) -> Result<Var, ModelError> {
        let h = tape.affine(x, f.w1, Some(f.b1))?;
        let h = tape.relu(h);
        Ok(tape.affine(h, f.w2, Some(f.b2))?)
    }

    /// Pre-norm self-attention encoder layers; shape preserved.
    pub fn encode(&self, tape: &mut Tape<'_, F>, e: EncoderStates) -> Result<EncoderStates, ModelError> {
        let layout = e.layout;
        let mut x = e.states;
        for layer in &self.weights.encoder {
            let n = tape.layer_norm(x, layer.attn_norm.gain, layer.attn_norm.bias)?;
            let a = self.attention_block(tape, &layer.attn, n, n, &layout, &layout)?;
            x = tape.add(x, a)?;
            let n = tape.layer_norm(x, layer.ffn_norm.gain, layer.ffn_norm.bias)?;
            let f = self.ffn_block(tape, &layer.ffn, n)?;
            x = tape.add(x, f)?;
        }
        if let Some(norm) = self.weights.encoder_norm {
            x = tape.layer_norm(x, norm.gain, norm.bias)?;
        }
        Ok(EncoderStates { states: x, layout })
    }

    /// Widens each state to `k · d` with an affine map and cuts it into `k`
    /// consecutive states of width `d`.
    pub fn split_states(&self, tape: &mut Tape<'_, F>, h: &EncoderStates) -> Result<SplitStates, ModelError> {
        let k = self.config.split_factor;
        let d = self.config.d_model;
        let wide = tape.affine(h.states, self.weights.split_w, Some(self.weights.split_b))?;
        let layout = h.layout.scaled(k);
        let mut states = tape.reshape(wide, vec![layout.total_rows(), d])?;
        if self.config.split_positions {
            states = tape.add_const(states, &self.position_rows(&layout))?;
        }
        Ok(SplitStates { states, layout })
    }

    /// Non-causal decoder layers over the split sequence, each also
    /// cross-attending to the split states.
    pub fn decode_states(&self, tape: &mut Tape<'_, F>, s: &SplitStates) -> Result<Var, ModelError> {
        let layout = &s.layout;
        let mut x = s.states;
        for layer in &self.weights.decoder {
            let n = tape.layer_norm(x, layer.self_norm.gain, layer.self_norm.bias)?;
            let a = self.attention_block(tape, &layer.self_attn, n, n, layout, layout)?;
            x = tape.add(x, a)?;
            let n = tape.layer_norm(x, layer.cross_norm.gain, layer.cross_norm.bias)?;
            let c = self.attention_block(tape, &layer.cross_attn, n, s.states, layout, layout)?;
            x = tape.add(x, c)?;
            let n = tape.layer_norm(x, layer.ffn_norm.gain, layer.ffn_norm.bias)?;
            let f = self.ffn_block(tape, &layer.ffn, n)?;
            x = tape.add(x, f)?;
        }
        if let Some(norm) = self.weights.decoder_norm {
            x = tape.layer_norm(x, norm.gain, norm.bias)?;
        }
        Ok(x)
    }

    /// Scores over `vocab_size + 1` classes; column 0 is the blank.
    pub fn project_logits(&self, tape: &mut Tape<'_, F>, d: Var) -> Result<Var, ModelError> {
        Ok(tape.affine(d, self.weights.out_w, Some(self.weights.out_b))?)
    }

    /// Pre-softmax scores for a padded batch, with the frame layout.
    pub fn forward_logits(
        &self,
        tape: &mut Tape<'_, F>,
        ids: &[TokenId],
        layout: &SeqLayout,
    ) -> Result<(Var, SeqLayout), ModelError> {
        let e = self.embed(tape, ids, layout)?;
        let h = self.encode(tape, e)?;
        let s = self.split_states(tape, &h)?;
        let d = self.decode_states(tape, &s)?;
        let logits = self.project_logits(tape, d)?;
        Ok((logits, s.layout))
    }

    /// Log-probabilities `[k·T × (vocab_size + 1)]` for one sentence.
    pub fn forward(&self, tokens: &[TokenId]) -> Result<Tensor<F>, ModelError> {
        if tokens.is_empty() {
            return Err(ModelError::EmptyInput);
        }
        let mut out = self.forward_padded(tokens, &SeqLayout::single(tokens.len()))?;
        Ok(out.pop().expect("one sentence in, one out"))
    }

    /// Log-probabilities for every sentence of a batch in one pass.
    pub fn forward_batch(&self, batch: &Batch) -> Result<Vec<Tensor<F>>, ModelError> {
        self.forward_padded(&batch.source, &batch.layout())
    }

    fn forward_padded(&self, ids: &[TokenId], layout: &SeqLayout) -> Result<Vec<Tensor<F>>, ModelError> {
        let mut tape = Tape::new(&self.params);
        let (logits, frames) = self.forward_logits(&mut tape, ids, layout)?;
        let value = tape.value(logits);
        let c = self.config.classes();
        frames
            .lens
            .iter()
            .enumerate()
            .map(|(b, &len)| {
                let start = b * frames.stride;
                let mut rows = value.data()[start * c..(start + len) * c].to_vec();
                for row in rows.chunks_mut(c) {
                    kernels::log_softmax_in_place(row);
                }
                Ok(Tensor::new(vec![len, c], rows)?)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests;
