//! Single-file checkpoints.
//!
//! ```text
//! ctc-nmt checkpoint v1\n
//! <one line of JSON: CheckpointMeta>\n
//! <data_bytes of little-endian tensor payload>
//! ```
//!
//! Every tensor in the manifest points at `offset` bytes into the payload.
//! Optimizer moments are stored as `opt.m.<param>` and `opt.v.<param>`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{OptimizerState, TrainingError};
use crate::data::Vocabulary;
use crate::model::{Model, ModelConfig};
use crate::numerics::{Scalar, Tensor};

const MAGIC: &str = "ctc-nmt checkpoint v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    /// Vocabulary file contents.
    pub vocab: String,
    pub vocab_hash: String,
    /// Digest of the run configuration that produced the checkpoint.
    pub config_hash: String,
    pub step: u64,
    /// Element type of the payload, `f32` or `f64`.
    pub dtype: String,
    pub has_optimizer: bool,
    pub tensors: Vec<TensorEntry>,
    pub data_bytes: usize,
    pub data_sha256: String,
}

pub struct Checkpoint<F: Scalar> {
    pub model: Model<F>,
    pub optimizer: Option<OptimizerState<F>>,
    pub vocab: Vocabulary,
    pub meta: CheckpointMeta,
}

fn element_size(dtype: &str) -> Option<usize> {
    match dtype {
        "f32" => Some(4),
        "f64" => Some(8),
        _ => None,
    }
}

fn push_tensor<F: Scalar>(data: &mut Vec<u8>, entries: &mut Vec<TensorEntry>, name: String, t: &Tensor<F>) {
    entries.push(TensorEntry {
        name,
        shape: t.shape().to_vec(),
        offset: data.len(),
    });
    for &v in t.data() {
        match F::NAME {
            "f32" => data.extend_from_slice(&(v.as_f64() as f32).to_le_bytes()),
            _ => data.extend_from_slice(&v.as_f64().to_le_bytes()),
        }
    }
}

/// Saves `model`, optionally with its optimizer, as of training `step`.
///
/// Writes atomically: the file appears under `path` complete or not at all.
pub fn save_checkpoint<F: Scalar>(
    path: &Path,
    model: &Model<F>,
    optimizer: Option<&OptimizerState<F>>,
    step: u64,
    vocab: &Vocabulary,
    config_hash: &str,
) -> Result<(), TrainingError> {
    let io = |source| TrainingError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut data = Vec::new();
    let mut tensors = Vec::new();
    for (_, p) in model.params().iter() {
        push_tensor(&mut data, &mut tensors, p.name.clone(), &p.value);
    }
    if let Some(opt) = optimizer {
        for ((_, p), m) in model.params().iter().zip(opt.first_moment()) {
            push_tensor(&mut data, &mut tensors, format!("opt.m.{}", p.name), m);
        }
        for ((_, p), v) in model.params().iter().zip(opt.second_moment()) {
            push_tensor(&mut data, &mut tensors, format!("opt.v.{}", p.name), v);
        }
    }
    let meta = CheckpointMeta {
        model: model.config().clone(),
        vocab: vocab.to_text(),
        vocab_hash: vocab.content_hash(),
        config_hash: config_hash.to_string(),
        step,
        dtype: F::NAME.to_string(),
        has_optimizer: optimizer.is_some(),
        tensors,
        data_bytes: data.len(),
        data_sha256: hex::encode(Sha256::digest(&data)),
    };

    let tmp = temp_path(path);
    let write = || -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        writeln!(f, "{MAGIC}")?;
        writeln!(f, "{}", serde_json::to_string(&meta).expect("meta serializes"))?;
        f.write_all(&data)?;
        f.sync_all()
    };
    if let Err(e) = write() {
        let _ = fs::remove_file(&tmp);
        return Err(io(e));
    }
    fs::rename(&tmp, path).map_err(io)
}

fn temp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(format!(".tmp{}", std::process::id()));
    path.with_file_name(name)
}

/// Reads a checkpoint, checking the payload length and digest and that every
/// tensor matches the recorded model configuration.
pub fn load_checkpoint<F: Scalar>(path: &Path) -> Result<Checkpoint<F>, TrainingError> {
    let bytes = fs::read(path).map_err(|source| TrainingError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let fail = |message: String| TrainingError::Checkpoint {
        path: path.to_path_buf(),
        message,
    };

    let mut parts = bytes.splitn(3, |&b| b == b'\n');
    if parts.next() != Some(MAGIC.as_bytes()) {
        return Err(fail("not a checkpoint (bad magic line)".into()));
    }
    let header = parts.next().ok_or_else(|| fail("missing header".into()))?;
    let meta: CheckpointMeta = serde_json::from_slice(header).map_err(|e| fail(format!("malformed header: {e}")))?;
    let data = parts.next().unwrap_or(&[]);
    if data.len() != meta.data_bytes {
        return Err(fail(format!(
            "payload is {} bytes, header declares {} (truncated?)",
            data.len(),
            meta.data_bytes
        )));
    }
    if hex::encode(Sha256::digest(data)) != meta.data_sha256 {
        return Err(fail("payload digest mismatch".into()));
    }
    let width = element_size(&meta.dtype).ok_or_else(|| fail(format!("unknown dtype `{}`", meta.dtype)))?;

    let read = |e: &TensorEntry| -> Result<Tensor<F>, TrainingError> {
        let n: usize = e.shape.iter().product();
        let end = e.offset + n * width;
        let raw = data
            .get(e.offset..end)
            .ok_or_else(|| fail(format!("tensor {} extends past the payload", e.name)))?;
        let values = raw
            .chunks_exact(width)
            .map(|c| {
                F::from_f64_lossy(match width {
                    4 => f32::from_le_bytes(c.try_into().unwrap()) as f64,
                    _ => f64::from_le_bytes(c.try_into().unwrap()),
                })
            })
            .collect();
        Tensor::new(e.shape.clone(), values).map_err(|err| fail(format!("tensor {}: {err}", e.name)))
    };

    let mut params = Vec::new();
    let mut first = Vec::new();
    let mut second = Vec::new();
    for e in &meta.tensors {
        let t = read(e)?;
        if let Some(name) = e.name.strip_prefix("opt.m.") {
            first.push((name.to_string(), t));
        } else if let Some(name) = e.name.strip_prefix("opt.v.") {
            second.push((name.to_string(), t));
        } else {
            params.push((e.name.clone(), t));
        }
    }
    let model = Model::from_named(meta.model.clone(), params).map_err(|e| fail(e.to_string()))?;

    let optimizer = if meta.has_optimizer {
        let names: Vec<&str> = model.params().iter().map(|(_, p)| p.name.as_str()).collect();
        let check = |moments: Vec<(String, Tensor<F>)>, kind: &str| -> Result<Vec<Tensor<F>>, TrainingError> {
            if moments.len() != names.len() {
                return Err(fail(format!(
                    "{} {kind} moments for {} parameters",
                    moments.len(),
                    names.len()
                )));
            }
            moments
                .into_iter()
                .zip(&names)
                .zip(model.params().iter())
                .map(|(((n, t), want), (_, p))| {
                    if n != *want || t.shape() != p.value.shape() {
                        Err(fail(format!("{kind} moment {n} does not match parameter {want}")))
                    } else {
                        Ok(t)
                    }
                })
                .collect()
        };
        let m = check(first, "first")?;
        let v = check(second, "second")?;
        Some(OptimizerState::from_parts(m, v, meta.step))
    } else {
        None
    };

    let vocab = Vocabulary::from_text(&meta.vocab, path)?;
    if vocab.content_hash() != meta.vocab_hash {
        return Err(fail("embedded vocabulary does not match its hash".into()));
    }
    if vocab.len() != meta.model.classes() {
        return Err(fail(format!(
            "vocabulary has {} entries but the model predicts {} classes",
            vocab.len(),
            meta.model.classes()
        )));
    }
    Ok(Checkpoint {
        model,
        optimizer,
        vocab,
        meta,
    })
}
