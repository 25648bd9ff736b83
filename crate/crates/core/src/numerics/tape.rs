//! Reverse-mode differentiation over a recorded list of operations.
//!
//! A [`Tape`] borrows the parameter store read-only while the forward pass
//! is recorded. [`Tape::backward`] walks the records in reverse and returns
//! a [`Gradients`] value that the caller folds into the store with
//! [`ParamStore::accumulate`].

use rayon::prelude::*;

use super::kernels::{self, parallel_worthwhile};
use super::{Gradients, NumericsError, ParamId, ParamStore, Scalar, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-6;

/// Handle to a value recorded on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Row layout of a padded batch of sequences for attention.
///
/// Sequence `b` occupies rows `b * stride .. b * stride + lens[b]`; rows past
/// its length are padding.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SeqLayout {
    pub stride: usize,
    pub lens: Vec<usize>,
}

impl SeqLayout {
    pub fn new(stride: usize, lens: Vec<usize>) -> Self {
        debug_assert!(lens.iter().all(|&l| l <= stride));
        Self { stride, lens }
    }

    pub fn single(len: usize) -> Self {
        Self::new(len, vec![len])
    }

    pub fn batch_size(&self) -> usize {
        self.lens.len()
    }

    pub fn total_rows(&self) -> usize {
        self.stride * self.lens.len()
    }

    /// Same layout with every sequence stretched by `factor`.
    pub fn scaled(&self, factor: usize) -> Self {
        Self::new(self.stride * factor, self.lens.iter().map(|l| l * factor).collect())
    }

    /// Per-row validity flags.
    pub fn mask(&self) -> Vec<bool> {
        let mut out = Vec::with_capacity(self.total_rows());
        for &len in &self.lens {
            out.extend((0..self.stride).map(|i| i < len));
        }
        out
    }
}

enum Op<F> {
    Input,
    Param(ParamId),
    Affine {
        x: Var,
        w: ParamId,
        b: Option<ParamId>,
    },
    Add(Var, Var),
    AddConst(Var),
    Scale(Var, F),
    Relu(Var),
    LayerNorm {
        x: Var,
        gain: ParamId,
        bias: ParamId,
        xhat: Vec<F>,
        inv_std: Vec<F>,
    },
    Softmax(Var),
    LogSoftmax(Var),
    Sum(Var),
    Embed {
        table: ParamId,
        ids: Vec<usize>,
        scale: F,
    },
    Reshape(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        q_layout: SeqLayout,
        kv_layout: SeqLayout,
        probs: Vec<F>,
    },
    Loss {
        input: Var,
        grad: Tensor<F>,
    },
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
}

pub struct Tape<'p, F: Scalar> {
    params: &'p ParamStore<F>,
    nodes: Vec<Node<F>>,
    spent: bool,
}

impl<'p, F: Scalar> Tape<'p, F> {
    pub fn new(params: &'p ParamStore<F>) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            spent: false,
        }
    }

    pub fn params(&self) -> &'p ParamStore<F> {
        self.params
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>) -> Var {
        debug_assert!(
            value.all_finite() || matches!(op, Op::Input | Op::LogSoftmax(_)),
            "non-finite value produced by a forward op"
        );
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Op::Input)
    }

    /// Records a parameter as a free-standing value.
    pub fn param(&mut self, id: ParamId) -> Var {
        let value = self.params.value(id).clone();
        self.push(value, Op::Param(id))
    }

    /// `x · W + b` over the rows of `x`.
    pub fn affine(&mut self, x: Var, w: ParamId, b: Option<ParamId>) -> Result<Var, NumericsError> {
        let xv = self.value(x);
        let wv = self.params.value(w);
        let (n, d_in) = xv.dims2()?;
        let (w_in, d_out) = wv.dims2()?;
        if d_in != w_in {
            return Err(NumericsError::ShapeMismatch {
                op: "affine",
                left: xv.shape().to_vec(),
                right: wv.shape().to_vec(),
            });
        }
        let bias = match b {
            Some(b) => {
                let bv = self.params.value(b);
                if bv.len() != d_out {
                    return Err(NumericsError::ShapeMismatch {
                        op: "affine bias",
                        left: wv.shape().to_vec(),
                        right: bv.shape().to_vec(),
                    });
                }
                Some(bv.data())
            }
            None => None,
        };
        let out = kernels::matmul(xv.data(), wv.data(), bias, n, d_in, d_out);
        let value = Tensor::new(vec![n, d_out], out)?;
        Ok(self.push(value, Op::Affine { x, w, b }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(NumericsError::ShapeMismatch {
                op: "add",
                left: av.shape().to_vec(),
                right: bv.shape().to_vec(),
            });
        }
        let mut value = av.clone();
        value.add_assign(bv);
        Ok(self.push(value, Op::Add(a, b)))
    }

    /// Adds a constant (non-differentiable) tensor.
    pub fn add_const(&mut self, a: Var, c: &[F]) -> Result<Var, NumericsError> {
        let av = self.value(a);
        if av.len() != c.len() {
            return Err(NumericsError::ShapeMismatch {
                op: "add_const",
                left: av.shape().to_vec(),
                right: vec![c.len()],
            });
        }
        let mut value = av.clone();
        for (o, &v) in value.data_mut().iter_mut().zip(c) {
            *o += v;
        }
        Ok(self.push(value, Op::AddConst(a)))
    }

    pub fn scale(&mut self, a: Var, s: F) -> Var {
        let value = self.value(a).map(|v| v * s);
        self.push(value, Op::Scale(a, s))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| v.max(F::zero()));
        self.push(value, Op::Relu(a))
    }

    pub fn layer_norm(&mut self, x: Var, gain: ParamId, bias: ParamId) -> Result<Var, NumericsError> {
        let xv = self.value(x);
        let (n, d) = xv.dims2()?;
        let (g, b) = (self.params.value(gain), self.params.value(bias));
        if g.len() != d || b.len() != d {
            return Err(NumericsError::ShapeMismatch {
                op: "layer_norm",
                left: xv.shape().to_vec(),
                right: g.shape().to_vec(),
            });
        }
        if d < 2 {
            return Err(NumericsError::Contract("layer_norm needs width >= 2".into()));
        }
        let eps = F::from_f64_lossy(LAYER_NORM_EPS);
        let inv_d = F::one() / F::from_usize(d).unwrap();
        let mut out = vec![F::zero(); n * d];
        let mut xhat = vec![F::zero(); n * d];
        let mut inv_std = vec![F::zero(); n];
        for i in 0..n {
            let row = xv.row(i);
            let mean = row.iter().copied().sum::<F>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_d;
            let is = F::one() / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[i * d + j] = h;
                out[i * d + j] = g.data()[j] * h + b.data()[j];
            }
        }
        let value = Tensor::new(vec![n, d], out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        ))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var, NumericsError> {
        let mut value = self.value(x).clone();
        let (n, _) = value.dims2()?;
        for i in 0..n {
            kernels::softmax_in_place(value.row_mut(i));
        }
        Ok(self.push(value, Op::Softmax(x)))
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Result<Var, NumericsError> {
        let mut value = self.value(x).clone();
        let (n, _) = value.dims2()?;
        for i in 0..n {
            kernels::log_softmax_in_place(value.row_mut(i));
        }
        Ok(self.push(value, Op::LogSoftmax(x)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(value, Op::Sum(x))
    }

    /// Gathers rows of an embedding table, multiplied by `scale`.
    pub fn embed(&mut self, table: ParamId, ids: &[usize], scale: F) -> Result<Var, NumericsError> {
        let t = self.params.value(table);
        let (rows, d) = t.dims2()?;
        if ids.is_empty() {
            return Err(NumericsError::Contract("embed needs at least one id".into()));
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= rows {
                return Err(NumericsError::IndexOutOfRange { index: id, len: rows });
            }
            out.extend(t.row(id).iter().map(|&v| v * scale));
        }
        let value = Tensor::new(vec![ids.len(), d], out)?;
        Ok(self.push(
            value,
            Op::Embed {
                table,
                ids: ids.to_vec(),
                scale,
            },
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var, NumericsError> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(x)))
    }

    /// Scaled dot-product attention with `heads` heads over padded batches.
    ///
    /// Queries only see the valid keys of their own sequence; padded query
    /// rows produce zeros. No causal mask is applied.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        q_layout: &SeqLayout,
        kv_layout: &SeqLayout,
    ) -> Result<Var, NumericsError> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (q_rows, d) = qv.dims2()?;
        let (k_rows, dk) = kv.dims2()?;
        if kv.shape() != vv.shape() || dk != d {
            return Err(NumericsError::ShapeMismatch {
                op: "attention",
                left: kv.shape().to_vec(),
                right: vv.shape().to_vec(),
            });
        }
        if heads == 0 || d % heads != 0 {
            return Err(NumericsError::Contract(format!(
                "width {d} not divisible into {heads} heads"
            )));
        }
        if q_rows != q_layout.total_rows()
            || k_rows != kv_layout.total_rows()
            || q_layout.batch_size() != kv_layout.batch_size()
        {
            return Err(NumericsError::Contract(format!(
                "attention layout does not match inputs: {q_rows} query rows, {k_rows} key rows"
            )));
        }
        let dh = d / heads;
        let scale = F::one() / F::from_usize(dh).unwrap().sqrt();
        let (qs, ks) = (q_layout.stride, kv_layout.stride);
        let probs_per_seq = heads * qs * ks;
        let mut out = vec![F::zero(); q_rows * d];
        let mut probs = vec![F::zero(); probs_per_seq * q_layout.batch_size()];
        let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
        let per_seq = |b: usize, out_b: &mut [F], probs_b: &mut [F]| {
            let (lq, lk) = (q_layout.lens[b], kv_layout.lens[b]);
            if lk == 0 {
                return;
            }
            let mut scores = vec![F::zero(); lk];
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                for i in 0..lq {
                    let qrow = &qd[(b * qs + i) * d..][cols.clone()];
                    for (j, s) in scores.iter_mut().enumerate() {
                        let krow = &kd[(b * ks + j) * d..][cols.clone()];
                        *s = kernels::dot(qrow, krow) * scale;
                    }
                    kernels::softmax_in_place(&mut scores);
                    let prow = &mut probs_b[(h * qs + i) * ks..][..lk];
                    prow.copy_from_slice(&scores);
                    let orow = &mut out_b[i * d..][cols.clone()];
                    for (j, &p) in scores.iter().enumerate() {
                        let vrow = &vd[(b * ks + j) * d..][cols.clone()];
                        kernels::axpy(p, vrow, orow);
                    }
                }
            }
        };
        let work = q_rows * ks * d;
        if parallel_worthwhile(work) {
            out.par_chunks_mut(qs * d)
                .zip(probs.par_chunks_mut(probs_per_seq))
                .enumerate()
                .for_each(|(b, (o, p))| per_seq(b, o, p));
        } else {
            out.chunks_mut(qs * d)
                .zip(probs.chunks_mut(probs_per_seq))
                .enumerate()
                .for_each(|(b, (o, p))| per_seq(b, o, p));
        }
        let value = Tensor::new(vec![q_rows, d], out)?;
        Ok(self.push(
            value,
            Op::Attention {
                q,
                k,
                v,
                heads,
                q_layout: q_layout.clone(),
                kv_layout: kv_layout.clone(),
                probs,
            },
        ))
    }

    /// Records a scalar loss whose gradient with respect to `input` is
    /// already known.
    pub fn loss_with_grad(&mut self, input: Var, loss: F, grad: Tensor<F>) -> Result<Var, NumericsError> {
        let iv = self.value(input);
        if iv.shape() != grad.shape() {
            return Err(NumericsError::ShapeMismatch {
                op: "loss_with_grad",
                left: iv.shape().to_vec(),
                right: grad.shape().to_vec(),
            });
        }
        Ok(self.push(Tensor::scalar(loss), Op::Loss { input, grad }))
    }

    /// Propagates d`loss`/d(everything) back to the parameters.
    ///
    /// A tape can be differentiated once; a second call fails.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<F>, NumericsError> {
        if self.spent {
            return Err(NumericsError::Contract(
                "backward already ran on this tape; record a new forward pass".into(),
            ));
        }
        if self.value(loss).len() != 1 {
            return Err(NumericsError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.spent = true;
        let mut adj: Vec<Option<Tensor<F>>> = Vec::with_capacity(loss.0 + 1);
        adj.resize_with(loss.0 + 1, || None);
        adj[loss.0] = Some(Tensor::scalar(F::one()));
        let mut grads = Gradients::new(self.params.len());

        for idx in (0..=loss.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            let params = self.params;
            match &node.op {
                Op::Input => {}
                Op::Param(id) => grads.slot(*id, g.shape()).add_assign(&g),
                Op::Affine { x, w, b } => {
                    let xv = &self.nodes[x.0].value;
                    let wv = params.value(*w);
                    let (n, d_in) = xv.dims2()?;
                    let d_out = wv.cols();
                    let wt = kernels::transpose(wv.data(), d_in, d_out);
                    let dx = kernels::matmul(g.data(), &wt, None, n, d_out, d_in);
                    accumulate(&mut adj, *x, Tensor::new(vec![n, d_in], dx)?);
                    let xt = kernels::transpose(xv.data(), n, d_in);
                    let dw = kernels::matmul(&xt, g.data(), None, d_in, n, d_out);
                    grads
                        .slot(*w, wv.shape())
                        .add_assign(&Tensor::new(vec![d_in, d_out], dw)?);
                    if let Some(b) = b {
                        let slot = grads.slot(*b, params.value(*b).shape());
                        let sd = slot.data_mut();
                        for i in 0..n {
                            for (s, &gv) in sd.iter_mut().zip(g.row(i)) {
                                *s += gv;
                            }
                        }
                    }
                }
                Op::Add(a, b) => {
                    accumulate(&mut adj, *a, g.clone());
                    accumulate(&mut adj, *b, g);
                }
                Op::AddConst(a) => accumulate(&mut adj, *a, g),
                Op::Scale(a, s) => {
                    let s = *s;
                    accumulate(&mut adj, *a, g.map(|v| v * s));
                }
                Op::Relu(a) => {
                    let mut dx = g;
                    for (d, &y) in dx.data_mut().iter_mut().zip(node.value.data()) {
                        if y <= F::zero() {
                            *d = F::zero();
                        }
                    }
                    accumulate(&mut adj, *a, dx);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let (n, d) = g.dims2()?;
                    let gv = params.value(*gain).data();
                    let inv_d = F::one() / F::from_usize(d).unwrap();
                    let mut dx = vec![F::zero(); n * d];
                    let mut dgain = vec![F::zero(); d];
                    let mut dbias = vec![F::zero(); d];
                    let mut dxhat = vec![F::zero(); d];
                    for i in 0..n {
                        let gr = g.row(i);
                        let hr = &xhat[i * d..(i + 1) * d];
                        let mut sum_dh = F::zero();
                        let mut sum_dh_h = F::zero();
                        for j in 0..d {
                            dgain[j] += gr[j] * hr[j];
                            dbias[j] += gr[j];
                            dxhat[j] = gr[j] * gv[j];
                            sum_dh += dxhat[j];
                            sum_dh_h += dxhat[j] * hr[j];
                        }
                        let is = inv_std[i];
                        for j in 0..d {
                            dx[i * d + j] = is * (dxhat[j] - inv_d * sum_dh - hr[j] * inv_d * sum_dh_h);
                        }
                    }
                    accumulate(&mut adj, *x, Tensor::new(vec![n, d], dx)?);
                    add_into(grads.slot(*gain, &[d]), &dgain);
                    add_into(grads.slot(*bias, &[d]), &dbias);
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let (n, _) = y.dims2()?;
                    let mut dx = g;
                    for i in 0..n {
                        let yr = y.row(i);
                        let dot: F = dx.row(i).iter().zip(yr).map(|(&a, &b)| a * b).sum();
                        for (d, &yv) in dx.row_mut(i).iter_mut().zip(yr) {
                            *d = yv * (*d - dot);
                        }
                    }
                    accumulate(&mut adj, *a, dx);
                }
                Op::LogSoftmax(a) => {
                    let y = &node.value;
                    let (n, _) = y.dims2()?;
                    let mut dx = g;
                    for i in 0..n {
                        let total: F = dx.row(i).iter().copied().sum();
                        for (d, &yv) in dx.row_mut(i).iter_mut().zip(y.row(i)) {
                            *d -= yv.exp() * total;
                        }
                    }
                    accumulate(&mut adj, *a, dx);
                }
                Op::Sum(a) => {
                    let shape = self.nodes[a.0].value.shape();
                    accumulate(&mut adj, *a, Tensor::filled(shape, g.data()[0]));
                }
                Op::Embed { table, ids, scale } => {
                    let slot = grads.slot(*table, params.value(*table).shape());
                    for (r, &id) in ids.iter().enumerate() {
                        let scale = *scale;
                        for (s, &gv) in slot.row_mut(id).iter_mut().zip(g.row(r)) {
                            *s += gv * scale;
                        }
                    }
                }
                Op::Reshape(a) => {
                    let shape = self.nodes[a.0].value.shape().to_vec();
                    accumulate(&mut adj, *a, g.reshape(shape)?);
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    heads,
                    q_layout,
                    kv_layout,
                    probs,
                } => {
                    let (dq, dk, dv) = attention_backward(
                        &g,
                        &self.nodes[q.0].value,
                        &self.nodes[k.0].value,
                        &self.nodes[v.0].value,
                        *heads,
                        q_layout,
                        kv_layout,
                        probs,
                    )?;
                    accumulate(&mut adj, *q, dq);
                    accumulate(&mut adj, *k, dk);
                    accumulate(&mut adj, *v, dv);
                }
                Op::Loss { input, grad } => {
                    let s = g.data()[0];
                    accumulate(&mut adj, *input, grad.map(|v| v * s));
                }
            }
        }
        Ok(grads)
    }
}

fn accumulate<F: Scalar>(adj: &mut [Option<Tensor<F>>], v: Var, g: Tensor<F>) {
    match &mut adj[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn add_into<F: Scalar>(t: &mut Tensor<F>, v: &[F]) {
    for (a, &b) in t.data_mut().iter_mut().zip(v) {
        *a += b;
    }
}

#[allow(clippy::too_many_arguments)]
fn attention_backward<F: Scalar>(
    g: &Tensor<F>,
    q: &Tensor<F>,
    k: &Tensor<F>,
    v: &Tensor<F>,
    heads: usize,
    q_layout: &SeqLayout,
    kv_layout: &SeqLayout,
    probs: &[F],
) -> Result<(Tensor<F>, Tensor<F>, Tensor<F>), NumericsError> {
    let (q_rows, d) = q.dims2()?;
    let k_rows = k.rows();
    let dh = d / heads;
    let scale = F::one() / F::from_usize(dh).unwrap().sqrt();
    let (qs, ks) = (q_layout.stride, kv_layout.stride);
    let probs_per_seq = heads * qs * ks;
    let mut dq = vec![F::zero(); q_rows * d];
    let mut dk = vec![F::zero(); k_rows * d];
    let mut dv = vec![F::zero(); k_rows * d];
    let (gd, qd, kd, vd) = (g.data(), q.data(), k.data(), v.data());

    let per_seq = |b: usize, dq_b: &mut [F], dk_b: &mut [F], dv_b: &mut [F]| {
        let (lq, lk) = (q_layout.lens[b], kv_layout.lens[b]);
        if lk == 0 {
            return;
        }
        let probs_b = &probs[b * probs_per_seq..(b + 1) * probs_per_seq];
        let mut dp = vec![F::zero(); lk];
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            for i in 0..lq {
                let grow = &gd[(b * qs + i) * d..][cols.clone()];
                let prow = &probs_b[(h * qs + i) * ks..][..lk];
                for j in 0..lk {
                    let vrow = &vd[(b * ks + j) * d..][cols.clone()];
                    dp[j] = kernels::dot(grow, vrow);
                    kernels::axpy(prow[j], grow, &mut dv_b[j * d..][cols.clone()]);
                }
                let weighted: F = prow.iter().zip(&dp).map(|(&p, &x)| p * x).sum();
                let qrow = &qd[(b * qs + i) * d..][cols.clone()];
                for j in 0..lk {
                    let ds = prow[j] * (dp[j] - weighted) * scale;
                    let krow = &kd[(b * ks + j) * d..][cols.clone()];
                    kernels::axpy(ds, krow, &mut dq_b[i * d..][cols.clone()]);
                    kernels::axpy(ds, qrow, &mut dk_b[j * d..][cols.clone()]);
                }
            }
        }
    };
    if parallel_worthwhile(q_rows * ks * d) {
        dq.par_chunks_mut(qs * d)
            .zip(dk.par_chunks_mut(ks * d))
            .zip(dv.par_chunks_mut(ks * d))
            .enumerate()
            .for_each(|(b, ((a, c), e))| per_seq(b, a, c, e));
    } else {
        dq.chunks_mut(qs * d)
            .zip(dk.chunks_mut(ks * d))
            .zip(dv.chunks_mut(ks * d))
            .enumerate()
            .for_each(|(b, ((a, c), e))| per_seq(b, a, c, e));
    }
    Ok((
        Tensor::new(vec![q_rows, d], dq)?,
        Tensor::new(vec![k_rows, d], dk)?,
        Tensor::new(vec![k_rows, d], dv)?,
    ))
}
