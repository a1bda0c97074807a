//! Tape-based reverse-mode differentiation over `[batch x frames x channels]` activations.
//!
//! Only the first `lengths[b]` frames of utterance `b` are computed; padded frames stay zero
//! in both values and gradients. Work is parallelised over utterances and every reduction
//! over the batch runs in a fixed order, so results do not depend on the thread count.

use std::collections::BTreeMap;

use rand::Rng;
use rayon::prelude::*;

use super::kernels::{self, ConvGeometry};
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Utterances per partial gradient buffer. Fixed so the summation order never changes.
const GRAD_GROUP: usize = 8;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Linear { x: NodeId, w: NodeId, b: Option<NodeId> },
    Conv { x: NodeId, w: NodeId, b: Option<NodeId>, geom: ConvGeometry },
    BatchNorm { x: NodeId, gamma: NodeId, beta: NodeId, xhat: Vec<T>, inv_std: Vec<T>, count: usize },
    BatchNormInfer { x: NodeId, gamma: NodeId, beta: NodeId, mean: Vec<T>, inv_std: Vec<T> },
    Relu { x: NodeId },
    Sigmoid { x: NodeId },
    Add { a: NodeId, b: NodeId },
    Dropout { x: NodeId, mask: Vec<T> },
    Concat { inputs: Vec<NodeId> },
    Loss { x: NodeId, grad: Vec<T> },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Linear { .. } => "linear",
            Op::Conv { .. } => "conv",
            Op::BatchNorm { .. } => "batchnorm",
            Op::BatchNormInfer { .. } => "batchnorm_infer",
            Op::Relu { .. } => "relu",
            Op::Sigmoid { .. } => "sigmoid",
            Op::Add { .. } => "add",
            Op::Dropout { .. } => "dropout",
            Op::Concat { .. } => "concat",
            Op::Loss { .. } => "loss",
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }
}

#[derive(Debug)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    lengths: Vec<usize>,
    frames: usize,
}

fn ensure_finite<T: Real>(t: &Tensor<T>, op: &str) -> Result<()> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteValue(op.to_string()))
    }
}

/// Runs `f(b, dx_b, dw, db)` for every utterance, grouping utterances into fixed-size
/// partial buffers that are summed in order afterwards.
fn batched_grads<T: Real, F>(batch: usize, dx_stride: Option<usize>, nw: usize, nb: usize, f: F) -> (Option<Vec<T>>, Vec<T>, Vec<T>)
where
    F: Fn(usize, Option<&mut [T]>, &mut [T], &mut [T]) + Sync,
{
    let groups = batch.div_ceil(GRAD_GROUP);
    let parts: Vec<(Vec<T>, Vec<T>, Vec<T>)> = (0..groups)
        .into_par_iter()
        .map(|gi| {
            let lo = gi * GRAD_GROUP;
            let hi = (lo + GRAD_GROUP).min(batch);
            let mut dw = vec![T::zero(); nw];
            let mut db = vec![T::zero(); nb];
            let stride = dx_stride.unwrap_or(0);
            let mut dx = vec![T::zero(); stride * (hi - lo)];
            for b in lo..hi {
                let slot = dx_stride.map(|_| &mut dx[(b - lo) * stride..(b - lo + 1) * stride]);
                f(b, slot, &mut dw, &mut db);
            }
            (dx, dw, db)
        })
        .collect();
    let mut dw = vec![T::zero(); nw];
    let mut db = vec![T::zero(); nb];
    let mut dx = dx_stride.map(|s| Vec::with_capacity(s * batch));
    for (pdx, pdw, pdb) in parts {
        for (a, b) in dw.iter_mut().zip(&pdw) {
            *a += *b;
        }
        for (a, b) in db.iter_mut().zip(&pdb) {
            *a += *b;
        }
        if let Some(dx) = dx.as_mut() {
            dx.extend_from_slice(&pdx);
        }
    }
    (dx, dw, db)
}

impl<T: Real> Graph<T> {
    /// New tape for a batch whose utterances have the given valid lengths, padded to `frames`.
    pub fn new(lengths: Vec<usize>, frames: usize) -> Result<Self> {
        if lengths.iter().any(|&l| l > frames) {
            return Err(Error::DimensionMismatch(format!("length exceeds padded extent {frames}")));
        }
        Ok(Self {
            nodes: Vec::new(),
            lengths,
            frames,
        })
    }

    pub fn batch(&self) -> usize {
        self.lengths.len()
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn lengths(&self) -> &[usize] {
        &self.lengths
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of recorded operations of each kind.
    pub fn op_counts(&self) -> BTreeMap<&'static str, usize> {
        let mut m = BTreeMap::new();
        for n in &self.nodes {
            *m.entry(n.op.name()).or_insert(0) += 1;
        }
        m
    }

    /// Smallest magnitude of any ReLU input over valid frames: how far the recorded pass is
    /// from a point where the graph stops being differentiable. `None` without ReLUs.
    pub fn relu_margin(&self) -> Option<T> {
        let mut margin: Option<T> = None;
        for n in &self.nodes {
            let Op::Relu { x } = n.op else { continue };
            let v = self.value(x);
            let c = v.shape().last().copied().unwrap_or(1);
            for (b, &len) in self.lengths.iter().enumerate() {
                for &z in &v.data()[b * self.frames * c..(b * self.frames + len) * c] {
                    let a = z.abs();
                    margin = Some(match margin {
                        Some(m) if m <= a => m,
                        _ => a,
                    });
                }
            }
        }
        margin
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Result<NodeId> {
        ensure_finite(&value, op.name())?;
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn channels(&self, id: NodeId) -> Result<usize> {
        let s = self.value(id).shape();
        if s.len() != 3 || s[0] != self.batch() || s[1] != self.frames {
            return Err(Error::DimensionMismatch(format!(
                "expected [{}, {}, C] activations, got {s:?}",
                self.batch(),
                self.frames
            )));
        }
        Ok(s[2])
    }

    /// Leaf node; parameters are leaves with `requires_grad = true`.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<NodeId> {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Time-series input `[batch x frames x C]`; padded frames are zeroed.
    pub fn input(&mut self, mut value: Tensor<T>) -> Result<NodeId> {
        let s = value.shape().to_vec();
        if s.len() != 3 || s[0] != self.batch() || s[1] != self.frames {
            return Err(Error::DimensionMismatch(format!("input shape {s:?}")));
        }
        let c = s[2];
        for (b, &len) in self.lengths.iter().enumerate() {
            value.data_mut()[(b * self.frames + len) * c..(b + 1) * self.frames * c].fill(T::zero());
        }
        self.push(value, Op::Leaf, false)
    }

    fn map_valid(&self, c_out: usize, f: impl Fn(usize, usize, &mut [T]) + Sync) -> Tensor<T> {
        let frames = self.frames;
        let mut out = Tensor::zeros(&[self.batch(), frames, c_out]);
        out.data_mut()
            .par_chunks_mut(frames * c_out)
            .enumerate()
            .for_each(|(b, o)| f(b, self.lengths[b], o));
        out
    }

    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let din = self.channels(x)?;
        let ws = self.value(w).shape().to_vec();
        if ws.len() != 2 || ws[0] != din {
            return Err(Error::DimensionMismatch(format!("linear weight {ws:?} for input dim {din}")));
        }
        let dout = ws[1];
        if let Some(b) = b {
            if self.value(b).shape() != [dout] {
                return Err(Error::DimensionMismatch(format!("linear bias {:?}", self.value(b).shape())));
            }
        }
        let frames = self.frames;
        let (xv, wv) = (self.value(x).data(), self.value(w).data());
        let bv = b.map(|b| self.value(b).data());
        let out = self.map_valid(dout, |bi, len, o| {
            let xs = &xv[bi * frames * din..(bi * frames + len) * din];
            kernels::linear_rows(xs, din, wv, dout, bv, &mut o[..len * dout]);
        });
        let rg = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        self.push(out, Op::Linear { x, w, b }, rg)
    }

    pub fn conv(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>, geom: ConvGeometry) -> Result<NodeId> {
        geom.validate()?;
        let cin = self.channels(x)?;
        if cin != geom.in_channels || self.value(w).shape() != geom.weight_shape() {
            return Err(Error::DimensionMismatch(format!(
                "conv {geom:?} with input channels {cin} and weight {:?}",
                self.value(w).shape()
            )));
        }
        let cout = geom.out_channels;
        if let Some(b) = b {
            if self.value(b).shape() != [cout] {
                return Err(Error::DimensionMismatch(format!("conv bias {:?}", self.value(b).shape())));
            }
        }
        let frames = self.frames;
        let (xv, wv) = (self.value(x).data(), self.value(w).data());
        let bv = b.map(|b| self.value(b).data());
        let out = self.map_valid(cout, |bi, len, o| {
            let xs = &xv[bi * frames * cin..(bi * frames + len) * cin];
            kernels::conv_rows(&geom, xs, len, wv, bv, 0, &mut o[..len * cout]);
        });
        let rg = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        self.push(out, Op::Conv { x, w, b, geom }, rg)
    }

    /// Per-channel sums over valid frames, reduced in utterance order.
    fn channel_sums(&self, data: &[T], c: usize, f: impl Fn(usize, T) -> T + Sync) -> Vec<T> {
        let frames = self.frames;
        let parts: Vec<Vec<T>> = (0..self.batch())
            .into_par_iter()
            .map(|b| {
                let mut s = vec![T::zero(); c];
                for row in data[b * frames * c..(b * frames + self.lengths[b]) * c].chunks_exact(c) {
                    for (ch, (acc, &v)) in s.iter_mut().zip(row).enumerate() {
                        *acc += f(ch, v);
                    }
                }
                s
            })
            .collect();
        let mut total = vec![T::zero(); c];
        for p in parts {
            for (a, v) in total.iter_mut().zip(p) {
                *a += v;
            }
        }
        total
    }

    /// Batch normalisation over all valid frames of the batch. Updates `running_mean` and
    /// `running_var` (unbiased) with momentum [`BN_MOMENTUM`].
    pub fn batchnorm_train(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running_mean: &mut [T],
        running_var: &mut [T],
    ) -> Result<NodeId> {
        let c = self.channels(x)?;
        for (n, id) in [("gamma", gamma), ("beta", beta)] {
            if self.value(id).shape() != [c] {
                return Err(Error::DimensionMismatch(format!("batchnorm {n} for {c} channels")));
            }
        }
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::DimensionMismatch("batchnorm running stats".into()));
        }
        let count: usize = self.lengths.iter().sum();
        if count == 0 {
            return Err(Error::EmptyBatch);
        }
        let n = T::of(count as f64);
        let xv = self.value(x).data();
        let mean: Vec<T> = self.channel_sums(xv, c, |_, v| v).into_iter().map(|s| s / n).collect();
        let var: Vec<T> = self
            .channel_sums(xv, c, |ch, v| (v - mean[ch]) * (v - mean[ch]))
            .into_iter()
            .map(|s| s / n)
            .collect();
        let eps = T::of(BN_EPS);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let frames = self.frames;
        let mut xhat = Tensor::<T>::zeros(&[self.batch(), frames, c]);
        xhat.data_mut()
            .par_chunks_mut(frames * c)
            .enumerate()
            .for_each(|(b, o)| {
                let len = self.lengths[b];
                let xs = &xv[b * frames * c..(b * frames + len) * c];
                for (orow, xrow) in o[..len * c].chunks_exact_mut(c).zip(xs.chunks_exact(c)) {
                    for ch in 0..c {
                        orow[ch] = (xrow[ch] - mean[ch]) * inv_std[ch];
                    }
                }
            });
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let xh = xhat.data();
        let out = self.map_valid(c, |b, len, o| {
            let hs = &xh[b * frames * c..(b * frames + len) * c];
            for (orow, hrow) in o[..len * c].chunks_exact_mut(c).zip(hs.chunks_exact(c)) {
                for ch in 0..c {
                    orow[ch] = g[ch] * hrow[ch] + bt[ch];
                }
            }
        });
        let m = T::of(BN_MOMENTUM);
        let unbias = if count > 1 { n / (n - T::one()) } else { T::one() };
        for ch in 0..c {
            running_mean[ch] = (T::one() - m) * running_mean[ch] + m * mean[ch];
            running_var[ch] = (T::one() - m) * running_var[ch] + m * var[ch] * unbias;
        }
        let rg = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let op = Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat: xhat.into_data(),
            inv_std,
            count,
        };
        self.push(out, op, rg)
    }

    /// Batch normalisation with frozen statistics: a per-channel affine map.
    pub fn batchnorm_infer(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, running_mean: &[T], running_var: &[T]) -> Result<NodeId> {
        let c = self.channels(x)?;
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] || running_mean.len() != c || running_var.len() != c {
            return Err(Error::DimensionMismatch(format!("batchnorm parameters for {c} channels")));
        }
        let eps = T::of(BN_EPS);
        let inv_std: Vec<T> = running_var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let scale: Vec<T> = g.iter().zip(&inv_std).map(|(&g, &s)| g * s).collect();
        let shift: Vec<T> = (0..c).map(|ch| bt[ch] - running_mean[ch] * scale[ch]).collect();
        let frames = self.frames;
        let xv = self.value(x).data();
        let out = self.map_valid(c, |b, len, o| {
            let xs = &xv[b * frames * c..(b * frames + len) * c];
            for (orow, xrow) in o[..len * c].chunks_exact_mut(c).zip(xs.chunks_exact(c)) {
                for ch in 0..c {
                    orow[ch] = xrow[ch] * scale[ch] + shift[ch];
                }
            }
        });
        let rg = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let op = Op::BatchNormInfer {
            x,
            gamma,
            beta,
            mean: running_mean.to_vec(),
            inv_std,
        };
        self.push(out, op, rg)
    }

    fn unary(&mut self, x: NodeId, f: impl Fn(T) -> T + Sync, op: Op<T>) -> Result<NodeId> {
        let c = self.channels(x)?;
        let frames = self.frames;
        let xv = self.value(x).data();
        let out = self.map_valid(c, |b, len, o| {
            for (ov, &xv) in o[..len * c].iter_mut().zip(&xv[b * frames * c..(b * frames + len) * c]) {
                *ov = f(xv);
            }
        });
        let rg = self.needs(x);
        self.push(out, op, rg)
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, |v| if v > T::zero() { v } else { T::zero() }, Op::Relu { x })
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, kernels::sigmoid, Op::Sigmoid { x })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::DimensionMismatch(format!(
                "add {:?} + {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let rg = self.needs(a) || self.needs(b);
        self.push(out, Op::Add { a, b }, rg)
    }

    /// Inverted dropout: kept activations are scaled by `1 / (1 - p)`.
    pub fn dropout(&mut self, x: NodeId, p: f64, rng: &mut impl Rng) -> Result<NodeId> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::InvalidConfig(format!("dropout rate {p} outside [0, 1)")));
        }
        let keep = T::of(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..self.value(x).len())
            .map(|_| if rng.gen::<f64>() < p { T::zero() } else { keep })
            .collect();
        let mut out = self.value(x).clone();
        for (o, &m) in out.data_mut().iter_mut().zip(&mask) {
            *o *= m;
        }
        let rg = self.needs(x);
        self.push(out, Op::Dropout { x, mask }, rg)
    }

    /// Concatenates tensors along their last axis; leading extents must agree.
    pub fn concat(&mut self, inputs: &[NodeId]) -> Result<NodeId> {
        let first = inputs.first().ok_or_else(|| Error::DimensionMismatch("concat of nothing".into()))?;
        let lead = self.value(*first).shape()[..self.value(*first).shape().len() - 1].to_vec();
        let mut widths = Vec::new();
        for &id in inputs {
            let s = self.value(id).shape();
            if s[..s.len() - 1] != lead[..] {
                return Err(Error::DimensionMismatch(format!("concat leading dims {s:?} vs {lead:?}")));
            }
            widths.push(s[s.len() - 1]);
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&id, &w) in inputs.iter().zip(&widths) {
                data.extend_from_slice(&self.value(id).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let rg = inputs.iter().any(|&i| self.needs(i));
        self.push(Tensor::from_vec(&shape, data)?, Op::Concat { inputs: inputs.to_vec() }, rg)
    }

    /// Scalar loss computed outside the tape, with its gradient with respect to `x`.
    pub fn external_loss(&mut self, x: NodeId, value: T, grad: Vec<T>) -> Result<NodeId> {
        if grad.len() != self.value(x).len() {
            return Err(Error::DimensionMismatch("loss gradient size".into()));
        }
        let rg = self.needs(x);
        self.push(Tensor::scalar(value), Op::Loss { x, grad }, rg)
    }

    /// Reverse-mode accumulation from a scalar node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::GraphNotRecorded);
        }
        if self.value(loss).len() != 1 {
            return Err(Error::DimensionMismatch("backward needs a scalar output".into()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::from_vec(self.value(loss).shape(), vec![T::one()])?);
        for id in (0..=loss.0).rev() {
            let Some(dy) = grads[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                grads[id] = Some(dy);
                continue;
            }
            self.backward_node(id, &dy, &mut grads)?;
            grads[id] = Some(dy);
        }
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if !g.all_finite() {
                    return Err(Error::NonFiniteValue(format!("gradient of {}", self.nodes[i].op.name())));
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], id: NodeId, g: Tensor<T>) {
        if !self.needs(id) {
            return;
        }
        match &mut grads[id.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backward_node(&self, id: usize, dy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let frames = self.frames;
        let batch = self.batch();
        let lengths = &self.lengths;
        let dyv = dy.data();
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let (x, w) = (*x, *w);
                let xs = self.value(x);
                let din = xs.shape()[2];
                let wv = self.value(w);
                let dout = wv.shape()[1];
                let wt = kernels::transpose(wv.data(), din, dout);
                let want_dx = self.needs(x);
                let (dx, dw, db) = batched_grads(batch, want_dx.then_some(frames * din), din * dout, dout, |bi, dx, dw, db| {
                    let len = lengths[bi];
                    let xr = &xs.data()[bi * frames * din..(bi * frames + len) * din];
                    let dr = &dyv[bi * frames * dout..(bi * frames + len) * dout];
                    let dx = dx.map(|d| &mut d[..len * din]);
                    kernels::linear_rows_backward(xr, dr, din, &wt, dout, dx, dw, Some(db));
                });
                if let Some(dx) = dx {
                    self.accumulate(grads, x, Tensor::from_vec(xs.shape(), dx)?);
                }
                self.accumulate(grads, w, Tensor::from_vec(wv.shape(), dw)?);
                if let Some(b) = b {
                    self.accumulate(grads, *b, Tensor::from_vec(&[dout], db)?);
                }
            }
            Op::Conv { x, w, b, geom } => {
                let (x, w) = (*x, *w);
                let xs = self.value(x);
                let wv = self.value(w);
                let (cin, cout) = (geom.in_channels, geom.out_channels);
                let wt = kernels::conv_weight_transposed(geom, wv.data());
                let want_dx = self.needs(x);
                let (dx, dw, db) = batched_grads(batch, want_dx.then_some(frames * cin), wv.len(), cout, |bi, dx, dw, db| {
                    let len = lengths[bi];
                    let xr = &xs.data()[bi * frames * cin..(bi * frames + len) * cin];
                    let dr = &dyv[bi * frames * cout..(bi * frames + len) * cout];
                    let dx = dx.map(|d| &mut d[..len * cin]);
                    kernels::conv_rows_backward(geom, xr, dr, len, wv.data(), &wt, dx, dw, Some(db));
                });
                if let Some(dx) = dx {
                    self.accumulate(grads, x, Tensor::from_vec(xs.shape(), dx)?);
                }
                self.accumulate(grads, w, Tensor::from_vec(wv.shape(), dw)?);
                if let Some(b) = b {
                    self.accumulate(grads, *b, Tensor::from_vec(&[cout], db)?);
                }
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, count } => {
                let c = inv_std.len();
                let dbeta = self.channel_sums(dyv, c, |_, v| v);
                let dgamma = {
                    // sum of dy * xhat, reduced like channel_sums
                    let parts: Vec<Vec<T>> = (0..batch)
                        .into_par_iter()
                        .map(|b| {
                            let mut s = vec![T::zero(); c];
                            let range = b * frames * c..(b * frames + lengths[b]) * c;
                            for (dr, hr) in dyv[range.clone()].chunks_exact(c).zip(xhat[range].chunks_exact(c)) {
                                for ch in 0..c {
                                    s[ch] += dr[ch] * hr[ch];
                                }
                            }
                            s
                        })
                        .collect();
                    let mut total = vec![T::zero(); c];
                    for p in parts {
                        for (a, v) in total.iter_mut().zip(p) {
                            *a += v;
                        }
                    }
                    total
                };
                if self.needs(*x) {
                    let g = self.value(*gamma).data();
                    let n = T::of(*count as f64);
                    let mut dx = Tensor::zeros(self.value(*x).shape());
                    dx.data_mut().par_chunks_mut(frames * c).enumerate().for_each(|(b, o)| {
                        let len = lengths[b];
                        let base = b * frames * c;
                        for t in 0..len {
                            for ch in 0..c {
                                let i = base + t * c + ch;
                                o[t * c + ch] = g[ch] * inv_std[ch] / n * (n * dyv[i] - dbeta[ch] - xhat[i] * dgamma[ch]);
                            }
                        }
                    });
                    self.accumulate(grads, *x, dx);
                }
                self.accumulate(grads, *gamma, Tensor::from_vec(&[c], dgamma)?);
                self.accumulate(grads, *beta, Tensor::from_vec(&[c], dbeta)?);
            }
            Op::BatchNormInfer { x, gamma, beta, mean, inv_std } => {
                let c = inv_std.len();
                let xv = self.value(*x).data();
                let dbeta = self.channel_sums(dyv, c, |_, v| v);
                let parts: Vec<Vec<T>> = (0..batch)
                    .into_par_iter()
                    .map(|b| {
                        let mut s = vec![T::zero(); c];
                        let range = b * frames * c..(b * frames + lengths[b]) * c;
                        for (dr, xr) in dyv[range.clone()].chunks_exact(c).zip(xv[range].chunks_exact(c)) {
                            for ch in 0..c {
                                s[ch] += dr[ch] * (xr[ch] - mean[ch]) * inv_std[ch];
                            }
                        }
                        s
                    })
                    .collect();
                let mut dgamma = vec![T::zero(); c];
                for p in parts {
                    for (a, v) in dgamma.iter_mut().zip(p) {
                        *a += v;
                    }
                }
                if self.needs(*x) {
                    let g = self.value(*gamma).data();
                    let mut dx = Tensor::zeros(self.value(*x).shape());
                    dx.data_mut().par_chunks_mut(frames * c).enumerate().for_each(|(b, o)| {
                        let base = b * frames * c;
                        for (i, d) in o[..lengths[b] * c].iter_mut().enumerate() {
                            let ch = i % c;
                            *d = dyv[base + i] * g[ch] * inv_std[ch];
                        }
                    });
                    self.accumulate(grads, *x, dx);
                }
                self.accumulate(grads, *gamma, Tensor::from_vec(&[c], dgamma)?);
                self.accumulate(grads, *beta, Tensor::from_vec(&[c], dbeta)?);
            }
            Op::Relu { x } => {
                let xv = self.value(*x).data();
                let data = dyv
                    .iter()
                    .zip(xv)
                    .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
                    .collect();
                self.accumulate(grads, *x, Tensor::from_vec(dy.shape(), data)?);
            }
            Op::Sigmoid { x } => {
                let yv = self.nodes[id].value.data();
                let data = dyv.iter().zip(yv).map(|(&g, &y)| g * y * (T::one() - y)).collect();
                self.accumulate(grads, *x, Tensor::from_vec(dy.shape(), data)?);
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, dy.clone());
                self.accumulate(grads, *b, dy.clone());
            }
            Op::Dropout { x, mask } => {
                let data = dyv.iter().zip(mask).map(|(&g, &m)| g * m).collect();
                self.accumulate(grads, *x, Tensor::from_vec(dy.shape(), data)?);
            }
            Op::Concat { inputs } => {
                let widths: Vec<usize> = inputs.iter().map(|&i| *self.value(i).shape().last().unwrap_or(&0)).collect();
                let total: usize = widths.iter().sum();
                let rows = dy.len() / total.max(1);
                let mut offset = 0;
                for (&inp, &w) in inputs.iter().zip(&widths) {
                    let mut data = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        data.extend_from_slice(&dyv[r * total + offset..r * total + offset + w]);
                    }
                    offset += w;
                    self.accumulate(grads, inp, Tensor::from_vec(self.value(inp).shape(), data)?);
                }
            }
            Op::Loss { x, grad } => {
                let s = dyv[0];
                let data = grad.iter().map(|&g| g * s).collect();
                self.accumulate(grads, *x, Tensor::from_vec(self.value(*x).shape(), data)?);
            }
        }
        Ok(())
    }
}
