//! Fused multi-head scaled dot-product attention over packed sequences.
//!
//! Several sequences are stacked along the row axis; each `segment` is
//! attended independently. Probabilities are kept on the tape both for the
//! backward pass and for later inspection.

use super::norm::softmax_in_place;
use crate::tape::{grad_slot, Op, Tape};
use crate::{gemm, MatMut, MatRef, Result, Scalar, Tensor, TensorError, Var};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionSpec {
    pub heads: usize,
    pub causal: bool,
    /// `(start_row, len)` of each packed sequence, in row order.
    pub segments: Vec<(usize, usize)>,
}

/// Attention probabilities captured from one attention node.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMaps<S = f32> {
    pub heads: usize,
    pub segment_lens: Vec<usize>,
    probs: Vec<S>,
    offsets: Vec<usize>,
}

impl<S: Scalar> AttentionMaps<S> {
    /// Row-major `len x len` probabilities of one head of one segment;
    /// entry `[q * len + k]` is the weight query `q` puts on key `k`.
    pub fn head(&self, segment: usize, head: usize) -> &[S] {
        let len = self.segment_lens[segment];
        let start = self.offsets[segment] + head * len * len;
        &self.probs[start..start + len * len]
    }

    /// Average over heads for one segment.
    pub fn mean_over_heads(&self, segment: usize) -> Vec<S> {
        let len = self.segment_lens[segment];
        let mut out = vec![S::zero(); len * len];
        for h in 0..self.heads {
            out.iter_mut().zip(self.head(segment, h)).for_each(|(o, &p)| *o += p);
        }
        let inv = S::of(1.0 / self.heads as f64);
        out.iter_mut().for_each(|o| *o *= inv);
        out
    }
}

fn head_offsets(spec: &AttentionSpec) -> Vec<usize> {
    let mut offsets = Vec::with_capacity(spec.segments.len());
    let mut acc = 0;
    for &(_, len) in &spec.segments {
        offsets.push(acc);
        acc += spec.heads * len * len;
    }
    offsets
}

impl<S: Scalar> Tape<S> {
    /// `softmax(Q K^T / sqrt(d_head) + mask) V` per head and segment.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, spec: AttentionSpec) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        if qv.rank() != 2 || qv.shape() != kv.shape() || qv.shape() != vv.shape() {
            return Err(TensorError::shape("attention", qv.shape(), kv.shape()));
        }
        let (rows, d) = (qv.shape()[0], qv.shape()[1]);
        if spec.heads == 0 || d % spec.heads != 0 {
            return Err(TensorError::invalid(
                "attention",
                format!("width {d} not divisible into {} heads", spec.heads),
            ));
        }
        let mut next = 0;
        for &(start, len) in &spec.segments {
            if start != next {
                return Err(TensorError::invalid("attention", "segments must tile the rows in order"));
            }
            next = start + len;
        }
        if next != rows {
            return Err(TensorError::invalid(
                "attention",
                format!("segments cover {next} rows, input has {rows}"),
            ));
        }
        let dh = d / spec.heads;
        let scale = S::of(1.0 / (dh as f64).sqrt());
        let offsets = head_offsets(&spec);
        let total: usize = spec.segments.iter().map(|&(_, l)| spec.heads * l * l).sum();
        let mut probs = vec![S::zero(); total];
        let mut out = vec![S::zero(); rows * d];
        for (s, &(start, len)) in spec.segments.iter().enumerate() {
            for h in 0..spec.heads {
                let off = offsets[s] + h * len * len;
                let p = &mut probs[off..off + len * len];
                let qh = MatRef::block(qv.data(), d, start, len, h * dh, dh);
                let kh = MatRef::block(kv.data(), d, start, len, h * dh, dh);
                gemm(scale, qh, kh.t(), S::zero(), MatMut::dense(p, len, len));
                for (i, row) in p.chunks_exact_mut(len).enumerate() {
                    if spec.causal {
                        row[i + 1..].iter_mut().for_each(|x| *x = S::neg_infinity());
                    }
                    softmax_in_place(row);
                }
                let vh = MatRef::block(vv.data(), d, start, len, h * dh, dh);
                gemm(
                    S::one(),
                    MatRef::dense(p, len, len),
                    vh,
                    S::zero(),
                    MatMut::block(&mut out, d, start, len, h * dh, dh),
                );
            }
        }
        if out.iter().any(|x| !x.is_finite()) {
            return Err(TensorError::NonFinite("attention output".into()));
        }
        let value = Tensor::new(vec![rows, d], out)?;
        let rg = self.any_grad(&[q, k, v]);
        Ok(self.push(value, rg, Op::Attention { q, k, v, spec, probs }))
    }

    /// Probabilities recorded by an attention node, or `None` if `v` is not
    /// an attention output.
    pub fn attention_maps(&self, v: Var) -> Option<AttentionMaps<S>> {
        match &self.nodes[v.0].op {
            Op::Attention { spec, probs, .. } => Some(AttentionMaps {
                heads: spec.heads,
                segment_lens: spec.segments.iter().map(|&(_, l)| l).collect(),
                probs: probs.clone(),
                offsets: head_offsets(spec),
            }),
            _ => None,
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub(super) fn attention_backward<S: Scalar>(
    tape: &Tape<S>,
    q: Var,
    k: Var,
    v: Var,
    spec: &AttentionSpec,
    probs: &[S],
    g: &[S],
    grads: &mut [Option<Vec<S>>],
) {
    let (qv, kv, vv) = (tape.value(q), tape.value(k), tape.value(v));
    let d = qv.cols();
    let dh = d / spec.heads;
    let scale = S::of(1.0 / (dh as f64).sqrt());
    let offsets = head_offsets(spec);
    let need_scores = tape.requires_grad(q) || tape.requires_grad(k);
    let mut ds = Vec::new();
    for (s, &(start, len)) in spec.segments.iter().enumerate() {
        for h in 0..spec.heads {
            let off = offsets[s] + h * len * len;
            let p = MatRef::dense(&probs[off..off + len * len], len, len);
            let dout = MatRef::block(g, d, start, len, h * dh, dh);
            if let Some(dv) = grad_slot(tape, grads, v) {
                gemm(S::one(), p.t(), dout, S::one(), MatMut::block(dv, d, start, len, h * dh, dh));
            }
            if !need_scores {
                continue;
            }
            ds.clear();
            ds.resize(len * len, S::zero());
            let vh = MatRef::block(vv.data(), d, start, len, h * dh, dh);
            gemm(S::one(), dout, vh.t(), S::zero(), MatMut::dense(&mut ds, len, len));
            let pr = &probs[off..off + len * len];
            for (row_d, row_p) in ds.chunks_exact_mut(len).zip(pr.chunks_exact(len)) {
                let dot: S = row_d.iter().zip(row_p).map(|(&a, &b)| a * b).sum();
                for (x, &p) in row_d.iter_mut().zip(row_p) {
                    *x = p * (*x - dot);
                }
            }
            let dsm = MatRef::dense(&ds, len, len);
            if let Some(dq) = grad_slot(tape, grads, q) {
                let kh = MatRef::block(kv.data(), d, start, len, h * dh, dh);
                gemm(scale, dsm, kh, S::one(), MatMut::block(dq, d, start, len, h * dh, dh));
            }
            if let Some(dk) = grad_slot(tape, grads, k) {
                let qh = MatRef::block(qv.data(), d, start, len, h * dh, dh);
                gemm(scale, dsm.t(), qh, S::one(), MatMut::block(dk, d, start, len, h * dh, dh));
            }
        }
    }
}
