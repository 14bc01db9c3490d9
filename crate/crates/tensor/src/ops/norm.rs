use crate::tape::{grad_slot, Op, Tape};
use crate::{Result, Scalar, Tensor, TensorError, Var};

pub(crate) fn softmax_in_place<S: Scalar>(row: &mut [S]) {
    let max = row.iter().copied().fold(S::neg_infinity(), S::max);
    let mut total = S::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

impl<S: Scalar> Tape<S> {
    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let n = xv.cols();
        if n == 0 {
            return Err(TensorError::invalid("softmax", "last axis is empty"));
        }
        if !xv.is_finite() {
            return Err(TensorError::NonFinite("softmax input".into()));
        }
        let mut data = xv.data().to_vec();
        data.chunks_exact_mut(n).for_each(softmax_in_place);
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, rg, Op::Softmax { x }))
    }

    /// Normalize each slice along the last axis, then apply `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.cols();
        for p in [gain, bias] {
            let pv = self.value(p);
            if pv.rank() != 1 || pv.numel() != d {
                return Err(TensorError::shape("layer_norm", xv.shape(), pv.shape()));
            }
        }
        if d == 0 {
            return Err(TensorError::invalid("layer_norm", "last axis is empty"));
        }
        let (gv, bv) = (self.value(gain).data(), self.value(bias).data());
        let rows = xv.rows();
        let eps = S::of(eps);
        let inv_d = S::of(1.0 / d as f64);
        let mut out = vec![S::zero(); xv.numel()];
        let mut mean = Vec::with_capacity(rows);
        let mut rstd = Vec::with_capacity(rows);
        for (row, o) in xv.data().chunks_exact(d).zip(out.chunks_exact_mut(d)) {
            let mu = row.iter().copied().sum::<S>() * inv_d;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<S>() * inv_d;
            let r = (var + eps).sqrt().recip();
            for i in 0..d {
                o[i] = (row[i] - mu) * r * gv[i] + bv[i];
            }
            mean.push(mu);
            rstd.push(r);
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.any_grad(&[x, gain, bias]);
        Ok(self.push(value, rg, Op::LayerNorm { x, gain, bias, mean, rstd }))
    }
}

pub(super) fn softmax_backward<S: Scalar>(
    tape: &Tape<S>,
    x: Var,
    y: &Tensor<S>,
    g: &[S],
    grads: &mut [Option<Vec<S>>],
) {
    let n = y.cols();
    if let Some(dx) = grad_slot(tape, grads, x) {
        for ((d, yr), gr) in dx.chunks_exact_mut(n).zip(y.data().chunks_exact(n)).zip(g.chunks_exact(n)) {
            let dot: S = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
            for i in 0..n {
                d[i] += yr[i] * (gr[i] - dot);
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub(super) fn layer_norm_backward<S: Scalar>(
    tape: &Tape<S>,
    x: Var,
    gain: Var,
    bias: Var,
    mean: &[S],
    rstd: &[S],
    g: &[S],
    grads: &mut [Option<Vec<S>>],
) {
    let xv = tape.value(x).data();
    let gv = tape.value(gain).data();
    let d = gv.len();
    let xhat = |r: usize, i: usize| (xv[r * d + i] - mean[r]) * rstd[r];
    if let Some(dg) = grad_slot(tape, grads, gain) {
        for (r, gr) in g.chunks_exact(d).enumerate() {
            for i in 0..d {
                dg[i] += gr[i] * xhat(r, i);
            }
        }
    }
    if let Some(db) = grad_slot(tape, grads, bias) {
        for gr in g.chunks_exact(d) {
            db.iter_mut().zip(gr).for_each(|(d, &g)| *d += g);
        }
    }
    if let Some(dx) = grad_slot(tape, grads, x) {
        let inv_d = S::of(1.0 / d as f64);
        for (r, (gr, dr)) in g.chunks_exact(d).zip(dx.chunks_exact_mut(d)).enumerate() {
            let mut m1 = S::zero();
            let mut m2 = S::zero();
            for i in 0..d {
                let dh = gr[i] * gv[i];
                m1 += dh;
                m2 += dh * xhat(r, i);
            }
            m1 *= inv_d;
            m2 *= inv_d;
            for i in 0..d {
                let dh = gr[i] * gv[i];
                dr[i] += rstd[r] * (dh - m1 - xhat(r, i) * m2);
            }
        }
    }
}
