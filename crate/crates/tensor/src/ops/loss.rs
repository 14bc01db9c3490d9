use super::norm::softmax_in_place;
use crate::tape::{grad_slot, Op, Tape};
use crate::{Result, Scalar, Tensor, TensorError, Var};

impl<S: Scalar> Tape<S> {
    /// Mean negative log-likelihood of `targets` over rows where `mask` is set.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let lv = self.value(logits);
        if lv.rank() != 2 {
            return Err(TensorError::invalid("cross_entropy", format!("logits must be 2-D, got {:?}", lv.shape())));
        }
        let (rows, vocab) = (lv.shape()[0], lv.shape()[1]);
        if targets.len() != rows || mask.len() != rows {
            return Err(TensorError::shape("cross_entropy", lv.shape(), &[targets.len(), mask.len()]));
        }
        if let Some(&t) = targets.iter().zip(mask).find(|(&t, &m)| m && t >= vocab).map(|(t, _)| t) {
            return Err(TensorError::invalid("cross_entropy", format!("target {t} outside vocabulary of {vocab}")));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(TensorError::EmptyLoss);
        }
        if !lv.is_finite() {
            return Err(TensorError::NonFinite("cross_entropy logits".into()));
        }
        let mut probs = lv.data().to_vec();
        let mut total = 0.0f64;
        for (r, row) in lv.data().chunks_exact(vocab).enumerate() {
            if !mask[r] {
                continue;
            }
            let max = row.iter().copied().fold(S::neg_infinity(), S::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<S>().ln();
            total += (lse - row[targets[r]]).as_f64();
            softmax_in_place(&mut probs[r * vocab..(r + 1) * vocab]);
        }
        let loss = S::of(total / count as f64);
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            rg,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
                count,
            },
        ))
    }
}

#[allow(clippy::too_many_arguments)]
pub(super) fn cross_entropy_backward<S: Scalar>(
    tape: &Tape<S>,
    logits: Var,
    targets: &[usize],
    mask: &[bool],
    probs: &[S],
    count: usize,
    g: &[S],
    grads: &mut [Option<Vec<S>>],
) {
    let vocab = tape.value(logits).cols();
    let scale = g[0] / S::of(count as f64);
    if let Some(d) = grad_slot(tape, grads, logits) {
        for (r, &m) in mask.iter().enumerate() {
            if !m {
                continue;
            }
            let p = &probs[r * vocab..(r + 1) * vocab];
            let dr = &mut d[r * vocab..(r + 1) * vocab];
            for (i, (d, &p)) in dr.iter_mut().zip(p).enumerate() {
                let onehot = if i == targets[r] { S::one() } else { S::zero() };
                *d += scale * (p - onehot);
            }
        }
    }
}
