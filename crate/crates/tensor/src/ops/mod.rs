//! Primitive operations and their backward rules.

pub mod attention;
mod elementwise;
mod gather;
mod linalg;
mod loss;
mod norm;

use crate::tape::{Op, Tape};
use crate::Scalar;

pub(crate) fn backward<S: Scalar>(tape: &Tape<S>, idx: usize, g: &[S], grads: &mut [Option<Vec<S>>]) {
    let node = &tape.nodes[idx];
    match &node.op {
        Op::Leaf => {}
        Op::MatMul { a, b } => linalg::matmul_backward(tape, *a, *b, g, grads),
        Op::Add { a, b } => elementwise::add_backward(tape, *a, *b, g, grads),
        Op::Mul { a, b } => elementwise::mul_backward(tape, *a, *b, g, grads),
        Op::AddRow { x, bias } => elementwise::add_row_backward(tape, *x, *bias, g, grads),
        Op::Scale { x, factor } => elementwise::scale_backward(tape, *x, *factor, g, grads),
        Op::Gelu { x } => elementwise::gelu_backward(tape, *x, g, grads),
        Op::Sum { x } => elementwise::sum_backward(tape, *x, g, grads),
        Op::LayerNorm { x, gain, bias, mean, rstd } => {
            norm::layer_norm_backward(tape, *x, *gain, *bias, mean, rstd, g, grads)
        }
        Op::Softmax { x } => norm::softmax_backward(tape, *x, &node.value, g, grads),
        Op::Attention { q, k, v, spec, probs } => {
            attention::attention_backward(tape, *q, *k, *v, spec, probs, g, grads)
        }
        Op::GatherRows { sources, index } => gather::gather_backward(tape, sources, index, g, grads),
        Op::CrossEntropy { logits, targets, mask, probs, count } => {
            loss::cross_entropy_backward(tape, *logits, targets, mask, probs, *count, g, grads)
        }
    }
}
