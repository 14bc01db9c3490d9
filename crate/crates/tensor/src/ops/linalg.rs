use crate::tape::{grad_slot, Op, Tape};
use crate::{gemm, MatMut, MatRef, Result, Scalar, Tensor, TensorError, Var};

impl<S: Scalar> Tape<S> {
    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() != 2 || bv.rank() != 2 || av.shape()[1] != bv.shape()[0] {
            return Err(TensorError::shape("matmul", av.shape(), bv.shape()));
        }
        let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        let mut out = vec![S::zero(); m * n];
        gemm(
            S::one(),
            MatRef::dense(av.data(), m, k),
            MatRef::dense(bv.data(), k, n),
            S::zero(),
            MatMut::dense(&mut out, m, n),
        );
        let value = Tensor::new(vec![m, n], out)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, rg, Op::MatMul { a, b }))
    }
}

pub(super) fn matmul_backward<S: Scalar>(
    tape: &Tape<S>,
    a: Var,
    b: Var,
    g: &[S],
    grads: &mut [Option<Vec<S>>],
) {
    let (av, bv) = (tape.value(a), tape.value(b));
    let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
    let dc = MatRef::dense(g, m, n);
    if let Some(da) = grad_slot(tape, grads, a) {
        // dA += dC * B^T
        gemm(S::one(), dc, MatRef::dense(bv.data(), k, n).t(), S::one(), MatMut::dense(da, m, k));
    }
    if let Some(db) = grad_slot(tape, grads, b) {
        // dB += A^T * dC
        gemm(S::one(), MatRef::dense(av.data(), m, k).t(), dc, S::one(), MatMut::dense(db, k, n));
    }
}
