use crate::tape::{grad_slot, Op, Tape};
use crate::{Result, Scalar, Tensor, TensorError, Var};

const GELU_COEF: f64 = 0.044715;

fn gelu_parts<S: Scalar>(x: S) -> (S, S) {
    // tanh approximation: 0.5 x (1 + tanh(c (x + 0.044715 x^3)))
    let c = S::of((2.0 / std::f64::consts::PI).sqrt());
    let k = S::of(GELU_COEF);
    let half = S::of(0.5);
    let u = c * (x + k * x * x * x);
    // tanh via exp, several times cheaper than the libm call
    let t = S::one() - S::of(2.0) / (S::one() + (u + u).exp());
    let y = half * x * (S::one() + t);
    let dy = half * (S::one() + t) + half * x * (S::one() - t * t) * c * (S::one() + S::of(3.0) * k * x * x);
    (y, dy)
}

impl<S: Scalar> Tape<S> {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(TensorError::shape("add", av.shape(), bv.shape()));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, rg, Op::Add { a, b }))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(TensorError::shape("mul", av.shape(), bv.shape()));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x * y).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, rg, Op::Mul { a, b }))
    }

    /// Add a length-`n` vector to every row of `x` (last axis `n`).
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        if bv.rank() != 1 || xv.cols() != bv.numel() {
            return Err(TensorError::shape("add_row", xv.shape(), bv.shape()));
        }
        let b = bv.data();
        let mut data = xv.data().to_vec();
        for row in data.chunks_exact_mut(b.len().max(1)) {
            row.iter_mut().zip(b).for_each(|(v, &b)| *v += b);
        }
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.any_grad(&[x, bias]);
        Ok(self.push(value, rg, Op::AddRow { x, bias }))
    }

    pub fn scale(&mut self, x: Var, factor: S) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| v * factor).collect();
        let value = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        let rg = self.any_grad(&[x]);
        self.push(value, rg, Op::Scale { x, factor })
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| gelu_parts(v).0).collect();
        let value = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        let rg = self.any_grad(&[x]);
        self.push(value, rg, Op::Gelu { x })
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).sum();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(total), rg, Op::Sum { x })
    }
}

pub(super) fn add_backward<S: Scalar>(tape: &Tape<S>, a: Var, b: Var, g: &[S], grads: &mut [Option<Vec<S>>]) {
    for v in [a, b] {
        if let Some(d) = grad_slot(tape, grads, v) {
            d.iter_mut().zip(g).for_each(|(d, &g)| *d += g);
        }
    }
}

pub(super) fn mul_backward<S: Scalar>(tape: &Tape<S>, a: Var, b: Var, g: &[S], grads: &mut [Option<Vec<S>>]) {
    for (v, other) in [(a, b), (b, a)] {
        let o = tape.value(other).data();
        if let Some(d) = grad_slot(tape, grads, v) {
            for ((d, &g), &o) in d.iter_mut().zip(g).zip(o) {
                *d += g * o;
            }
        }
    }
}

pub(super) fn add_row_backward<S: Scalar>(
    tape: &Tape<S>,
    x: Var,
    bias: Var,
    g: &[S],
    grads: &mut [Option<Vec<S>>],
) {
    if let Some(dx) = grad_slot(tape, grads, x) {
        dx.iter_mut().zip(g).for_each(|(d, &g)| *d += g);
    }
    if let Some(db) = grad_slot(tape, grads, bias) {
        let n = db.len();
        for row in g.chunks_exact(n) {
            db.iter_mut().zip(row).for_each(|(d, &g)| *d += g);
        }
    }
}

pub(super) fn scale_backward<S: Scalar>(tape: &Tape<S>, x: Var, factor: S, g: &[S], grads: &mut [Option<Vec<S>>]) {
    if let Some(dx) = grad_slot(tape, grads, x) {
        dx.iter_mut().zip(g).for_each(|(d, &g)| *d += g * factor);
    }
}

pub(super) fn gelu_backward<S: Scalar>(tape: &Tape<S>, x: Var, g: &[S], grads: &mut [Option<Vec<S>>]) {
    let xv = tape.value(x).data();
    if let Some(dx) = grad_slot(tape, grads, x) {
        for ((d, &g), &x) in dx.iter_mut().zip(g).zip(xv) {
            *d += g * gelu_parts(x).1;
        }
    }
}

pub(super) fn sum_backward<S: Scalar>(tape: &Tape<S>, x: Var, g: &[S], grads: &mut [Option<Vec<S>>]) {
    if let Some(dx) = grad_slot(tape, grads, x) {
        dx.iter_mut().for_each(|d| *d += g[0]);
    }
}
