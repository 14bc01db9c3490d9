use crate::tape::{grad_slot, Op, Tape};
use crate::{Result, Scalar, Tensor, TensorError, Var};

impl<S: Scalar> Tape<S> {
    /// Stack rows picked from several sources into `[index.len(), width]`.
    ///
    /// `index[r] = (s, row)` copies row `row` of `sources[s]`. Sources are
    /// viewed as matrices over their last axis and must share its width.
    /// Covers concatenation, slicing, repetition and embedding lookup.
    pub fn gather_rows(&mut self, sources: &[Var], index: &[(usize, usize)]) -> Result<Var> {
        let Some(&first) = sources.first() else {
            return Err(TensorError::invalid("gather_rows", "no sources"));
        };
        let width = self.value(first).cols();
        for &s in sources {
            let v = self.value(s);
            if v.cols() != width {
                return Err(TensorError::shape("gather_rows", self.value(first).shape(), v.shape()));
            }
        }
        let mut data = Vec::with_capacity(index.len() * width);
        let mut packed = Vec::with_capacity(index.len());
        for &(s, row) in index {
            let src = sources
                .get(s)
                .ok_or_else(|| TensorError::invalid("gather_rows", format!("source {s} out of range")))?;
            let v = self.value(*src);
            if row >= v.rows() {
                return Err(TensorError::invalid(
                    "gather_rows",
                    format!("row {row} out of range for shape {:?}", v.shape()),
                ));
            }
            data.extend_from_slice(v.row(row));
            packed.push((s as u32, row as u32));
        }
        let value = Tensor::new(vec![index.len(), width], data)?;
        let rg = self.any_grad(sources);
        Ok(self.push(
            value,
            rg,
            Op::GatherRows {
                sources: sources.to_vec(),
                index: packed,
            },
        ))
    }

    /// Rows `start..end` of a matrix.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let index: Vec<_> = (start..end).map(|r| (0, r)).collect();
        self.gather_rows(&[x], &index)
    }

    /// Vertical concatenation.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let mut index = Vec::new();
        for (s, &p) in parts.iter().enumerate() {
            index.extend((0..self.value(p).rows()).map(|r| (s, r)));
        }
        self.gather_rows(parts, &index)
    }
}

pub(super) fn gather_backward<S: Scalar>(
    tape: &Tape<S>,
    sources: &[Var],
    index: &[(u32, u32)],
    g: &[S],
    grads: &mut [Option<Vec<S>>],
) {
    let width = if index.is_empty() { return } else { g.len() / index.len() };
    for (s, &src) in sources.iter().enumerate() {
        let Some(d) = grad_slot(tape, grads, src) else { continue };
        for (r, &(si, row)) in index.iter().enumerate() {
            if si as usize != s {
                continue;
            }
            let row = row as usize;
            let dst = &mut d[row * width..(row + 1) * width];
            dst.iter_mut()
                .zip(&g[r * width..(r + 1) * width])
                .for_each(|(d, &g)| *d += g);
        }
    }
}
