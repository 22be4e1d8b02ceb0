//! Dense row-major tensors over f64.
//!
//! A [`Tensor`] is an immutable value: shape plus reference-counted payload.
//! Cloning is cheap and sharing across threads is safe. Differentiation lives
//! on the [`crate::tape::Tape`]; plain tensors carry no graph state.

use std::sync::Arc;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
}

impl Tensor {
    /// Builds a tensor, checking that the payload length matches the shape
    /// and that every value is finite.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {:?} wants {} values, got {}", shape, n, data.len()),
            ));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: "tensor" });
        }
        Ok(Tensor { shape, data: Arc::new(data) })
    }

    /// Like [`Tensor::new`] without the finiteness scan. Internal ops verify
    /// finiteness themselves once per output.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data: Arc::new(data) }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: Arc::new(vec![0.0; n]) }
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: Arc::new(vec![value; n]) }
    }

    /// Scalar as a rank-1 tensor of length one; broadcasting aligns it with
    /// anything.
    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![1], data: Arc::new(vec![value]) }
    }

    pub fn from_vec(data: Vec<f64>) -> Result<Self> {
        let n = data.len();
        Tensor::new(vec![n], data)
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(&[usize]) -> f64) -> Self {
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        let mut idx = vec![0usize; shape.len()];
        for _ in 0..n {
            data.push(f(&idx));
            bump_index(&mut idx, shape);
        }
        Tensor { shape: shape.to_vec(), data: Arc::new(data) }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The sole value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::shape(
                "item",
                format!("expected one element, shape is {:?}", self.shape),
            ));
        }
        Ok(self.data[0])
    }

    /// Value at a multi-dimensional index. Intended for tests and small
    /// fixtures, not hot loops.
    pub fn at(&self, index: &[usize]) -> f64 {
        assert_eq!(index.len(), self.shape.len(), "index rank mismatch");
        let strides = row_major_strides(&self.shape);
        let mut off = 0;
        for (i, (&ix, &dim)) in index.iter().zip(&self.shape).enumerate() {
            assert!(ix < dim, "index {} out of bounds at axis {}", ix, i);
            off += ix * strides[i];
        }
        self.data[off]
    }

    /// Same payload under a new shape. The element count must not change.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} ({} values) cannot become {:?} ({})", self.shape, self.data.len(), shape, n),
            ));
        }
        Ok(Tensor { shape: shape.to_vec(), data: Arc::clone(&self.data) })
    }

    /// Reorders axes; `axes` must be a permutation of `0..rank`. The result
    /// owns freshly gathered data, so a permute followed by its inverse
    /// reproduces the original bit for bit.
    pub fn permute(&self, axes: &[usize]) -> Result<Tensor> {
        let rank = self.shape.len();
        check_permutation(axes, rank)?;
        let out_shape: Vec<usize> = axes.iter().map(|&a| self.shape[a]).collect();
        let in_strides = row_major_strides(&self.shape);
        let out_strides = row_major_strides(&out_shape);
        // For each output axis, the stride to advance in the source.
        let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
        let n = self.data.len();
        let mut out = vec![0.0; n];
        let mut idx = vec![0usize; rank];
        let mut src_off = 0usize;
        for slot in out.iter_mut() {
            *slot = self.data[src_off];
            // Advance the output-ordered index and mirror the move in source
            // offsets; this avoids recomputing the dot product per element.
            for ax in (0..rank).rev() {
                idx[ax] += 1;
                src_off += src_strides[ax];
                if idx[ax] < out_shape[ax] {
                    break;
                }
                src_off -= src_strides[ax] * out_shape[ax];
                idx[ax] = 0;
            }
        }
        let _ = out_strides;
        Ok(Tensor { shape: out_shape, data: Arc::new(out) })
    }

    /// Elementwise map into a new tensor. No finiteness check; callers that
    /// expose results publicly must verify.
    pub(crate) fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        let data: Vec<f64> = self.data.iter().map(|&v| f(v)).collect();
        Tensor { shape: self.shape.clone(), data: Arc::new(data) }
    }

    /// Largest absolute difference between two same-shaped tensors.
    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Row-major strides for a shape; the last axis is contiguous.
pub(crate) fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

pub(crate) fn bump_index(idx: &mut [usize], shape: &[usize]) {
    for ax in (0..shape.len()).rev() {
        idx[ax] += 1;
        if idx[ax] < shape[ax] {
            return;
        }
        idx[ax] = 0;
    }
}

pub(crate) fn check_permutation(axes: &[usize], rank: usize) -> Result<()> {
    if axes.len() != rank {
        return Err(Error::shape(
            "permute",
            format!("permutation {:?} does not cover rank {}", axes, rank),
        ));
    }
    let mut seen = vec![false; rank];
    for &a in axes {
        if a >= rank || seen[a] {
            return Err(Error::shape("permute", format!("{:?} is not a permutation", axes)));
        }
        seen[a] = true;
    }
    Ok(())
}

/// Broadcast result of two shapes under trailing-dimension alignment:
/// missing axes count as 1, and paired axes must match or be 1.
pub fn broadcast_shapes(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::shape(
                    "broadcast",
                    format!("cannot broadcast {:?} with {:?}", a, b),
                ))
            }
        };
    }
    Ok(out)
}

/// Strides for reading `shape` as if it were `target` rank/static sizes:
/// broadcast axes get stride 0 so repeated reads hit the same element.
pub(crate) fn broadcast_strides(shape: &[usize], target: &[usize]) -> Vec<usize> {
    let strides = row_major_strides(shape);
    let offset = target.len() - shape.len();
    let mut out = vec![0usize; target.len()];
    for i in 0..target.len() {
        if i < offset {
            out[i] = 0;
        } else {
            let dim = shape[i - offset];
            out[i] = if dim == 1 && target[i] != 1 { 0 } else { strides[i - offset] };
        }
    }
    out
}

/// Materializes `t` broadcast to `target`.
pub(crate) fn expand_to(t: &Tensor, target: &[usize]) -> Vec<f64> {
    if t.shape() == target {
        return t.data().to_vec();
    }
    let strides = broadcast_strides(t.shape(), target);
    let n: usize = target.iter().product();
    let mut out = vec![0.0; n];
    let rank = target.len();
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    let data = t.data();
    for slot in out.iter_mut() {
        *slot = data[src];
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            src += strides[ax];
            if idx[ax] < target[ax] {
                break;
            }
            src -= strides[ax] * target[ax];
            idx[ax] = 0;
        }
    }
    out
}

/// Sums a gradient of shape `from` down to `to`, undoing broadcasting:
/// leading extra axes are summed away and size-1 axes are summed over.
pub(crate) fn reduce_to_shape(grad: &[f64], from: &[usize], to: &[usize]) -> Vec<f64> {
    if from == to {
        return grad.to_vec();
    }
    let n_to: usize = to.iter().product();
    let mut out = vec![0.0; n_to];
    let offset = from.len() - to.len();
    let to_strides = row_major_strides(to);
    let rank = from.len();
    let mut idx = vec![0usize; rank];
    for &g in grad {
        let mut off = 0usize;
        for (i, &stride) in to_strides.iter().enumerate() {
            let dim = to[i];
            let pos = idx[i + offset];
            off += if dim == 1 { 0 } else { pos * stride };
        }
        out[off] += g;
        bump_index(&mut idx, from);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_length_mismatch() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn new_rejects_non_finite() {
        assert!(Tensor::new(vec![2], vec![1.0, f64::NAN]).is_err());
        assert!(Tensor::new(vec![2], vec![1.0, f64::INFINITY]).is_err());
    }

    #[test]
    fn at_and_strides_agree() {
        let t = Tensor::from_fn(&[2, 3, 4], |ix| (ix[0] * 100 + ix[1] * 10 + ix[2]) as f64);
        assert_eq!(t.at(&[1, 2, 3]), 123.0);
        assert_eq!(t.at(&[0, 0, 0]), 0.0);
        assert_eq!(row_major_strides(&[2, 3, 4]), vec![12, 4, 1]);
    }

    #[test]
    fn reshape_shares_data_and_checks_count() {
        let t = Tensor::from_vec((0..6).map(|v| v as f64).collect()).unwrap();
        let r = t.reshape(&[2, 3]).unwrap();
        assert_eq!(r.at(&[1, 2]), 5.0);
        assert!(t.reshape(&[4]).is_err());
    }

    #[test]
    fn permute_roundtrip_is_identity() {
        let t = Tensor::from_fn(&[2, 3, 4], |ix| (ix[0] * 31 + ix[1] * 7 + ix[2]) as f64 * 0.5);
        let p = t.permute(&[2, 0, 1]).unwrap();
        assert_eq!(p.shape(), &[4, 2, 3]);
        assert_eq!(p.at(&[3, 1, 2]), t.at(&[1, 2, 3]));
        let back = p.permute(&[1, 2, 0]).unwrap();
        assert_eq!(back.data(), t.data());
    }

    #[test]
    fn permute_rejects_bad_axes() {
        let t = Tensor::zeros(&[2, 2]);
        assert!(t.permute(&[0, 0]).is_err());
        assert!(t.permute(&[0]).is_err());
        assert!(t.permute(&[0, 2]).is_err());
    }

    #[test]
    fn broadcast_rules() {
        assert_eq!(broadcast_shapes(&[2, 3], &[3]).unwrap(), vec![2, 3]);
        assert_eq!(broadcast_shapes(&[2, 1], &[1, 5]).unwrap(), vec![2, 5]);
        assert_eq!(broadcast_shapes(&[1], &[4, 2]).unwrap(), vec![4, 2]);
        assert!(broadcast_shapes(&[2, 3], &[2, 4]).is_err());
    }

    #[test]
    fn expand_and_reduce_are_adjoint_on_ones() {
        // Summing an expanded all-ones gradient counts the repetitions.
        let t = Tensor::from_vec(vec![1.0, 2.0]).unwrap().reshape(&[2, 1]).unwrap();
        let target = [2usize, 3];
        let big = expand_to(&t, &target);
        assert_eq!(big, vec![1.0, 1.0, 1.0, 2.0, 2.0, 2.0]);
        let grad = vec![1.0; 6];
        let back = reduce_to_shape(&grad, &target, &[2, 1]);
        assert_eq!(back, vec![3.0, 3.0]);
    }

    #[test]
    fn reduce_drops_leading_axes() {
        let grad = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let back = reduce_to_shape(&grad, &[2, 3], &[3]);
        assert_eq!(back, vec![5.0, 7.0, 9.0]);
        let back_scalar = reduce_to_shape(&grad, &[2, 3], &[1]);
        assert_eq!(back_scalar, vec![21.0]);
    }
}
