mod elementwise;
mod index;
mod matmul;
mod nn;

use crate::{grad_enabled, Result, Tensor, TensorError};

/// Whether an op over `parents` will be recorded on the tape; kernels use it
/// to skip saving activations that only the backward pass needs.
pub(crate) fn tracks(parents: &[&Tensor]) -> bool {
    grad_enabled() && parents.iter().any(|p| p.requires_grad())
}

pub(crate) fn same_dtype(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dtype() != b.dtype() {
        return Err(TensorError::DType {
            op,
            lhs: a.dtype(),
            rhs: b.dtype(),
        });
    }
    Ok(())
}

pub(crate) fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    same_dtype(op, a, b)?;
    if a.shape() != b.shape() {
        return Err(TensorError::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

pub(crate) fn matrix_dims(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [rows, cols] => Ok((*rows, *cols)),
        other => Err(TensorError::contract(
            op,
            format!("expected a matrix, got shape {other:?}"),
        )),
    }
}

/// Split a tensor into (rows, last extent), treating leading axes as rows.
pub(crate) fn rows_last(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape().last() {
        Some(&d) if d > 0 => Ok((t.numel() / d, d)),
        _ => Err(TensorError::contract(
            op,
            format!("last extent must be at least 1, got shape {:?}", t.shape()),
        )),
    }
}
