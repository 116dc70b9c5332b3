use super::{matrix_dims, same_dtype, tracks};
use crate::{with_dtype, Element, Result, Tensor, TensorError};

/// `c[m×n] = a[m×k] · b[k×n]`; each output accumulates over `k` in ascending order.
pub(crate) fn gemm<T: Element>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for t in 0..k {
            let av = a[i * k + t];
            let brow = &b[t * n..(t + 1) * n];
            for (cj, &bj) in crow.iter_mut().zip(brow) {
                *cj = *cj + av * bj;
            }
        }
    }
    c
}

/// `a[m×n] · b[k×n]ᵀ`.
pub(crate) fn gemm_nt<T: Element>(a: &[T], b: &[T], m: usize, n: usize, k: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * k];
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for t in 0..k {
            let brow = &b[t * n..(t + 1) * n];
            c[i * k + t] = arow
                .iter()
                .zip(brow)
                .fold(T::zero(), |acc, (&x, &y)| acc + x * y);
        }
    }
    c
}

/// `a[m×k]ᵀ · g[m×n]`.
pub(crate) fn gemm_tn<T: Element>(a: &[T], g: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); k * n];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for t in 0..k {
            let av = a[i * k + t];
            let crow = &mut c[t * n..(t + 1) * n];
            for (cj, &gj) in crow.iter_mut().zip(grow) {
                *cj = *cj + av * gj;
            }
        }
    }
    c
}

impl Tensor {
    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        same_dtype("matmul", self, other)?;
        let (m, k) = matrix_dims("matmul", self)?;
        let (k2, n) = matrix_dims("matmul", other)?;
        if k != k2 {
            return Err(TensorError::shape("matmul", self.shape(), other.shape()));
        }
        Ok(with_dtype!(self.dtype(), T, {
            let out = {
                let (sa, sb) = (self.storage(), other.storage());
                gemm::<T>(T::slice(&sa), T::slice(&sb), m, k, n)
            };
            let (a, b) = (self.clone(), other.clone());
            let (need_a, need_b) = (tracks(&[self]), tracks(&[other]));
            Tensor::from_op(
                T::wrap(out),
                vec![m, n],
                vec![self.clone(), other.clone()],
                move |g| {
                    let g = T::slice(g);
                    let (sa, sb) = (a.storage(), b.storage());
                    let ga = need_a.then(|| T::wrap(gemm_nt::<T>(g, T::slice(&sb), m, n, k)));
                    let gb = need_b.then(|| T::wrap(gemm_tn::<T>(T::slice(&sa), g, m, k, n)));
                    vec![ga, gb]
                },
            )
        }))
    }

    /// Transpose of a rank-2 tensor (materialized).
    pub fn transpose(&self) -> Result<Tensor> {
        let (m, n) = matrix_dims("transpose", self)?;
        Ok(with_dtype!(self.dtype(), T, {
            let out = transpose_buf::<T>(T::slice(&self.storage()), m, n);
            Tensor::from_op(T::wrap(out), vec![n, m], vec![self.clone()], move |g| {
                vec![Some(T::wrap(transpose_buf::<T>(T::slice(g), n, m)))]
            })
        }))
    }
}

fn transpose_buf<T: Element>(x: &[T], m: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = x[i * n + j];
        }
    }
    out
}
