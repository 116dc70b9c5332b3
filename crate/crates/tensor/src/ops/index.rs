//! Row gathers and scatters, concatenation and slicing.

use super::{matrix_dims, same_dtype};
use crate::{with_dtype, Element, Result, Tensor, TensorError};

fn gather_rows<T: Element>(x: &[T], d: usize, idx: &[usize]) -> Vec<T> {
    let mut out = Vec::with_capacity(idx.len() * d);
    for &i in idx {
        out.extend_from_slice(&x[i * d..(i + 1) * d]);
    }
    out
}

fn scatter_add_rows<T: Element>(x: &[T], d: usize, idx: &[usize], rows: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * d];
    for (src, &dst) in idx.iter().enumerate() {
        let o = &mut out[dst * d..(dst + 1) * d];
        for (acc, &v) in o.iter_mut().zip(&x[src * d..(src + 1) * d]) {
            *acc = *acc + v;
        }
    }
    out
}

impl Tensor {
    /// Rows `idx[i]` of an `[n, d]` matrix stacked into `[len(idx), d]`.
    /// Embedding lookup is this op applied to the embedding table.
    pub fn index_select_rows(&self, idx: &[usize]) -> Result<Tensor> {
        let (n, d) = matrix_dims("index_select_rows", self)?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(TensorError::contract(
                "index_select_rows",
                format!("row index {bad} out of range for {n} rows"),
            ));
        }
        let idx = idx.to_vec();
        Ok(with_dtype!(self.dtype(), T, {
            let out = gather_rows::<T>(T::slice(&self.storage()), d, &idx);
            let m = idx.len();
            Tensor::from_op(T::wrap(out), vec![m, d], vec![self.clone()], move |g| {
                vec![Some(T::wrap(scatter_add_rows::<T>(T::slice(g), d, &idx, n)))]
            })
        }))
    }

    /// Scatter-add: row `i` of `self` is added into row `idx[i]` of an
    /// `[rows, d]` zero matrix.
    pub fn index_add_rows(&self, idx: &[usize], rows: usize) -> Result<Tensor> {
        let (m, d) = matrix_dims("index_add_rows", self)?;
        if idx.len() != m {
            return Err(TensorError::shape("index_add_rows", self.shape(), &[idx.len()]));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(TensorError::contract(
                "index_add_rows",
                format!("row index {bad} out of range for {rows} rows"),
            ));
        }
        let idx = idx.to_vec();
        Ok(with_dtype!(self.dtype(), T, {
            let out = scatter_add_rows::<T>(T::slice(&self.storage()), d, &idx, rows);
            Tensor::from_op(T::wrap(out), vec![rows, d], vec![self.clone()], move |g| {
                vec![Some(T::wrap(gather_rows::<T>(T::slice(g), d, &idx)))]
            })
        }))
    }

    /// Per-row column gather: `out[i, j] = self[i, idx[i * k + j]]`, shape `[n, k]`.
    pub fn gather_per_row(&self, idx: &[usize], k: usize) -> Result<Tensor> {
        let (n, c) = matrix_dims("gather_per_row", self)?;
        if idx.len() != n * k {
            return Err(TensorError::shape("gather_per_row", &[n, k], &[idx.len()]));
        }
        if let Some(&bad) = idx.iter().find(|&&j| j >= c) {
            return Err(TensorError::contract(
                "gather_per_row",
                format!("column index {bad} out of range for {c} columns"),
            ));
        }
        let idx = idx.to_vec();
        Ok(with_dtype!(self.dtype(), T, {
            let out: Vec<T> = {
                let s = self.storage();
                let x = T::slice(&s);
                (0..n * k).map(|p| x[(p / k) * c + idx[p]]).collect()
            };
            Tensor::from_op(T::wrap(out), vec![n, k], vec![self.clone()], move |g| {
                let g = T::slice(g);
                let mut gx = vec![T::zero(); n * c];
                for p in 0..n * k {
                    let at = (p / k) * c + idx[p];
                    gx[at] += g[p];
                }
                vec![Some(T::wrap(gx))]
            })
        }))
    }

    /// Concatenate `[n, d_i]` matrices along columns.
    pub fn concat_cols(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::contract("concat_cols", "no inputs"))?;
        let (n, _) = matrix_dims("concat_cols", first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            same_dtype("concat_cols", first, p)?;
            let (rows, w) = matrix_dims("concat_cols", p)?;
            if rows != n {
                return Err(TensorError::shape("concat_cols", first.shape(), p.shape()));
            }
            widths.push(w);
        }
        let total: usize = widths.iter().sum();
        Ok(with_dtype!(first.dtype(), T, {
            let mut out = vec![T::zero(); n * total];
            let mut off = 0;
            for (p, &w) in parts.iter().zip(&widths) {
                let s = p.storage();
                let x = T::slice(&s);
                for i in 0..n {
                    out[i * total + off..i * total + off + w].copy_from_slice(&x[i * w..(i + 1) * w]);
                }
                off += w;
            }
            let widths2 = widths.clone();
            Tensor::from_op(T::wrap(out), vec![n, total], parts.to_vec(), move |g| {
                let g = T::slice(g);
                let mut off = 0;
                widths2
                    .iter()
                    .map(|&w| {
                        let mut gp = Vec::with_capacity(n * w);
                        for i in 0..n {
                            gp.extend_from_slice(&g[i * total + off..i * total + off + w]);
                        }
                        off += w;
                        Some(T::wrap(gp))
                    })
                    .collect()
            })
        }))
    }

    /// Concatenate `[n_i, d]` matrices along rows.
    pub fn concat_rows(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::contract("concat_rows", "no inputs"))?;
        let (_, d) = matrix_dims("concat_rows", first)?;
        let mut heights = Vec::with_capacity(parts.len());
        for p in parts {
            same_dtype("concat_rows", first, p)?;
            let (h, w) = matrix_dims("concat_rows", p)?;
            if w != d {
                return Err(TensorError::shape("concat_rows", first.shape(), p.shape()));
            }
            heights.push(h);
        }
        let total: usize = heights.iter().sum();
        Ok(with_dtype!(first.dtype(), T, {
            let mut out = Vec::with_capacity(total * d);
            for p in parts {
                out.extend_from_slice(T::slice(&p.storage()));
            }
            Tensor::from_op(T::wrap(out), vec![total, d], parts.to_vec(), move |g| {
                let g = T::slice(g);
                let mut off = 0;
                heights
                    .iter()
                    .map(|&h| {
                        let part = g[off * d..(off + h) * d].to_vec();
                        off += h;
                        Some(T::wrap(part))
                    })
                    .collect()
            })
        }))
    }

    /// Rows `start..end` of a matrix.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Tensor> {
        let (n, d) = matrix_dims("slice_rows", self)?;
        if start > end || end > n {
            return Err(TensorError::contract(
                "slice_rows",
                format!("range {start}..{end} invalid for {n} rows"),
            ));
        }
        Ok(with_dtype!(self.dtype(), T, {
            let out = T::slice(&self.storage())[start * d..end * d].to_vec();
            Tensor::from_op(T::wrap(out), vec![end - start, d], vec![self.clone()], move |g| {
                let mut gx = vec![T::zero(); n * d];
                gx[start * d..end * d].copy_from_slice(T::slice(g));
                vec![Some(T::wrap(gx))]
            })
        }))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Tensor> {
        let (n, d) = matrix_dims("slice_cols", self)?;
        if start > end || end > d {
            return Err(TensorError::contract(
                "slice_cols",
                format!("range {start}..{end} invalid for {d} columns"),
            ));
        }
        let w = end - start;
        Ok(with_dtype!(self.dtype(), T, {
            let out: Vec<T> = {
                let s = self.storage();
                let x = T::slice(&s);
                (0..n).flat_map(|i| x[i * d + start..i * d + end].iter().copied()).collect()
            };
            Tensor::from_op(T::wrap(out), vec![n, w], vec![self.clone()], move |g| {
                let g = T::slice(g);
                let mut gx = vec![T::zero(); n * d];
                for i in 0..n {
                    gx[i * d + start..i * d + end].copy_from_slice(&g[i * w..(i + 1) * w]);
                }
                vec![Some(T::wrap(gx))]
            })
        }))
    }
}
