//! Normalization, softmax, loss and the fused causal attention core.

use super::{rows_last, same_dtype, tracks};
use crate::{with_dtype, Element, Result, Tensor, TensorError};

fn softmax_rows<T: Element>(x: &[T], mask: Option<&[T]>, d: usize) -> std::result::Result<Vec<T>, usize> {
    let mut out = vec![T::zero(); x.len()];
    for (r, (row, o)) in x.chunks_exact(d).zip(out.chunks_exact_mut(d)).enumerate() {
        let m_off = mask.map(|m| (r * d) % m.len());
        let val = |j: usize| match (mask, m_off) {
            (Some(m), Some(off)) => row[j] + m[off + j],
            _ => row[j],
        };
        let mut mx = T::neg_infinity();
        for j in 0..d {
            mx = mx.max(val(j));
        }
        if mx == T::neg_infinity() {
            return Err(r);
        }
        let mut total = T::zero();
        for (j, oj) in o.iter_mut().enumerate() {
            *oj = (val(j) - mx).exp();
            total = total + *oj;
        }
        for oj in o.iter_mut() {
            *oj = *oj / total;
        }
    }
    Ok(out)
}

/// `gx = y ⊙ (g − Σ g⊙y)` per row.
fn softmax_backward<T: Element>(y: &[T], g: &[T], d: usize) -> Vec<T> {
    let mut gx = vec![T::zero(); y.len()];
    for ((yr, gr), out) in y.chunks_exact(d).zip(g.chunks_exact(d)).zip(gx.chunks_exact_mut(d)) {
        let dot = yr.iter().zip(gr).fold(T::zero(), |a, (&y, &g)| a + y * g);
        for ((o, &y), &g) in out.iter_mut().zip(yr).zip(gr) {
            *o = y * (g - dot);
        }
    }
    gx
}

impl Tensor {
    /// Softmax over the last axis. `mask` is additive, holds only `0` or
    /// `-inf`, and its shape must be a trailing suffix of `self`'s shape.
    pub fn softmax_lastdim(&self, mask: Option<&Tensor>) -> Result<Tensor> {
        let (_, d) = rows_last("softmax_lastdim", self)?;
        if let Some(m) = mask {
            same_dtype("softmax_lastdim", self, m)?;
            let s = self.shape();
            let ms = m.shape();
            if ms.is_empty() || ms.len() > s.len() || s[s.len() - ms.len()..] != *ms {
                return Err(TensorError::shape("softmax_lastdim", s, ms));
            }
            if m.to_vec_f64().iter().any(|&v| v != 0.0 && v != f64::NEG_INFINITY) {
                return Err(TensorError::contract(
                    "softmax_lastdim",
                    "mask entries must be 0 or -inf",
                ));
            }
        }
        with_dtype!(self.dtype(), T, {
            let y = {
                let sx = self.storage();
                let sm = mask.map(|m| m.storage());
                softmax_rows::<T>(T::slice(&sx), sm.as_deref().map(T::slice), d)
            }
            .map_err(|row| {
                TensorError::contract("softmax_lastdim", format!("row {row} is fully masked"))
            })?;
            let saved = y.clone();
            Ok(Tensor::from_op(T::wrap(y), self.shape().to_vec(), vec![self.clone()], move |g| {
                vec![Some(T::wrap(softmax_backward::<T>(&saved, T::slice(g), d)))]
            }))
        })
    }

    /// Layer normalization over the last axis with learned gain and bias.
    pub fn layernorm(&self, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
        same_dtype("layernorm", self, gain)?;
        same_dtype("layernorm", self, bias)?;
        let d = match self.shape().last() {
            Some(&d) if d > 0 => d,
            _ => return Err(TensorError::shape("layernorm", self.shape(), gain.shape())),
        };
        if gain.shape() != [d] || bias.shape() != [d] {
            return Err(TensorError::shape("layernorm", self.shape(), gain.shape()));
        }
        if !(eps > 0.0) {
            return Err(TensorError::contract("layernorm", format!("eps must be positive, got {eps}")));
        }
        let rows = self.numel() / d;
        Ok(with_dtype!(self.dtype(), T, {
            let (xhat, rstd) = {
                let sx = self.storage();
                let x = T::slice(&sx);
                let inv_d = T::of(1.0 / d as f64);
                let mut xhat = vec![T::zero(); x.len()];
                let mut rstd = vec![T::zero(); rows];
                for r in 0..rows {
                    let row = &x[r * d..(r + 1) * d];
                    let mean = row.iter().fold(T::zero(), |a, &v| a + v) * inv_d;
                    let var = row.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) * inv_d;
                    let rs = T::one() / (var + T::of(eps)).sqrt();
                    rstd[r] = rs;
                    for (o, &v) in xhat[r * d..(r + 1) * d].iter_mut().zip(row) {
                        *o = (v - mean) * rs;
                    }
                }
                (xhat, rstd)
            };
            let out: Vec<T> = {
                let (sg, sb) = (gain.storage(), bias.storage());
                let (gv, bv) = (T::slice(&sg), T::slice(&sb));
                xhat.chunks_exact(d)
                    .flat_map(|row| row.iter().zip(gv).zip(bv).map(|((&h, &g), &b)| h * g + b))
                    .collect()
            };
            let gain_c = gain.clone();
            Tensor::from_op(
                T::wrap(out),
                self.shape().to_vec(),
                vec![self.clone(), gain.clone(), bias.clone()],
                move |g| {
                    let g = T::slice(g);
                    let sg = gain_c.storage();
                    let gv = T::slice(&sg);
                    let inv_d = T::of(1.0 / d as f64);
                    let mut gx = vec![T::zero(); rows * d];
                    let mut ggain = vec![T::zero(); d];
                    let mut gbias = vec![T::zero(); d];
                    let mut dxhat = vec![T::zero(); d];
                    for r in 0..rows {
                        let gr = &g[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for j in 0..d {
                            ggain[j] += gr[j] * hr[j];
                            gbias[j] += gr[j];
                            dxhat[j] = gr[j] * gv[j];
                            s1 += dxhat[j];
                            s2 += dxhat[j] * hr[j];
                        }
                        let (m1, m2) = (s1 * inv_d, s2 * inv_d);
                        for j in 0..d {
                            gx[r * d + j] = rstd[r] * (dxhat[j] - m1 - hr[j] * m2);
                        }
                    }
                    vec![Some(T::wrap(gx)), Some(T::wrap(ggain)), Some(T::wrap(gbias))]
                },
            )
        }))
    }

    /// Mean token cross-entropy of `[n, V]` logits against integer targets.
    pub fn cross_entropy(&self, targets: &[usize]) -> Result<Tensor> {
        let (n, v) = super::matrix_dims("cross_entropy", self)?;
        if targets.len() != n || n == 0 {
            return Err(TensorError::shape("cross_entropy", self.shape(), &[targets.len()]));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(TensorError::contract(
                "cross_entropy",
                format!("target {bad} out of range for vocabulary {v}"),
            ));
        }
        let targets = targets.to_vec();
        Ok(with_dtype!(self.dtype(), T, {
            let probs = softmax_rows::<T>(T::slice(&self.storage()), None, v)
                .expect("unmasked rows always have a finite maximum");
            let mut total = T::zero();
            for (r, &t) in targets.iter().enumerate() {
                total -= probs[r * v + t].ln();
            }
            let loss = total / T::of(n as f64);
            Tensor::from_op(T::wrap(vec![loss]), vec![], vec![self.clone()], move |g| {
                let scale = T::slice(g)[0] / T::of(n as f64);
                let mut gx = probs.clone();
                for (r, &t) in targets.iter().enumerate() {
                    gx[r * v + t] -= T::one();
                }
                gx.iter_mut().for_each(|x| *x *= scale);
                vec![Some(T::wrap(gx))]
            })
        }))
    }

    /// Causal multi-head attention core on `[batch·len, d]` inputs:
    /// for each sequence and head `z`, `softmax(q_z k_zᵀ/√d_head + causal) v_z`,
    /// with heads written back side by side.
    pub fn causal_attention(q: &Tensor, k: &Tensor, v: &Tensor, batch: usize, heads: usize) -> Result<Tensor> {
        same_dtype("causal_attention", q, k)?;
        same_dtype("causal_attention", q, v)?;
        if q.shape() != k.shape() || q.shape() != v.shape() {
            return Err(TensorError::shape("causal_attention", q.shape(), k.shape()));
        }
        let (rows, d) = super::matrix_dims("causal_attention", q)?;
        if batch == 0 || heads == 0 || rows % batch != 0 || d % heads != 0 {
            return Err(TensorError::contract(
                "causal_attention",
                format!("{rows}x{d} input does not split into {batch} sequences and {heads} heads"),
            ));
        }
        let len = rows / batch;
        let dh = d / heads;
        let keep = tracks(&[q, k, v]);
        Ok(with_dtype!(q.dtype(), T, {
            let scale = T::of(1.0 / (dh as f64).sqrt());
            let mut out = vec![T::zero(); rows * d];
            // probabilities per (batch, head), lower triangle stored densely
            let mut saved_p: Vec<T> = if keep { vec![T::zero(); batch * heads * len * len] } else { vec![] };
            {
                let (sq, sk, sv) = (q.storage(), k.storage(), v.storage());
                let (qv, kv, vv) = (T::slice(&sq), T::slice(&sk), T::slice(&sv));
                let mut p = vec![T::zero(); len];
                for b in 0..batch {
                    for z in 0..heads {
                        let col = z * dh;
                        for i in 0..len {
                            let qi = &qv[(b * len + i) * d + col..][..dh];
                            let mut mx = T::neg_infinity();
                            for j in 0..=i {
                                let kj = &kv[(b * len + j) * d + col..][..dh];
                                let s = qi.iter().zip(kj).fold(T::zero(), |a, (&x, &y)| a + x * y) * scale;
                                p[j] = s;
                                mx = mx.max(s);
                            }
                            let mut total = T::zero();
                            for pj in p.iter_mut().take(i + 1) {
                                *pj = (*pj - mx).exp();
                                total += *pj;
                            }
                            let o = &mut out[(b * len + i) * d + col..][..dh];
                            for j in 0..=i {
                                let pj = p[j] / total;
                                p[j] = pj;
                                let vj = &vv[(b * len + j) * d + col..][..dh];
                                for (oo, &x) in o.iter_mut().zip(vj) {
                                    *oo += pj * x;
                                }
                            }
                            if keep {
                                let base = ((b * heads + z) * len + i) * len;
                                saved_p[base..base + i + 1].copy_from_slice(&p[..=i]);
                            }
                        }
                    }
                }
            }
            let (qc, kc, vc) = (q.clone(), k.clone(), v.clone());
            Tensor::from_op(
                T::wrap(out),
                vec![rows, d],
                vec![q.clone(), k.clone(), v.clone()],
                move |g| {
                    let g = T::slice(g);
                    let (sq, sk, sv) = (qc.storage(), kc.storage(), vc.storage());
                    let (qv, kv, vv) = (T::slice(&sq), T::slice(&sk), T::slice(&sv));
                    let mut gq = vec![T::zero(); rows * d];
                    let mut gk = vec![T::zero(); rows * d];
                    let mut gv = vec![T::zero(); rows * d];
                    let mut dp = vec![T::zero(); len];
                    for b in 0..batch {
                        for z in 0..heads {
                            let col = z * dh;
                            for i in 0..len {
                                let base = ((b * heads + z) * len + i) * len;
                                let p = &saved_p[base..base + i + 1];
                                let gi = &g[(b * len + i) * d + col..][..dh];
                                let mut dot = T::zero();
                                for j in 0..=i {
                                    let vj = &vv[(b * len + j) * d + col..][..dh];
                                    dp[j] = gi.iter().zip(vj).fold(T::zero(), |a, (&x, &y)| a + x * y);
                                    dot += dp[j] * p[j];
                                    let gvj = &mut gv[(b * len + j) * d + col..][..dh];
                                    for (o, &x) in gvj.iter_mut().zip(gi) {
                                        *o += p[j] * x;
                                    }
                                }
                                for j in 0..=i {
                                    let ds = p[j] * (dp[j] - dot) * scale;
                                    let qi = (b * len + i) * d + col;
                                    let kj = (b * len + j) * d + col;
                                    for t in 0..dh {
                                        gq[qi + t] += ds * kv[kj + t];
                                        gk[kj + t] += ds * qv[qi + t];
                                    }
                                }
                            }
                        }
                    }
                    vec![Some(T::wrap(gq)), Some(T::wrap(gk)), Some(T::wrap(gv))]
                },
            )
        }))
    }
}
