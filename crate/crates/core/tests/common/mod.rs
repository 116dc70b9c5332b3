//! Helpers shared by the integration tests: random instances and
//! loop-based reference implementations that never touch the tensor ops.

#![allow(dead_code)]

use std::path::PathBuf;

use mom::config::ModelConfig;
use mom::model::{Block, MomModel};
use mom::modules::{FfnModule, MhaModule};
use mom_tensor::{Rng, Storage, Tensor};

pub fn corpus_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/corpus.txt")
}

pub fn cfg(vocab: usize, d: usize, heads: usize, d_ff: usize, max_len: usize) -> ModelConfig {
    ModelConfig {
        vocab,
        d_model: d,
        heads,
        d_ff,
        max_len,
        eps: 1e-5,
    }
}

/// Overwrites every parameter with `N(0, std)` noise (norm gains around 1)
/// so that tests do not lean on the zero biases of a fresh model.
pub fn randomize(params: &[(String, Tensor)], rng: &mut Rng, std: f64) {
    for (name, t) in params {
        let mean = if name.ends_with("norm.gain") { 1.0 } else { 0.0 };
        let v = rng.normal_vec(t.numel(), mean, std);
        t.assign(&Storage::from_f64(&v, t.dtype())).unwrap();
    }
}

pub fn tokens(rng: &mut Rng, n: usize, vocab: usize) -> Vec<usize> {
    (0..n).map(|_| rng.below(vocab)).collect()
}

pub fn random_input(rng: &mut Rng, rows: usize, d: usize, dtype: mom_tensor::DType) -> Tensor {
    Tensor::from_f64(&rng.normal_vec(rows * d, 0.0, 1.0), &[rows, d], dtype).unwrap()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn bits(t: &Tensor) -> Vec<u64> {
    t.to_vec_f64().iter().map(|v| v.to_bits()).collect()
}

// ---- reference kernels on row-major f64 buffers ----

pub fn mm(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for t in 0..k {
                s += a[i * k + t] * b[t * n + j];
            }
            c[i * n + j] = s;
        }
    }
    c
}

pub fn add_row(x: &mut [f64], bias: &[f64]) {
    let d = bias.len();
    for (i, v) in x.iter_mut().enumerate() {
        *v += bias[i % d];
    }
}

pub fn layernorm(x: &[f64], d: usize, gain: &[f64], bias: &[f64], eps: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(d) {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + eps).sqrt();
        for j in 0..d {
            out.push((row[j] - mean) * inv * gain[j] + bias[j]);
        }
    }
    out
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Causal multi-head attention over `batch` sequences of `len` rows.
pub fn attention(q: &[f64], k: &[f64], v: &[f64], batch: usize, len: usize, d: usize, heads: usize) -> Vec<f64> {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; batch * len * d];
    for b in 0..batch {
        for z in 0..heads {
            for i in 0..len {
                let qi = (b * len + i) * d + z * dh;
                let scores: Vec<f64> = (0..=i)
                    .map(|j| {
                        let kj = (b * len + j) * d + z * dh;
                        (0..dh).map(|c| q[qi + c] * k[kj + c]).sum::<f64>() * scale
                    })
                    .collect();
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                let total: f64 = e.iter().sum();
                for (j, w) in e.iter().enumerate() {
                    let vj = (b * len + j) * d + z * dh;
                    for c in 0..dh {
                        out[qi + c] += w / total * v[vj + c];
                    }
                }
            }
        }
    }
    out
}

pub fn vals(t: &Tensor) -> Vec<f64> {
    t.to_vec_f64()
}

/// Pre-normed Q, K, V of one module for rows `x`.
pub fn qkv(m: &MhaModule, x: &[f64], cfg: &ModelConfig) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let d = cfg.d_model;
    let n = x.len() / d;
    let h = layernorm(x, d, &vals(&m.norm.gain), &vals(&m.norm.bias), cfg.eps);
    let proj = |w: &Tensor, b: &Tensor| {
        let mut y = mm(&h, n, d, &vals(w), d);
        add_row(&mut y, &vals(b));
        y
    };
    (proj(&m.wq, &m.bq), proj(&m.wk, &m.bk), proj(&m.wv, &m.bv))
}

pub fn out_proj(m: &MhaModule, a: &[f64], d: usize) -> Vec<f64> {
    let mut y = mm(a, a.len() / d, d, &vals(&m.wo), d);
    add_row(&mut y, &vals(&m.bo));
    y
}

pub fn mha(m: &MhaModule, x: &[f64], batch: usize, cfg: &ModelConfig) -> Vec<f64> {
    let d = cfg.d_model;
    let (q, k, v) = qkv(m, x, cfg);
    let a = attention(&q, &k, &v, batch, x.len() / d / batch, d, cfg.heads);
    out_proj(m, &a, d)
}

pub fn ffn(m: &FfnModule, u: &[f64], cfg: &ModelConfig) -> Vec<f64> {
    let (d, f) = (cfg.d_model, cfg.d_ff);
    let n = u.len() / d;
    let h = layernorm(u, d, &vals(&m.norm.gain), &vals(&m.norm.bias), cfg.eps);
    let mut up = mm(&h, n, d, &vals(&m.w_up), f);
    add_row(&mut up, &vals(&m.b_up));
    let act: Vec<f64> = up.iter().map(|&v| gelu(v)).collect();
    let mut y = mm(&act, n, f, &vals(&m.w_down), d);
    add_row(&mut y, &vals(&m.b_down));
    y
}

pub fn residual(x: &mut [f64], y: &[f64]) {
    for (a, b) in x.iter_mut().zip(y) {
        *a += b;
    }
}

/// One pre-norm transformer layer.
pub fn layer(attn: &MhaModule, f: &FfnModule, x: &mut Vec<f64>, batch: usize, cfg: &ModelConfig) {
    let a = mha(attn, x, batch, cfg);
    residual(x, &a);
    let y = ffn(f, x, cfg);
    residual(x, &y);
}

pub fn embed(model: &MomModel, tokens: &[usize], batch: usize) -> Vec<f64> {
    let d = model.config().d_model;
    let len = tokens.len() / batch;
    let (te, pe) = (vals(&model.tok_emb), vals(&model.pos_emb));
    let mut x = Vec::with_capacity(tokens.len() * d);
    for (i, &t) in tokens.iter().enumerate() {
        let p = i % len;
        for j in 0..d {
            x.push(te[t * d + j] + pe[p * d + j]);
        }
    }
    x
}

pub fn head(model: &MomModel, x: &[f64]) -> Vec<f64> {
    let cfg = model.config();
    let d = cfg.d_model;
    let h = layernorm(x, d, &vals(&model.final_norm.gain), &vals(&model.final_norm.bias), cfg.eps);
    let e = vals(&model.tok_emb);
    let n = x.len() / d;
    let mut logits = vec![0.0; n * cfg.vocab];
    for i in 0..n {
        for v in 0..cfg.vocab {
            logits[i * cfg.vocab + v] = (0..d).map(|j| h[i * d + j] * e[v * d + j]).sum();
        }
    }
    logits
}

/// Reference forward for models whose blocks all run their layers in order:
/// vanilla layers, and chunks under the vanilla policy.
pub fn vanilla_stack_logits(model: &MomModel, tokens: &[usize], batch: usize) -> Vec<f64> {
    let cfg = model.config();
    let mut x = embed(model, tokens, batch);
    for b in &model.blocks {
        match b {
            Block::Vanilla(l) => layer(&l.attn, &l.ffn, &mut x, batch, cfg),
            Block::Chunk(c) => {
                for (a, f) in c.pool.attn.iter().zip(&c.pool.ffn) {
                    layer(a, f, &mut x, batch, cfg);
                }
            }
        }
    }
    head(model, &x)
}

/// Cho GRU step for one row, matching the router parameter packing
/// `wx = [W_r | W_z | W_h]`, `urz = [U_r | U_z]`, `b = [b_r | b_z | b_h]`.
pub fn gru_row(
    x: &[f64],
    s: &[f64],
    wx: &[f64],
    urz: &[f64],
    uh: &[f64],
    b: &[f64],
) -> Vec<f64> {
    let d = x.len();
    let xw = mm(x, 1, d, wx, 3 * d);
    let su = mm(s, 1, d, urz, 2 * d);
    let r: Vec<f64> = (0..d).map(|j| sigmoid(xw[j] + su[j] + b[j])).collect();
    let z: Vec<f64> = (0..d).map(|j| sigmoid(xw[d + j] + su[d + j] + b[d + j])).collect();
    let rs: Vec<f64> = (0..d).map(|j| r[j] * s[j]).collect();
    let rsu = mm(&rs, 1, d, uh, d);
    (0..d)
        .map(|j| {
            let cand = (xw[2 * d + j] + rsu[j] + b[2 * d + j]).tanh();
            (1.0 - z[j]) * s[j] + z[j] * cand
        })
        .collect()
}

/// Indices of the `k` largest values, ties to the lower index.
pub fn sort_top_k(v: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[b].partial_cmp(&v[a]).unwrap().then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}
