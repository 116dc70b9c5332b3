//! The atomic modules a chunk assembles from: multi-head attention, FFN and SKIP.
//!
//! Every MHA and FFN module carries its own pre-norm, so a module donated by
//! a vanilla layer keeps the exact normalization it was trained with.

use mom_tensor::{DType, Rng, Tensor};

use crate::config::ModelConfig;
use crate::{MomError, Result};

pub(crate) fn normal_param(rng: &mut Rng, shape: &[usize], std: f64, dtype: DType) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_f64(&rng.normal_vec(n, 0.0, std), shape, dtype)
        .expect("length matches shape")
        .into_param()
}

pub(crate) fn uniform_param(rng: &mut Rng, shape: &[usize], bound: f64, dtype: DType) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_f64(&rng.uniform_vec(n, -bound, bound), shape, dtype)
        .expect("length matches shape")
        .into_param()
}

pub(crate) fn const_param(shape: &[usize], value: f64, dtype: DType) -> Tensor {
    Tensor::full(shape, value, dtype).into_param()
}

/// Standard deviation of ordinary weights at initialization.
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: Tensor,
    pub bias: Tensor,
}

impl LayerNorm {
    pub fn new(d: usize, dtype: DType) -> Self {
        LayerNorm {
            gain: const_param(&[d], 1.0, dtype),
            bias: const_param(&[d], 0.0, dtype),
        }
    }

    pub fn forward(&self, x: &Tensor, eps: f64) -> Result<Tensor> {
        Ok(x.layernorm(&self.gain, &self.bias, eps)?)
    }

    pub fn params(&self, prefix: &str) -> Vec<(String, Tensor)> {
        vec![
            (format!("{prefix}.gain"), self.gain.clone()),
            (format!("{prefix}.bias"), self.bias.clone()),
        ]
    }
}

/// Multi-head attention. Head `z` owns columns `z·d_head..(z+1)·d_head` of
/// the `d×d` Q/K/V projections and the matching rows of `W^O`.
#[derive(Debug, Clone)]
pub struct MhaModule {
    pub norm: LayerNorm,
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
}

impl MhaModule {
    /// GPT-2 style initialization; `out_std` scales the residual projection.
    pub fn init(cfg: &ModelConfig, rng: &mut Rng, out_std: f64, dtype: DType) -> Self {
        let d = cfg.d_model;
        MhaModule {
            norm: LayerNorm::new(d, dtype),
            wq: normal_param(rng, &[d, d], INIT_STD, dtype),
            bq: const_param(&[d], 0.0, dtype),
            wk: normal_param(rng, &[d, d], INIT_STD, dtype),
            bk: const_param(&[d], 0.0, dtype),
            wv: normal_param(rng, &[d, d], INIT_STD, dtype),
            bv: const_param(&[d], 0.0, dtype),
            wo: normal_param(rng, &[d, d], out_std, dtype),
            bo: const_param(&[d], 0.0, dtype),
        }
    }

    pub fn normalize(&self, x: &Tensor, cfg: &ModelConfig) -> Result<Tensor> {
        self.norm.forward(x, cfg.eps)
    }

    /// Q, K and V for already-normalized rows.
    pub fn project_qkv(&self, x_norm: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
        Ok((
            x_norm.matmul(&self.wq)?.add_bias(&self.bq)?,
            x_norm.matmul(&self.wk)?.add_bias(&self.bk)?,
            x_norm.matmul(&self.wv)?.add_bias(&self.bv)?,
        ))
    }

    /// Concatenated head outputs through `W^O`.
    pub fn project_out(&self, heads: &Tensor) -> Result<Tensor> {
        Ok(heads.matmul(&self.wo)?.add_bias(&self.bo)?)
    }

    /// Causal self-attention over `batch` sequences stacked row-wise in
    /// `x_norm`; the caller applies the pre-norm.
    pub fn forward(&self, x_norm: &Tensor, batch: usize, cfg: &ModelConfig) -> Result<Tensor> {
        check_rows(x_norm, batch, cfg)?;
        let (q, k, v) = self.project_qkv(x_norm)?;
        let a = Tensor::causal_attention(&q, &k, &v, batch, cfg.heads)?;
        self.project_out(&a)
    }

    pub fn params(&self, prefix: &str) -> Vec<(String, Tensor)> {
        let mut out = self.norm.params(&format!("{prefix}.norm"));
        for (name, t) in [
            ("wq", &self.wq),
            ("bq", &self.bq),
            ("wk", &self.wk),
            ("bk", &self.bk),
            ("wv", &self.wv),
            ("bv", &self.bv),
            ("wo", &self.wo),
            ("bo", &self.bo),
        ] {
            out.push((format!("{prefix}.{name}"), t.clone()));
        }
        out
    }
}

/// Position-wise feed-forward block `down(gelu(up(u)))`.
#[derive(Debug, Clone)]
pub struct FfnModule {
    pub norm: LayerNorm,
    pub w_up: Tensor,
    pub b_up: Tensor,
    pub w_down: Tensor,
    pub b_down: Tensor,
}

impl FfnModule {
    pub fn init(cfg: &ModelConfig, rng: &mut Rng, out_std: f64, dtype: DType) -> Self {
        let (d, f) = (cfg.d_model, cfg.d_ff);
        FfnModule {
            norm: LayerNorm::new(d, dtype),
            w_up: normal_param(rng, &[d, f], INIT_STD, dtype),
            b_up: const_param(&[f], 0.0, dtype),
            w_down: normal_param(rng, &[f, d], out_std, dtype),
            b_down: const_param(&[d], 0.0, dtype),
        }
    }

    pub fn normalize(&self, u: &Tensor, cfg: &ModelConfig) -> Result<Tensor> {
        self.norm.forward(u, cfg.eps)
    }

    pub fn forward(&self, u_norm: &Tensor) -> Result<Tensor> {
        let hidden = u_norm.matmul(&self.w_up)?.add_bias(&self.b_up)?.gelu();
        Ok(hidden.matmul(&self.w_down)?.add_bias(&self.b_down)?)
    }

    pub fn params(&self, prefix: &str) -> Vec<(String, Tensor)> {
        let mut out = self.norm.params(&format!("{prefix}.norm"));
        for (name, t) in [
            ("w_up", &self.w_up),
            ("b_up", &self.b_up),
            ("w_down", &self.w_down),
            ("b_down", &self.b_down),
        ] {
            out.push((format!("{prefix}.{name}"), t.clone()));
        }
        out
    }
}

/// The SKIP module: identity on the hidden state.
pub fn skip_forward(x: &Tensor) -> Tensor {
    x.clone()
}

/// Modules available to one chunk. When `include_skip` is set, routers get
/// one extra choice whose index equals the pool size.
#[derive(Debug, Clone)]
pub struct ModulePool {
    pub attn: Vec<MhaModule>,
    pub ffn: Vec<FfnModule>,
    pub include_skip: bool,
}

impl ModulePool {
    pub fn validate(&self) -> Result<()> {
        if self.attn.is_empty() || self.ffn.is_empty() {
            return Err(MomError::config("a module pool needs at least one MHA and one FFN module"));
        }
        Ok(())
    }

    /// Router output width for attention (`N_A` plus SKIP if present).
    pub fn attn_choices(&self) -> usize {
        self.attn.len() + usize::from(self.include_skip)
    }

    pub fn ffn_choices(&self) -> usize {
        self.ffn.len() + usize::from(self.include_skip)
    }

    pub fn params(&self, prefix: &str) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (i, m) in self.attn.iter().enumerate() {
            out.extend(m.params(&format!("{prefix}.attn.{i}")));
        }
        for (i, m) in self.ffn.iter().enumerate() {
            out.extend(m.params(&format!("{prefix}.ffn.{i}")));
        }
        out
    }
}

pub(crate) fn check_rows(x: &Tensor, batch: usize, cfg: &ModelConfig) -> Result<usize> {
    let rows = x.shape().first().copied().unwrap_or(0);
    if batch == 0 || rows % batch != 0 {
        return Err(MomError::contract(format!(
            "{rows} rows do not split into {batch} sequences"
        )));
    }
    let len = rows / batch;
    if len > cfg.max_len {
        return Err(MomError::contract(format!(
            "sequence length {len} exceeds the maximum {}",
            cfg.max_len
        )));
    }
    Ok(len)
}

impl LayerNorm {
    /// Copy with fresh storage, so training the copy leaves `self` untouched.
    pub fn deep_clone(&self) -> Self {
        LayerNorm {
            gain: self.gain.deep_clone(),
            bias: self.bias.deep_clone(),
        }
    }
}

impl MhaModule {
    pub fn deep_clone(&self) -> Self {
        MhaModule {
            norm: self.norm.deep_clone(),
            wq: self.wq.deep_clone(),
            bq: self.bq.deep_clone(),
            wk: self.wk.deep_clone(),
            bk: self.bk.deep_clone(),
            wv: self.wv.deep_clone(),
            bv: self.bv.deep_clone(),
            wo: self.wo.deep_clone(),
            bo: self.bo.deep_clone(),
        }
    }
}

impl FfnModule {
    pub fn deep_clone(&self) -> Self {
        FfnModule {
            norm: self.norm.deep_clone(),
            w_up: self.w_up.deep_clone(),
            b_up: self.b_up.deep_clone(),
            w_down: self.w_down.deep_clone(),
            b_down: self.b_down.deep_clone(),
        }
    }
}
