//! Optimization: AdamW, the warmup/cosine schedule, batching and the
//! two-phase procedure that turns a trained vanilla model into a MoM.

use std::io::Write;

use mom_tensor::{no_grad, DType, Rng, Storage, Tensor};

use crate::assembly::MomChunk;
use crate::io::Corpus;
use crate::model::{Block, ModelSpec, MomModel, VanillaLayer};
use crate::modules::{FfnModule, MhaModule, ModulePool};
use crate::config::PlanBlock;
use crate::{MomError, Result};

/// Fraction of the peak rate that the cosine decay ends at.
pub const MIN_LR_RATIO: f64 = 0.1;

const DATA_STREAM: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub peak_lr: f64,
    pub warmup_ratio: f64,
    pub total_steps: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    pub seed: u64,
    pub dtype: DType,
    pub grad_clip: Option<f64>,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Validation cadence in steps; the last step is always evaluated.
    pub eval_every: usize,
    /// Cap on validation windows per evaluation (`None` = all).
    pub eval_windows: Option<usize>,
    pub checkpoint_every: usize,
    /// Keep every module in a chunk's pool identical (the MoM-same ablation).
    pub tie_pool_modules: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            peak_lr: 1e-3,
            warmup_ratio: 0.1,
            total_steps: 1000,
            batch_size: 8,
            seq_len: 32,
            seed: 0,
            dtype: DType::F32,
            grad_clip: Some(1.0),
            weight_decay: 0.1,
            beta1: 0.9,
            beta2: 0.95,
            adam_eps: 1e-8,
            eval_every: 250,
            eval_windows: None,
            checkpoint_every: 0,
            tie_pool_modules: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return Err(MomError::config(format!("peak_lr must be positive, got {}", self.peak_lr)));
        }
        if !(0.0..=1.0).contains(&self.warmup_ratio) {
            return Err(MomError::config(format!("warmup_ratio must be in [0, 1], got {}", self.warmup_ratio)));
        }
        if self.batch_size == 0 || self.seq_len == 0 {
            return Err(MomError::config("batch_size and seq_len must be at least 1"));
        }
        if self.grad_clip.is_some_and(|c| c <= 0.0) {
            return Err(MomError::config("grad_clip must be positive"));
        }
        Ok(())
    }

    fn warmup_steps(&self) -> usize {
        (self.warmup_ratio * self.total_steps as f64).round() as usize
    }
}

/// Learning rate for update `step` (1-based; step 0 is the value before any update).
pub fn lr_at(step: usize, cfg: &TrainConfig) -> Result<f64> {
    let total = cfg.total_steps;
    if step > total {
        return Err(MomError::contract(format!("step {step} beyond schedule of {total} steps")));
    }
    let warm = cfg.warmup_steps();
    let peak = cfg.peak_lr;
    if step < warm {
        return Ok(peak * step as f64 / warm as f64);
    }
    let progress = if total == warm {
        1.0
    } else {
        (step - warm) as f64 / (total - warm) as f64
    };
    let floor = MIN_LR_RATIO * peak;
    Ok(floor + 0.5 * (peak - floor) * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// AdamW with decoupled weight decay on matrices only. Moments are kept in
/// f64 regardless of parameter precision.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(cfg: &TrainConfig) -> Self {
        AdamW {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// One update of every trainable parameter that has a gradient. A
    /// non-finite gradient aborts before anything is modified.
    pub fn step(&mut self, params: &[(String, Tensor)], lr: f64, step: usize) -> Result<()> {
        let grads: Vec<Option<Vec<f64>>> = params
            .iter()
            .map(|(_, p)| if p.requires_grad() { p.grad_f64() } else { None })
            .collect();
        for ((name, _), g) in params.iter().zip(&grads) {
            if g.as_ref().is_some_and(|g| g.iter().any(|v| !v.is_finite())) {
                return Err(MomError::NonFiniteGradient {
                    name: name.clone(),
                    step,
                });
            }
        }
        if self.m.len() != params.len() {
            self.m = params.iter().map(|(_, p)| vec![0.0; p.numel()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, ((_, p), g)) in params.iter().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            let decay = if p.rank() >= 2 { self.weight_decay } else { 0.0 };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let mut w = p.to_vec_f64();
            for j in 0..w.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                w[j] *= 1.0 - lr * decay;
                w[j] -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
            p.assign(&Storage::from_f64(&w, p.dtype()))?;
        }
        Ok(())
    }
}

/// Global L2 norm of all gradients.
pub fn grad_norm(params: &[(String, Tensor)]) -> f64 {
    params
        .iter()
        .filter_map(|(_, p)| p.grad_f64())
        .flatten()
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt()
}

/// Rescales gradients so their global norm is at most `max_norm`; returns the norm before clipping.
pub fn clip_grad_norm(params: &[(String, Tensor)], max_norm: f64) -> f64 {
    let norm = grad_norm(params);
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / norm;
        for (_, p) in params {
            if let Some(g) = p.grad_f64() {
                let scaled: Vec<f64> = g.iter().map(|v| v * s).collect();
                p.set_grad(Some(Storage::from_f64(&scaled, p.dtype())));
            }
        }
    }
    norm
}

/// Epoch-shuffled fixed-length training windows.
#[derive(Debug, Clone)]
pub struct Batcher {
    starts: Vec<usize>,
    order: Vec<usize>,
    cursor: usize,
    pub epoch: usize,
    rng: Rng,
}

impl Batcher {
    pub fn new(corpus: &Corpus, seed: u64) -> Result<Batcher> {
        let starts = corpus.train_windows();
        if starts.is_empty() {
            return Err(MomError::Data("corpus has no training windows".into()));
        }
        Ok(Batcher {
            order: Vec::new(),
            starts,
            cursor: 0,
            epoch: 0,
            rng: Rng::new(seed ^ DATA_STREAM),
        })
    }

    /// `batch` windows as flat `(inputs, targets)`, sequence after sequence.
    pub fn next_batch(&mut self, corpus: &Corpus, batch: usize) -> (Vec<usize>, Vec<usize>) {
        let mut inputs = Vec::with_capacity(batch * corpus.seq_len);
        let mut targets = Vec::with_capacity(batch * corpus.seq_len);
        for _ in 0..batch {
            if self.cursor == self.order.len() {
                self.order = self.starts.clone();
                self.rng.shuffle(&mut self.order);
                self.cursor = 0;
                self.epoch += 1;
            }
            let (x, y) = corpus.window(self.order[self.cursor]);
            self.cursor += 1;
            inputs.extend(x);
            targets.extend(y);
        }
        (inputs, targets)
    }
}

/// Mean validation cross-entropy (nats per token) without recording gradients.
pub fn evaluate(model: &MomModel, corpus: &Corpus, batch: usize, max_windows: Option<usize>) -> Result<f64> {
    let mut windows = corpus.val_windows();
    if let Some(cap) = max_windows {
        windows.truncate(cap.max(1));
    }
    if windows.is_empty() {
        return Err(MomError::Data("corpus has no validation windows".into()));
    }
    no_grad(|| {
        let mut total = 0.0;
        for group in windows.chunks(batch.max(1)) {
            let mut inputs = Vec::new();
            let mut targets = Vec::new();
            for &w in group {
                let (x, y) = corpus.window(w);
                inputs.extend(x);
                targets.extend(y);
            }
            let (loss, _) = model.loss(&inputs, &targets, group.len())?;
            total += loss.item() * group.len() as f64;
        }
        Ok(total / windows.len() as f64)
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub phase: u8,
    pub loss: f64,
    pub lr: f64,
    pub val_loss: Option<f64>,
}

impl StepRecord {
    /// `step=<n> phase=<p> loss=<f> lr=<f> val_loss=<f or ->`
    pub fn line(&self) -> String {
        let val = self.val_loss.map_or_else(|| "-".to_string(), |v| format!("{v:.6}"));
        format!(
            "step={} phase={} loss={:.6} lr={:.8} val_loss={val}",
            self.step, self.phase, self.loss, self.lr
        )
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub records: Vec<StepRecord>,
}

impl TrainLog {
    pub fn final_val_loss(&self) -> Option<f64> {
        self.records.iter().rev().find_map(|r| r.val_loss)
    }
}

pub type CheckpointHook<'a> = dyn FnMut(&MomModel, usize) -> Result<()> + 'a;

/// Runs `cfg.total_steps` AdamW updates on `model` with fresh optimizer
/// moments and a fresh schedule, writing one metrics line per step to `log`.
pub fn train_phase(
    model: &MomModel,
    corpus: &Corpus,
    cfg: &TrainConfig,
    phase: u8,
    log: &mut dyn Write,
    mut checkpoint: Option<&mut CheckpointHook<'_>>,
) -> Result<TrainLog> {
    cfg.validate()?;
    if corpus.seq_len != cfg.seq_len {
        return Err(MomError::config(format!(
            "corpus windows are {} tokens but seq_len is {}",
            corpus.seq_len, cfg.seq_len
        )));
    }
    if cfg.seq_len > model.config().max_len {
        return Err(MomError::config(format!(
            "seq_len {} exceeds max_len {}",
            cfg.seq_len,
            model.config().max_len
        )));
    }
    if model.spec.dtype != cfg.dtype {
        return Err(MomError::config(format!(
            "model is {} but training asks for {}",
            model.spec.dtype, cfg.dtype
        )));
    }
    let params = model.named_params();
    let mut opt = AdamW::new(cfg);
    let mut batcher = Batcher::new(corpus, cfg.seed)?;
    let mut out = TrainLog::default();
    if cfg.tie_pool_modules && cfg.total_steps > 0 {
        tie_pool_modules(model)?;
    }
    for step in 1..=cfg.total_steps {
        let (inputs, targets) = batcher.next_batch(corpus, cfg.batch_size);
        for (_, p) in &params {
            p.zero_grad();
        }
        let (loss, _) = model.loss(&inputs, &targets, cfg.batch_size)?;
        let loss_value = loss.item();
        loss.backward()?;
        drop(loss);
        if let Some(max) = cfg.grad_clip {
            clip_grad_norm(&params, max);
        }
        let lr = lr_at(step, cfg)?;
        opt.step(&params, lr, step)?;
        if cfg.tie_pool_modules {
            tie_pool_modules(model)?;
        }
        let val_loss = if step == cfg.total_steps || (cfg.eval_every > 0 && step % cfg.eval_every == 0) {
            Some(evaluate(model, corpus, cfg.batch_size, cfg.eval_windows)?)
        } else {
            None
        };
        let rec = StepRecord {
            step,
            phase,
            loss: loss_value,
            lr,
            val_loss,
        };
        writeln!(log, "{}", rec.line()).map_err(|e| MomError::io("<metrics>", e))?;
        out.records.push(rec);
        if let Some(hook) = checkpoint.as_deref_mut() {
            if cfg.checkpoint_every > 0 && (step % cfg.checkpoint_every == 0 || step == cfg.total_steps) {
                hook(model, step)?;
            }
        }
    }
    for (_, p) in &params {
        p.zero_grad();
    }
    Ok(out)
}

/// Sets every MHA module of each chunk pool to the elementwise mean of the
/// pool, and likewise for FFN modules.
pub fn tie_pool_modules(model: &MomModel) -> Result<()> {
    fn tie(groups: Vec<Vec<Tensor>>) -> Result<()> {
        let Some(first) = groups.first() else { return Ok(()) };
        for slot in 0..first.len() {
            let n = groups.len() as f64;
            let mut mean = vec![0.0; first[slot].numel()];
            for g in &groups {
                for (acc, v) in mean.iter_mut().zip(g[slot].to_vec_f64()) {
                    *acc += v / n;
                }
            }
            for g in &groups {
                g[slot].assign(&Storage::from_f64(&mean, g[slot].dtype()))?;
            }
        }
        Ok(())
    }
    for chunk in model.chunks() {
        tie(chunk.pool.attn.iter().map(|m| m.params("").into_iter().map(|(_, t)| t).collect()).collect())?;
        tie(chunk.pool.ffn.iter().map(|m| m.params("").into_iter().map(|(_, t)| t).collect()).collect())?;
    }
    Ok(())
}

/// Builds the phase-2 model: the trained vanilla layers are copied, in order,
/// into the positions and pools of `target.plan`; routers are freshly drawn
/// from `seed`. Under a MoE policy each layer's FFN is replicated into its
/// experts.
pub fn decompose_vanilla(vanilla: &MomModel, target: ModelSpec, seed: u64) -> Result<MomModel> {
    let layers: Vec<&VanillaLayer> = vanilla
        .blocks
        .iter()
        .map(|b| match b {
            Block::Vanilla(l) => Ok(l),
            Block::Chunk(_) => Err(MomError::config("phase-2 initialization needs an all-vanilla model")),
        })
        .collect::<Result<_>>()?;
    if layers.len() != target.plan.layer_count() {
        return Err(MomError::config(format!(
            "vanilla model has {} layers but plan {} needs {}",
            layers.len(),
            target.plan,
            target.plan.layer_count()
        )));
    }
    if vanilla.spec.config != target.config {
        return Err(MomError::config("vanilla model dimensions differ from the target"));
    }
    if vanilla.spec.dtype != target.dtype {
        return Err(MomError::config(format!(
            "vanilla model is {} but the target is {}",
            vanilla.spec.dtype, target.dtype
        )));
    }
    let mut rng = Rng::new(seed);
    let mut router_rng = rng.fork();
    let experts = match target.policy {
        crate::assembly::Policy::Moe { experts } => experts,
        _ => 1,
    };
    let mut next = layers.into_iter();
    let mut blocks = Vec::with_capacity(target.plan.blocks.len());
    for block in &target.plan.blocks {
        match *block {
            PlanBlock::Vanilla => {
                let l = next.next().expect("layer count checked");
                blocks.push(Block::Vanilla(VanillaLayer {
                    attn: l.attn.deep_clone(),
                    ffn: l.ffn.deep_clone(),
                }));
            }
            PlanBlock::Chunk(n) => {
                let mut attn: Vec<MhaModule> = Vec::with_capacity(n);
                let mut ffn: Vec<FfnModule> = Vec::with_capacity(n * experts);
                for l in next.by_ref().take(n) {
                    attn.push(l.attn.deep_clone());
                    for _ in 0..experts {
                        ffn.push(l.ffn.deep_clone());
                    }
                }
                let pool = ModulePool {
                    attn,
                    ffn,
                    include_skip: target.mom.skip,
                };
                blocks.push(Block::Chunk(MomChunk::new(
                    pool,
                    target.policy.clone(),
                    target.mom,
                    target.router,
                    &mut router_rng,
                    target.dtype,
                )?));
            }
        }
    }
    Ok(MomModel {
        tok_emb: vanilla.tok_emb.deep_clone(),
        pos_emb: vanilla.pos_emb.deep_clone(),
        blocks,
        final_norm: vanilla.final_norm.deep_clone(),
        spec: target,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(total: usize) -> TrainConfig {
        TrainConfig {
            total_steps: total,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn schedule_endpoints() {
        let c = cfg(1000);
        assert_eq!(lr_at(0, &c).unwrap(), 0.0);
        assert!((lr_at(100, &c).unwrap() - 1e-3).abs() < 1e-15);
        assert!((lr_at(1000, &c).unwrap() - 1e-4).abs() < 1e-15);
        assert!(lr_at(1001, &c).is_err());
    }

    #[test]
    fn schedule_midpoint_of_decay() {
        let c = cfg(1000);
        // halfway through the cosine: floor + (peak - floor) / 2
        assert!((lr_at(550, &c).unwrap() - 5.5e-4).abs() < 1e-12);
    }

    #[test]
    fn tiny_schedules_stay_bounded() {
        for total in 0..12 {
            let c = cfg(total);
            for s in 0..=total {
                let lr = lr_at(s, &c).unwrap();
                assert!((0.0..=c.peak_lr + 1e-18).contains(&lr), "total {total} step {s} lr {lr}");
            }
        }
    }

    #[test]
    fn adamw_matches_scalar_reference() {
        let p = Tensor::from_f64(&[0.5, -0.25, 1.0, 2.0], &[2, 2], DType::F64).unwrap().into_param();
        let b = Tensor::from_f64(&[0.3], &[1], DType::F64).unwrap().into_param();
        let params = vec![("w".to_string(), p.clone()), ("b".to_string(), b.clone())];
        let mut opt = AdamW::new(&TrainConfig::default());
        let grads = [[0.1, -0.2, 0.3, 0.0], [-0.5, 0.5, 0.25, 1.0]];
        let (mut w, mut m, mut v) = (vec![0.5, -0.25, 1.0, 2.0], [0.0; 4], [0.0; 4]);
        let (mut wb, mut mb, mut vb) = (0.3, 0.0, 0.0);
        for (t, g) in grads.iter().enumerate() {
            p.set_grad(Some(Storage::from_f64(g, DType::F64)));
            b.set_grad(Some(Storage::from_f64(&[g[0]], DType::F64)));
            opt.step(&params, 0.01, t + 1).unwrap();
            let tt = (t + 1) as i32;
            for j in 0..4 {
                m[j] = 0.9 * m[j] + 0.1 * g[j];
                v[j] = 0.95 * v[j] + 0.05 * g[j] * g[j];
                let upd = (m[j] / (1.0 - 0.9f64.powi(tt))) / ((v[j] / (1.0 - 0.95f64.powi(tt))).sqrt() + 1e-8);
                w[j] = w[j] * (1.0 - 0.01 * 0.1) - 0.01 * upd;
            }
            mb = 0.9 * mb + 0.1 * g[0];
            vb = 0.95 * vb + 0.05 * g[0] * g[0];
            wb -= 0.01 * (mb / (1.0 - 0.9f64.powi(tt))) / ((vb / (1.0 - 0.95f64.powi(tt))).sqrt() + 1e-8);
        }
        for (a, e) in p.to_vec_f64().iter().zip(&w) {
            assert!((a - e).abs() < 1e-14);
        }
        assert!((b.item() - wb).abs() < 1e-14);
    }

    #[test]
    fn nan_gradient_aborts_untouched() {
        let p = Tensor::from_f64(&[1.0, 2.0], &[2], DType::F64).unwrap().into_param();
        p.set_grad(Some(Storage::from_f64(&[0.1, f64::NAN], DType::F64)));
        let params = vec![("p".to_string(), p.clone())];
        let err = AdamW::new(&TrainConfig::default()).step(&params, 0.1, 7).unwrap_err();
        assert!(matches!(err, MomError::NonFiniteGradient { step: 7, .. }));
        assert_eq!(p.to_vec_f64(), vec![1.0, 2.0]);
    }

    #[test]
    fn frozen_params_are_not_updated() {
        let p = Tensor::from_f64(&[1.0], &[1], DType::F64).unwrap();
        let params = vec![("p".to_string(), p.clone())];
        AdamW::new(&TrainConfig::default()).step(&params, 0.1, 1).unwrap();
        assert_eq!(p.item(), 1.0);
    }

    #[test]
    fn clipping_caps_global_norm() {
        let p = Tensor::from_f64(&[0.0, 0.0], &[2], DType::F64).unwrap().into_param();
        p.set_grad(Some(Storage::from_f64(&[3.0, 4.0], DType::F64)));
        let params = vec![("p".to_string(), p.clone())];
        assert_eq!(clip_grad_norm(&params, 1.0), 5.0);
        let g = p.grad_f64().unwrap();
        assert!((g[0] - 0.6).abs() < 1e-15 && (g[1] - 0.8).abs() < 1e-15);
    }
}
