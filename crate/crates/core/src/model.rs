//! The end-to-end language model: embeddings, the chunk plan, tied LM head.

use mom_tensor::{DType, Rng, Tensor};

use crate::assembly::{run_chunk, AssemblyTrace, MomChunk, Policy};
use crate::config::{ChunkPlan, ModelConfig, MomConfig, PlanBlock};
use crate::modules::{check_rows, normal_param, FfnModule, LayerNorm, MhaModule, ModulePool, INIT_STD};
use crate::routing::RouterKind;
use crate::{MomError, Result};

/// Everything needed to rebuild a model's structure.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub config: ModelConfig,
    pub plan: ChunkPlan,
    pub mom: MomConfig,
    /// Applied to every chunk in the plan.
    pub policy: Policy,
    pub router: RouterKind,
    pub dtype: DType,
}

impl ModelSpec {
    /// A routed model over `plan`.
    pub fn mom(config: ModelConfig, plan: ChunkPlan, mom: MomConfig, dtype: DType) -> Self {
        ModelSpec {
            config,
            plan,
            mom,
            policy: Policy::Mom,
            router: RouterKind::Gru,
            dtype,
        }
    }

    /// A plain pre-norm transformer with `layers` layers.
    pub fn vanilla(config: ModelConfig, layers: usize, dtype: DType) -> Self {
        ModelSpec {
            config,
            plan: ChunkPlan::all_vanilla(layers),
            mom: MomConfig::new(1, 1, false),
            policy: Policy::Vanilla,
            router: RouterKind::Gru,
            dtype,
        }
    }
}

/// A fixed transformer layer outside any chunk.
#[derive(Debug, Clone)]
pub struct VanillaLayer {
    pub attn: MhaModule,
    pub ffn: FfnModule,
}

impl VanillaLayer {
    pub fn forward(&self, x: &Tensor, batch: usize, cfg: &ModelConfig) -> Result<Tensor> {
        let u = x.add(&self.attn.forward(&self.attn.normalize(x, cfg)?, batch, cfg)?)?;
        Ok(u.add(&self.ffn.forward(&self.ffn.normalize(&u, cfg)?)?)?)
    }
}

#[derive(Debug, Clone)]
pub enum Block {
    Vanilla(VanillaLayer),
    Chunk(MomChunk),
}

#[derive(Debug, Clone)]
pub struct MomModel {
    pub spec: ModelSpec,
    pub tok_emb: Tensor,
    pub pos_emb: Tensor,
    pub blocks: Vec<Block>,
    pub final_norm: LayerNorm,
}

impl MomModel {
    /// Seeded GPT-2 style initialization. Module weights are drawn layer by
    /// layer from one stream and routers from a stream forked off it, so a
    /// routed model and a vanilla model of equal depth share module weights
    /// when built from the same seed.
    pub fn new(spec: ModelSpec, seed: u64) -> Result<MomModel> {
        spec.config.validate()?;
        let cfg = spec.config;
        let dtype = spec.dtype;
        let (v, d) = (cfg.vocab, cfg.d_model);
        let mut rng = Rng::new(seed);
        let mut router_rng = rng.fork();
        let out_std = INIT_STD / (2.0 * spec.plan.layer_count().max(1) as f64).sqrt();
        let tok_emb = normal_param(&mut rng, &[v, d], INIT_STD, dtype);
        let pos_emb = normal_param(&mut rng, &[cfg.max_len, d], INIT_STD, dtype);
        let mut blocks = Vec::with_capacity(spec.plan.blocks.len());
        for block in &spec.plan.blocks {
            blocks.push(match *block {
                PlanBlock::Vanilla => Block::Vanilla(VanillaLayer {
                    attn: MhaModule::init(&cfg, &mut rng, out_std, dtype),
                    ffn: FfnModule::init(&cfg, &mut rng, out_std, dtype),
                }),
                PlanBlock::Chunk(n) => {
                    let experts = match spec.policy {
                        Policy::Moe { experts } => experts,
                        _ => 1,
                    };
                    let mut attn = Vec::with_capacity(n);
                    let mut ffn = Vec::with_capacity(n * experts);
                    for _ in 0..n {
                        attn.push(MhaModule::init(&cfg, &mut rng, out_std, dtype));
                        for _ in 0..experts {
                            ffn.push(FfnModule::init(&cfg, &mut rng, out_std, dtype));
                        }
                    }
                    let pool = ModulePool {
                        attn,
                        ffn,
                        include_skip: spec.mom.skip,
                    };
                    Block::Chunk(MomChunk::new(
                        pool,
                        spec.policy.clone(),
                        spec.mom,
                        spec.router,
                        &mut router_rng,
                        dtype,
                    )?)
                }
            });
        }
        Ok(MomModel {
            tok_emb,
            pos_emb,
            blocks,
            final_norm: LayerNorm::new(d, dtype),
            spec,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.spec.config
    }

    pub fn chunks(&self) -> impl Iterator<Item = &MomChunk> {
        self.blocks.iter().filter_map(|b| match b {
            Block::Chunk(c) => Some(c),
            Block::Vanilla(_) => None,
        })
    }

    /// Logits `[tokens, V]` for `batch` equal-length sequences laid end to end.
    pub fn forward(&self, tokens: &[usize], batch: usize) -> Result<(Tensor, AssemblyTrace)> {
        self.run(tokens, batch, None)
    }

    /// Forward pass that reuses the selections recorded in `trace`.
    pub fn forward_replay(&self, tokens: &[usize], batch: usize, trace: &AssemblyTrace) -> Result<Tensor> {
        Ok(self.run(tokens, batch, Some(trace))?.0)
    }

    /// Mean next-token cross-entropy; `targets` align with `tokens`.
    pub fn loss(&self, tokens: &[usize], targets: &[usize], batch: usize) -> Result<(Tensor, AssemblyTrace)> {
        let (logits, trace) = self.forward(tokens, batch)?;
        Ok((lm_loss(&logits, targets)?, trace))
    }

    fn run(&self, tokens: &[usize], batch: usize, forced: Option<&AssemblyTrace>) -> Result<(Tensor, AssemblyTrace)> {
        let cfg = &self.spec.config;
        if tokens.is_empty() {
            return Err(MomError::contract("empty token sequence"));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= cfg.vocab) {
            return Err(MomError::contract(format!("token id {bad} outside vocabulary of {}", cfg.vocab)));
        }
        let probe = Tensor::zeros(&[tokens.len(), 0], self.spec.dtype);
        let seq_len = check_rows(&probe, batch, cfg)?;
        let positions: Vec<usize> = (0..tokens.len()).map(|i| i % seq_len).collect();
        let mut x = self
            .tok_emb
            .index_select_rows(tokens)?
            .add(&self.pos_emb.index_select_rows(&positions)?)?;
        let mut trace = AssemblyTrace {
            batch,
            seq_len,
            rounds: Vec::new(),
        };
        let mut chunk_index = 0;
        let mut cursor = 0;
        for block in &self.blocks {
            match block {
                Block::Vanilla(layer) => x = layer.forward(&x, batch, cfg)?,
                Block::Chunk(chunk) => {
                    let replay = match forced {
                        Some(t) => {
                            let end = cursor + 2 * chunk.steps;
                            let slice = t
                                .rounds
                                .get(cursor..end)
                                .ok_or_else(|| MomError::contract("replay trace is shorter than the model"))?;
                            if slice.iter().any(|r| r.chunk != chunk_index) {
                                return Err(MomError::contract("replay trace does not match the chunk layout"));
                            }
                            cursor = end;
                            Some(slice)
                        }
                        None => None,
                    };
                    let (next, rounds) = run_chunk(chunk, chunk_index, &x, batch, cfg, replay)?;
                    x = next;
                    trace.rounds.extend(rounds);
                    chunk_index += 1;
                }
            }
        }
        let h = self.final_norm.forward(&x, cfg.eps)?;
        let logits = h.matmul(&self.tok_emb.transpose()?)?;
        Ok((logits, trace))
    }

    /// All trainable tensors with stable hierarchical names.
    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut out = vec![
            ("tok_emb".to_string(), self.tok_emb.clone()),
            ("pos_emb".to_string(), self.pos_emb.clone()),
        ];
        for (i, block) in self.blocks.iter().enumerate() {
            match block {
                Block::Vanilla(l) => {
                    out.extend(l.attn.params(&format!("block.{i}.attn")));
                    out.extend(l.ffn.params(&format!("block.{i}.ffn")));
                }
                Block::Chunk(c) => out.extend(c.params(&format!("block.{i}"))),
            }
        }
        out.extend(self.final_norm.params("final_norm"));
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn router_param_count(&self) -> usize {
        self.blocks
            .iter()
            .enumerate()
            .filter_map(|(i, b)| match b {
                Block::Chunk(c) => Some(c.router_params(&format!("block.{i}"))),
                Block::Vanilla(_) => None,
            })
            .flatten()
            .map(|(_, t)| t.numel())
            .sum()
    }
}

/// Mean token cross-entropy in nats.
pub fn lm_loss(logits: &Tensor, targets: &[usize]) -> Result<Tensor> {
    if logits.shape().first() != Some(&targets.len()) {
        return Err(MomError::contract(format!(
            "{} targets for logits of shape {:?}",
            targets.len(),
            logits.shape()
        )));
    }
    Ok(logits.cross_entropy(targets)?)
}
