//! Closed-form cost model: parameters, forward FLOPs and memory.
//!
//! FLOPs count a multiply-accumulate as 2. Per token, an attention step
//! with `K'` executed modules costs `K'·6d²` for the Q/K/V projections,
//! `2d²` for the output projection (the gate-weighted sum of the selected
//! `W^O` matrices is applied once) and `4·L·d` for scores and values; an
//! FFN step costs `K'·4·d·d_ff`. Router FLOPs are tallied separately in
//! [`CostReport::router_flops`] and left out of `forward_flops`.

use std::fmt;

use mom_tensor::DType;

use crate::assembly::Policy;
use crate::config::{ChunkPlan, ModelConfig, MomConfig, PlanBlock};
use crate::model::ModelSpec;
use crate::routing::RouterKind;
use crate::{MomError, Result};

/// How many of the `K` selected modules are assumed to execute.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Assume {
    /// SKIP is never chosen: `K' = K`.
    NoSkip,
    /// SKIP is chosen in every sub-round where it exists: `K' = K − 1`.
    AllSkip,
    /// SKIP occupies one slot with probability `p`: `K' = K − p`.
    Expected(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockCost {
    pub label: String,
    pub params: u64,
    pub router_params: u64,
    pub flops: f64,
    pub router_flops: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostReport {
    pub label: String,
    /// All trainable parameters, routers included.
    pub param_count: u64,
    pub router_params: u64,
    pub forward_flops: f64,
    pub router_flops: f64,
    pub weight_bytes: u64,
    pub activation_bytes_peak: u64,
    /// `(name, params)` for embeddings, each block and the final norm.
    pub blocks: Vec<BlockCost>,
    pub embedding_params: u64,
}

impl CostReport {
    /// Parameters excluding routers, the figure that stays fixed across `K` and `H`.
    pub fn backbone_params(&self) -> u64 {
        self.param_count - self.router_params
    }

    pub fn csv_header() -> &'static str {
        "config,params,flops,weight_bytes,act_bytes"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:.0},{},{}",
            self.label, self.param_count, self.forward_flops, self.weight_bytes, self.activation_bytes_peak
        )
    }

    /// Relative change of `self` over `base`, in percent.
    pub fn delta_pct(&self, base: &CostReport) -> Deltas {
        let pct = |a: f64, b: f64| if b == 0.0 { 0.0 } else { 100.0 * (a - b) / b };
        Deltas {
            params: pct(self.param_count as f64, base.param_count as f64),
            flops: pct(self.forward_flops, base.forward_flops),
            memory: pct(self.total_bytes() as f64, base.total_bytes() as f64),
        }
    }

    pub fn total_bytes(&self) -> u64 {
        self.weight_bytes + self.activation_bytes_peak
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Deltas {
    pub params: f64,
    pub flops: f64,
    pub memory: f64,
}

fn fmt_pct(v: f64) -> String {
    format!("{v:+.1}%")
}

impl fmt::Display for CostReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<24} {:>16} {:>14} {:>14} {:>14}", "config", "params", "TFLOPs", "weights GB", "acts GB")?;
        write!(
            f,
            "{:<24} {:>16} {:>14.4} {:>14.4} {:>14.4}",
            self.label,
            self.param_count,
            self.forward_flops / 1e12,
            self.weight_bytes as f64 / 1e9,
            self.activation_bytes_peak as f64 / 1e9
        )
    }
}

/// A comparison line in the style `2.45 (-16.1%)`.
pub fn comparison_line(report: &CostReport, base: &CostReport) -> String {
    let d = report.delta_pct(base);
    format!(
        "{:<24} params {} ({})  TFLOPs {:.3} ({})  memory GB {:.3} ({})",
        report.label,
        report.param_count,
        fmt_pct(d.params),
        report.forward_flops / 1e12,
        fmt_pct(d.flops),
        report.total_bytes() as f64 / 1e9,
        fmt_pct(d.memory)
    )
}

pub fn mha_params(c: &ModelConfig) -> u64 {
    let d = c.d_model as u64;
    2 * d + 4 * (d * d + d)
}

pub fn ffn_params(c: &ModelConfig) -> u64 {
    let (d, f) = (c.d_model as u64, c.d_ff as u64);
    2 * d + d * f + f + f * d + d
}

pub fn router_params(kind: RouterKind, d: usize, choices: usize) -> u64 {
    let (d, c) = (d as u64, choices as u64);
    match kind {
        RouterKind::Gru => 6 * d * d + 3 * d + d * c,
        RouterKind::Mlp => d * d + d + d * c + c,
    }
}

/// Per-token FLOPs of one router step.
pub fn router_step_flops(kind: RouterKind, d: usize, choices: usize) -> f64 {
    let (d, c) = (d as f64, choices as f64);
    match kind {
        RouterKind::Gru => 12.0 * d * d + 2.0 * d * c,
        RouterKind::Mlp => 2.0 * d * d + 2.0 * d * c,
    }
}

/// One assembly step as the cost model sees it.
#[derive(Debug, Clone, Copy)]
struct StepShape {
    attn_exec: f64,
    ffn_exec: f64,
}

/// Everything a cost estimate depends on.
#[derive(Debug, Clone, PartialEq)]
pub struct CostQuery {
    pub spec: ModelSpec,
    pub seq_len: usize,
    pub assume: Assume,
    pub label: String,
}

impl CostQuery {
    pub fn new(config: ModelConfig, plan: ChunkPlan, mom: MomConfig, seq_len: usize) -> Self {
        CostQuery {
            label: mom.to_string(),
            spec: ModelSpec::mom(config, plan, mom, DType::F32),
            seq_len,
            assume: Assume::NoSkip,
        }
    }
}

struct Chunk {
    steps: Vec<StepShape>,
    params: u64,
    router_params: u64,
    /// `(choices, steps)` for each routed sub-round stream.
    routers: Vec<(usize, usize)>,
}

fn executed(k: usize, skip: bool, assume: Assume) -> Result<f64> {
    let k = k as f64;
    Ok(match (assume, skip) {
        (_, false) | (Assume::NoSkip, true) => k,
        (Assume::AllSkip, true) => k - 1.0,
        (Assume::Expected(p), true) => {
            if !(0.0..=1.0).contains(&p) {
                return Err(MomError::config(format!("expected skip rate must be in [0, 1], got {p}")));
            }
            k - p
        }
    })
}

fn chunk_shape(spec: &ModelSpec, n: usize, assume: Assume) -> Result<Chunk> {
    let c = &spec.config;
    let d = c.d_model;
    let (mha, ffn) = (mha_params(c), ffn_params(c));
    let one = StepShape {
        attn_exec: 1.0,
        ffn_exec: 1.0,
    };
    let mut routers = Vec::new();
    let (steps, params) = match &spec.policy {
        Policy::Vanilla => (vec![one; n], n as u64 * (mha + ffn)),
        Policy::LayerSkip(keep) => {
            if keep.len() != n {
                return Err(MomError::config(format!("layer_skip mask has {} entries for {n} layers", keep.len())));
            }
            let steps = keep
                .iter()
                .map(|&k| {
                    let e = if k { 1.0 } else { 0.0 };
                    StepShape { attn_exec: e, ffn_exec: e }
                })
                .collect();
            (steps, n as u64 * (mha + ffn))
        }
        Policy::Sharing(share) => (vec![one; share.len()], n as u64 * (mha + ffn)),
        Policy::Moe { experts } => {
            let k = spec.mom.k;
            if k > *experts {
                return Err(MomError::config(format!("cannot select K={k} of {experts} experts")));
            }
            routers.push((n * experts, n));
            let step = StepShape {
                attn_exec: 1.0,
                ffn_exec: k as f64,
            };
            (vec![step; n], n as u64 * (mha + *experts as u64 * ffn))
        }
        Policy::Mom => {
            let m = spec.mom;
            let choices = n + usize::from(m.skip);
            if m.k > choices {
                return Err(MomError::config(format!("cannot select K={} from {choices} choices", m.k)));
            }
            let e = executed(m.k, m.skip, assume)?;
            routers.push((choices, m.h));
            routers.push((choices, m.h));
            let step = StepShape {
                attn_exec: e,
                ffn_exec: e,
            };
            (vec![step; m.h], n as u64 * (mha + ffn))
        }
    };
    let router_params = routers.iter().map(|&(ch, _)| router_params(spec.router, d, ch)).sum();
    Ok(Chunk {
        steps,
        params,
        router_params,
        routers,
    })
}

fn attn_step_flops(c: &ModelConfig, l: usize, exec: f64) -> f64 {
    let (d, l) = (c.d_model as f64, l as f64);
    if exec == 0.0 {
        return 0.0;
    }
    exec * 6.0 * d * d + 2.0 * d * d + 4.0 * l * d
}

fn ffn_step_flops(c: &ModelConfig, exec: f64) -> f64 {
    exec * 4.0 * c.d_model as f64 * c.d_ff as f64
}

/// Full report: parameters, FLOPs for one sequence of `seq_len` tokens, and memory.
pub fn estimate(q: &CostQuery) -> Result<CostReport> {
    let c = &q.spec.config;
    c.validate()?;
    if q.seq_len == 0 {
        return Err(MomError::config("seq_len must be at least 1"));
    }
    let (d, l, v) = (c.d_model as u64, q.seq_len, c.vocab as u64);
    let lf = l as f64;
    let embedding_params = v * d + c.max_len as u64 * d;
    let mut blocks = Vec::new();
    let mut all_steps: Vec<StepShape> = Vec::new();
    let vanilla = StepShape {
        attn_exec: 1.0,
        ffn_exec: 1.0,
    };
    for (i, b) in q.spec.plan.blocks.iter().enumerate() {
        let (label, steps, params, rparams, rflops) = match *b {
            PlanBlock::Vanilla => (format!("block.{i} vanilla"), vec![vanilla], mha_params(c) + ffn_params(c), 0, 0.0),
            PlanBlock::Chunk(n) => {
                let ch = chunk_shape(&q.spec, n, q.assume)?;
                let rflops = ch
                    .routers
                    .iter()
                    .map(|&(choices, steps)| steps as f64 * router_step_flops(q.spec.router, c.d_model, choices))
                    .sum::<f64>()
                    * lf;
                (format!("block.{i} chunk({n})"), ch.steps, ch.params, ch.router_params, rflops)
            }
        };
        let flops = steps
            .iter()
            .map(|s| attn_step_flops(c, l, s.attn_exec) + ffn_step_flops(c, s.ffn_exec))
            .sum::<f64>()
            * lf;
        all_steps.extend(steps);
        blocks.push(BlockCost {
            label,
            params: params + rparams,
            router_params: rparams,
            flops,
            router_flops: rflops,
        });
    }
    let head_flops = 2.0 * (d * v) as f64 * lf;
    blocks.push(BlockCost {
        label: "final_norm+head".into(),
        params: 2 * d,
        router_params: 0,
        flops: head_flops,
        router_flops: 0.0,
    });
    let param_count = embedding_params + blocks.iter().map(|b| b.params).sum::<u64>();
    let router_params = blocks.iter().map(|b| b.router_params).sum();
    let bytes = q.spec.dtype.size_of() as u64;
    Ok(CostReport {
        label: q.label.clone(),
        param_count,
        router_params,
        forward_flops: blocks.iter().map(|b| b.flops).sum(),
        router_flops: blocks.iter().map(|b| b.router_flops).sum(),
        weight_bytes: bytes * param_count,
        activation_bytes_peak: bytes * activation_elems(c, l, &all_steps),
        blocks,
        embedding_params,
    })
}

/// Peak activation elements under sequential step execution: the embedded
/// input, the residual stream after every sub-round, the largest transient
/// working set of any single sub-round, and the logits.
fn activation_elems(c: &ModelConfig, l: usize, steps: &[StepShape]) -> u64 {
    let (d, l, f, z, v) = (c.d_model as f64, l as f64, c.d_ff as f64, c.heads as f64, c.vocab as f64);
    let residuals = 2.0 * l * d * steps.len() as f64;
    let transient = steps
        .iter()
        .map(|s| {
            let attn = s.attn_exec.ceil() * 3.0 * l * d + z * l * l + l * d;
            let ffn = s.ffn_exec.ceil() * l * f + l * d;
            attn.max(ffn)
        })
        .fold(0.0, f64::max);
    (l * d + residuals + transient + l * v).round() as u64
}

pub fn estimate_flops(q: &CostQuery) -> Result<f64> {
    Ok(estimate(q)?.forward_flops)
}

/// Exact trainable-parameter count including routers.
pub fn estimate_params(spec: &ModelSpec) -> Result<u64> {
    let q = CostQuery {
        spec: spec.clone(),
        seq_len: 1,
        assume: Assume::NoSkip,
        label: String::new(),
    };
    Ok(estimate(&q)?.param_count)
}

/// `(weight_bytes, activation_bytes_peak)`.
pub fn estimate_memory(q: &CostQuery) -> Result<(u64, u64)> {
    let r = estimate(q)?;
    Ok((r.weight_bytes, r.activation_bytes_peak))
}
