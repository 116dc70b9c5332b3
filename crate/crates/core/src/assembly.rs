//! Assembly of pool modules into per-step operators, for every policy.
//!
//! One assembly step is an attention sub-round followed by an FFN
//! sub-round, each a pre-norm residual update. For routed policies every
//! token picks its own modules; the attention core still runs once over
//! the whole sequence, with each token's Q/K/V summed over the modules it
//! selected and each output projection scaled by that module's gate.

use std::fmt;
use std::str::FromStr;

use mom_tensor::{DType, Rng, Tensor};

use crate::config::{ModelConfig, MomConfig};
use crate::modules::{check_rows, ModulePool};
use crate::routing::{route_batch, Kind, Router, RouterKind};
use crate::{MomError, Result};

/// How a chunk turns its pool into a sequence of operators.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Policy {
    /// Step `h` runs module `h` of each type.
    Vanilla,
    /// Step `h` runs module `h` when `keep[h]`, otherwise SKIP for both sub-rounds.
    LayerSkip(Vec<bool>),
    /// Step `h` runs module `share[h]`, where `share[h] <= h`.
    Sharing(Vec<usize>),
    /// Attention at step `h` is module `h`; the FFN sub-round routes among
    /// the `experts` FFN modules `h·experts..(h+1)·experts`.
    Moe { experts: usize },
    /// Both sub-rounds routed over the whole pool.
    Mom,
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Policy::Vanilla => f.write_str("vanilla"),
            Policy::Mom => f.write_str("mom"),
            Policy::Moe { experts } => write!(f, "moe:{experts}"),
            Policy::LayerSkip(keep) => {
                let s: String = keep.iter().map(|k| if *k { '1' } else { '0' }).collect();
                write!(f, "layer_skip:{s}")
            }
            Policy::Sharing(share) => {
                let s: Vec<String> = share.iter().map(|i| i.to_string()).collect();
                write!(f, "sharing:{}", s.join(","))
            }
        }
    }
}

impl FromStr for Policy {
    type Err = MomError;

    fn from_str(s: &str) -> Result<Policy> {
        let err = |pos: usize, msg: &str| MomError::Parse {
            what: "policy",
            input: s.to_string(),
            pos,
            msg: msg.to_string(),
        };
        let (name, arg) = match s.split_once(':') {
            Some((n, a)) => (n, Some(a)),
            None => (s, None),
        };
        let at = name.len() + 1;
        match (name, arg) {
            ("vanilla", None) => Ok(Policy::Vanilla),
            ("mom", None) => Ok(Policy::Mom),
            ("moe", Some(a)) => match a.parse() {
                Ok(e) if e > 0 => Ok(Policy::Moe { experts: e }),
                _ => Err(err(at, "expected a positive expert count")),
            },
            ("layer_skip", Some(a)) => a
                .chars()
                .enumerate()
                .map(|(i, c)| match c {
                    '1' => Ok(true),
                    '0' => Ok(false),
                    _ => Err(err(at + i, "expected 0 or 1")),
                })
                .collect::<Result<Vec<_>>>()
                .and_then(|k| if k.is_empty() { Err(err(at, "empty mask")) } else { Ok(Policy::LayerSkip(k)) }),
            ("sharing", Some(a)) => {
                let mut pos = at;
                let mut share = Vec::new();
                for part in a.split(',') {
                    share.push(part.parse().map_err(|_| err(pos, "expected a module index"))?);
                    pos += part.len() + 1;
                }
                Ok(Policy::Sharing(share))
            }
            _ => Err(err(0, "expected vanilla, mom, moe:E, layer_skip:MASK or sharing:LIST")),
        }
    }
}

/// One sub-round's decisions for every row of the batch.
#[derive(Debug, Clone, PartialEq)]
pub struct SubRound {
    pub chunk: usize,
    pub step: usize,
    pub kind: Kind,
    /// Pool size for this kind; the SKIP choice has this index.
    pub n_modules: usize,
    pub k: usize,
    /// Row-major `[rows, k]`.
    pub selected: Vec<usize>,
    /// Row-major `[rows, k]`; 1 for deterministic policies.
    pub gates: Vec<f64>,
}

/// Every decision taken during one forward pass, in execution order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AssemblyTrace {
    pub batch: usize,
    pub seq_len: usize,
    pub rounds: Vec<SubRound>,
}

/// A block of the model whose layers are replaced by an assembled pool.
#[derive(Debug, Clone)]
pub struct MomChunk {
    pub pool: ModulePool,
    pub attn_router: Option<Router>,
    pub ffn_router: Option<Router>,
    pub policy: Policy,
    pub k: usize,
    pub steps: usize,
}

impl MomChunk {
    /// Validates `policy` against the pool and draws fresh routers where
    /// the policy routes.
    pub fn new(
        mut pool: ModulePool,
        policy: Policy,
        mom: MomConfig,
        router_kind: RouterKind,
        rng: &mut Rng,
        dtype: DType,
    ) -> Result<MomChunk> {
        pool.validate()?;
        let n = pool.attn.len();
        let d = pool.attn[0].wq.shape()[0];
        let same_size = |what: &str| -> Result<()> {
            if pool.ffn.len() != n {
                return Err(MomError::config(format!(
                    "{what} needs equal MHA and FFN pools, got {n} and {}",
                    pool.ffn.len()
                )));
            }
            Ok(())
        };
        let (k, steps) = match &policy {
            Policy::Vanilla => {
                same_size("vanilla policy")?;
                (1, n)
            }
            Policy::LayerSkip(keep) => {
                same_size("layer_skip policy")?;
                if keep.len() != n {
                    return Err(MomError::config(format!("layer_skip mask has {} entries for {n} layers", keep.len())));
                }
                (1, n)
            }
            Policy::Sharing(share) => {
                same_size("sharing policy")?;
                for (h, &s) in share.iter().enumerate() {
                    if s > h || s >= n {
                        return Err(MomError::config(format!(
                            "sharing step {h} points at module {s}; it must be at most {h} and below {n}"
                        )));
                    }
                }
                (1, share.len())
            }
            Policy::Moe { experts } => {
                if pool.ffn.len() != n * experts {
                    return Err(MomError::config(format!(
                        "moe with {n} layers of {experts} experts needs {} FFN modules, got {}",
                        n * experts,
                        pool.ffn.len()
                    )));
                }
                if mom.k > *experts {
                    return Err(MomError::config(format!("cannot select K={} of {experts} experts", mom.k)));
                }
                (mom.k, n)
            }
            Policy::Mom => {
                pool.include_skip = mom.skip;
                (mom.k, mom.h)
            }
        };
        if !matches!(policy, Policy::Mom) {
            pool.include_skip = false;
        }
        let (attn_router, ffn_router) = match &policy {
            Policy::Mom => {
                if k > pool.attn_choices() || k > pool.ffn_choices() {
                    return Err(MomError::config(format!(
                        "cannot select K={k} from pools of {} and {} choices",
                        pool.attn_choices(),
                        pool.ffn_choices()
                    )));
                }
                (
                    Some(Router::init(router_kind, d, pool.attn_choices(), rng, dtype)),
                    Some(Router::init(router_kind, d, pool.ffn_choices(), rng, dtype)),
                )
            }
            Policy::Moe { .. } => (None, Some(Router::init(router_kind, d, pool.ffn_choices(), rng, dtype))),
            _ => (None, None),
        };
        Ok(MomChunk {
            pool,
            attn_router,
            ffn_router,
            policy,
            k,
            steps,
        })
    }

    pub fn n_modules(&self, kind: Kind) -> usize {
        match kind {
            Kind::Attention => self.pool.attn.len(),
            Kind::Ffn => self.pool.ffn.len(),
        }
    }

    pub fn params(&self, prefix: &str) -> Vec<(String, Tensor)> {
        let mut out = self.pool.params(&format!("{prefix}.pool"));
        out.extend(self.router_params(prefix));
        out
    }

    pub fn router_params(&self, prefix: &str) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        if let Some(r) = &self.attn_router {
            out.extend(r.params(&format!("{prefix}.router.attn")));
        }
        if let Some(r) = &self.ffn_router {
            out.extend(r.params(&format!("{prefix}.router.ffn")));
        }
        out
    }
}

struct Group {
    rows: Vec<usize>,
    /// Flat `[rows, k]` positions, used to pick gates.
    slots: Vec<usize>,
}

impl Group {
    fn covers(&self, n: usize) -> bool {
        self.rows.len() == n && self.rows.iter().enumerate().all(|(i, &r)| i == r)
    }
}

fn group_rows(selected: &[usize], k: usize, n_modules: usize) -> Result<Vec<Group>> {
    let mut groups: Vec<Group> = (0..n_modules)
        .map(|_| Group {
            rows: Vec::new(),
            slots: Vec::new(),
        })
        .collect();
    for (slot, &m) in selected.iter().enumerate() {
        if m < n_modules {
            groups[m].rows.push(slot / k);
            groups[m].slots.push(slot);
        } else if m > n_modules {
            return Err(MomError::contract(format!(
                "module index {m} outside a pool of {n_modules} (SKIP is {n_modules})"
            )));
        }
    }
    Ok(groups)
}

fn check_selection(selected: &[usize], k: usize, rows: usize, gates: Option<&Tensor>) -> Result<()> {
    if k == 0 || selected.len() != rows * k {
        return Err(MomError::contract(format!(
            "{} selections for {rows} rows at K={k}",
            selected.len()
        )));
    }
    if let Some(g) = gates {
        if g.shape() != [rows, k] {
            return Err(MomError::contract(format!("gate shape {:?} for {rows} rows at K={k}", g.shape())));
        }
    }
    Ok(())
}

fn accumulate(acc: Option<Tensor>, t: Tensor) -> Result<Option<Tensor>> {
    Ok(Some(match acc {
        Some(a) => a.add(&t)?,
        None => t,
    }))
}

fn gate_column(gates: &Tensor, slots: &[usize]) -> Result<Tensor> {
    let n = gates.numel();
    Ok(gates.reshape(&[n, 1])?.index_select_rows(slots)?)
}

/// Assembled attention for rows `x` (pre-norm is applied per module).
/// `selected` is `[rows, k]`; index `attn.len()` is SKIP and contributes
/// nothing. `gates: None` means unit gates. Tokens with no surviving
/// module get zero output and zero keys and values.
pub fn assemble_attention(
    pool: &ModulePool,
    selected: &[usize],
    k: usize,
    gates: Option<&Tensor>,
    x: &Tensor,
    batch: usize,
    cfg: &ModelConfig,
) -> Result<Tensor> {
    check_rows(x, batch, cfg)?;
    let n = x.shape()[0];
    check_selection(selected, k, n, gates)?;
    let groups = group_rows(selected, k, pool.attn.len())?;
    let active: Vec<(usize, &Group)> = groups.iter().enumerate().filter(|(_, g)| !g.rows.is_empty()).collect();
    if active.is_empty() {
        return Ok(Tensor::zeros(x.shape(), x.dtype()));
    }
    let (mut q, mut kk, mut v) = (None, None, None);
    for &(m, g) in &active {
        let module = &pool.attn[m];
        let full = g.covers(n);
        let xs = if full { x.clone() } else { x.index_select_rows(&g.rows)? };
        let (qm, km, vm) = module.project_qkv(&module.normalize(&xs, cfg)?)?;
        let place = |t: Tensor| -> Result<Tensor> {
            if full {
                Ok(t)
            } else {
                Ok(t.index_add_rows(&g.rows, n)?)
            }
        };
        q = accumulate(q, place(qm)?)?;
        kk = accumulate(kk, place(km)?)?;
        v = accumulate(v, place(vm)?)?;
    }
    let (q, kk, v) = (q.expect("active"), kk.expect("active"), v.expect("active"));
    let a = Tensor::causal_attention(&q, &kk, &v, batch, cfg.heads)?;
    let mut out = None;
    for &(m, g) in &active {
        let full = g.covers(n);
        let am = if full { a.clone() } else { a.index_select_rows(&g.rows)? };
        let mut om = pool.attn[m].project_out(&am)?;
        if let Some(gt) = gates {
            om = om.mul_rows(&gate_column(gt, &g.slots)?)?;
        }
        let om = if full { om } else { om.index_add_rows(&g.rows, n)? };
        out = accumulate(out, om)?;
    }
    Ok(out.expect("active"))
}

/// Gate-weighted sum of the selected FFN modules, per row of `u`.
pub fn assemble_ffn(
    pool: &ModulePool,
    selected: &[usize],
    k: usize,
    gates: Option<&Tensor>,
    u: &Tensor,
    cfg: &ModelConfig,
) -> Result<Tensor> {
    let n = u.shape()[0];
    check_selection(selected, k, n, gates)?;
    let groups = group_rows(selected, k, pool.ffn.len())?;
    let mut out = None;
    for (m, g) in groups.iter().enumerate().filter(|(_, g)| !g.rows.is_empty()) {
        let module = &pool.ffn[m];
        let full = g.covers(n);
        let us = if full { u.clone() } else { u.index_select_rows(&g.rows)? };
        let mut y = module.forward(&module.normalize(&us, cfg)?)?;
        if let Some(gt) = gates {
            y = y.mul_rows(&gate_column(gt, &g.slots)?)?;
        }
        let y = if full { y } else { y.index_add_rows(&g.rows, n)? };
        out = accumulate(out, y)?;
    }
    Ok(out.unwrap_or_else(|| Tensor::zeros(u.shape(), u.dtype())))
}

/// Per-token GRU states of a chunk's routers.
#[derive(Debug, Clone)]
pub struct RouterStates {
    pub attn: Tensor,
    pub ffn: Tensor,
}

impl RouterStates {
    /// Zero state for `rows` tokens at width `d`.
    pub fn zeros(rows: usize, d: usize, dtype: DType) -> Self {
        RouterStates {
            attn: Tensor::zeros(&[rows, d], dtype),
            ffn: Tensor::zeros(&[rows, d], dtype),
        }
    }
}

#[derive(Debug, Clone)]
pub struct StepOutput {
    pub u: Tensor,
    pub x_next: Tensor,
    pub attn: SubRound,
    pub ffn: SubRound,
}

struct Decision {
    selected: Vec<usize>,
    k: usize,
    gates: Option<Tensor>,
}

fn fixed(module: usize, rows: usize) -> Decision {
    Decision {
        selected: vec![module; rows],
        k: 1,
        gates: None,
    }
}

fn decide(
    chunk: &MomChunk,
    h: usize,
    kind: Kind,
    input: &Tensor,
    state: &mut Tensor,
    forced: Option<&[usize]>,
) -> Result<Decision> {
    let rows = input.shape()[0];
    let skip = chunk.n_modules(kind);
    let routed = |router: &Option<Router>, window, state: &mut Tensor| -> Result<Decision> {
        let router = router
            .as_ref()
            .ok_or_else(|| MomError::contract("routed sub-round without a router"))?;
        let (r, next) = route_batch(router, input, state, chunk.k, window, forced)?;
        *state = next;
        Ok(Decision {
            selected: r.selected,
            k: r.k,
            gates: Some(r.gates),
        })
    };
    match (&chunk.policy, kind) {
        (Policy::Vanilla, _) => Ok(fixed(h, rows)),
        (Policy::LayerSkip(keep), _) => Ok(fixed(if keep[h] { h } else { skip }, rows)),
        (Policy::Sharing(share), _) => Ok(fixed(share[h], rows)),
        (Policy::Moe { .. }, Kind::Attention) => Ok(fixed(h, rows)),
        (Policy::Moe { experts }, Kind::Ffn) => routed(&chunk.ffn_router, Some(h * experts..(h + 1) * experts), state),
        (Policy::Mom, Kind::Attention) => routed(&chunk.attn_router, None, state),
        (Policy::Mom, Kind::Ffn) => routed(&chunk.ffn_router, None, state),
    }
}

fn record(chunk_index: usize, h: usize, kind: Kind, n_modules: usize, d: &Decision) -> SubRound {
    SubRound {
        chunk: chunk_index,
        step: h,
        kind,
        n_modules,
        k: d.k,
        selected: d.selected.clone(),
        gates: match &d.gates {
            Some(g) => g.to_vec_f64(),
            None => vec![1.0; d.selected.len()],
        },
    }
}

/// One assembly step: `u = x + F^A(x)`, then `x' = u + F^F(u)`. A sub-round
/// in which every token chose SKIP returns its input unchanged.
#[allow(clippy::too_many_arguments)]
pub fn forward_step(
    chunk: &MomChunk,
    chunk_index: usize,
    h: usize,
    x: &Tensor,
    states: &mut RouterStates,
    batch: usize,
    cfg: &ModelConfig,
    forced: Option<(&[usize], &[usize])>,
) -> Result<StepOutput> {
    if h >= chunk.steps {
        return Err(MomError::contract(format!("step {h} outside a chunk of {} steps", chunk.steps)));
    }
    let n_attn = chunk.n_modules(Kind::Attention);
    let n_ffn = chunk.n_modules(Kind::Ffn);

    let da = decide(chunk, h, Kind::Attention, x, &mut states.attn, forced.map(|f| f.0))?;
    let u = if da.selected.iter().all(|&m| m >= n_attn) {
        x.clone()
    } else {
        x.add(&assemble_attention(&chunk.pool, &da.selected, da.k, da.gates.as_ref(), x, batch, cfg)?)?
    };

    let df = decide(chunk, h, Kind::Ffn, &u, &mut states.ffn, forced.map(|f| f.1))?;
    let x_next = if df.selected.iter().all(|&m| m >= n_ffn) {
        u.clone()
    } else {
        u.add(&assemble_ffn(&chunk.pool, &df.selected, df.k, df.gates.as_ref(), &u, cfg)?)?
    };

    Ok(StepOutput {
        attn: record(chunk_index, h, Kind::Attention, n_attn, &da),
        ffn: record(chunk_index, h, Kind::Ffn, n_ffn, &df),
        u,
        x_next,
    })
}

/// Runs all steps of a chunk from zero router states. `forced` holds this
/// chunk's recorded sub-rounds (attention then FFN per step) to replay.
pub fn run_chunk(
    chunk: &MomChunk,
    chunk_index: usize,
    x: &Tensor,
    batch: usize,
    cfg: &ModelConfig,
    forced: Option<&[SubRound]>,
) -> Result<(Tensor, Vec<SubRound>)> {
    if let Some(f) = forced {
        if f.len() != 2 * chunk.steps {
            return Err(MomError::contract(format!(
                "replay holds {} sub-rounds for a chunk of {} steps",
                f.len(),
                chunk.steps
            )));
        }
    }
    let rows = x.shape()[0];
    let mut states = RouterStates::zeros(rows, cfg.d_model, x.dtype());
    let mut x = x.clone();
    let mut rounds = Vec::with_capacity(2 * chunk.steps);
    for h in 0..chunk.steps {
        let f = forced.map(|f| (f[2 * h].selected.as_slice(), f[2 * h + 1].selected.as_slice()));
        let out = forward_step(chunk, chunk_index, h, &x, &mut states, batch, cfg, f)?;
        x = out.x_next;
        rounds.push(out.attn);
        rounds.push(out.ffn);
    }
    Ok((x, rounds))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn policy_strings_round_trip() {
        for s in ["vanilla", "mom", "moe:4", "layer_skip:1011", "sharing:0,0,1,2"] {
            assert_eq!(s.parse::<Policy>().unwrap().to_string(), s);
        }
        for bad in ["", "moe", "moe:0", "layer_skip:12", "sharing:a", "other"] {
            assert!(bad.parse::<Policy>().is_err(), "{bad}");
        }
    }
}
