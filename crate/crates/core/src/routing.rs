//! Routers that score the module pool for every token and pick the top K.
//!
//! The GRU router threads a per-token state through the assembly steps, so
//! a decision at step `h` can depend on every earlier step. The MLP router
//! scores each step's input on its own.

use std::cmp::Ordering;
use std::fmt;
use std::ops::Range;

use mom_tensor::{DType, Rng, Tensor};

use crate::modules::uniform_param;
use crate::{MomError, Result};

/// Which sub-round a router or decision belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Kind {
    Attention,
    Ffn,
}

impl fmt::Display for Kind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Kind::Attention => "A",
            Kind::Ffn => "F",
        })
    }
}

impl std::str::FromStr for Kind {
    type Err = MomError;

    fn from_str(s: &str) -> Result<Kind> {
        match s {
            "A" => Ok(Kind::Attention),
            "F" => Ok(Kind::Ffn),
            _ => Err(MomError::Parse {
                what: "module kind",
                input: s.to_string(),
                pos: 0,
                msg: "expected A or F".into(),
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RouterKind {
    Gru,
    Mlp,
}

impl fmt::Display for RouterKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RouterKind::Gru => "gru",
            RouterKind::Mlp => "mlp",
        })
    }
}

impl std::str::FromStr for RouterKind {
    type Err = MomError;

    fn from_str(s: &str) -> Result<RouterKind> {
        match s {
            "gru" => Ok(RouterKind::Gru),
            "mlp" => Ok(RouterKind::Mlp),
            _ => Err(MomError::Parse {
                what: "router kind",
                input: s.to_string(),
                pos: 0,
                msg: "expected gru or mlp".into(),
            }),
        }
    }
}

/// GRU cell with state width `d` followed by a bias-free projection to the
/// pool's choices. Input-side weights of the reset, update and candidate
/// gates are packed column-wise in `wx` (`[d, 3d]`), as are their biases.
#[derive(Debug, Clone)]
pub struct GruRouter {
    pub wx: Tensor,
    /// State-side weights of the reset and update gates, `[d, 2d]`.
    pub urz: Tensor,
    /// State-side weights of the candidate, applied to the reset-gated state.
    pub uh: Tensor,
    pub b: Tensor,
    /// Transposed `W_X`, `[d, choices]`.
    pub proj: Tensor,
}

impl GruRouter {
    pub fn init(d: usize, choices: usize, rng: &mut Rng, dtype: DType) -> Self {
        let bound = 1.0 / (d as f64).sqrt();
        GruRouter {
            wx: uniform_param(rng, &[d, 3 * d], bound, dtype),
            urz: uniform_param(rng, &[d, 2 * d], bound, dtype),
            uh: uniform_param(rng, &[d, d], bound, dtype),
            b: uniform_param(rng, &[3 * d], bound, dtype),
            proj: uniform_param(rng, &[d, choices], bound, dtype),
        }
    }
}

/// `s' = (1 − z) ⊙ s + z ⊙ tanh(x W_h + (r ⊙ s) U_h + b_h)` with
/// `r = σ(x W_r + s U_r + b_r)` and `z = σ(x W_z + s U_z + b_z)`, row-wise.
pub fn gru_step(router: &GruRouter, x: &Tensor, s: &Tensor) -> Result<Tensor> {
    let d = router.uh.shape()[0];
    if x.shape().last() != Some(&d) || s.shape() != x.shape() {
        return Err(MomError::Tensor(mom_tensor::TensorError::Shape {
            op: "gru_step",
            lhs: x.shape().to_vec(),
            rhs: s.shape().to_vec(),
        }));
    }
    let gx = x.matmul(&router.wx)?.add_bias(&router.b)?;
    let gs = s.matmul(&router.urz)?;
    let r = gx.slice_cols(0, d)?.add(&gs.slice_cols(0, d)?)?.sigmoid();
    let z = gx.slice_cols(d, 2 * d)?.add(&gs.slice_cols(d, 2 * d)?)?.sigmoid();
    let cand = gx
        .slice_cols(2 * d, 3 * d)?
        .add(&r.mul(s)?.matmul(&router.uh)?)?
        .tanh();
    let keep = z.scale(-1.0).add_scalar(1.0);
    Ok(keep.mul(s)?.add(&z.mul(&cand)?)?)
}

/// Two affine layers with `tanh` between; ignores any routing state.
#[derive(Debug, Clone)]
pub struct MlpRouter {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl MlpRouter {
    pub fn init(d: usize, choices: usize, rng: &mut Rng, dtype: DType) -> Self {
        let bound = 1.0 / (d as f64).sqrt();
        MlpRouter {
            w1: uniform_param(rng, &[d, d], bound, dtype),
            b1: uniform_param(rng, &[d], bound, dtype),
            w2: uniform_param(rng, &[d, choices], bound, dtype),
            b2: uniform_param(rng, &[choices], bound, dtype),
        }
    }
}

#[derive(Debug, Clone)]
pub enum Router {
    Gru(GruRouter),
    Mlp(MlpRouter),
}

impl Router {
    pub fn init(kind: RouterKind, d: usize, choices: usize, rng: &mut Rng, dtype: DType) -> Self {
        match kind {
            RouterKind::Gru => Router::Gru(GruRouter::init(d, choices, rng, dtype)),
            RouterKind::Mlp => Router::Mlp(MlpRouter::init(d, choices, rng, dtype)),
        }
    }

    pub fn kind(&self) -> RouterKind {
        match self {
            Router::Gru(_) => RouterKind::Gru,
            Router::Mlp(_) => RouterKind::Mlp,
        }
    }

    pub fn choices(&self) -> usize {
        match self {
            Router::Gru(g) => g.proj.shape()[1],
            Router::Mlp(m) => m.w2.shape()[1],
        }
    }

    /// Logits over all choices and the next routing state.
    pub fn step(&self, x: &Tensor, s: &Tensor) -> Result<(Tensor, Tensor)> {
        match self {
            Router::Gru(g) => {
                let next = gru_step(g, x, s)?;
                Ok((next.matmul(&g.proj)?, next))
            }
            Router::Mlp(m) => {
                let h = x.matmul(&m.w1)?.add_bias(&m.b1)?.tanh();
                Ok((h.matmul(&m.w2)?.add_bias(&m.b2)?, s.clone()))
            }
        }
    }

    pub fn params(&self, prefix: &str) -> Vec<(String, Tensor)> {
        let named: Vec<(&str, &Tensor)> = match self {
            Router::Gru(g) => vec![
                ("wx", &g.wx),
                ("urz", &g.urz),
                ("uh", &g.uh),
                ("b", &g.b),
                ("proj", &g.proj),
            ],
            Router::Mlp(m) => vec![("w1", &m.w1), ("b1", &m.b1), ("w2", &m.w2), ("b2", &m.b2)],
        };
        named
            .into_iter()
            .map(|(n, t)| (format!("{prefix}.{n}"), t.clone()))
            .collect()
    }
}

/// Indices of the `k` largest logits, largest first; equal logits are
/// ordered by lower index.
pub fn top_k(logits: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..logits.len()).collect();
    idx.sort_by(|&a, &b| {
        logits[b]
            .partial_cmp(&logits[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx.truncate(k);
    idx
}

/// One token's routing outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingDecision {
    pub selected: Vec<usize>,
    /// Softmax over the selected logits, aligned with `selected`.
    pub gates: Vec<f64>,
    pub logits: Vec<f64>,
}

/// Decisions for every row of a batch.
#[derive(Debug, Clone)]
pub struct Routed {
    pub k: usize,
    /// Row-major `[rows, k]` choice indices.
    pub selected: Vec<usize>,
    /// `[rows, k]` gate weights, differentiable back to the router.
    pub gates: Tensor,
    /// Row-major `[rows, choices]` logit values.
    pub logits: Vec<f64>,
}

impl Routed {
    pub fn rows(&self) -> usize {
        self.selected.len() / self.k
    }

    pub fn decision(&self, row: usize) -> RoutingDecision {
        let choices = self.logits.len() / self.rows();
        let gates = self.gates.to_vec_f64();
        RoutingDecision {
            selected: self.selected[row * self.k..(row + 1) * self.k].to_vec(),
            gates: gates[row * self.k..(row + 1) * self.k].to_vec(),
            logits: self.logits[row * choices..(row + 1) * choices].to_vec(),
        }
    }
}

/// Routes every row of `x` independently. `window` restricts selection to
/// a contiguous range of choices; `forced` replaces the top-K selection
/// (gates are still computed from the router's logits).
pub fn route_batch(
    router: &Router,
    x: &Tensor,
    s: &Tensor,
    k: usize,
    window: Option<Range<usize>>,
    forced: Option<&[usize]>,
) -> Result<(Routed, Tensor)> {
    if x.shape().first() != s.shape().first() {
        return Err(MomError::contract(format!(
            "routing state has shape {:?} but input has shape {:?}",
            s.shape(),
            x.shape()
        )));
    }
    let choices = router.choices();
    let window = window.unwrap_or(0..choices);
    if window.end > choices || window.is_empty() {
        return Err(MomError::config(format!(
            "selection window {window:?} outside {choices} choices"
        )));
    }
    if k == 0 || k > window.len() {
        return Err(MomError::config(format!(
            "cannot select K={k} of {} choices",
            window.len()
        )));
    }
    let (logits, next) = router.step(x, s)?;
    let rows = x.shape()[0];
    let values = logits.to_vec_f64();
    let selected = match forced {
        Some(f) => {
            if f.len() != rows * k || f.iter().any(|&i| !window.contains(&i)) {
                return Err(MomError::contract("forced decisions do not fit this sub-round"));
            }
            f.to_vec()
        }
        None => {
            let mut sel = Vec::with_capacity(rows * k);
            for row in values.chunks_exact(choices) {
                sel.extend(top_k(&row[window.clone()], k).into_iter().map(|i| i + window.start));
            }
            sel
        }
    };
    let gates = logits.gather_per_row(&selected, k)?.softmax_lastdim(None)?;
    Ok((
        Routed {
            k,
            selected,
            gates,
            logits: values,
        },
        next,
    ))
}

/// Single-token routing: `x` and `s` are `[d]` vectors.
pub fn route(router: &Router, x: &Tensor, s: &Tensor, k: usize) -> Result<(RoutingDecision, Tensor)> {
    let d = x.numel();
    let (routed, next) = route_batch(router, &x.reshape(&[1, d])?, &s.reshape(&[1, d])?, k, None, None)?;
    Ok((routed.decision(0), next.reshape(&[d])?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gates_for(logits: &[f64], k: usize) -> (Vec<usize>, Vec<f64>) {
        let n = logits.len();
        let sel = top_k(logits, k);
        let t = Tensor::from_f64(logits, &[1, n], DType::F64).unwrap();
        let g = t.gather_per_row(&sel, k).unwrap().softmax_lastdim(None).unwrap();
        (sel, g.to_vec_f64())
    }

    #[test]
    fn selection_examples() {
        assert_eq!(gates_for(&[2.0, 1.0, 0.0], 1), (vec![0], vec![1.0]));
        assert_eq!(gates_for(&[0.0, 0.0, 0.0], 2), (vec![0, 1], vec![0.5, 0.5]));
        let (sel, g) = gates_for(&[1.0, 3.0, 2.0, 0.0], 2);
        assert_eq!(sel, vec![1, 2]);
        assert!((g[0] - 0.73106).abs() < 1e-5 && (g[1] - 0.26894).abs() < 1e-5);
    }

    #[test]
    fn zero_gru_keeps_zero_state() {
        let mut rng = Rng::new(0);
        let g = GruRouter::init(4, 3, &mut rng, DType::F64);
        for (_, p) in Router::Gru(g.clone()).params("r") {
            p.assign(&mom_tensor::Storage::zeros(DType::F64, p.numel())).unwrap();
        }
        let x = Tensor::from_f64(&[1.0, -2.0, 0.5, 3.0], &[1, 4], DType::F64).unwrap();
        let s = Tensor::zeros(&[1, 4], DType::F64);
        assert!(gru_step(&g, &x, &s).unwrap().to_vec_f64().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn saturated_update_gate_preserves_state() {
        let mut rng = Rng::new(1);
        let g = GruRouter::init(4, 3, &mut rng, DType::F64);
        let mut b = g.b.to_vec_f64();
        b[4..8].iter_mut().for_each(|v| *v = -30.0);
        g.b.assign(&mom_tensor::Storage::from_f64(&b, DType::F64)).unwrap();
        let x = Tensor::from_f64(&rng.normal_vec(4, 0.0, 1.0), &[1, 4], DType::F64).unwrap();
        let s = Tensor::from_f64(&rng.normal_vec(4, 0.0, 1.0), &[1, 4], DType::F64).unwrap();
        let next = gru_step(&g, &x, &s).unwrap().to_vec_f64();
        for (a, b) in next.iter().zip(s.to_vec_f64()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn k_larger_than_choices_is_a_config_error() {
        let mut rng = Rng::new(2);
        let r = Router::init(RouterKind::Gru, 4, 3, &mut rng, DType::F64);
        let x = Tensor::zeros(&[2, 4], DType::F64);
        let err = route_batch(&r, &x, &x, 4, None, None).unwrap_err();
        assert!(matches!(err, MomError::Config(_)));
    }

    #[test]
    fn window_restricts_selection() {
        let mut rng = Rng::new(3);
        let r = Router::init(RouterKind::Gru, 4, 6, &mut rng, DType::F64);
        let x = Tensor::from_f64(&rng.normal_vec(20, 0.0, 1.0), &[5, 4], DType::F64).unwrap();
        let s = Tensor::zeros(&[5, 4], DType::F64);
        let (routed, _) = route_batch(&r, &x, &s, 2, Some(2..4), None).unwrap();
        assert!(routed.selected.iter().all(|i| (2..4).contains(i)));
    }
}
