//! Per-token assembly against loop oracles.

mod common;

use common::*;
use mom::assembly::{assemble_attention, assemble_ffn, MomChunk, Policy};
use mom::config::{ModelConfig, MomConfig};
use mom::model::{ModelSpec, MomModel};
use mom::routing::RouterKind;
use mom_tensor::{gradcheck, DType, Rng, Tensor};

const D: usize = 8;
const HEADS: usize = 2;
const LEN: usize = 4;

fn pool_model(n: usize, seed: u64, rng: &mut Rng) -> (MomModel, ModelConfig) {
    let c = cfg(16, D, HEADS, 16, LEN);
    let spec = ModelSpec {
        config: c,
        plan: format!("[{n}]").parse().unwrap(),
        mom: MomConfig::new(2, 2, true),
        policy: Policy::Mom,
        router: RouterKind::Gru,
        dtype: DType::F64,
    };
    let model = MomModel::new(spec, seed).unwrap();
    randomize(&model.named_params(), rng, 0.4);
    (model, c)
}

fn chunk(model: &MomModel) -> &MomChunk {
    model.chunks().next().unwrap()
}

/// `k` distinct choices per row out of `n` modules plus SKIP (index `n`).
fn random_selection(rng: &mut Rng, rows: usize, n: usize, k: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(rows * k);
    for _ in 0..rows {
        let mut all: Vec<usize> = (0..=n).collect();
        rng.shuffle(&mut all);
        out.extend_from_slice(&all[..k]);
    }
    out
}

fn random_gates(rng: &mut Rng, rows: usize, k: usize) -> Vec<f64> {
    let mut g = Vec::with_capacity(rows * k);
    for _ in 0..rows {
        let raw: Vec<f64> = (0..k).map(|_| rng.normal(0.0, 1.0)).collect();
        g.extend(softmax(&raw));
    }
    g
}

/// Dense per-token reference: each token's Q/K/V is the sum over its
/// selected modules, one attention runs over the assembled projections, and
/// each selected module's output projection is applied to that token's
/// attention output with its gate.
fn attention_oracle(c: &MomChunk, x: &[f64], sel: &[usize], gates: &[f64], k: usize, batch: usize, cfg: &ModelConfig) -> Vec<f64> {
    let d = cfg.d_model;
    let rows = x.len() / d;
    let n = c.pool.attn.len();
    let (mut q, mut kk, mut v) = (vec![0.0; rows * d], vec![0.0; rows * d], vec![0.0; rows * d]);
    for r in 0..rows {
        let xr = &x[r * d..(r + 1) * d];
        for &m in sel[r * k..(r + 1) * k].iter().filter(|&&m| m < n) {
            let (qm, km, vm) = qkv(&c.pool.attn[m], xr, cfg);
            for j in 0..d {
                q[r * d + j] += qm[j];
                kk[r * d + j] += km[j];
                v[r * d + j] += vm[j];
            }
        }
    }
    let a = attention(&q, &kk, &v, batch, rows / batch, d, cfg.heads);
    let mut out = vec![0.0; rows * d];
    for r in 0..rows {
        if sel[r * k..(r + 1) * k].iter().all(|&m| m == n) {
            continue;
        }
        for slot in 0..k {
            let m = sel[r * k + slot];
            if m == n {
                continue;
            }
            let y = out_proj(&c.pool.attn[m], &a[r * d..(r + 1) * d], d);
            for j in 0..d {
                out[r * d + j] += gates[r * k + slot] * y[j];
            }
        }
    }
    out
}

#[test]
fn attention_matches_dense_oracle() {
    let mut rng = Rng::new(1);
    for case in 0..20u64 {
        let n = 2 + rng.below(2);
        let (model, c) = pool_model(n, case, &mut rng);
        let ch = chunk(&model);
        let batch = 2;
        let rows = batch * LEN;
        let x = random_input(&mut rng, rows, D, DType::F64);
        let sel = random_selection(&mut rng, rows, n, 2);
        let g = random_gates(&mut rng, rows, 2);
        let gates = Tensor::from_f64(&g, &[rows, 2], DType::F64).unwrap();
        let got = assemble_attention(&ch.pool, &sel, 2, Some(&gates), &x, batch, &c).unwrap();
        let want = attention_oracle(ch, &x.to_vec_f64(), &sel, &g, 2, batch, &c);
        let diff = max_abs_diff(&got.to_vec_f64(), &want);
        assert!(diff < 1e-10, "case {case}: max |diff| {diff}");
    }
}

#[test]
fn ffn_matches_loop_oracle() {
    let mut rng = Rng::new(2);
    for case in 0..20u64 {
        let n = 2 + rng.below(3);
        let (model, c) = pool_model(n, case, &mut rng);
        let ch = chunk(&model);
        let rows = 7;
        let k = 1 + rng.below(2);
        let u = random_input(&mut rng, rows, D, DType::F64);
        let sel = random_selection(&mut rng, rows, n, k);
        let g = random_gates(&mut rng, rows, k);
        let gates = Tensor::from_f64(&g, &[rows, k], DType::F64).unwrap();
        let got = assemble_ffn(&ch.pool, &sel, k, Some(&gates), &u, &c).unwrap().to_vec_f64();
        let uv = u.to_vec_f64();
        let mut want = vec![0.0; rows * D];
        for r in 0..rows {
            for slot in 0..k {
                let m = sel[r * k + slot];
                if m == n {
                    continue;
                }
                let y = ffn(&ch.pool.ffn[m], &uv[r * D..(r + 1) * D], &c);
                for j in 0..D {
                    want[r * D + j] += g[r * k + slot] * y[j];
                }
            }
        }
        assert!(max_abs_diff(&got, &want) < 1e-10, "case {case}");
    }
}

#[test]
fn changing_the_last_tokens_modules_only_changes_that_token() {
    let mut rng = Rng::new(3);
    let (model, c) = pool_model(3, 0, &mut rng);
    let ch = chunk(&model);
    let rows = LEN;
    let x = random_input(&mut rng, rows, D, DType::F64);
    let mut sel = vec![0, 1, 1, 2, 0, 2, 1, 0];
    let a = assemble_attention(&ch.pool, &sel, 2, None, &x, 1, &c).unwrap().to_vec_f64();
    sel[6] = 2;
    let b = assemble_attention(&ch.pool, &sel, 2, None, &x, 1, &c).unwrap().to_vec_f64();
    let split = (rows - 1) * D;
    assert_eq!(a[..split], b[..split]);
    assert!(max_abs_diff(&a[split..], &b[split..]) > 1e-6);
}

#[test]
fn gate_gradients_reach_the_router_inputs() {
    let mut rng = Rng::new(4);
    let (model, c) = pool_model(3, 0, &mut rng);
    let ch = chunk(&model);
    let rows = 2 * LEN;
    let x = random_input(&mut rng, rows, D, DType::F64);
    let sel = random_selection(&mut rng, rows, 3, 2);
    let g = Tensor::from_f64(&random_gates(&mut rng, rows, 2), &[rows, 2], DType::F64)
        .unwrap()
        .into_param();
    let w = random_input(&mut rng, rows, D, DType::F64);
    let pool = ch.pool.clone();
    let f = |t: &[Tensor]| -> mom_tensor::Result<Tensor> {
        let y = assemble_attention(&pool, &sel, 2, Some(&t[0]), &x, 2, &c).unwrap();
        let u = x.add(&y)?;
        let z = assemble_ffn(&pool, &sel, 2, Some(&t[0]), &u, &c).unwrap();
        Ok(z.add(&y)?.mul(&w)?.sum())
    };
    let check = gradcheck(f, std::slice::from_ref(&g), 1e-5).unwrap();
    assert!(check.passes(1e-6), "{:?}", check.rel_errors);

    f(std::slice::from_ref(&g)).unwrap().backward().unwrap();
    let grad = g.grad_f64().unwrap();
    for r in 0..rows {
        for slot in 0..2 {
            let live = sel[r * 2 + slot] != 3;
            let gv = grad[r * 2 + slot];
            assert_eq!(gv != 0.0, live, "row {r} slot {slot}: gradient {gv}");
        }
    }
}

#[test]
fn all_skip_rows_get_zero_output() {
    let mut rng = Rng::new(5);
    let (model, c) = pool_model(2, 0, &mut rng);
    let ch = chunk(&model);
    let x = random_input(&mut rng, LEN, D, DType::F64);
    let sel = vec![0, 2, 2, 2, 1, 0, 2, 2];
    let y = assemble_attention(&ch.pool, &sel, 2, None, &x, 1, &c).unwrap().to_vec_f64();
    assert!(y[D..2 * D].iter().all(|&v| v == 0.0));
    assert!(y[3 * D..].iter().all(|&v| v == 0.0));
    assert!(y[..D].iter().any(|&v| v != 0.0));
}
