//! Finite-difference checks of every differentiable op on random small shapes.

use mom_tensor::{gradcheck, DType, Result, Rng, Tensor};

const H: f64 = 1e-5;
const TOL: f64 = 1e-6;
const TRIALS: usize = 120;

fn param(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_f64(&rng.normal_vec(n, 0.0, 1.0), shape, DType::F64)
        .unwrap()
        .into_param()
}

fn constant(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_f64(&rng.normal_vec(n, 0.0, 1.0), shape, DType::F64).unwrap()
}

/// Random linear functional of `y`, so every output element affects the loss.
fn project(y: Tensor, w: &Tensor) -> Result<Tensor> {
    Ok(y.reshape(w.shape())?.mul(w)?.sum())
}

fn dim(rng: &mut Rng) -> usize {
    1 + rng.below(8)
}

fn check(name: &str, trial: usize, f: impl Fn(&[Tensor]) -> Result<Tensor>, inputs: &[Tensor]) {
    let report = gradcheck(f, inputs, H).unwrap();
    assert!(
        report.passes(TOL),
        "{name} trial {trial}: relative errors {:?}",
        report.rel_errors
    );
}

#[test]
fn matmul_and_transpose() {
    let mut rng = Rng::new(11);
    for trial in 0..TRIALS {
        let (m, k, n) = (dim(&mut rng), dim(&mut rng), dim(&mut rng));
        let a = param(&mut rng, &[m, k]);
        let b = param(&mut rng, &[n, k]);
        let w = constant(&mut rng, &[m, n]);
        check("matmul", trial, |x| project(x[0].matmul(&x[1].transpose()?)?, &w), &[a, b]);
    }
}

#[test]
fn elementwise_binary() {
    let mut rng = Rng::new(12);
    for trial in 0..TRIALS {
        let shape = [dim(&mut rng), dim(&mut rng)];
        let a = param(&mut rng, &shape);
        let b = param(&mut rng, &shape);
        let w = constant(&mut rng, &shape);
        check(
            "add/sub/mul",
            trial,
            |x| project(x[0].mul(&x[1])?.add(&x[0])?.sub(&x[1].scale(0.3))?.add_scalar(2.0), &w),
            &[a, b],
        );
    }
}

#[test]
fn activations() {
    let mut rng = Rng::new(13);
    for trial in 0..TRIALS {
        let shape = [dim(&mut rng), dim(&mut rng)];
        let a = param(&mut rng, &shape);
        let w = constant(&mut rng, &shape);
        check("gelu", trial, |x| project(x[0].gelu(), &w), std::slice::from_ref(&a));
        check("sigmoid", trial, |x| project(x[0].sigmoid(), &w), std::slice::from_ref(&a));
        check("tanh", trial, |x| project(x[0].tanh(), &w), &[a]);
    }
}

#[test]
fn broadcasting_products() {
    let mut rng = Rng::new(14);
    for trial in 0..TRIALS {
        let (n, d) = (dim(&mut rng), dim(&mut rng));
        let x = param(&mut rng, &[n, d]);
        let b = param(&mut rng, &[d]);
        let s = param(&mut rng, &[n, 1]);
        let w = constant(&mut rng, &[n, d]);
        check("add_bias/mul_rows", trial, |p| project(p[0].add_bias(&p[1])?.mul_rows(&p[2])?, &w), &[x, b, s]);
    }
}

#[test]
fn softmax_with_and_without_mask() {
    let mut rng = Rng::new(15);
    for trial in 0..TRIALS {
        let (n, d) = (dim(&mut rng), dim(&mut rng));
        let x = param(&mut rng, &[n, d]);
        let w = constant(&mut rng, &[n, d]);
        let mut m = vec![0.0; d];
        for v in m.iter_mut().skip(1) {
            if rng.below(2) == 0 {
                *v = f64::NEG_INFINITY;
            }
        }
        let mask = Tensor::from_f64(&m, &[d], DType::F64).unwrap();
        check("softmax", trial, |p| project(p[0].softmax_lastdim(None)?, &w), std::slice::from_ref(&x));
        check("masked softmax", trial, |p| project(p[0].softmax_lastdim(Some(&mask))?, &w), &[x]);
    }
}

#[test]
fn layernorm() {
    let mut rng = Rng::new(16);
    for trial in 0..TRIALS {
        // Width-2 rows normalize to about (±1, ∓1) whatever the input, so the
        // input gradient is nearly zero and the relative error measures noise.
        let (n, d) = (dim(&mut rng), 3 + rng.below(6));
        let x = param(&mut rng, &[n, d]);
        let g = param(&mut rng, &[d]);
        let b = param(&mut rng, &[d]);
        let w = constant(&mut rng, &[n, d]);
        check("layernorm", trial, |p| project(p[0].layernorm(&p[1], &p[2], 1e-5)?, &w), &[x, g, b]);
    }
}

#[test]
fn cross_entropy() {
    let mut rng = Rng::new(17);
    for trial in 0..TRIALS {
        let (n, v) = (dim(&mut rng), 2 + rng.below(7));
        let x = param(&mut rng, &[n, v]);
        let targets: Vec<usize> = (0..n).map(|_| rng.below(v)).collect();
        check("cross_entropy", trial, |p| p[0].cross_entropy(&targets), &[x]);
    }
}

#[test]
fn indexing_concat_slicing() {
    let mut rng = Rng::new(18);
    for trial in 0..TRIALS {
        let (n, d) = (dim(&mut rng), dim(&mut rng));
        let table = param(&mut rng, &[n, d]);
        let m = dim(&mut rng);
        let idx: Vec<usize> = (0..m).map(|_| rng.below(n)).collect();
        let k = 1 + rng.below(d);
        let cols: Vec<usize> = (0..m * k).map(|_| rng.below(2 * d)).collect();
        let other = param(&mut rng, &[m, d]);
        let w = constant(&mut rng, &[m, k]);
        let f = |p: &[Tensor]| {
            let rows = p[0].index_select_rows(&idx)?;
            let wide = Tensor::concat_cols(&[rows, p[1].clone()])?;
            let picked = wide.gather_per_row(&cols, k)?;
            project(picked, &w)
        };
        check("select/concat/gather", trial, f, &[table.clone(), other.clone()]);

        let lo = rng.below(m);
        let hi = lo + 1 + rng.below(m - lo);
        let c0 = rng.below(d);
        let c1 = c0 + 1 + rng.below(d - c0);
        let w2 = constant(&mut rng, &[n, c1 - c0]);
        let g = |p: &[Tensor]| {
            let part = p[1].slice_rows(lo, hi)?;
            let dest: Vec<usize> = (lo..hi).map(|i| idx[i]).collect();
            let scattered = part.index_add_rows(&dest, n)?.add(&p[0])?;
            let stacked = Tensor::concat_rows(&[scattered.clone(), scattered])?;
            project(stacked.slice_rows(n, 2 * n)?.slice_cols(c0, c1)?, &w2)
        };
        check("slice/scatter/concat_rows", trial, g, &[table, other]);
    }
}

#[test]
fn causal_attention_core() {
    let mut rng = Rng::new(19);
    for trial in 0..TRIALS {
        let batch = 1 + rng.below(2);
        let len = 1 + rng.below(5);
        let heads = 1 + rng.below(2);
        let d = heads * (1 + rng.below(3));
        let shape = [batch * len, d];
        let q = param(&mut rng, &shape);
        let k = param(&mut rng, &shape);
        let v = param(&mut rng, &shape);
        let w = constant(&mut rng, &shape);
        check(
            "causal_attention",
            trial,
            |p| project(Tensor::causal_attention(&p[0], &p[1], &p[2], batch, heads)?, &w),
            &[q, k, v],
        );
    }
}
