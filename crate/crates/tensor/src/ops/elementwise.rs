use super::{rows_last, same_dtype, same_shape, tracks};
use crate::{with_dtype, Element, Result, Storage, Tensor, TensorError};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_K: f64 = 0.044_715;

fn unary<T, F, D>(x: &Tensor, f: F, df: D) -> Tensor
where
    T: Element,
    F: Fn(T) -> T,
    D: Fn(T, T) -> T + Send + Sync + 'static,
{
    let y: Vec<T> = T::slice(&x.storage()).iter().map(|&v| f(v)).collect();
    if !tracks(&[x]) {
        return Tensor::from_op(T::wrap(y), x.shape().to_vec(), vec![], |_| vec![]);
    }
    let saved_y = y.clone();
    let saved_x = x.clone();
    Tensor::from_op(T::wrap(y), x.shape().to_vec(), vec![x.clone()], move |g| {
        let xs = saved_x.storage();
        let xv = T::slice(&xs);
        let grad = T::slice(g)
            .iter()
            .zip(xv)
            .zip(&saved_y)
            .map(|((&g, &x), &y)| g * df(x, y))
            .collect();
        vec![Some(T::wrap(grad))]
    })
}

fn binary<T, F>(a: &Tensor, b: &Tensor, f: F) -> Vec<T>
where
    T: Element,
    F: Fn(T, T) -> T,
{
    let (sa, sb) = (a.storage(), b.storage());
    T::slice(&sa)
        .iter()
        .zip(T::slice(&sb))
        .map(|(&x, &y)| f(x, y))
        .collect()
}

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("add", self, other)?;
        Ok(with_dtype!(self.dtype(), T, {
            let out = binary::<T, _>(self, other, |x, y| x + y);
            Tensor::from_op(
                T::wrap(out),
                self.shape().to_vec(),
                vec![self.clone(), other.clone()],
                |g| vec![Some(g.clone()), Some(g.clone())],
            )
        }))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("sub", self, other)?;
        Ok(with_dtype!(self.dtype(), T, {
            let out = binary::<T, _>(self, other, |x, y| x - y);
            Tensor::from_op(
                T::wrap(out),
                self.shape().to_vec(),
                vec![self.clone(), other.clone()],
                |g| {
                    let neg = T::slice(g).iter().map(|&v| -v).collect();
                    vec![Some(g.clone()), Some(T::wrap(neg))]
                },
            )
        }))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("mul", self, other)?;
        Ok(with_dtype!(self.dtype(), T, {
            let out = binary::<T, _>(self, other, |x, y| x * y);
            let (a, b) = (self.clone(), other.clone());
            Tensor::from_op(
                T::wrap(out),
                self.shape().to_vec(),
                vec![self.clone(), other.clone()],
                move |g| {
                    let g = T::slice(g);
                    let (sa, sb) = (a.storage(), b.storage());
                    let (av, bv) = (T::slice(&sa), T::slice(&sb));
                    let ga = g.iter().zip(bv).map(|(&g, &y)| g * y).collect();
                    let gb = g.iter().zip(av).map(|(&g, &x)| g * x).collect();
                    vec![Some(T::wrap(ga)), Some(T::wrap(gb))]
                },
            )
        }))
    }

    /// `x + bias` with `bias` broadcast over every leading index.
    pub fn add_bias(&self, bias: &Tensor) -> Result<Tensor> {
        same_dtype("add_bias", self, bias)?;
        let (rows, d) = rows_last("add_bias", self)?;
        if bias.shape() != [d] {
            return Err(TensorError::shape("add_bias", self.shape(), bias.shape()));
        }
        Ok(with_dtype!(self.dtype(), T, {
            let out: Vec<T> = {
                let (sx, sb) = (self.storage(), bias.storage());
                let (xv, bv) = (T::slice(&sx), T::slice(&sb));
                xv.chunks_exact(d)
                    .flat_map(|row| row.iter().zip(bv).map(|(&x, &b)| x + b))
                    .collect()
            };
            Tensor::from_op(
                T::wrap(out),
                self.shape().to_vec(),
                vec![self.clone(), bias.clone()],
                move |g| {
                    let gv = T::slice(g);
                    let mut gb = vec![T::zero(); d];
                    for r in 0..rows {
                        for (acc, &v) in gb.iter_mut().zip(&gv[r * d..(r + 1) * d]) {
                            *acc += v;
                        }
                    }
                    vec![Some(g.clone()), Some(T::wrap(gb))]
                },
            )
        }))
    }

    /// Scales row `i` of an `[n, d]` matrix by `scales[i]` (`scales` is `[n, 1]`).
    pub fn mul_rows(&self, scales: &Tensor) -> Result<Tensor> {
        same_dtype("mul_rows", self, scales)?;
        let (n, d) = super::matrix_dims("mul_rows", self)?;
        if scales.shape() != [n, 1] {
            return Err(TensorError::shape("mul_rows", self.shape(), scales.shape()));
        }
        Ok(with_dtype!(self.dtype(), T, {
            let out: Vec<T> = {
                let (sx, sc) = (self.storage(), scales.storage());
                let (xv, cv) = (T::slice(&sx), T::slice(&sc));
                xv.chunks_exact(d.max(1))
                    .zip(cv)
                    .flat_map(|(row, &c)| row.iter().map(move |&x| x * c))
                    .collect()
            };
            let (x, c) = (self.clone(), scales.clone());
            Tensor::from_op(
                T::wrap(out),
                vec![n, d],
                vec![self.clone(), scales.clone()],
                move |g| {
                    let gv = T::slice(g);
                    let (sx, sc) = (x.storage(), c.storage());
                    let (xv, cv) = (T::slice(&sx), T::slice(&sc));
                    let mut gx = vec![T::zero(); n * d];
                    let mut gc = vec![T::zero(); n];
                    for i in 0..n {
                        let mut acc = T::zero();
                        for j in 0..d {
                            gx[i * d + j] = gv[i * d + j] * cv[i];
                            acc += gv[i * d + j] * xv[i * d + j];
                        }
                        gc[i] = acc;
                    }
                    vec![Some(T::wrap(gx)), Some(T::wrap(gc))]
                },
            )
        }))
    }

    pub fn scale(&self, s: f64) -> Tensor {
        with_dtype!(self.dtype(), T, {
            let k = T::of(s);
            let out: Vec<T> = T::slice(&self.storage()).iter().map(|&x| x * k).collect();
            Tensor::from_op(T::wrap(out), self.shape().to_vec(), vec![self.clone()], move |g| {
                vec![Some(T::wrap(T::slice(g).iter().map(|&v| v * k).collect()))]
            })
        })
    }

    pub fn add_scalar(&self, s: f64) -> Tensor {
        with_dtype!(self.dtype(), T, {
            let k = T::of(s);
            let out: Vec<T> = T::slice(&self.storage()).iter().map(|&x| x + k).collect();
            Tensor::from_op(T::wrap(out), self.shape().to_vec(), vec![self.clone()], |g| {
                vec![Some(g.clone())]
            })
        })
    }

    pub fn sigmoid(&self) -> Tensor {
        with_dtype!(self.dtype(), T, {
            unary::<T, _, _>(
                self,
                |x| T::one() / (T::one() + (-x).exp()),
                |_, y| y * (T::one() - y),
            )
        })
    }

    pub fn tanh(&self) -> Tensor {
        with_dtype!(self.dtype(), T, {
            unary::<T, _, _>(self, |x| x.tanh(), |_, y| T::one() - y * y)
        })
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Tensor {
        with_dtype!(self.dtype(), T, {
            let (c, k) = (T::of(GELU_C), T::of(GELU_K));
            let half = T::of(0.5);
            let three = T::of(3.0);
            unary::<T, _, _>(
                self,
                move |x| half * x * (T::one() + (c * (x + k * x * x * x)).tanh()),
                move |x, _| {
                    let t = (c * (x + k * x * x * x)).tanh();
                    half * (T::one() + t)
                        + half * x * (T::one() - t * t) * c * (T::one() + three * k * x * x)
                },
            )
        })
    }

    /// Sum of all elements, as a scalar tensor.
    pub fn sum(&self) -> Tensor {
        let n = self.numel();
        with_dtype!(self.dtype(), T, {
            let total = T::slice(&self.storage())
                .iter()
                .fold(T::zero(), |acc, &x| acc + x);
            Tensor::from_op(T::wrap(vec![total]), vec![], vec![self.clone()], move |g| {
                let g0 = T::slice(g)[0];
                vec![Some(T::wrap(vec![g0; n]))]
            })
        })
    }

    pub fn mean(&self) -> Tensor {
        let n = self.numel().max(1);
        self.sum().scale(1.0 / n as f64)
    }

    /// Same data under a new shape with equal element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if crate::tensor::numel(shape) != self.numel() {
            return Err(TensorError::shape("reshape", self.shape(), shape));
        }
        let storage: Storage = self.storage().clone();
        Ok(Tensor::from_op(storage, shape.to_vec(), vec![self.clone()], |g| {
            vec![Some(g.clone())]
        }))
    }
}
