//! Convolution, activation, pooling, classifier and loss kernels.
//!
//! Every kernel works sample by sample so that a sample's output never
//! depends on the other samples in its batch.

use crate::error::{Error, Result};
use crate::tensor::{Matrix, Real, Shape4, Tensor4};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub const fn new(stride: usize, pad: usize) -> Self {
        Self { stride, pad }
    }

    fn output_extent(&self, input: usize, kernel: usize) -> Result<usize> {
        if self.stride == 0 {
            return Err(Error::InvalidArgument("conv stride must be >= 1".into()));
        }
        let padded = input + 2 * self.pad;
        if padded < kernel {
            return Err(Error::ShapeMismatch(format!(
                "kernel extent {kernel} exceeds padded input extent {padded}"
            )));
        }
        Ok((padded - kernel) / self.stride + 1)
    }

    /// Output shape of a convolution with `weights` of shape `(Cout, Cin, KH, KW)`.
    pub fn output_shape(&self, input: Shape4, weights: Shape4) -> Result<Shape4> {
        if input.c != weights.c {
            return Err(Error::ShapeMismatch(format!(
                "input has {} channels, weights expect {}",
                input.c, weights.c
            )));
        }
        Ok(Shape4::new(
            input.n,
            weights.n,
            self.output_extent(input.h, weights.h)?,
            self.output_extent(input.w, weights.w)?,
        ))
    }
}

#[derive(Debug, Clone)]
pub struct ConvCache<T> {
    input: Tensor4<T>,
    weights: Tensor4<T>,
    geometry: ConvGeometry,
    out_shape: Shape4,
}

/// Unfolds one `(Cin, H, W)` sample into a `(Cin*KH*KW) x (Hout*Wout)` matrix.
fn im2col<T: Real>(sample: &[T], in_shape: Shape4, k: Shape4, g: ConvGeometry, out: Shape4, col: &mut [T]) {
    let p = out.h * out.w;
    for ci in 0..in_shape.c {
        for kh in 0..k.h {
            for kw in 0..k.w {
                let row = (ci * k.h + kh) * k.w + kw;
                let dst = &mut col[row * p..(row + 1) * p];
                for oh in 0..out.h {
                    let ih = (oh * g.stride + kh) as isize - g.pad as isize;
                    for ow in 0..out.w {
                        let iw = (ow * g.stride + kw) as isize - g.pad as isize;
                        dst[oh * out.w + ow] = if ih >= 0
                            && iw >= 0
                            && (ih as usize) < in_shape.h
                            && (iw as usize) < in_shape.w
                        {
                            sample[(ci * in_shape.h + ih as usize) * in_shape.w + iw as usize]
                        } else {
                            T::zero()
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(col: &[T], in_shape: Shape4, k: Shape4, g: ConvGeometry, out: Shape4, sample: &mut [T]) {
    let p = out.h * out.w;
    for ci in 0..in_shape.c {
        for kh in 0..k.h {
            for kw in 0..k.w {
                let row = (ci * k.h + kh) * k.w + kw;
                let src = &col[row * p..(row + 1) * p];
                for oh in 0..out.h {
                    let ih = (oh * g.stride + kh) as isize - g.pad as isize;
                    if ih < 0 || ih as usize >= in_shape.h {
                        continue;
                    }
                    for ow in 0..out.w {
                        let iw = (ow * g.stride + kw) as isize - g.pad as isize;
                        if iw < 0 || iw as usize >= in_shape.w {
                            continue;
                        }
                        sample[(ci * in_shape.h + ih as usize) * in_shape.w + iw as usize] +=
                            src[oh * out.w + ow];
                    }
                }
            }
        }
    }
}

/// 2-D cross-correlation. `weights` is `(Cout, Cin, KH, KW)`, `bias` has
/// length `Cout`.
pub fn conv2d_forward<T: Real>(
    x: &Tensor4<T>,
    weights: &Tensor4<T>,
    bias: &[T],
    geometry: ConvGeometry,
) -> Result<(Tensor4<T>, ConvCache<T>)> {
    let in_shape = x.shape();
    let k = weights.shape();
    let out_shape = geometry.output_shape(in_shape, k)?;
    if bias.len() != k.n {
        return Err(Error::ShapeMismatch(format!(
            "bias length {} for {} output channels",
            bias.len(),
            k.n
        )));
    }
    let rows = k.c * k.h * k.w;
    let p = out_shape.h * out_shape.w;
    let mut col = vec![T::zero(); rows * p];
    let mut y = Tensor4::zeros(out_shape);
    for n in 0..in_shape.n {
        im2col(x.sample(n), in_shape, k, geometry, out_shape, &mut col);
        let yn = y.sample_mut(n);
        for (co, &b) in bias.iter().enumerate() {
            yn[co * p..(co + 1) * p].fill(b);
        }
        T::gemm(k.n, rows, p, weights.data(), false, &col, false, yn, true);
    }
    let cache = ConvCache {
        input: x.clone(),
        weights: weights.clone(),
        geometry,
        out_shape,
    };
    Ok((y, cache))
}

/// Returns `(dx, dweights, dbias)`.
pub fn conv2d_backward<T: Real>(
    cache: &ConvCache<T>,
    dy: &Tensor4<T>,
) -> Result<(Tensor4<T>, Tensor4<T>, Vec<T>)> {
    if dy.shape() != cache.out_shape {
        return Err(Error::ShapeMismatch(format!(
            "conv upstream gradient {} vs output {}",
            dy.shape(),
            cache.out_shape
        )));
    }
    let in_shape = cache.input.shape();
    let k = cache.weights.shape();
    let out = cache.out_shape;
    let rows = k.c * k.h * k.w;
    let p = out.h * out.w;
    let mut col = vec![T::zero(); rows * p];
    let mut dcol = vec![T::zero(); rows * p];
    let mut dx = Tensor4::zeros(in_shape);
    let mut dw = Tensor4::zeros(k);
    let mut db_acc = vec![0.0f64; k.n];
    for n in 0..in_shape.n {
        let dyn_ = dy.sample(n);
        for (co, acc) in db_acc.iter_mut().enumerate() {
            *acc += dyn_[co * p..(co + 1) * p].iter().map(|v| v.to_f64()).sum::<f64>();
        }
        im2col(cache.input.sample(n), in_shape, k, cache.geometry, out, &mut col);
        // dW += dy_n (Cout x P) * col^T (P x R)
        T::gemm(k.n, p, rows, dyn_, false, &col, true, dw.data_mut(), true);
        // dcol = W^T (R x Cout) * dy_n (Cout x P)
        T::gemm(rows, k.n, p, cache.weights.data(), true, dyn_, false, &mut dcol, false);
        col2im(&dcol, in_shape, k, cache.geometry, out, dx.sample_mut(n));
    }
    let db = db_acc.into_iter().map(T::from_f64).collect();
    Ok((dx, dw, db))
}

#[derive(Debug, Clone)]
pub struct ReluCache {
    active: Vec<bool>,
    shape: Shape4,
}

pub fn relu_forward<T: Real>(x: &Tensor4<T>) -> (Tensor4<T>, ReluCache) {
    let zero = T::zero();
    let active: Vec<bool> = x.data().iter().map(|&v| v > zero).collect();
    let y = x.map(|v| if v > zero { v } else { zero });
    (
        y,
        ReluCache {
            active,
            shape: x.shape(),
        },
    )
}

pub fn relu_backward<T: Real>(cache: &ReluCache, dy: &Tensor4<T>) -> Result<Tensor4<T>> {
    if dy.shape() != cache.shape {
        return Err(Error::ShapeMismatch(format!(
            "relu upstream gradient {} vs {}",
            dy.shape(),
            cache.shape
        )));
    }
    let data = dy
        .data()
        .iter()
        .zip(&cache.active)
        .map(|(&g, &on)| if on { g } else { T::zero() })
        .collect();
    Tensor4::from_vec(cache.shape, data)
}

/// Averages each channel plane, producing `(N, C, 1, 1)`.
pub fn global_avg_pool_forward<T: Real>(x: &Tensor4<T>) -> Tensor4<T> {
    let s = x.shape();
    let plane = s.plane();
    let mut out = Tensor4::zeros(Shape4::new(s.n, s.c, 1, 1));
    for (dst, chunk) in out.data_mut().iter_mut().zip(x.data().chunks(plane)) {
        let acc: f64 = chunk.iter().map(|v| v.to_f64()).sum();
        *dst = T::from_f64(acc / plane as f64);
    }
    out
}

pub fn global_avg_pool_backward<T: Real>(input_shape: Shape4, dy: &Tensor4<T>) -> Result<Tensor4<T>> {
    let expect = Shape4::new(input_shape.n, input_shape.c, 1, 1);
    if dy.shape() != expect {
        return Err(Error::ShapeMismatch(format!(
            "pool upstream gradient {} vs {expect}",
            dy.shape()
        )));
    }
    let plane = input_shape.plane();
    let scale = 1.0 / plane as f64;
    let mut dx = Tensor4::zeros(input_shape);
    for (chunk, &g) in dx.data_mut().chunks_mut(plane).zip(dy.data()) {
        chunk.fill(T::from_f64(g.to_f64() * scale));
    }
    Ok(dx)
}

#[derive(Debug, Clone)]
pub struct LinearCache<T> {
    input: Tensor4<T>,
    weights: Matrix<T>,
}

/// Fully connected layer on each sample flattened over `(C, H, W)`.
/// `weights` is `out x in`.
pub fn linear_forward<T: Real>(
    x: &Tensor4<T>,
    weights: &Matrix<T>,
    bias: &[T],
) -> Result<(Matrix<T>, LinearCache<T>)> {
    let s = x.shape();
    let fan_in = s.merged();
    if weights.cols() != fan_in || bias.len() != weights.rows() {
        return Err(Error::ShapeMismatch(format!(
            "linear layer {}x{} (bias {}) applied to features of width {fan_in}",
            weights.rows(),
            weights.cols(),
            bias.len()
        )));
    }
    let mut logits = Matrix::zeros(s.n, weights.rows());
    for n in 0..s.n {
        let xn = x.sample(n);
        for (k, out) in logits.row_mut(n).iter_mut().enumerate() {
            let acc = weights
                .row(k)
                .iter()
                .zip(xn)
                .fold(bias[k].to_f64(), |a, (w, v)| a + w.to_f64() * v.to_f64());
            *out = T::from_f64(acc);
        }
    }
    Ok((
        logits,
        LinearCache {
            input: x.clone(),
            weights: weights.clone(),
        },
    ))
}

/// Returns `(dx, dweights, dbias)`.
pub fn linear_backward<T: Real>(
    cache: &LinearCache<T>,
    dlogits: &Matrix<T>,
) -> Result<(Tensor4<T>, Matrix<T>, Vec<T>)> {
    let s = cache.input.shape();
    let (out_dim, fan_in) = (cache.weights.rows(), cache.weights.cols());
    if dlogits.rows() != s.n || dlogits.cols() != out_dim {
        return Err(Error::ShapeMismatch(format!(
            "logit gradient {}x{} vs expected {}x{out_dim}",
            dlogits.rows(),
            dlogits.cols(),
            s.n
        )));
    }
    let mut dw = vec![0.0f64; out_dim * fan_in];
    let mut db = vec![0.0f64; out_dim];
    let mut dx = Tensor4::zeros(s);
    for n in 0..s.n {
        let xn = cache.input.sample(n);
        let g = dlogits.row(n);
        for k in 0..out_dim {
            let gk = g[k].to_f64();
            db[k] += gk;
            for (acc, v) in dw[k * fan_in..(k + 1) * fan_in].iter_mut().zip(xn) {
                *acc += gk * v.to_f64();
            }
        }
        let dxn = dx.sample_mut(n);
        for (j, out) in dxn.iter_mut().enumerate() {
            let acc = (0..out_dim).fold(0.0, |a, k| a + g[k].to_f64() * cache.weights.at(k, j).to_f64());
            *out = T::from_f64(acc);
        }
    }
    let dw = Matrix::from_vec(out_dim, fan_in, dw.into_iter().map(T::from_f64).collect())?;
    Ok((dx, dw, db.into_iter().map(T::from_f64).collect()))
}

/// Mean softmax cross-entropy over the batch and its gradient w.r.t. logits.
pub fn softmax_cross_entropy<T: Real>(logits: &Matrix<T>, labels: &[usize]) -> Result<(f64, Matrix<T>)> {
    let (n, k) = (logits.rows(), logits.cols());
    if labels.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "{} labels for {n} logit rows",
            labels.len()
        )));
    }
    if n == 0 || k == 0 {
        return Err(Error::ShapeMismatch("empty logits".into()));
    }
    let mut loss = 0.0;
    let mut grad = Matrix::zeros(n, k);
    let mut probs = vec![0.0f64; k];
    for (r, &label) in labels.iter().enumerate() {
        if label >= k {
            return Err(Error::InvalidArgument(format!("label {label} for {k} classes")));
        }
        let row = logits.row(r);
        let max = row.iter().map(|v| v.to_f64()).fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for (p, v) in probs.iter_mut().zip(row) {
            *p = (v.to_f64() - max).exp();
            z += *p;
        }
        loss += z.ln() - (row[label].to_f64() - max);
        for (j, (g, p)) in grad.row_mut(r).iter_mut().zip(&probs).enumerate() {
            let target = if j == label { 1.0 } else { 0.0 };
            *g = T::from_f64((p / z - target) / n as f64);
        }
    }
    Ok((loss / n as f64, grad))
}

/// Index of the largest logit in each row; ties go to the lowest index.
pub fn argmax_rows<T: Real>(logits: &Matrix<T>) -> Vec<usize> {
    (0..logits.rows())
        .map(|r| {
            let row = logits.row(r);
            let mut best = 0;
            for (j, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}
