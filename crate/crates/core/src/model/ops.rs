//! Layer primitives with hand-written backward passes.
//!
//! Convolutions are "same"-padded, stride 1, lowered to a matrix product
//! over an unfolded (im2col) input. Per-sample work runs on the rayon pool;
//! parameter gradients are reduced in sample order so results do not depend
//! on the thread count.

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};
use rayon::prelude::*;

use super::tensor::{Real, Tensor};

pub const LEAKY_SLOPE: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Unfolds one sample `(cin, h, w)` into `(cin * k * k, h * w)`.
fn im2col<T: Real>(x: &[T], cin: usize, h: usize, w: usize, k: usize) -> Vec<T> {
    let hw = h * w;
    let pad = (k / 2) as isize;
    let mut col = vec![T::zero(); cin * k * k * hw];
    for ci in 0..cin {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            let dy = ky as isize - pad;
            for kx in 0..k {
                let dx = kx as isize - pad;
                let row = &mut col[((ci * k + ky) * k + kx) * hw..][..hw];
                let x0 = (-dx).max(0) as usize;
                let x1 = (w as isize - dx).min(w as isize).max(0) as usize;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize || x0 >= x1 {
                        continue;
                    }
                    let sy = sy as usize;
                    let src = &plane[sy * w + (x0 as isize + dx) as usize..][..x1 - x0];
                    row[y * w + x0..y * w + x1].copy_from_slice(src);
                }
            }
        }
    }
    col
}

/// Folds column gradients back onto the input sample (adjoint of `im2col`).
fn col2im_add<T: Real>(col: &[T], gx: &mut [T], cin: usize, h: usize, w: usize, k: usize) {
    let hw = h * w;
    let pad = (k / 2) as isize;
    for ci in 0..cin {
        let plane = &mut gx[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            let dy = ky as isize - pad;
            for kx in 0..k {
                let dx = kx as isize - pad;
                let row = &col[((ci * k + ky) * k + kx) * hw..][..hw];
                let x0 = (-dx).max(0) as usize;
                let x1 = (w as isize - dx).min(w as isize).max(0) as usize;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize || x0 >= x1 {
                        continue;
                    }
                    let sy = sy as usize;
                    let dst = &mut plane[sy * w + (x0 as isize + dx) as usize..][..x1 - x0];
                    for (d, &s) in dst.iter_mut().zip(&row[y * w + x0..y * w + x1]) {
                        *d += s;
                    }
                }
            }
        }
    }
}

/// Same-padded `k x k` convolution; `weight` is `(cout, cin, k, k)` row-major.
pub fn conv2d_forward<T: Real>(x: &Tensor<T>, weight: &[T], bias: &[T], cout: usize, k: usize) -> Tensor<T> {
    let (cin, h, w) = (x.c, x.h, x.w);
    let hw = h * w;
    assert_eq!(weight.len(), cout * cin * k * k, "conv weight shape");
    assert_eq!(bias.len(), cout, "conv bias shape");
    let mut out = Tensor::zeros(x.n, cout, h, w);
    let wmat = ArrayView2::from_shape((cout, cin * k * k), weight).expect("weight view");
    out.data
        .par_chunks_mut(cout * hw)
        .zip(x.data.par_chunks(cin * hw))
        .for_each(|(o, xi)| {
            for (co, plane) in o.chunks_mut(hw).enumerate() {
                plane.fill(bias[co]);
            }
            let mut omat = ArrayViewMut2::from_shape((cout, hw), o).expect("out view");
            if k == 1 {
                let xmat = ArrayView2::from_shape((cin, hw), xi).expect("input view");
                general_mat_mul(T::one(), &wmat, &xmat, T::one(), &mut omat);
            } else {
                let col = im2col(xi, cin, h, w, k);
                let cmat = ArrayView2::from_shape((cin * k * k, hw), &col[..]).expect("col view");
                general_mat_mul(T::one(), &wmat, &cmat, T::one(), &mut omat);
            }
        });
    out
}

pub struct ConvGrads<T> {
    pub input: Tensor<T>,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    weight: &[T],
    cout: usize,
    k: usize,
    grad_out: &Tensor<T>,
) -> ConvGrads<T> {
    let (cin, h, w) = (x.c, x.h, x.w);
    let hw = h * w;
    let kk = cin * k * k;
    let wmat = ArrayView2::from_shape((cout, kk), weight).expect("weight view");
    let per_sample: Vec<(Vec<T>, Vec<T>, Vec<T>)> = (0..x.n)
        .into_par_iter()
        .map(|i| {
            let xi = x.sample(i);
            let go = grad_out.sample(i);
            let gmat = ArrayView2::from_shape((cout, hw), go).expect("grad view");
            let col_store;
            let cmat = if k == 1 {
                ArrayView2::from_shape((cin, hw), xi).expect("input view")
            } else {
                col_store = im2col(xi, cin, h, w, k);
                ArrayView2::from_shape((kk, hw), &col_store[..]).expect("col view")
            };
            let mut gw = vec![T::zero(); cout * kk];
            {
                let mut gwm = ArrayViewMut2::from_shape((cout, kk), &mut gw[..]).expect("gw view");
                general_mat_mul(T::one(), &gmat, &cmat.t(), T::zero(), &mut gwm);
            }
            let gb: Vec<T> = go.chunks(hw).map(|p| p.iter().copied().sum()).collect();
            let mut gcol = vec![T::zero(); kk * hw];
            {
                let mut gcm = ArrayViewMut2::from_shape((kk, hw), &mut gcol[..]).expect("gcol view");
                general_mat_mul(T::one(), &wmat.t(), &gmat, T::zero(), &mut gcm);
            }
            let gx = if k == 1 {
                gcol
            } else {
                let mut gx = vec![T::zero(); cin * hw];
                col2im_add(&gcol, &mut gx, cin, h, w, k);
                gx
            };
            (gx, gw, gb)
        })
        .collect();

    let mut input = Tensor::zeros(x.n, cin, h, w);
    let mut gweight = vec![T::zero(); cout * kk];
    let mut gbias = vec![T::zero(); cout];
    for (i, (gx, gw, gb)) in per_sample.into_iter().enumerate() {
        input.data[i * cin * hw..(i + 1) * cin * hw].copy_from_slice(&gx);
        for (a, b) in gweight.iter_mut().zip(gw) {
            *a += b;
        }
        for (a, b) in gbias.iter_mut().zip(gb) {
            *a += b;
        }
    }
    ConvGrads {
        input,
        weight: gweight,
        bias: gbias,
    }
}

pub fn leaky_relu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let slope = T::lit(LEAKY_SLOPE);
    x.map(|v| if v > T::zero() { v } else { v * slope })
}

/// Gradient through leaky ReLU given the pre-activation `x`.
pub fn leaky_relu_backward<T: Real>(x: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    let slope = T::lit(LEAKY_SLOPE);
    let data = x
        .data
        .iter()
        .zip(&grad_out.data)
        .map(|(&v, &g)| if v > T::zero() { g } else { g * slope })
        .collect();
    Tensor { data, ..*x }
}

pub fn sigmoid<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| T::one() / (T::one() + (-v).exp()))
}

/// Gradient through the sigmoid given its output `y`.
pub fn sigmoid_backward<T: Real>(y: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    let data = y
        .data
        .iter()
        .zip(&grad_out.data)
        .map(|(&s, &g)| g * s * (T::one() - s))
        .collect();
    Tensor { data, ..*y }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running statistics are updated.
    Train,
    /// Frozen running statistics.
    Eval,
}

pub struct BnCache<T> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
}

pub struct BnOutput<T> {
    pub out: Tensor<T>,
    pub cache: BnCache<T>,
    /// Updated `(running_mean, running_var)` in train mode.
    pub running: Option<(Vec<T>, Vec<T>)>,
}

pub fn batch_norm_forward<T: Real>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    running_mean: &[T],
    running_var: &[T],
    mode: Mode,
) -> BnOutput<T> {
    let (n, c, hw) = (x.n, x.c, x.plane());
    let m = n * hw;
    let eps = T::lit(BN_EPS);
    let (means, vars): (Vec<T>, Vec<T>) = match mode {
        Mode::Eval => (running_mean.to_vec(), running_var.to_vec()),
        Mode::Train => (0..c)
            .map(|ch| {
                let mut sum = T::zero();
                for i in 0..n {
                    sum += x.channel(i, ch).iter().copied().sum::<T>();
                }
                let mean = sum / T::from_usize(m).unwrap();
                let mut sq = T::zero();
                for i in 0..n {
                    sq += x.channel(i, ch).iter().map(|&v| (v - mean) * (v - mean)).sum::<T>();
                }
                (mean, sq / T::from_usize(m).unwrap())
            })
            .unzip(),
    };
    let inv_std: Vec<T> = vars.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = vec![T::zero(); x.data.len()];
    let mut out = Tensor::zeros(n, c, x.h, x.w);
    for i in 0..n {
        for ch in 0..c {
            let off = (i * c + ch) * hw;
            let src = &x.data[off..off + hw];
            for ((xh, o), &v) in xhat[off..off + hw].iter_mut().zip(&mut out.data[off..off + hw]).zip(src) {
                *xh = (v - means[ch]) * inv_std[ch];
                *o = gamma[ch] * *xh + beta[ch];
            }
        }
    }
    let running = match mode {
        Mode::Eval => None,
        Mode::Train => {
            let mom = T::lit(BN_MOMENTUM);
            let unbias = if m > 1 {
                T::from_usize(m).unwrap() / T::from_usize(m - 1).unwrap()
            } else {
                T::one()
            };
            Some((
                running_mean
                    .iter()
                    .zip(&means)
                    .map(|(&r, &b)| (T::one() - mom) * r + mom * b)
                    .collect(),
                running_var
                    .iter()
                    .zip(&vars)
                    .map(|(&r, &b)| (T::one() - mom) * r + mom * b * unbias)
                    .collect(),
            ))
        }
    };
    BnOutput {
        out,
        cache: BnCache { xhat, inv_std },
        running,
    }
}

pub struct BnGrads<T> {
    pub input: Tensor<T>,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
}

pub fn batch_norm_backward<T: Real>(
    cache: &BnCache<T>,
    gamma: &[T],
    grad_out: &Tensor<T>,
    mode: Mode,
) -> BnGrads<T> {
    let (n, c, hw) = (grad_out.n, grad_out.c, grad_out.plane());
    let m = T::from_usize(n * hw).unwrap();
    let mut ggamma = vec![T::zero(); c];
    let mut gbeta = vec![T::zero(); c];
    for i in 0..n {
        for ch in 0..c {
            let off = (i * c + ch) * hw;
            for j in off..off + hw {
                ggamma[ch] += grad_out.data[j] * cache.xhat[j];
                gbeta[ch] += grad_out.data[j];
            }
        }
    }
    let mut input = Tensor::zeros(n, c, grad_out.h, grad_out.w);
    for i in 0..n {
        for ch in 0..c {
            let off = (i * c + ch) * hw;
            let scale = gamma[ch] * cache.inv_std[ch];
            for j in off..off + hw {
                input.data[j] = match mode {
                    Mode::Eval => grad_out.data[j] * scale,
                    // dxhat sums reduce to gamma * (dbeta, dgamma)
                    Mode::Train => {
                        scale / m * (m * grad_out.data[j] - gbeta[ch] - cache.xhat[j] * ggamma[ch])
                    }
                };
            }
        }
    }
    BnGrads {
        input,
        gamma: ggamma,
        beta: gbeta,
    }
}

/// 2x2 average pooling with stride 2.
pub fn avg_pool2<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    assert!(x.h.is_multiple_of(2) && x.w.is_multiple_of(2), "pooling needs even spatial size");
    let (oh, ow) = (x.h / 2, x.w / 2);
    let quarter = T::lit(0.25);
    let mut out = Tensor::zeros(x.n, x.c, oh, ow);
    for (plane, src) in out.data.chunks_mut(oh * ow).zip(x.data.chunks(x.h * x.w)) {
        for y in 0..oh {
            for xx in 0..ow {
                let a = src[(2 * y) * x.w + 2 * xx];
                let b = src[(2 * y) * x.w + 2 * xx + 1];
                let c = src[(2 * y + 1) * x.w + 2 * xx];
                let d = src[(2 * y + 1) * x.w + 2 * xx + 1];
                plane[y * ow + xx] = (a + b + c + d) * quarter;
            }
        }
    }
    out
}

pub fn avg_pool2_backward<T: Real>(grad_out: &Tensor<T>) -> Tensor<T> {
    let (h, w) = (grad_out.h * 2, grad_out.w * 2);
    let quarter = T::lit(0.25);
    let mut gx = Tensor::zeros(grad_out.n, grad_out.c, h, w);
    for (plane, g) in gx.data.chunks_mut(h * w).zip(grad_out.data.chunks(grad_out.plane())) {
        for y in 0..h {
            for x in 0..w {
                plane[y * w + x] = g[(y / 2) * grad_out.w + x / 2] * quarter;
            }
        }
    }
    gx
}

/// Nearest-neighbour x2 upsampling.
pub fn upsample2<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let (h, w) = (x.h * 2, x.w * 2);
    let mut out = Tensor::zeros(x.n, x.c, h, w);
    for (plane, src) in out.data.chunks_mut(h * w).zip(x.data.chunks(x.plane())) {
        for y in 0..h {
            for xx in 0..w {
                plane[y * w + xx] = src[(y / 2) * x.w + xx / 2];
            }
        }
    }
    out
}

pub fn upsample2_backward<T: Real>(grad_out: &Tensor<T>) -> Tensor<T> {
    let (oh, ow) = (grad_out.h / 2, grad_out.w / 2);
    let mut gx = Tensor::zeros(grad_out.n, grad_out.c, oh, ow);
    for (plane, g) in gx.data.chunks_mut(oh * ow).zip(grad_out.data.chunks(grad_out.plane())) {
        for y in 0..grad_out.h {
            for x in 0..grad_out.w {
                plane[(y / 2) * ow + x / 2] += g[y * grad_out.w + x];
            }
        }
    }
    gx
}

/// Channel-wise concatenation `[a, b]`.
pub fn concat<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    assert_eq!((a.n, a.h, a.w), (b.n, b.h, b.w), "concat spatial shapes");
    let mut data = Vec::with_capacity(a.data.len() + b.data.len());
    for i in 0..a.n {
        data.extend_from_slice(a.sample(i));
        data.extend_from_slice(b.sample(i));
    }
    Tensor::from_vec(a.n, a.c + b.c, a.h, a.w, data)
}

/// Splits a gradient of `concat` back into its `(first c_a channels, rest)`.
pub fn split<T: Real>(g: &Tensor<T>, c_a: usize) -> (Tensor<T>, Tensor<T>) {
    let hw = g.plane();
    let c_b = g.c - c_a;
    let mut a = Vec::with_capacity(g.n * c_a * hw);
    let mut b = Vec::with_capacity(g.n * c_b * hw);
    for i in 0..g.n {
        let s = g.sample(i);
        a.extend_from_slice(&s[..c_a * hw]);
        b.extend_from_slice(&s[c_a * hw..]);
    }
    (
        Tensor::from_vec(g.n, c_a, g.h, g.w, a),
        Tensor::from_vec(g.n, c_b, g.h, g.w, b),
    )
}

pub fn add<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    assert_eq!(a.shape(), b.shape(), "add shapes");
    let data = a.data.iter().zip(&b.data).map(|(&x, &y)| x + y).collect();
    Tensor { data, ..*a }
}

pub fn add_assign<T: Real>(a: &mut Tensor<T>, b: &Tensor<T>) {
    assert_eq!(a.shape(), b.shape(), "add shapes");
    for (x, &y) in a.data.iter_mut().zip(&b.data) {
        *x += y;
    }
}
