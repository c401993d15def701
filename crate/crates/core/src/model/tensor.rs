use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use ndarray::{Array2, ArrayView2};
use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point element type the network can be evaluated in.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Send
    + Sync
    + Debug
    + Default
    + ndarray::LinalgScalar
    + 'static
{
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("representable constant")
    }
}

impl<T> Real for T where
    T: Float
        + FromPrimitive
        + ToPrimitive
        + AddAssign
        + SubAssign
        + MulAssign
        + DivAssign
        + Sum
        + Send
        + Sync
        + Debug
        + Default
        + ndarray::LinalgScalar
        + 'static
{
}

/// Dense NCHW tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Tensor {
            n,
            c,
            h,
            w,
            data: vec![T::zero(); n * c * h * w],
        }
    }

    pub fn from_vec(n: usize, c: usize, h: usize, w: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), n * c * h * w, "tensor data length");
        Tensor { n, c, h, w, data }
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    /// Elements of one sample.
    pub fn sample_len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn sample(&self, i: usize) -> &[T] {
        let len = self.sample_len();
        &self.data[i * len..(i + 1) * len]
    }

    pub fn channel(&self, i: usize, ch: usize) -> &[T] {
        let p = self.plane();
        let off = (i * self.c + ch) * p;
        &self.data[off..off + p]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            data: self.data.iter().map(|&x| f(x)).collect(),
            ..*self
        }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            n: self.n,
            c: self.c,
            h: self.h,
            w: self.w,
            data: self
                .data
                .iter()
                .map(|x| U::from_f64(x.to_f64().unwrap_or(0.0)).unwrap_or(U::zero()))
                .collect(),
        }
    }

    /// Stacks single-channel images into an `n x 1 x h x w` batch.
    pub fn from_images(images: &[ArrayView2<'_, f32>]) -> Self {
        let (h, w) = images.first().map_or((0, 0), |im| im.dim());
        let mut data = Vec::with_capacity(images.len() * h * w);
        for im in images {
            assert_eq!(im.dim(), (h, w), "images in a batch share one shape");
            data.extend(im.iter().map(|&x| T::from_f32(x).unwrap_or(T::zero())));
        }
        Tensor::from_vec(images.len(), 1, h, w, data)
    }

    /// Channel 0 of sample `i` as an `f32` image.
    pub fn image(&self, i: usize) -> Array2<f32> {
        let ch = self.channel(i, 0);
        Array2::from_shape_fn((self.h, self.w), |(r, c)| {
            ch[r * self.w + c].to_f32().unwrap_or(0.0)
        })
    }
}
