use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, Array4, ArrayView2, ArrayView3, ArrayViewMut2, Axis};
use rand::RngCore;

use super::{glorot_bound, join, uniform_fill, ParamSet, Real};
use crate::par;

/// Stride-1 2D convolution with "same" zero padding and an odd square kernel.
///
/// Weights are stored pre-flattened as `[out, in * k * k]` so that a forward
/// pass is a single GEMM against the im2col matrix of each image.
#[derive(Clone, Debug)]
pub struct Conv2d<T> {
    pub weight: Array2<T>,
    pub bias: Array1<T>,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
}

fn im2col<T: Real>(x: ArrayView3<T>, k: usize) -> Array2<T> {
    let (c, h, w) = x.dim();
    let pad = k / 2;
    let xs = x.as_slice().expect("contiguous image");
    let mut cols = Array2::<T>::zeros((c * k * k, h * w));
    let cs = cols.as_slice_mut().expect("fresh array");
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cs[row * h * w..(row + 1) * h * w];
                let x0 = pad.saturating_sub(kx);
                let x1 = (w + pad).saturating_sub(kx).min(w);
                if x0 >= x1 {
                    continue;
                }
                for y in 0..h {
                    let sy = y + ky;
                    if sy < pad || sy - pad >= h {
                        continue;
                    }
                    let sy = sy - pad;
                    let src = &xs[ci * h * w + sy * w..];
                    dst[y * w + x0..y * w + x1].copy_from_slice(&src[x0 + kx - pad..x1 + kx - pad]);
                }
            }
        }
    }
    cols
}

fn col2im_add<T: Real>(cols: ArrayView2<T>, dx: &mut [T], c: usize, h: usize, w: usize, k: usize) {
    let pad = k / 2;
    let cols = cols.as_standard_layout();
    let cs = cols.as_slice().expect("standard layout");
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cs[row * h * w..(row + 1) * h * w];
                let x0 = pad.saturating_sub(kx);
                let x1 = (w + pad).saturating_sub(kx).min(w);
                if x0 >= x1 {
                    continue;
                }
                for y in 0..h {
                    let sy = y + ky;
                    if sy < pad || sy - pad >= h {
                        continue;
                    }
                    let sy = sy - pad;
                    let dst = &mut dx[ci * h * w + sy * w..];
                    let dst = &mut dst[x0 + kx - pad..x1 + kx - pad];
                    for (d, &s) in dst.iter_mut().zip(&src[y * w + x0..y * w + x1]) {
                        *d += s;
                    }
                }
            }
        }
    }
}

impl<T: Real> Conv2d<T> {
    pub fn new(in_ch: usize, out_ch: usize, kernel: usize, rng: &mut dyn RngCore) -> Self {
        let mut conv = Self::zeros(in_ch, out_ch, kernel);
        let kk = kernel * kernel;
        let bound = glorot_bound(in_ch * kk, out_ch * kk);
        uniform_fill(conv.weight.as_slice_mut().unwrap(), bound, rng);
        conv
    }

    pub fn zeros(in_ch: usize, out_ch: usize, kernel: usize) -> Self {
        assert!(kernel % 2 == 1, "kernel must be odd");
        Self {
            weight: Array2::zeros((out_ch, in_ch * kernel * kernel)),
            bias: Array1::zeros(out_ch),
            in_ch,
            out_ch,
            kernel,
        }
    }

    pub fn forward(&self, x: &Array4<T>) -> Array4<T> {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.in_ch, "conv input channels");
        let hw = h * w;
        let mut y = Array4::<T>::zeros((n, self.out_ch, h, w));
        let per_image = self.out_ch * hw;
        par::for_each_chunk_mut(y.as_slice_mut().unwrap(), per_image, |i, chunk| {
            let xi = x.index_axis(Axis(0), i);
            let mut out = ArrayViewMut2::from_shape((self.out_ch, hw), chunk).unwrap();
            if self.kernel == 1 {
                let flat = xi.to_shape((c, hw)).unwrap();
                general_mat_mul(T::one(), &self.weight, &flat, T::zero(), &mut out);
            } else {
                let cols = im2col(xi, self.kernel);
                general_mat_mul(T::one(), &self.weight, &cols, T::zero(), &mut out);
            }
            for (mut row, &b) in out.outer_iter_mut().zip(self.bias.iter()) {
                row.mapv_inplace(|v| v + b);
            }
        });
        y
    }

    /// Accumulate parameter gradients into `grad` and return the input
    /// gradient when `need_dx` is set.
    pub fn backward(&self, x: &Array4<T>, dy: &Array4<T>, grad: &mut Self, need_dx: bool) -> Option<Array4<T>> {
        let (n, c, h, w) = x.dim();
        let hw = h * w;
        let k = self.kernel;

        let partials = par::map_range(n, |i| {
            let xi = x.index_axis(Axis(0), i);
            let dyi = dy.index_axis(Axis(0), i);
            let dyi = dyi.to_shape((self.out_ch, hw)).unwrap();
            let mut dw = Array2::<T>::zeros(self.weight.dim());
            if k == 1 {
                let flat = xi.to_shape((c, hw)).unwrap();
                general_mat_mul(T::one(), &dyi, &flat.t(), T::zero(), &mut dw);
            } else {
                let cols = im2col(xi, k);
                general_mat_mul(T::one(), &dyi, &cols.t(), T::zero(), &mut dw);
            }
            let db = dyi.sum_axis(Axis(1));
            (dw, db)
        });
        for (dw, db) in partials {
            grad.weight += &dw;
            grad.bias += &db;
        }

        if !need_dx {
            return None;
        }
        let mut dx = Array4::<T>::zeros((n, c, h, w));
        par::for_each_chunk_mut(dx.as_slice_mut().unwrap(), c * hw, |i, chunk| {
            let dyi = dy.slice(s![i, .., .., ..]);
            let dyi = dyi.to_shape((self.out_ch, hw)).unwrap();
            let dcols = self.weight.t().dot(&dyi);
            if k == 1 {
                for (d, &s) in chunk.iter_mut().zip(dcols.iter()) {
                    *d = s;
                }
            } else {
                col2im_add(dcols.view(), chunk, c, h, w, k);
            }
        });
        Some(dx)
    }
}

impl<T: Real> ParamSet<T> for Conv2d<T> {
    fn tensors(&self, prefix: &str) -> Vec<(String, &[T])> {
        vec![
            (join(prefix, "weight"), self.weight.as_slice().unwrap()),
            (join(prefix, "bias"), self.bias.as_slice().unwrap()),
        ]
    }

    fn tensors_mut(&mut self, prefix: &str) -> Vec<(String, &mut [T])> {
        vec![
            (join(prefix, "weight"), self.weight.as_slice_mut().unwrap()),
            (join(prefix, "bias"), self.bias.as_slice_mut().unwrap()),
        ]
    }
}
