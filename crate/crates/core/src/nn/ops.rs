use ndarray::{concatenate, s, Array4, Axis};
use rand::{Rng, RngCore};

use super::{c, Real};

pub fn relu_inplace<T: Real>(x: &mut Array4<T>) {
    x.mapv_inplace(|v| if v > T::zero() { v } else { T::zero() });
}

/// Zero `dy` wherever the ReLU output was not positive.
pub fn relu_backward_inplace<T: Real>(dy: &mut Array4<T>, out: &Array4<T>) {
    ndarray::Zip::from(dy).and(out).for_each(|d, &o| {
        if o <= T::zero() {
            *d = T::zero();
        }
    });
}

pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Argmax position (0..4) inside each 2x2 pooling window.
pub struct PoolIndex {
    arg: Vec<u8>,
    in_dim: (usize, usize, usize, usize),
}

pub fn max_pool2<T: Real>(x: &Array4<T>) -> (Array4<T>, PoolIndex) {
    let (n, ch, h, w) = x.dim();
    let (ho, wo) = (h / 2, w / 2);
    let mut y = Array4::<T>::zeros((n, ch, ho, wo));
    let mut arg = vec![0u8; n * ch * ho * wo];
    let xs = x.as_slice().expect("standard layout");
    let ys = y.as_slice_mut().unwrap();
    for plane in 0..n * ch {
        let src = &xs[plane * h * w..(plane + 1) * h * w];
        for oy in 0..ho {
            for ox in 0..wo {
                let base = 2 * oy * w + 2 * ox;
                let cand = [src[base], src[base + 1], src[base + w], src[base + w + 1]];
                let mut best = 0;
                for k in 1..4 {
                    if cand[k] > cand[best] {
                        best = k;
                    }
                }
                let o = plane * ho * wo + oy * wo + ox;
                ys[o] = cand[best];
                arg[o] = best as u8;
            }
        }
    }
    (
        y,
        PoolIndex {
            arg,
            in_dim: (n, ch, h, w),
        },
    )
}

pub fn max_pool2_backward<T: Real>(idx: &PoolIndex, dy: &Array4<T>) -> Array4<T> {
    let (n, ch, h, w) = idx.in_dim;
    let (ho, wo) = (h / 2, w / 2);
    let mut dx = Array4::<T>::zeros((n, ch, h, w));
    let dxs = dx.as_slice_mut().unwrap();
    let dys = dy.as_slice().expect("standard layout");
    for plane in 0..n * ch {
        for oy in 0..ho {
            for ox in 0..wo {
                let o = plane * ho * wo + oy * wo + ox;
                let k = idx.arg[o] as usize;
                let pos = plane * h * w + (2 * oy + k / 2) * w + 2 * ox + k % 2;
                dxs[pos] += dys[o];
            }
        }
    }
    dx
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2<T: Real>(x: &Array4<T>) -> Array4<T> {
    let (n, ch, h, w) = x.dim();
    let mut y = Array4::<T>::zeros((n, ch, 2 * h, 2 * w));
    let xs = x.as_slice().expect("standard layout");
    let ys = y.as_slice_mut().unwrap();
    let (h2, w2) = (2 * h, 2 * w);
    for plane in 0..n * ch {
        for yy in 0..h2 {
            for xx in 0..w2 {
                ys[plane * h2 * w2 + yy * w2 + xx] = xs[plane * h * w + (yy / 2) * w + xx / 2];
            }
        }
    }
    y
}

pub fn upsample2_backward<T: Real>(dy: &Array4<T>) -> Array4<T> {
    let (n, ch, h2, w2) = dy.dim();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut dx = Array4::<T>::zeros((n, ch, h, w));
    let dys = dy.as_slice().expect("standard layout");
    let dxs = dx.as_slice_mut().unwrap();
    for plane in 0..n * ch {
        for yy in 0..h2 {
            for xx in 0..w2 {
                dxs[plane * h * w + (yy / 2) * w + xx / 2] += dys[plane * h2 * w2 + yy * w2 + xx];
            }
        }
    }
    dx
}

pub fn concat_channels<T: Real>(a: &Array4<T>, b: &Array4<T>) -> Array4<T> {
    concatenate(Axis(1), &[a.view(), b.view()])
        .expect("matching batch and spatial dims")
        .as_standard_layout()
        .into_owned()
}

pub fn split_channels<T: Real>(d: &Array4<T>, first: usize) -> (Array4<T>, Array4<T>) {
    (
        d.slice(s![.., ..first, .., ..]).to_owned(),
        d.slice(s![.., first.., .., ..]).to_owned(),
    )
}

/// Inverted-dropout mask: entries are `0` or `1 / (1 - p)`.
pub fn dropout_mask<T: Real>(dim: (usize, usize, usize, usize), p: f64, rng: &mut dyn RngCore) -> Array4<T> {
    let keep: T = c(1.0 / (1.0 - p));
    Array4::from_shape_simple_fn(dim, || if rng.random::<f64>() < p { T::zero() } else { keep })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pool_and_upsample_round_trip_shapes() {
        let x = Array4::from_shape_fn((1, 2, 4, 6), |(_, c, y, x)| (c * 100 + y * 10 + x) as f64);
        let (p, idx) = max_pool2(&x);
        assert_eq!(p.dim(), (1, 2, 2, 3));
        assert_eq!(p[[0, 1, 1, 2]], 135.0);
        let up = upsample2(&p);
        assert_eq!(up.dim(), (1, 2, 4, 6));
        assert_eq!(up[[0, 1, 3, 5]], 135.0);
        let g = max_pool2_backward::<f64>(&idx, &Array4::ones(p.dim()));
        assert_eq!(g.sum(), p.len() as f64);
        assert_eq!(g[[0, 1, 3, 5]], 1.0);
        let d = upsample2_backward(&Array4::<f64>::ones(up.dim()));
        assert!(d.iter().all(|&v| v == 4.0));
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid(0.0f64), 0.5);
        assert!(sigmoid(-800.0f64) >= 0.0);
        assert!(sigmoid(800.0f64) <= 1.0);
    }
}
