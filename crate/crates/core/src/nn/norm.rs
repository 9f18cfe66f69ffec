use ndarray::{Array1, Array2, Array4};

use super::{c, join, ParamSet, Real};

/// Group normalization with a per-channel affine transform.
#[derive(Clone, Debug)]
pub struct GroupNorm<T> {
    pub gamma: Array1<T>,
    pub beta: Array1<T>,
    pub groups: usize,
    pub eps: f64,
}

pub struct GroupNormCache<T> {
    xhat: Array4<T>,
    /// `[N, groups]`
    inv_std: Array2<T>,
}

impl<T: Real> GroupNorm<T> {
    pub fn new(channels: usize, groups: usize) -> Self {
        assert!(
            groups > 0 && channels.is_multiple_of(groups),
            "{groups} groups do not divide {channels} channels"
        );
        Self {
            gamma: Array1::ones(channels),
            beta: Array1::zeros(channels),
            groups,
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &Array4<T>) -> (Array4<T>, GroupNormCache<T>) {
        let (n, ch, h, w) = x.dim();
        let per_group = ch / self.groups * h * w;
        let cpg = ch / self.groups;
        let xs = x.as_slice().expect("standard layout");
        let mut xhat = Array4::<T>::zeros((n, ch, h, w));
        let mut y = Array4::<T>::zeros((n, ch, h, w));
        let mut inv_std = Array2::<T>::zeros((n, self.groups));
        let eps: T = c(self.eps);
        let m: T = c(per_group as f64);
        {
            let xh = xhat.as_slice_mut().unwrap();
            let ys = y.as_slice_mut().unwrap();
            for b in 0..n {
                for g in 0..self.groups {
                    let start = (b * ch + g * cpg) * h * w;
                    let seg = &xs[start..start + per_group];
                    let mean = seg.iter().copied().sum::<T>() / m;
                    let var = seg.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / m;
                    let istd = T::one() / (var + eps).sqrt();
                    inv_std[[b, g]] = istd;
                    for ci in 0..cpg {
                        let chan = g * cpg + ci;
                        let (ga, be) = (self.gamma[chan], self.beta[chan]);
                        let off = start + ci * h * w;
                        for j in off..off + h * w {
                            let v = (xs[j] - mean) * istd;
                            xh[j] = v;
                            ys[j] = v * ga + be;
                        }
                    }
                }
            }
        }
        (y, GroupNormCache { xhat, inv_std })
    }

    pub fn backward(&self, cache: &GroupNormCache<T>, dy: &Array4<T>, grad: &mut Self) -> Array4<T> {
        let (n, ch, h, w) = dy.dim();
        let cpg = ch / self.groups;
        let hw = h * w;
        let per_group = cpg * hw;
        let m: T = c(per_group as f64);
        let dys = dy.as_slice().expect("standard layout");
        let xh = cache.xhat.as_slice().unwrap();
        let mut dx = Array4::<T>::zeros((n, ch, h, w));
        let dxs = dx.as_slice_mut().unwrap();
        for b in 0..n {
            for g in 0..self.groups {
                let start = (b * ch + g * cpg) * hw;
                let mut sum_d = T::zero();
                let mut sum_dx = T::zero();
                for ci in 0..cpg {
                    let chan = g * cpg + ci;
                    let ga = self.gamma[chan];
                    let off = start + ci * hw;
                    let mut dg = T::zero();
                    let mut db = T::zero();
                    for j in off..off + hw {
                        dg += dys[j] * xh[j];
                        db += dys[j];
                        let d = dys[j] * ga;
                        sum_d += d;
                        sum_dx += d * xh[j];
                    }
                    grad.gamma[chan] += dg;
                    grad.beta[chan] += db;
                }
                let istd = cache.inv_std[[b, g]];
                for ci in 0..cpg {
                    let chan = g * cpg + ci;
                    let ga = self.gamma[chan];
                    let off = start + ci * hw;
                    for j in off..off + hw {
                        let d = dys[j] * ga;
                        dxs[j] = istd / m * (m * d - sum_d - xh[j] * sum_dx);
                    }
                }
            }
        }
        dx
    }
}

impl<T: Real> ParamSet<T> for GroupNorm<T> {
    fn tensors(&self, prefix: &str) -> Vec<(String, &[T])> {
        vec![
            (join(prefix, "gamma"), self.gamma.as_slice().unwrap()),
            (join(prefix, "beta"), self.beta.as_slice().unwrap()),
        ]
    }

    fn tensors_mut(&mut self, prefix: &str) -> Vec<(String, &mut [T])> {
        vec![
            (join(prefix, "gamma"), self.gamma.as_slice_mut().unwrap()),
            (join(prefix, "beta"), self.beta.as_slice_mut().unwrap()),
        ]
    }
}
