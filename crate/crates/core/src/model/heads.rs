use ndarray::{Array2, Array4, Axis};
use rand::RngCore;

use super::{HeadKind, ModelConfig};
use crate::nn::{join, Conv2d, Dense, ParamSet, Real};

/// Width of the hidden layer of both projection MLPs.
const MLP_HIDDEN: usize = 128;
/// Bottleneck width of the SimSiam predictor.
pub const PREDICTOR_HIDDEN: usize = 64;

fn relu2<T: Real>(x: &mut Array2<T>) {
    x.mapv_inplace(|v| if v > T::zero() { v } else { T::zero() });
}

fn relu2_backward<T: Real>(dy: &mut Array2<T>, out: &Array2<T>) {
    ndarray::Zip::from(dy).and(out).for_each(|d, &o| {
        if o <= T::zero() {
            *d = T::zero();
        }
    });
}

/// Dense + ReLU + Dense.
#[derive(Clone, Debug)]
pub struct Mlp<T> {
    pub fc1: Dense<T>,
    pub fc2: Dense<T>,
}

pub struct MlpCache<T> {
    input: Array2<T>,
    hidden: Array2<T>,
}

impl<T: Real> Mlp<T> {
    fn new(inputs: usize, hidden: usize, outputs: usize, rng: &mut dyn RngCore) -> Self {
        Self {
            fc1: Dense::new(inputs, hidden, rng),
            fc2: Dense::new(hidden, outputs, rng),
        }
    }

    fn forward(&self, x: Array2<T>) -> (Array2<T>, MlpCache<T>) {
        let mut hidden = self.fc1.forward(&x);
        relu2(&mut hidden);
        let y = self.fc2.forward(&hidden);
        (y, MlpCache { input: x, hidden })
    }

    fn backward(&self, cache: &MlpCache<T>, dy: &Array2<T>, grad: &mut Self) -> Array2<T> {
        let mut dh = self.fc2.backward(&cache.hidden, dy, &mut grad.fc2);
        relu2_backward(&mut dh, &cache.hidden);
        self.fc1.backward(&cache.input, &dh, &mut grad.fc1)
    }
}

impl<T: Real> ParamSet<T> for Mlp<T> {
    fn tensors(&self, prefix: &str) -> Vec<(String, &[T])> {
        let mut v = self.fc1.tensors(&join(prefix, "fc1"));
        v.extend(self.fc2.tensors(&join(prefix, "fc2")));
        v
    }

    fn tensors_mut(&mut self, prefix: &str) -> Vec<(String, &mut [T])> {
        let mut v = self.fc1.tensors_mut(&join(prefix, "fc1"));
        v.extend(self.fc2.tensors_mut(&join(prefix, "fc2")));
        v
    }
}

/// Global average pooling over space followed by the projection MLP.
#[derive(Clone, Debug)]
pub struct PoolHead<T> {
    pub mlp: Mlp<T>,
}

/// Learned 1x1 channel aggregation to a single map, flattened, then the
/// projection MLP. Keeps the spatial layout of `h`.
#[derive(Clone, Debug)]
pub struct ChannelHead<T> {
    pub agg: Conv2d<T>,
    pub mlp: Mlp<T>,
}

#[derive(Clone, Debug)]
pub enum Head<T> {
    Pool(PoolHead<T>),
    Channel(ChannelHead<T>),
}

pub enum HeadCache<T> {
    Pool {
        dim: (usize, usize, usize, usize),
        mlp: MlpCache<T>,
    },
    Channel {
        h: Array4<T>,
        mlp: MlpCache<T>,
    },
}

impl<T: Real> PoolHead<T> {
    /// Channel means, `[N, c]`.
    pub fn aggregate(&self, h: &Array4<T>) -> Array2<T> {
        let (n, c, hh, ww) = h.dim();
        h.to_shape((n, c, hh * ww)).unwrap().mean_axis(Axis(2)).unwrap()
    }
}

impl<T: Real> ChannelHead<T> {
    /// Channel-aggregated map flattened to `[N, h * w]`.
    pub fn aggregate(&self, h: &Array4<T>) -> Array2<T> {
        let (n, _, hh, ww) = h.dim();
        let m = self.agg.forward(h);
        m.into_shape_with_order((n, hh * ww)).unwrap()
    }
}

impl<T: Real> Head<T> {
    pub fn new(cfg: &ModelConfig, rng: &mut dyn RngCore) -> Self {
        let c = cfg.bottleneck_channels();
        match cfg.head_kind {
            HeadKind::Pool => Head::Pool(PoolHead {
                mlp: Mlp::new(c, MLP_HIDDEN, cfg.projection_dim, rng),
            }),
            HeadKind::Ch => {
                let [bh, bw] = cfg.bottleneck_size();
                let agg = Conv2d::new(c, 1, 1, rng);
                Head::Channel(ChannelHead {
                    agg,
                    mlp: Mlp::new(bh * bw, MLP_HIDDEN, cfg.projection_dim, rng),
                })
            }
        }
    }

    pub fn kind(&self) -> HeadKind {
        match self {
            Head::Pool(_) => HeadKind::Pool,
            Head::Channel(_) => HeadKind::Ch,
        }
    }

    pub fn mlp(&self) -> &Mlp<T> {
        match self {
            Head::Pool(p) => &p.mlp,
            Head::Channel(c) => &c.mlp,
        }
    }

    pub fn mlp_mut(&mut self) -> &mut Mlp<T> {
        match self {
            Head::Pool(p) => &mut p.mlp,
            Head::Channel(c) => &mut c.mlp,
        }
    }

    /// `z = C(h)`, `[N, projection_dim]`.
    pub fn forward(&self, h: &Array4<T>) -> (Array2<T>, HeadCache<T>) {
        match self {
            Head::Pool(p) => {
                let (z, mlp) = p.mlp.forward(p.aggregate(h));
                (z, HeadCache::Pool { dim: h.dim(), mlp })
            }
            Head::Channel(ch) => {
                let (z, mlp) = ch.mlp.forward(ch.aggregate(h));
                (z, HeadCache::Channel { h: h.clone(), mlp })
            }
        }
    }

    pub fn backward(&self, cache: &HeadCache<T>, dz: &Array2<T>, grad: &mut Self) -> Array4<T> {
        match (self, cache, grad) {
            (Head::Pool(p), HeadCache::Pool { dim, mlp }, Head::Pool(g)) => {
                let dpooled = p.mlp.backward(mlp, dz, &mut g.mlp);
                let (n, c, hh, ww) = *dim;
                let scale = T::one() / T::from_usize(hh * ww).unwrap();
                Array4::from_shape_fn((n, c, hh, ww), |(b, ch, _, _)| dpooled[[b, ch]] * scale)
            }
            (Head::Channel(ch), HeadCache::Channel { h, mlp }, Head::Channel(g)) => {
                let dflat = ch.mlp.backward(mlp, dz, &mut g.mlp);
                let (n, _, hh, ww) = h.dim();
                let dmap = dflat.into_shape_with_order((n, 1, hh, ww)).unwrap();
                ch.agg.backward(h, &dmap, &mut g.agg, true).unwrap()
            }
            _ => panic!("head/cache/gradient kinds differ"),
        }
    }
}

impl<T: Real> ParamSet<T> for Head<T> {
    fn tensors(&self, prefix: &str) -> Vec<(String, &[T])> {
        match self {
            Head::Pool(p) => p.mlp.tensors(prefix),
            Head::Channel(c) => {
                let mut v = c.agg.tensors(&join(prefix, "agg"));
                v.extend(c.mlp.tensors(prefix));
                v
            }
        }
    }

    fn tensors_mut(&mut self, prefix: &str) -> Vec<(String, &mut [T])> {
        match self {
            Head::Pool(p) => p.mlp.tensors_mut(prefix),
            Head::Channel(c) => {
                let mut v = c.agg.tensors_mut(&join(prefix, "agg"));
                v.extend(c.mlp.tensors_mut(prefix));
                v
            }
        }
    }
}

/// SimSiam predictor `Q`: a bottleneck MLP `d -> 64 -> d`.
#[derive(Clone, Debug)]
pub struct Predictor<T> {
    pub mlp: Mlp<T>,
}

pub struct PredictorCache<T>(MlpCache<T>);

impl<T: Real> Predictor<T> {
    pub fn new(dim: usize, rng: &mut dyn RngCore) -> Self {
        Self {
            mlp: Mlp::new(dim, PREDICTOR_HIDDEN, dim, rng),
        }
    }

    pub fn dim(&self) -> usize {
        self.mlp.fc2.outputs()
    }

    /// Set the weights so that `Q(z) = relu(z) - relu(-z) = z` exactly.
    /// Requires `2 * dim <= 64`.
    pub fn set_identity(&mut self) -> crate::Result<()> {
        let d = self.dim();
        if 2 * d > PREDICTOR_HIDDEN {
            return Err(crate::Error::Config(format!(
                "identity predictor needs 2*dim <= {PREDICTOR_HIDDEN}, dim = {d}"
            )));
        }
        self.fill_zero();
        for i in 0..d {
            self.mlp.fc1.weight[[i, i]] = T::one();
            self.mlp.fc1.weight[[d + i, i]] = -T::one();
            self.mlp.fc2.weight[[i, i]] = T::one();
            self.mlp.fc2.weight[[i, d + i]] = -T::one();
        }
        Ok(())
    }

    pub fn forward(&self, z: &Array2<T>) -> (Array2<T>, PredictorCache<T>) {
        let (q, c) = self.mlp.forward(z.clone());
        (q, PredictorCache(c))
    }

    pub fn backward(&self, cache: &PredictorCache<T>, dq: &Array2<T>, grad: &mut Self) -> Array2<T> {
        self.mlp.backward(&cache.0, dq, &mut grad.mlp)
    }
}

impl<T: Real> ParamSet<T> for Predictor<T> {
    fn tensors(&self, prefix: &str) -> Vec<(String, &[T])> {
        self.mlp.tensors(prefix)
    }

    fn tensors_mut(&mut self, prefix: &str) -> Vec<(String, &mut [T])> {
        self.mlp.tensors_mut(prefix)
    }
}
