use ndarray::{Array2, Array4};
use rand::RngCore;

use super::heads::{Head, Predictor};
use super::{HeadKind, ModelConfig};
use crate::error::Result;
use crate::nn::{
    concat_channels, dropout_mask, join, max_pool2, max_pool2_backward, relu_backward_inplace, relu_inplace, sigmoid,
    split_channels, upsample2, upsample2_backward, Conv2d, GroupNorm, GroupNormCache, ParamSet, Pass, PoolIndex, Real,
};
use crate::rng;

/// Bottleneck activations `h = E(x)`, laid out `[N, c, h, w]`.
pub type FeatureMap<T> = Array4<T>;

/// 3x3 convolution, group normalization, ReLU.
#[derive(Clone, Debug)]
pub struct ConvUnit<T> {
    pub conv: Conv2d<T>,
    pub norm: GroupNorm<T>,
}

struct UnitCache<T> {
    input: Array4<T>,
    norm: GroupNormCache<T>,
    out: Array4<T>,
}

impl<T: Real> ConvUnit<T> {
    fn new(cin: usize, cout: usize, groups: usize, rng: &mut dyn RngCore) -> Self {
        Self {
            conv: Conv2d::new(cin, cout, 3, rng),
            norm: GroupNorm::new(cout, groups),
        }
    }

    fn forward(&self, x: Array4<T>) -> (Array4<T>, UnitCache<T>) {
        let pre = self.conv.forward(&x);
        let (mut y, norm) = self.norm.forward(&pre);
        relu_inplace(&mut y);
        let cache = UnitCache {
            input: x,
            norm,
            out: y.clone(),
        };
        (y, cache)
    }

    fn backward(&self, cache: &UnitCache<T>, mut dy: Array4<T>, grad: &mut Self, need_dx: bool) -> Option<Array4<T>> {
        relu_backward_inplace(&mut dy, &cache.out);
        let dpre = self.norm.backward(&cache.norm, &dy, &mut grad.norm);
        self.conv.backward(&cache.input, &dpre, &mut grad.conv, need_dx)
    }
}

impl<T: Real> ParamSet<T> for ConvUnit<T> {
    fn tensors(&self, prefix: &str) -> Vec<(String, &[T])> {
        let mut v = self.conv.tensors(&join(prefix, "conv"));
        v.extend(self.norm.tensors(&join(prefix, "norm")));
        v
    }

    fn tensors_mut(&mut self, prefix: &str) -> Vec<(String, &mut [T])> {
        let mut v = self.conv.tensors_mut(&join(prefix, "conv"));
        v.extend(self.norm.tensors_mut(&join(prefix, "norm")));
        v
    }
}

#[derive(Clone, Debug)]
pub struct DoubleConv<T> {
    pub first: ConvUnit<T>,
    pub second: ConvUnit<T>,
}

struct DoubleCache<T> {
    first: UnitCache<T>,
    second: UnitCache<T>,
}

impl<T: Real> DoubleConv<T> {
    fn new(cin: usize, cout: usize, groups: usize, rng: &mut dyn RngCore) -> Self {
        Self {
            first: ConvUnit::new(cin, cout, groups, rng),
            second: ConvUnit::new(cout, cout, groups, rng),
        }
    }

    fn forward(&self, x: Array4<T>) -> (Array4<T>, DoubleCache<T>) {
        let (y, first) = self.first.forward(x);
        let (y, second) = self.second.forward(y);
        (y, DoubleCache { first, second })
    }

    fn backward(&self, cache: &DoubleCache<T>, dy: Array4<T>, grad: &mut Self, need_dx: bool) -> Option<Array4<T>> {
        let d = self
            .second
            .backward(&cache.second, dy, &mut grad.second, true)
            .expect("inner gradient");
        self.first.backward(&cache.first, d, &mut grad.first, need_dx)
    }
}

impl<T: Real> ParamSet<T> for DoubleConv<T> {
    fn tensors(&self, prefix: &str) -> Vec<(String, &[T])> {
        let mut v = self.first.tensors(&join(prefix, "0"));
        v.extend(self.second.tensors(&join(prefix, "1")));
        v
    }

    fn tensors_mut(&mut self, prefix: &str) -> Vec<(String, &mut [T])> {
        let mut v = self.first.tensors_mut(&join(prefix, "0"));
        v.extend(self.second.tensors_mut(&join(prefix, "1")));
        v
    }
}

/// One decoder resolution level: upsample, conv unit, concatenate the skip,
/// double conv.
#[derive(Clone, Debug)]
pub struct UpStage<T> {
    pub up: ConvUnit<T>,
    pub block: DoubleConv<T>,
}

impl<T: Real> ParamSet<T> for UpStage<T> {
    fn tensors(&self, prefix: &str) -> Vec<(String, &[T])> {
        let mut v = self.up.tensors(&join(prefix, "up"));
        v.extend(self.block.tensors(&join(prefix, "block")));
        v
    }

    fn tensors_mut(&mut self, prefix: &str) -> Vec<(String, &mut [T])> {
        let mut v = self.up.tensors_mut(&join(prefix, "up"));
        v.extend(self.block.tensors_mut(&join(prefix, "block")));
        v
    }
}

/// Skip activations (finest first) and the bottleneck features.
pub struct Encoded<T> {
    pub skips: Vec<Array4<T>>,
    pub h: FeatureMap<T>,
}

pub struct EncoderCache<T> {
    blocks: Vec<DoubleCache<T>>,
    pools: Vec<PoolIndex>,
    bottleneck_in_mask: Option<Array4<T>>,
}

pub struct DecoderCache<T> {
    h_mask: Option<Array4<T>>,
    ups: Vec<UnitCache<T>>,
    blocks: Vec<DoubleCache<T>>,
    block_masks: Vec<Option<Array4<T>>>,
    last: Array4<T>,
    probs: Array4<T>,
}

/// UNet with group normalization, nearest-neighbour upsampling and
/// per-class sigmoid outputs.
///
/// Dropout sits on the input and output of the bottleneck block and after the
/// conv blocks of the two decoder levels that follow it.
#[derive(Clone, Debug)]
pub struct UNet<T> {
    pub cfg: ModelConfig,
    pub encoder: Vec<DoubleConv<T>>,
    /// Coarsest stage first.
    pub decoder: Vec<UpStage<T>>,
    pub out: Conv2d<T>,
}

impl<T: Real> UNet<T> {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let g = cfg.norm_groups;
        let mut enc_rng = rng::stream(seed, "init.encoder", 0);
        let mut dec_rng = rng::stream(seed, "init.decoder", 0);
        let mut encoder = Vec::with_capacity(cfg.levels);
        let mut cin = 1;
        for level in 0..cfg.levels {
            let ch = cfg.channels(level);
            encoder.push(DoubleConv::new(cin, ch, g, &mut enc_rng));
            cin = ch;
        }
        let mut decoder = Vec::with_capacity(cfg.levels - 1);
        for level in (0..cfg.levels - 1).rev() {
            let ch = cfg.channels(level);
            decoder.push(UpStage {
                up: ConvUnit::new(cfg.channels(level + 1), ch, g, &mut dec_rng),
                block: DoubleConv::new(2 * ch, ch, g, &mut dec_rng),
            });
        }
        let out = Conv2d::new(cfg.base_filters, cfg.num_classes, 1, &mut dec_rng);
        Ok(Self {
            cfg: cfg.clone(),
            encoder,
            decoder,
            out,
        })
    }

    fn dropout(&self, dim: (usize, usize, usize, usize), pass: &mut Pass<'_>) -> Option<Array4<T>> {
        match pass {
            Pass::Train(r) if self.cfg.dropout_p > 0.0 => Some(dropout_mask(dim, self.cfg.dropout_p, &mut **r)),
            _ => None,
        }
    }

    fn check(&self, x: &Array4<T>) -> Result<()> {
        let (_, c, h, w) = x.dim();
        if c != 1 {
            return Err(crate::Error::Shape(format!("expected 1 input channel, got {c}")));
        }
        self.cfg.check_input(h, w)
    }

    pub fn encode(&self, x: &Array4<T>, pass: &mut Pass<'_>) -> Result<(Encoded<T>, EncoderCache<T>)> {
        self.check(x)?;
        let last = self.encoder.len() - 1;
        let mut skips = Vec::with_capacity(last);
        let mut blocks = Vec::with_capacity(last + 1);
        let mut pools = Vec::with_capacity(last);
        let mut cur = x.clone();
        let mut bottleneck_in_mask = None;
        for (level, block) in self.encoder.iter().enumerate() {
            if level == last {
                bottleneck_in_mask = self.dropout(cur.dim(), pass);
                if let Some(m) = &bottleneck_in_mask {
                    cur *= m;
                }
            }
            let (y, cache) = block.forward(cur);
            blocks.push(cache);
            if level < last {
                let (p, idx) = max_pool2(&y);
                pools.push(idx);
                skips.push(y);
                cur = p;
            } else {
                cur = y;
            }
        }
        Ok((
            Encoded { skips, h: cur },
            EncoderCache {
                blocks,
                pools,
                bottleneck_in_mask,
            },
        ))
    }

    /// Gradient of the encoder given upstream gradients on the skips (finest
    /// first; `None` when only the bottleneck is used) and on `h`.
    pub fn encode_backward(
        &self,
        cache: &EncoderCache<T>,
        dskips: Option<Vec<Array4<T>>>,
        dh: Array4<T>,
        grad: &mut Self,
    ) {
        let last = self.encoder.len() - 1;
        let mut dskips = dskips.map(|v| v.into_iter().map(Some).collect::<Vec<_>>());
        let mut d = dh;
        for level in (0..=last).rev() {
            let need_dx = level > 0;
            let dx = self.encoder[level].backward(&cache.blocks[level], d, &mut grad.encoder[level], need_dx);
            let Some(mut dx) = dx else { break };
            if level == last {
                if let Some(m) = &cache.bottleneck_in_mask {
                    dx *= m;
                }
            }
            let mut dy = max_pool2_backward(&cache.pools[level - 1], &dx);
            if let Some(ds) = dskips.as_mut() {
                if let Some(s) = ds[level - 1].take() {
                    dy += &s;
                }
            }
            d = dy;
        }
    }

    pub fn decode(&self, enc: &Encoded<T>, pass: &mut Pass<'_>) -> (Array4<T>, DecoderCache<T>) {
        let h_mask = self.dropout(enc.h.dim(), pass);
        let mut cur = enc.h.clone();
        if let Some(m) = &h_mask {
            cur *= m;
        }
        let n_stages = self.decoder.len();
        let mut ups = Vec::with_capacity(n_stages);
        let mut blocks = Vec::with_capacity(n_stages);
        let mut block_masks = Vec::with_capacity(n_stages);
        for (s, stage) in self.decoder.iter().enumerate() {
            let level = n_stages - 1 - s;
            let (u, uc) = stage.up.forward(upsample2(&cur));
            ups.push(uc);
            let cat = concat_channels(&enc.skips[level], &u);
            let (mut y, bc) = stage.block.forward(cat);
            blocks.push(bc);
            let mask = if s < 2 { self.dropout(y.dim(), pass) } else { None };
            if let Some(m) = &mask {
                y *= m;
            }
            block_masks.push(mask);
            cur = y;
        }
        let logits = self.out.forward(&cur);
        let probs = logits.mapv(sigmoid);
        (
            probs.clone(),
            DecoderCache {
                h_mask,
                ups,
                blocks,
                block_masks,
                last: cur,
                probs,
            },
        )
    }

    /// Returns gradients on the skips (finest first) and on `h`.
    pub fn decode_backward(
        &self,
        cache: &DecoderCache<T>,
        dprobs: &Array4<T>,
        grad: &mut Self,
    ) -> (Vec<Array4<T>>, Array4<T>) {
        let mut dlogits = dprobs.clone();
        ndarray::Zip::from(&mut dlogits)
            .and(&cache.probs)
            .for_each(|d, &p| *d = *d * p * (T::one() - p));
        let mut d = self.out.backward(&cache.last, &dlogits, &mut grad.out, true).unwrap();
        let n_stages = self.decoder.len();
        let mut dskips: Vec<Option<Array4<T>>> = (0..n_stages).map(|_| None).collect();
        for s in (0..n_stages).rev() {
            let level = n_stages - 1 - s;
            let stage = &self.decoder[s];
            if let Some(m) = &cache.block_masks[s] {
                d *= m;
            }
            let dcat = stage
                .block
                .backward(&cache.blocks[s], d, &mut grad.decoder[s].block, true)
                .unwrap();
            let (dskip, du) = split_channels(&dcat, self.cfg.channels(level));
            dskips[level] = Some(dskip);
            let dup = stage
                .up
                .backward(&cache.ups[s], du, &mut grad.decoder[s].up, true)
                .unwrap();
            d = upsample2_backward(&dup);
        }
        if let Some(m) = &cache.h_mask {
            d *= m;
        }
        (dskips.into_iter().map(|v| v.unwrap()).collect(), d)
    }

    /// Per-class probability maps `[N, C, H, W]`.
    pub fn forward_segment(&self, x: &Array4<T>, pass: &mut Pass<'_>) -> Result<Array4<T>> {
        let (enc, _) = self.encode(x, pass)?;
        Ok(self.decode(&enc, pass).0)
    }

    /// Bottleneck features only; the decoder is not evaluated.
    pub fn forward_encode(&self, x: &Array4<T>, pass: &mut Pass<'_>) -> Result<FeatureMap<T>> {
        Ok(self.encode(x, pass)?.0.h)
    }

    pub fn encoder_tensors(&self) -> Vec<(String, &[T])> {
        self.encoder
            .iter()
            .enumerate()
            .flat_map(|(i, b)| b.tensors(&format!("encoder.{i}")))
            .collect()
    }

    pub fn encoder_tensors_mut(&mut self) -> Vec<(String, &mut [T])> {
        self.encoder
            .iter_mut()
            .enumerate()
            .flat_map(|(i, b)| b.tensors_mut(&format!("encoder.{i}")))
            .collect()
    }

    pub fn decoder_tensors(&self) -> Vec<(String, &[T])> {
        let mut v: Vec<_> = self
            .decoder
            .iter()
            .enumerate()
            .flat_map(|(i, s)| s.tensors(&format!("decoder.{i}")))
            .collect();
        v.extend(self.out.tensors("out"));
        v
    }

    pub fn decoder_tensors_mut(&mut self) -> Vec<(String, &mut [T])> {
        let mut v: Vec<_> = self
            .decoder
            .iter_mut()
            .enumerate()
            .flat_map(|(i, s)| s.tensors_mut(&format!("decoder.{i}")))
            .collect();
        v.extend(self.out.tensors_mut("out"));
        v
    }
}

impl<T: Real> ParamSet<T> for UNet<T> {
    fn tensors(&self, prefix: &str) -> Vec<(String, &[T])> {
        let mut v = self.encoder_tensors();
        v.extend(self.decoder_tensors());
        v.into_iter().map(|(n, t)| (join(prefix, &n), t)).collect()
    }

    fn tensors_mut(&mut self, prefix: &str) -> Vec<(String, &mut [T])> {
        let mut v: Vec<_> = self
            .encoder
            .iter_mut()
            .enumerate()
            .flat_map(|(i, b)| b.tensors_mut(&format!("encoder.{i}")))
            .collect();
        v.extend(
            self.decoder
                .iter_mut()
                .enumerate()
                .flat_map(|(i, s)| s.tensors_mut(&format!("decoder.{i}"))),
        );
        v.extend(self.out.tensors_mut("out"));
        v.into_iter().map(|(n, t)| (join(prefix, &n), t)).collect()
    }
}

/// UNet plus the optional contrastive head and SimSiam predictor.
#[derive(Clone, Debug)]
pub struct Network<T> {
    pub unet: UNet<T>,
    pub head: Option<Head<T>>,
    pub predictor: Option<Predictor<T>>,
}

impl<T: Real> Network<T> {
    /// Each component draws from its own stream, so the UNet initialization
    /// does not depend on which extras are attached.
    pub fn build(cfg: &ModelConfig, seed: u64, with_head: bool, with_predictor: bool) -> Result<Self> {
        let unet = UNet::new(cfg, seed)?;
        let head = with_head.then(|| {
            let mut r = rng::stream(seed, "init.head", 0);
            Head::new(cfg, &mut r)
        });
        let predictor = with_predictor.then(|| {
            let mut r = rng::stream(seed, "init.predictor", 0);
            Predictor::new(cfg.projection_dim, &mut r)
        });
        Ok(Self { unet, head, predictor })
    }

    pub fn head_kind(&self) -> Option<HeadKind> {
        self.head.as_ref().map(Head::kind)
    }

    /// Encoder, head and predictor tensors (everything contrastive training
    /// touches).
    pub fn contrastive_tensors_mut(&mut self) -> Vec<(String, &mut [T])> {
        let mut v: Vec<_> = self
            .unet
            .encoder_tensors_mut()
            .into_iter()
            .map(|(n, t)| (join("unet", &n), t))
            .collect();
        if let Some(h) = self.head.as_mut() {
            v.extend(h.tensors_mut("head"));
        }
        if let Some(p) = self.predictor.as_mut() {
            v.extend(p.tensors_mut("predictor"));
        }
        v
    }

    pub fn contrastive_tensors(&self) -> Vec<(String, &[T])> {
        let mut v: Vec<_> = self
            .unet
            .encoder_tensors()
            .into_iter()
            .map(|(n, t)| (join("unet", &n), t))
            .collect();
        if let Some(h) = self.head.as_ref() {
            v.extend(h.tensors("head"));
        }
        if let Some(p) = self.predictor.as_ref() {
            v.extend(p.tensors("predictor"));
        }
        v
    }

    /// Project a batch of feature maps to `[N, projection_dim]`.
    pub fn project(&self, h: &FeatureMap<T>) -> Array2<T> {
        self.head
            .as_ref()
            .expect("network built without a projection head")
            .forward(h)
            .0
    }
}

impl<T: Real> ParamSet<T> for Network<T> {
    fn tensors(&self, prefix: &str) -> Vec<(String, &[T])> {
        let mut v = self.unet.tensors(&join(prefix, "unet"));
        if let Some(h) = &self.head {
            v.extend(h.tensors(&join(prefix, "head")));
        }
        if let Some(p) = &self.predictor {
            v.extend(p.tensors(&join(prefix, "predictor")));
        }
        v
    }

    fn tensors_mut(&mut self, prefix: &str) -> Vec<(String, &mut [T])> {
        let mut v = self.unet.tensors_mut(&join(prefix, "unet"));
        if let Some(h) = &mut self.head {
            v.extend(h.tensors_mut(&join(prefix, "head")));
        }
        if let Some(p) = &mut self.predictor {
            v.extend(p.tensors_mut(&join(prefix, "predictor")));
        }
        v
    }
}
