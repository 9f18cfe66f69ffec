//! Positive-pair generation for the contrastive branch: augmented views of
//! one slice, nearby slices of one volume, or both.

use ndarray::{Array2, Array3, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::phantom::{DomainTag, Volume};

/// One 2D slice, optionally with its `(C, H, W)` ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct SliceSample {
    pub image: Array2<f32>,
    pub mask: Option<Array3<u8>>,
    pub volume_id: String,
    pub slice_index: usize,
    pub domain: DomainTag,
}

impl SliceSample {
    /// Unlabeled slice `b` of `vol`.
    pub fn from_volume(vol: &Volume, b: usize) -> Result<Self> {
        if b >= vol.depth() {
            return Err(Error::Invalid(format!(
                "slice {b} out of range for {} (depth {})",
                vol.volume_id,
                vol.depth()
            )));
        }
        Ok(Self {
            image: vol.slice(b),
            mask: None,
            volume_id: vol.volume_id.clone(),
            slice_index: b,
            domain: vol.domain,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmConfig {
    pub flip_prob: f64,
    /// Per-axis translation bound as a fraction of the image size.
    pub max_translate_frac: f64,
    /// Zoom factor is drawn from `[1, 1 + max_zoom_in_frac]`.
    pub max_zoom_in_frac: f64,
    pub max_brightness_delta: f64,
    pub max_jitter: f64,
}

impl Default for AugmConfig {
    fn default() -> Self {
        Self {
            flip_prob: 0.5,
            max_translate_frac: 0.25,
            max_zoom_in_frac: 0.5,
            max_brightness_delta: 0.6,
            max_jitter: 0.2,
        }
    }
}

impl AugmConfig {
    /// Every augmentation disabled.
    pub fn identity() -> Self {
        Self {
            flip_prob: 0.0,
            max_translate_frac: 0.0,
            max_zoom_in_frac: 0.0,
            max_brightness_delta: 0.0,
            max_jitter: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("flip_prob", self.flip_prob),
            ("max_translate_frac", self.max_translate_frac),
            ("max_zoom_in_frac", self.max_zoom_in_frac),
            ("max_brightness_delta", self.max_brightness_delta),
            ("max_jitter", self.max_jitter),
        ];
        for (name, v) in fields {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("augmentation {name} = {v} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ContrastivePair {
    pub first: SliceSample,
    pub second: SliceSample,
}

/// Physical standard deviation of the nearby-slice sampler.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SliceSigma {
    pub sigma_um: f64,
}

impl SliceSigma {
    pub fn new(sigma_um: f64) -> Result<Self> {
        let s = Self { sigma_um };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_um > 0.0 && self.sigma_um.is_finite()) {
            return Err(Error::Config(format!("sigma_um must be > 0, got {}", self.sigma_um)));
        }
        Ok(())
    }

    /// Standard deviation in slice indices for a given inter-slice spacing.
    pub fn sigma_idx(&self, slice_spacing_um: f64) -> f64 {
        self.sigma_um / slice_spacing_um
    }
}

/// Uniform draw in `[-m, m]`. Always consumes one value so the stream
/// layout does not depend on the configuration.
fn symmetric<R: Rng + ?Sized>(r: &mut R, m: f64) -> f64 {
    (2.0 * r.random::<f64>() - 1.0) * m
}

/// Random colour parameters for the three replicated channels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ColorParams {
    pub brightness: [f64; 3],
    pub jitter: [f64; 3],
}

impl ColorParams {
    pub fn draw<R: Rng + ?Sized>(max_brightness_delta: f64, max_jitter: f64, r: &mut R) -> Self {
        let mut p = Self {
            brightness: [0.0; 3],
            jitter: [1.0; 3],
        };
        for c in 0..3 {
            p.brightness[c] = symmetric(r, max_brightness_delta);
            p.jitter[c] = 1.0 + symmetric(r, max_jitter);
        }
        p
    }
}

const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

/// Apply fixed colour parameters: replicate to RGB, shift and scale each
/// channel, return to grayscale by luminance, clamp.
pub fn color_distort_with(image: &Array2<f32>, p: &ColorParams) -> Array2<f32> {
    image.mapv(|x| {
        let x = x as f64;
        let y: f64 = (0..3).map(|c| LUMA[c] * (x + p.brightness[c]) * p.jitter[c]).sum();
        y.clamp(0.0, 1.0) as f32
    })
}

pub fn color_distort<R: Rng + ?Sized>(
    image: &Array2<f32>,
    max_brightness_delta: f64,
    max_jitter: f64,
    r: &mut R,
) -> Array2<f32> {
    let p = ColorParams::draw(max_brightness_delta, max_jitter, r);
    color_distort_with(image, &p)
}

/// Geometric parameters of one augmentation draw.
#[derive(Clone, Copy, Debug, PartialEq)]
struct Geom {
    flip: bool,
    /// Integer shift in pixels, `(rows, cols)`.
    shift: (isize, isize),
    zoom: f64,
}

impl Geom {
    fn draw<R: Rng + ?Sized>(cfg: &AugmConfig, h: usize, w: usize, r: &mut R) -> Self {
        let flip = r.random::<f64>() < cfg.flip_prob;
        let dy = symmetric(r, cfg.max_translate_frac) * h as f64;
        let dx = symmetric(r, cfg.max_translate_frac) * w as f64;
        let zoom = 1.0 + r.random::<f64>() * cfg.max_zoom_in_frac;
        Self {
            flip,
            shift: (dy.round() as isize, dx.round() as isize),
            zoom,
        }
    }

    /// Flip then shift with zero fill.
    fn flip_shift<T: Copy + Default>(&self, a: &Array2<T>) -> Array2<T> {
        let (h, w) = a.dim();
        Array2::from_shape_fn((h, w), |(i, j)| {
            let si = i as isize - self.shift.0;
            let sj = j as isize - self.shift.1;
            if si < 0 || sj < 0 || si >= h as isize || sj >= w as isize {
                return T::default();
            }
            let sj = if self.flip { w - 1 - sj as usize } else { sj as usize };
            a[[si as usize, sj]]
        })
    }

    /// Source coordinate of output index `i` under a centred zoom.
    fn zoom_src(&self, i: usize, n: usize) -> f64 {
        (i as f64 + 0.5 - n as f64 / 2.0) / self.zoom + n as f64 / 2.0 - 0.5
    }

    fn image(&self, a: &Array2<f32>) -> Array2<f32> {
        let a = self.flip_shift(a);
        if self.zoom == 1.0 {
            return a;
        }
        let (h, w) = a.dim();
        let lerp = |c: f64, n: usize| {
            let c = c.clamp(0.0, (n - 1) as f64);
            let lo = c.floor() as usize;
            (lo, (lo + 1).min(n - 1), c - lo as f64)
        };
        Array2::from_shape_fn((h, w), |(i, j)| {
            let (y0, y1, fy) = lerp(self.zoom_src(i, h), h);
            let (x0, x1, fx) = lerp(self.zoom_src(j, w), w);
            let top = a[[y0, x0]] as f64 * (1.0 - fx) + a[[y0, x1]] as f64 * fx;
            let bot = a[[y1, x0]] as f64 * (1.0 - fx) + a[[y1, x1]] as f64 * fx;
            (top * (1.0 - fy) + bot * fy) as f32
        })
    }

    fn mask(&self, m: &Array3<u8>) -> Array3<u8> {
        let mut out = m.clone();
        for (src, mut dst) in m.axis_iter(Axis(0)).zip(out.axis_iter_mut(Axis(0))) {
            let a = self.flip_shift(&src.to_owned());
            let (h, w) = a.dim();
            let near = |c: f64, n: usize| c.round().clamp(0.0, (n - 1) as f64) as usize;
            for i in 0..h {
                for j in 0..w {
                    dst[[i, j]] = a[[near(self.zoom_src(i, h), h), near(self.zoom_src(j, w), w)]];
                }
            }
        }
        out
    }
}

/// Flip, translate, zoom in, colour-distort. The mask, if any, receives the
/// same geometric transform with nearest-neighbour sampling.
pub fn augment<R: Rng + ?Sized>(sample: &SliceSample, cfg: &AugmConfig, r: &mut R) -> SliceSample {
    let (h, w) = sample.image.dim();
    let g = Geom::draw(cfg, h, w, r);
    let color = ColorParams::draw(cfg.max_brightness_delta, cfg.max_jitter, r);
    let image = color_distort_with(&g.image(&sample.image), &color);
    SliceSample {
        image,
        mask: sample.mask.as_ref().map(|m| g.mask(m)),
        volume_id: sample.volume_id.clone(),
        slice_index: sample.slice_index,
        domain: sample.domain,
    }
}

fn unlabeled(mut s: SliceSample) -> SliceSample {
    s.mask = None;
    s
}

/// Two independent augmentations of the same slice.
pub fn pair_augm<R: Rng + ?Sized>(sample: &SliceSample, cfg: &AugmConfig, r: &mut R) -> ContrastivePair {
    let first = unlabeled(augment(sample, cfg, r));
    let second = unlabeled(augment(sample, cfg, r));
    ContrastivePair { first, second }
}

/// Draw from a Gaussian centred on `b`, round, and clamp into `[0, depth)`.
pub fn sample_nearby_index<R: Rng + ?Sized>(b: usize, sigma_idx: f64, depth: usize, r: &mut R) -> usize {
    let n: f64 = r.sample(StandardNormal);
    let v = (b as f64 + sigma_idx * n).round();
    v.clamp(0.0, (depth - 1) as f64) as usize
}

fn check_index(volume: &Volume, b: usize) -> Result<()> {
    if b >= volume.depth() {
        return Err(Error::Invalid(format!(
            "slice {b} out of range for {} (depth {})",
            volume.volume_id,
            volume.depth()
        )));
    }
    Ok(())
}

/// Slice `b` paired with a nearby slice of the same volume.
pub fn pair_slice<R: Rng + ?Sized>(volume: &Volume, b: usize, sigma: SliceSigma, r: &mut R) -> Result<ContrastivePair> {
    check_index(volume, b)?;
    let s = sigma.sigma_idx(volume.spacing_um[0]);
    let b2 = sample_nearby_index(b, s, volume.depth(), r);
    Ok(ContrastivePair {
        first: SliceSample::from_volume(volume, b)?,
        second: SliceSample::from_volume(volume, b2)?,
    })
}

/// Nearby-slice pair with each member augmented independently.
pub fn pair_comb<R: Rng + ?Sized>(
    volume: &Volume,
    b: usize,
    sigma: SliceSigma,
    cfg: &AugmConfig,
    r: &mut R,
) -> Result<ContrastivePair> {
    let p = pair_slice(volume, b, sigma, r)?;
    Ok(ContrastivePair {
        first: augment(&p.first, cfg, r),
        second: augment(&p.second, cfg, r),
    })
}
