//! Oracles shared by the integration tests and the acceptance suite.
#![allow(dead_code)]

use ndarray::{concatenate, s, Array2, Array4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

use segcl::losses::{
    log_dice_loss, ntxent_loss, simsiam_from_predictions, simsiam_loss_grad, ContrastiveKind, DenominatorMode,
    LossConfig,
};
use segcl::model::{HeadKind, ModelConfig, Network};
use segcl::nn::{ParamSet, Pass};
use segcl::pairgen::{augment, sample_nearby_index, AugmConfig, SliceSample};
use segcl::phantom::DomainTag;
use segcl::rng;
use segcl::trainer::{contrastive_loss_grad, supervised_loss_grad};

pub const STEP: f64 = 1e-5;
pub const MAX_REL_ERR: f64 = 1e-4;
/// Gradients smaller than this are compared in absolute terms.
pub const REL_FLOOR: f64 = 1e-4;
/// Kinks (a ReLU or max-pool switch inside the step) allowed per checked
/// parameter.
pub const MAX_KINK_FRACTION: f64 = 1e-3;
/// Agreement required with a one-sided slope at a kink.
pub const KINK_REL_ERR: f64 = 1e-2;
const DROPOUT_SEED: u64 = 99;

fn dropout_rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(DROPOUT_SEED)
}

pub fn images(n: usize, seed: u64) -> Array4<f64> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    Array4::from_shape_simple_fn((n, 1, 16, 16), || r.random::<f64>())
}

fn masks(n: usize, classes: usize, seed: u64) -> Array4<f64> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    Array4::from_shape_simple_fn((n, classes, 16, 16), || f64::from(u8::from(r.random_bool(0.3))))
}

/// The tiny model with a narrow projection. At the default 128 the head's
/// second layer alone would hold most of the perturbed parameters.
pub fn tiny(head: HeadKind) -> ModelConfig {
    ModelConfig {
        head_kind: head,
        projection_dim: 16,
        ..ModelConfig::tiny()
    }
}

pub fn zero_grad(net: &Network<f64>) -> Network<f64> {
    let mut g = net.clone();
    g.fill_zero();
    g
}

#[derive(Debug)]
pub struct Report {
    pub max_rel: f64,
    pub worst: String,
    pub checked: usize,
    pub kinks: usize,
}

impl Report {
    pub fn problem(&self) -> Option<String> {
        let allowed = (MAX_KINK_FRACTION * self.checked as f64).ceil() as usize;
        if self.max_rel >= MAX_REL_ERR {
            Some(format!("max rel err {:e} at {}", self.max_rel, self.worst))
        } else if self.kinks > allowed {
            Some(format!("{} kinks in {} parameters", self.kinks, self.checked))
        } else {
            None
        }
    }

    pub fn assert_ok(&self, what: &str) {
        if let Some(p) = self.problem() {
            panic!("{what}: {p}");
        }
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

/// Compare `analytic` with central differences of `f` over every parameter.
/// Where the central difference disagrees because the step crosses a kink,
/// the analytic value must match the forward or backward slope instead.
pub fn finite_difference_check(
    net: &mut Network<f64>,
    analytic: &Network<f64>,
    f: impl Fn(&Network<f64>) -> f64,
) -> Report {
    let layout: Vec<(String, usize)> = net.tensors("").iter().map(|(n, t)| (n.clone(), t.len())).collect();
    let grads: Vec<Vec<f64>> = analytic.tensors("").iter().map(|(_, t)| t.to_vec()).collect();
    let center = f(net);
    let mut rep = Report {
        max_rel: 0.0,
        worst: String::new(),
        checked: 0,
        kinks: 0,
    };
    for (ti, (name, len)) in layout.iter().enumerate() {
        for k in 0..*len {
            let orig = net.tensors_mut("")[ti].1[k];
            net.tensors_mut("")[ti].1[k] = orig + STEP;
            let up = f(net);
            net.tensors_mut("")[ti].1[k] = orig - STEP;
            let down = f(net);
            net.tensors_mut("")[ti].1[k] = orig;
            let numeric = (up - down) / (2.0 * STEP);
            let a = grads[ti][k];
            let mut rel = rel_err(a, numeric);
            if rel >= MAX_REL_ERR {
                let one_sided = rel_err(a, (up - center) / STEP).min(rel_err(a, (center - down) / STEP));
                if one_sided < KINK_REL_ERR {
                    rep.kinks += 1;
                    rel = 0.0;
                }
            }
            if rel > rep.max_rel {
                rep.max_rel = rel;
                rep.worst = format!("{name}[{k}]: analytic {a:e} numeric {numeric:e}");
            }
            rep.checked += 1;
        }
    }
    rep
}

/// Supervised log-Dice through the whole UNet.
pub fn log_dice_check() -> Report {
    let cfg = tiny(HeadKind::Pool);
    let mut net = Network::<f64>::build(&cfg, 1, false, false).unwrap();
    let x = images(2, 10);
    let y = masks(2, cfg.num_classes, 11);
    let eps = LossConfig::default().eps;
    let mut grad = zero_grad(&net);
    supervised_loss_grad(
        &net.unet,
        &mut grad.unet,
        &x,
        &y,
        eps,
        1.0,
        &mut Pass::Train(&mut dropout_rng()),
    )
    .unwrap();
    finite_difference_check(&mut net, &grad, |n| {
        let mut r = dropout_rng();
        let mut pass = Pass::Train(&mut r);
        let (enc, _) = n.unet.encode(&x, &mut pass).unwrap();
        let (p, _) = n.unet.decode(&enc, &mut pass);
        log_dice_loss(&p, &y, eps).unwrap()
    })
}

/// Projections of `xp` and `xpp` from one encoder pass, as the trainer does.
pub fn project(n: &Network<f64>, xp: &Array4<f64>, xpp: &Array4<f64>) -> (Array2<f64>, Array2<f64>) {
    let mut r = dropout_rng();
    let mut pass = Pass::Train(&mut r);
    let x = concatenate(Axis(0), &[xp.view(), xpp.view()]).unwrap();
    let (enc, _) = n.unet.encode(&x, &mut pass).unwrap();
    let (z, _) = n.head.as_ref().unwrap().forward(&enc.h);
    let k = xp.dim().0;
    (z.slice(s![..k, ..]).to_owned(), z.slice(s![k.., ..]).to_owned())
}

/// NT-Xent through encoder and channel head.
pub fn ntxent_check(mode: DenominatorMode) -> Report {
    let cfg = tiny(HeadKind::Ch);
    let mut net = Network::<f64>::build(&cfg, 2, true, false).unwrap();
    let (xp, xpp) = (images(3, 20), images(3, 21));
    let loss = LossConfig {
        denominator_mode: mode,
        ..LossConfig::default()
    };
    let mut grad = zero_grad(&net);
    contrastive_loss_grad(
        &net,
        &mut grad,
        &xp,
        &xpp,
        &loss,
        1.0,
        &mut Pass::Train(&mut dropout_rng()),
    )
    .unwrap();
    finite_difference_check(&mut net, &grad, |n| {
        let (zp, zpp) = project(n, &xp, &xpp);
        ntxent_loss(&zp, &zpp, loss.tau, mode).unwrap()
    })
}

pub struct SimsiamCheck {
    pub report: Report,
    /// Whether differentiating through the targets would have given a
    /// different first encoder gradient.
    pub stopgrad_matters: bool,
}

/// SimSiam through encoder, pooled head and predictor, with the targets held
/// at their unperturbed values.
pub fn simsiam_check() -> SimsiamCheck {
    let cfg = tiny(HeadKind::Pool);
    let mut net = Network::<f64>::build(&cfg, 3, true, true).unwrap();
    let (xp, xpp) = (images(3, 30), images(3, 31));
    let loss = LossConfig {
        contrastive_kind: ContrastiveKind::Siam,
        ..LossConfig::default()
    };
    let mut grad = zero_grad(&net);
    contrastive_loss_grad(
        &net,
        &mut grad,
        &xp,
        &xpp,
        &loss,
        1.0,
        &mut Pass::Train(&mut dropout_rng()),
    )
    .unwrap();
    let (tp, tpp) = project(&net, &xp, &xpp);
    let stopped = |n: &Network<f64>| {
        let (zp, zpp) = project(n, &xp, &xpp);
        let q = n.predictor.as_ref().unwrap();
        simsiam_from_predictions(&q.forward(&zp).0, &q.forward(&zpp).0, &tp, &tpp).unwrap()
    };
    let report = finite_difference_check(&mut net, &grad, stopped);

    let full = |n: &Network<f64>| {
        let (zp, zpp) = project(n, &xp, &xpp);
        let q = n.predictor.as_ref().unwrap();
        simsiam_from_predictions(&q.forward(&zp).0, &q.forward(&zpp).0, &zp, &zpp).unwrap()
    };
    let g0 = grad.unet.encoder_tensors()[0].1.to_vec();
    let mut stopgrad_matters = false;
    for (k, &g) in g0.iter().enumerate() {
        let orig = net.unet.encoder_tensors_mut()[0].1[k];
        net.unet.encoder_tensors_mut()[0].1[k] = orig + STEP;
        let up = full(&net);
        net.unet.encoder_tensors_mut()[0].1[k] = orig - STEP;
        let down = full(&net);
        net.unet.encoder_tensors_mut()[0].1[k] = orig;
        stopgrad_matters |= ((up - down) / (2.0 * STEP) - g).abs() > 1e-3 * g.abs().max(REL_FLOOR);
    }
    SimsiamCheck {
        report,
        stopgrad_matters,
    }
}

/// Gradients reported for the stop-gradient targets; all must be exactly 0.
pub fn stopgrad_target_grads() -> (Vec<f64>, bool) {
    let cfg = tiny(HeadKind::Pool);
    let net = Network::<f64>::build(&cfg, 4, true, true).unwrap();
    let (zp, zpp) = project(&net, &images(4, 40), &images(4, 41));
    let q = net.predictor.as_ref().unwrap();
    let mut qg = q.clone();
    qg.fill_zero();
    let g = simsiam_loss_grad(&zp, &zpp, q, &mut qg).unwrap();
    let targets = g.d_target_zp.iter().chain(g.d_target_zpp.iter()).copied().collect();
    (targets, g.d_zp.iter().any(|&v| v != 0.0))
}

/// Straightforward double loop over all `(i, k)` pairs.
pub fn ntxent_oracle(zp: &[Vec<f64>], zpp: &[Vec<f64>], tau: f64, include_positive: bool) -> f64 {
    fn cos(a: &[f64], b: &[f64]) -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb)
    }
    let n = zp.len();
    let mut total = 0.0;
    for (a, b) in [(zp, zpp), (zpp, zp)] {
        for i in 0..n {
            let pos = (cos(&a[i], &b[i]) / tau).exp();
            let mut denom = 0.0;
            for k in 0..n {
                if k != i || include_positive {
                    denom += (cos(&a[i], &b[k]) / tau).exp();
                }
            }
            total += -(pos / denom).ln();
        }
    }
    total
}

pub fn ramp(h: usize, w: usize) -> Array2<f32> {
    Array2::from_shape_fn((h, w), |(y, x)| (y * w + x) as f32 / (h * w) as f32)
}

pub fn sample(image: Array2<f32>, mask: Option<ndarray::Array3<u8>>) -> SliceSample {
    SliceSample {
        image,
        mask,
        volume_id: "v".into(),
        slice_index: 0,
        domain: DomainTag::Source,
    }
}

/// Fraction of `draws` augmentations at flip probability 0.5 that came out
/// mirrored.
pub fn flip_rate(draws: usize) -> f64 {
    let cfg = AugmConfig {
        flip_prob: 0.5,
        ..AugmConfig::identity()
    };
    let s = sample(ramp(16, 16), None);
    let mut flipped_img = s.image.clone();
    flipped_img.invert_axis(Axis(1));
    let mut flips = 0;
    for i in 0..draws {
        let out = augment(&s, &cfg, &mut rng::stream(3, "flip-rate", i as u64));
        if out.image == flipped_img {
            flips += 1;
        } else {
            assert_eq!(out.image, s.image);
        }
    }
    flips as f64 / draws as f64
}

/// Rounded and clamped Gaussian probabilities of every index.
pub fn nearby_oracle(b: usize, sigma: f64, depth: usize) -> Vec<f64> {
    let n = Normal::new(b as f64, sigma).unwrap();
    (0..depth)
        .map(|k| {
            let lo = if k == 0 { 0.0 } else { n.cdf(k as f64 - 0.5) };
            let hi = if k + 1 == depth { 1.0 } else { n.cdf(k as f64 + 0.5) };
            hi - lo
        })
        .collect()
}

/// Pearson χ² p-value with bins of expected count below 5 merged into
/// their neighbours.
pub fn chi_square_p(counts: &[usize], probs: &[f64]) -> f64 {
    let total: usize = counts.iter().sum();
    let mut bins: Vec<(f64, f64)> = Vec::new();
    let mut acc = (0.0, 0.0);
    for (&c, &p) in counts.iter().zip(probs) {
        acc.0 += c as f64;
        acc.1 += p * total as f64;
        if acc.1 >= 5.0 {
            bins.push(acc);
            acc = (0.0, 0.0);
        }
    }
    if let Some(last) = bins.last_mut() {
        last.0 += acc.0;
        last.1 += acc.1;
    }
    let stat: f64 = bins.iter().map(|(o, e)| (o - e).powi(2) / e).sum();
    1.0 - ChiSquared::new((bins.len() - 1) as f64).unwrap().cdf(stat)
}

/// Draws of `sample_nearby_index(b, sigma, depth)` and their χ² p-value
/// against [`nearby_oracle`].
pub fn nearby_index_test(b: usize, sigma: f64, depth: usize, draws: usize) -> (Vec<usize>, f64) {
    let mut counts = vec![0usize; depth];
    let mut r = rng::stream(11, "nearby", 0);
    let drawn: Vec<usize> = (0..draws)
        .map(|_| sample_nearby_index(b, sigma, depth, &mut r))
        .collect();
    for &k in &drawn {
        counts[k] += 1;
    }
    let p = chi_square_p(&counts, &nearby_oracle(b, sigma, depth));
    (drawn, p)
}
