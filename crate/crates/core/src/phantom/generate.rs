use std::f64::consts::PI;

use ndarray::{Array2, Array3, Array4};
use rand::Rng;
use rand_distr::StandardNormal;

use super::{Corpus, DomainProfile, DomainTag, Geometry, MaskVolume, Volume};
use crate::error::Result;
use crate::par;
use crate::rng;

/// Names of the first four lesion classes; further classes are `class<N>`.
pub const CLASS_NAMES: [&str; 4] = ["irf", "srf", "ped", "shrm"];

/// Probability that a given lesion class occurs in a volume.
const LESION_PROB: f64 = 0.75;

fn class_name(c: usize) -> String {
    CLASS_NAMES
        .get(c)
        .map(|s| s.to_string())
        .unwrap_or_else(|| format!("class{c}"))
}

/// Sum of a few random low-frequency sinusoids, roughly in `[-1, 1]`.
struct SmoothField {
    waves: Vec<([f64; 3], f64)>,
}

impl SmoothField {
    fn new(r: &mut impl Rng, n: usize, max_freq: f64) -> Self {
        let waves = (0..n)
            .map(|_| {
                let f = [
                    r.random_range(-max_freq..max_freq),
                    r.random_range(-max_freq..max_freq),
                    r.random_range(-max_freq..max_freq),
                ];
                (f, r.random_range(0.0..2.0 * PI))
            })
            .collect();
        Self { waves }
    }

    /// Evaluate at normalized coordinates `(z, y, x)` in `[0, 1]`.
    fn at(&self, z: f64, y: f64, x: f64) -> f64 {
        let n = self.waves.len() as f64;
        self.waves
            .iter()
            .map(|(f, p)| (2.0 * PI * (f[0] * z + f[1] * y + f[2] * x) + p).sin())
            .sum::<f64>()
            / n.sqrt()
    }
}

/// A tissue boundary `y = b(x, z)` in pixels.
struct Boundary {
    base: f64,
    amp: f64,
    freq: f64,
    phase: f64,
    z_amp: f64,
    z_phase: f64,
    dip: f64,
}

impl Boundary {
    fn at(&self, g: &Geometry, z: f64, x: f64) -> f64 {
        let (h, w, d) = (g.height as f64, g.width as f64, g.depth as f64);
        let (u, s) = (x / w, z / d);
        let fovea = {
            let du = (u - 0.5) / 0.12;
            let ds = (s - 0.5) / 0.3;
            (-0.5 * (du * du + ds * ds)).exp()
        };
        h * (self.base
            + self.amp * (2.0 * PI * (self.freq * u) + self.phase).sin()
            + self.z_amp * (2.0 * PI * s + self.z_phase).sin()
            + self.dip * fovea)
    }
}

struct Lesion {
    class: usize,
    center: [f64; 3],
    radii: [f64; 3],
    intensity: f64,
    warp: SmoothField,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Clean intensities and masks; depends only on the seed and geometry.
fn anatomy(seed: u64, g: &Geometry, num_classes: usize) -> (Array3<f64>, Array4<u8>) {
    let mut r = rng::stream(seed, "phantom.anatomy", 0);
    let (d, h, w) = (g.depth, g.height, g.width);
    let (df, hf, wf) = (d as f64, h as f64, w as f64);

    let bases = [0.22, 0.42, 0.58, 0.66];
    let dips = [0.07, 0.03, 0.0, 0.0];
    let boundaries: Vec<Boundary> = bases
        .iter()
        .zip(dips)
        .map(|(&b, dip)| Boundary {
            base: b + r.random_range(-0.025..0.025),
            amp: r.random_range(0.01..0.03),
            freq: r.random_range(0.5..1.5),
            phase: r.random_range(0.0..2.0 * PI),
            z_amp: r.random_range(0.0..0.02),
            z_phase: r.random_range(0.0..2.0 * PI),
            dip,
        })
        .collect();
    let region: Vec<f64> = [0.04, 0.55, 0.28, 0.88, 0.5]
        .iter()
        .map(|&v: &f64| (v + r.random_range(-0.04..0.04)).clamp(0.0, 1.0))
        .collect();
    let texture = SmoothField::new(&mut r, 4, 6.0);

    let templates = [0.06, 0.10, 0.22, 0.85];
    let mut lesions = Vec::new();
    for class in 0..num_classes {
        let present = r.random_bool(LESION_PROB);
        let t = class % 4;
        let xc = r.random_range(0.2..0.8) * wf;
        let zc = r.random_range(0.25..0.75) * df;
        let rx = r.random_range(0.08..0.16) * wf;
        let rz = r.random_range(0.15..0.3) * df;
        let ry = match t {
            0 => r.random_range(0.04..0.07),
            2 => r.random_range(0.05..0.08),
            _ => r.random_range(0.03..0.05),
        } * hf;
        let warp = SmoothField::new(&mut r, 3, 2.0);
        if !present {
            continue;
        }
        let b = |k: usize| boundaries[k].at(g, zc, xc);
        let yc = match t {
            0 => 0.5 * (b(0) + b(1)),
            1 => b(2) - 0.9 * ry,
            2 => b(3) + 0.6 * ry,
            _ => b(2) - 1.2 * ry,
        };
        lesions.push(Lesion {
            class,
            center: [zc, yc, xc],
            radii: [rz, ry, rx],
            intensity: templates[t],
            warp,
        });
    }

    let mut clean = Array3::<f64>::zeros((d, h, w));
    let mut labels = Array4::<u8>::zeros((d, h, w, num_classes));
    for z in 0..d {
        for x in 0..w {
            let bz: Vec<f64> = boundaries
                .iter()
                .map(|b| b.at(g, z as f64 + 0.5, x as f64 + 0.5))
                .collect();
            for y in 0..h {
                let yy = y as f64 + 0.5;
                let mut v = region[0];
                for k in 0..4 {
                    v += (region[k + 1] - region[k]) * sigmoid((yy - bz[k]) / 0.6);
                }
                let (sz, sy, sx) = ((z as f64 + 0.5) / df, yy / hf, (x as f64 + 0.5) / wf);
                v *= 1.0 + 0.08 * texture.at(sz, sy, sx);
                for les in &lesions {
                    let dz = (z as f64 + 0.5 - les.center[0]) / les.radii[0];
                    let dy = (yy - les.center[1]) / les.radii[1];
                    let dx = (x as f64 + 0.5 - les.center[2]) / les.radii[2];
                    let rho = dz * dz + dy * dy + dx * dx;
                    if rho < 1.0 + 0.3 * les.warp.at(sz, sy, sx) {
                        labels[[z, y, x, les.class]] = 1;
                        v = les.intensity * (1.0 + 0.05 * texture.at(sz, sy, sx));
                    }
                }
                clean[[z, y, x]] = v.clamp(0.0, 1.0);
            }
        }
    }
    (clean, labels)
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    let k: Vec<f64> = (-radius..=radius)
        .map(|i| (-0.5 * (i as f64 / sigma).powi(2)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian blur with edge clamping.
fn blur(img: &Array2<f64>, sigma: f64) -> Array2<f64> {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let (h, w) = img.dim();
    let clampi = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            tmp[[y, x]] = k
                .iter()
                .enumerate()
                .map(|(i, kv)| kv * img[[y, clampi(x as isize + i as isize - r, w)]])
                .sum();
        }
    }
    let mut out = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            out[[y, x]] = k
                .iter()
                .enumerate()
                .map(|(i, kv)| kv * tmp[[clampi(y as isize + i as isize - r, h), x]])
                .sum();
        }
    }
    out
}

fn render(seed: u64, clean: &Array3<f64>, p: &DomainProfile) -> Array3<f32> {
    let mut r = rng::stream(seed, "phantom.appearance", 0);
    let (d, h, w) = clean.dim();
    let bias = SmoothField::new(&mut r, 2, 1.0);
    let mut out = Array3::<f32>::zeros((d, h, w));
    for z in 0..d {
        let white = Array2::from_shape_simple_fn((h, w), || r.sample::<f64, _>(StandardNormal));
        let mut speckle = blur(&white, p.speckle_grain_px);
        let mean = speckle.mean().unwrap_or(0.0);
        let std = speckle.std(0.0).max(1e-12);
        speckle.mapv_inplace(|v| (v - mean) / std);
        for y in 0..h {
            for x in 0..w {
                let mut v = clean[[z, y, x]].powf(p.contrast_gamma) + p.offset;
                v *= 1.0 + p.speckle_amp * speckle[[y, x]];
                let b = bias.at(z as f64 / d as f64, y as f64 / h as f64, x as f64 / w as f64);
                v *= 1.0 + p.bias_field_amp * b.clamp(-1.0, 1.0);
                v += p.noise_sigma * r.sample::<f64, _>(StandardNormal);
                out[[z, y, x]] = v.clamp(0.0, 1.0) as f32;
            }
        }
    }
    out
}

/// Render one phantom. The mask depends only on `seed`, `geometry` and
/// `num_classes`; `profile` changes appearance only.
pub fn generate_phantom(
    seed: u64,
    geometry: &Geometry,
    profile: &DomainProfile,
    num_classes: usize,
    domain: DomainTag,
) -> Result<(Volume, MaskVolume)> {
    geometry.validate()?;
    profile.validate()?;
    if num_classes == 0 {
        return Err(crate::Error::Geometry("num_classes must be >= 1".into()));
    }
    let (clean, labels) = anatomy(seed, geometry, num_classes);
    let voxels = render(seed, &clean, profile);
    let volume = Volume::new(voxels, profile.spacing_um, domain, format!("{domain}-{seed:016x}"))?;
    let mask = MaskVolume {
        labels,
        class_names: (0..num_classes).map(class_name).collect(),
    };
    Ok((volume, mask))
}

/// Generate `n_source` + `n_target` volumes with ids `src-NNN` / `tgt-NNN`.
/// Source and target volumes have independent anatomy.
pub fn generate_corpus(
    geometry: &Geometry,
    num_classes: usize,
    n_source: usize,
    n_target: usize,
    source: &DomainProfile,
    target: &DomainProfile,
    seed: u64,
) -> Result<Corpus> {
    let jobs: Vec<(DomainTag, usize)> = (0..n_source)
        .map(|i| (DomainTag::Source, i))
        .chain((0..n_target).map(|i| (DomainTag::Target, i)))
        .collect();
    let made = par::map_slice(&jobs, |&(domain, i)| {
        let (label, profile, prefix) = match domain {
            DomainTag::Source => ("phantom.source", source, "src"),
            DomainTag::Target => ("phantom.target", target, "tgt"),
        };
        let vseed = rng::derive(seed, label, i as u64);
        generate_phantom(vseed, geometry, profile, num_classes, domain).map(|(mut v, m)| {
            v.volume_id = format!("{prefix}-{i:03}");
            (v, m)
        })
    });
    let mut corpus = Corpus::default();
    for item in made {
        let (v, m) = item?;
        corpus.volumes.insert(v.volume_id.clone(), (v, m));
    }
    Ok(corpus)
}
