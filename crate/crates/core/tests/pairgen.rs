mod common;

use ndarray::{Array2, Array3};
use proptest::prelude::*;

use segcl::pairgen::{augment, pair_augm, pair_comb, pair_slice, AugmConfig, SliceSample, SliceSigma};
use segcl::phantom::{generate_phantom, DomainProfile, DomainTag, Geometry, Volume};
use segcl::rng;

use common::{chi_square_p, flip_rate, nearby_index_test, nearby_oracle, ramp, sample};

const DRAWS: usize = 10_000;

/// Slice `k` is filled with the value `k / depth` so the drawn index can be
/// read back from the pixels.
fn index_volume(depth: usize, slice_spacing: f64) -> Volume {
    let v = Array3::from_shape_fn((depth, 16, 16), |(z, _, _)| z as f32 / depth as f32);
    Volume::new(v, [slice_spacing, 4.0, 10.0], DomainTag::Target, "idx".into()).unwrap()
}

fn read_index(s: &SliceSample, depth: usize) -> usize {
    (s.image[[0, 0]] * depth as f32).round() as usize
}

#[test]
fn flip_rate_is_near_probability() {
    let rate = flip_rate(DRAWS);
    assert!((0.45..=0.55).contains(&rate), "flip rate {rate}");
}

#[test]
fn nearby_index_matches_discretized_gaussian() {
    let (draws, p) = nearby_index_test(16, 2.0, 33, DRAWS);
    assert!(p > 0.01, "chi-square p = {p}");
    let mean = draws.iter().sum::<usize>() as f64 / DRAWS as f64;
    let var = draws.iter().map(|&k| (k as f64 - mean).powi(2)).sum::<f64>() / (DRAWS - 1) as f64;
    assert!((1.7..=2.3).contains(&var.sqrt()), "std {}", var.sqrt());
}

#[test]
fn slice_pairs_follow_the_same_distribution() {
    // 200 µm over 100 µm slices is two slices.
    let (depth, b) = (33, 16);
    let vol = index_volume(depth, 100.0);
    let sigma = SliceSigma::new(200.0).unwrap();
    let mut counts = vec![0usize; depth];
    for i in 0..DRAWS {
        let p = pair_slice(&vol, b, sigma, &mut rng::stream(12, "pair-slice", i as u64)).unwrap();
        assert_eq!(read_index(&p.first, depth), b);
        assert_eq!(p.first.image, vol.slice(b));
        counts[read_index(&p.second, depth)] += 1;
    }
    let p = chi_square_p(&counts, &nearby_oracle(b, 2.0, depth));
    assert!(p > 0.01, "chi-square p = {p}");
}

#[test]
fn tiny_sigma_pairs_a_slice_with_itself() {
    let vol = index_volume(8, 100.0);
    let sigma = SliceSigma::new(1e-9).unwrap();
    let mut r = rng::stream(0, "tiny", 0);
    for b in 0..8 {
        let p = pair_slice(&vol, b, sigma, &mut r).unwrap();
        assert_eq!(p.first, p.second);
        let c = pair_comb(&vol, b, sigma, &AugmConfig::identity(), &mut r).unwrap();
        assert_eq!(c.first.image, vol.slice(b));
        assert_eq!(c.second.image, vol.slice(b));
        let d = pair_comb(&vol, 3, sigma, &AugmConfig::default(), &mut r).unwrap();
        assert_eq!((d.first.slice_index, d.second.slice_index), (3, 3));
    }
}

#[test]
fn two_slice_volume_with_huge_sigma_stays_in_range() {
    let vol = index_volume(2, 100.0);
    let sigma = SliceSigma::new(1e6).unwrap();
    let mut seen = [0usize; 2];
    for i in 0..1000 {
        let p = pair_slice(&vol, 0, sigma, &mut rng::stream(1, "two", i)).unwrap();
        seen[read_index(&p.second, 2)] += 1;
    }
    assert!(seen[0] > 0 && seen[1] > 0);
}

#[test]
fn default_augmented_views_differ() {
    let (vol, _) = generate_phantom(1, &Geometry::desk(), &DomainProfile::source(), 4, DomainTag::Source).unwrap();
    let s = SliceSample::from_volume(&vol, 16).unwrap();
    let differing = (0..100)
        .filter(|&i| {
            let p = pair_augm(&s, &AugmConfig::default(), &mut rng::stream(5, "views", i));
            p.first.image != p.second.image
        })
        .count();
    assert!(differing >= 99, "{differing}");
    let a = pair_augm(&s, &AugmConfig::default(), &mut rng::stream(5, "views", 0));
    let b = pair_augm(&s, &AugmConfig::default(), &mut rng::stream(5, "views", 0));
    assert_eq!(a, b);
}

fn augm_strategy() -> impl Strategy<Value = AugmConfig> {
    (0.0f64..=1.0, 0.0f64..=1.0, 0.0f64..=1.0, 0.0f64..=1.0, 0.0f64..=1.0).prop_map(|(f, t, z, b, j)| AugmConfig {
        flip_prob: f,
        max_translate_frac: t,
        max_zoom_in_frac: z,
        max_brightness_delta: b,
        max_jitter: j,
    })
}

proptest! {
    #[test]
    fn augmented_masks_do_not_depend_on_image(cfg in augm_strategy(), seed in 0u64..10_000) {
        let mask = Array3::from_shape_fn((3, 16, 16), |(c, y, x)| u8::from((x + 2 * y + c) % 5 == 0));
        let with_ramp = sample(ramp(16, 16), Some(mask.clone()));
        let with_flat = sample(Array2::from_elem((16, 16), 0.3), Some(mask));
        let a = augment(&with_ramp, &cfg, &mut rng::stream(seed, "commute", 0));
        let b = augment(&with_flat, &cfg, &mut rng::stream(seed, "commute", 0));
        prop_assert_eq!(&a.mask, &b.mask);
        prop_assert!(a.mask.unwrap().iter().all(|&v| v <= 1));
    }

    #[test]
    fn pair_members_keep_slice_invariants(cfg in augm_strategy(), seed in 0u64..10_000, b in 0usize..8) {
        let v = Array3::from_shape_fn((8, 16, 24), |(z, y, x)| ((z * 7 + y * 3 + x) % 11) as f32 / 10.0);
        let vol = Volume::new(v, [50.0, 4.0, 10.0], DomainTag::Target, "t".into()).unwrap();
        let p = pair_comb(&vol, b, SliceSigma::new(120.0).unwrap(), &cfg, &mut rng::stream(seed, "inv", 0)).unwrap();
        for m in [&p.first, &p.second] {
            prop_assert_eq!(m.image.dim(), (16, 24));
            prop_assert!(m.image.iter().all(|&x| (0.0..=1.0).contains(&x)));
            prop_assert!(m.slice_index < 8);
            prop_assert_eq!(m.domain, DomainTag::Target);
            prop_assert!(m.mask.is_none());
        }
    }
}
