mod common;

use common::rng;
use maskvit_core::pipeline::*;
use proptest::prelude::*;
use rand::Rng;

fn random_mask(r: &mut rand_chacha::ChaCha8Rng, w: usize, h: usize, density: f64) -> TissueMaskRaster {
    let bitmap = (0..w * h).map(|_| u8::from(r.gen_bool(density)) * r.gen_range(1..=255)).collect();
    TissueMaskRaster::new(w, h, 0.5, bitmap).unwrap()
}

fn brute_count(mask: &TissueMaskRaster, x0: usize, y0: usize, size: usize) -> usize {
    let mut n = 0;
    for y in y0..y0 + size {
        for x in x0..x0 + size {
            if x < mask.width && y < mask.height && mask.bitmap[y * mask.width + x] != 0 {
                n += 1;
            }
        }
    }
    n
}

#[test]
fn fractions_average_to_region_fraction() {
    let mut r = rng(1);
    for _ in 0..20 {
        let w = r.gen_range(8..40);
        let h = r.gen_range(8..40);
        let density = r.gen_range(0.0..0.6);
        let mask = random_mask(&mut r, w, h, density);
        for region in extract_regions(&mask, 8, 0.0).unwrap() {
            let f = patch_tissue_fractions(&mask, &region, 2).unwrap();
            assert_eq!(f.len(), 16);
            let brute = brute_count(&mask, region.x, region.y, 8) as f64 / 64.0;
            assert!((f.mean() - brute).abs() < 1e-9);
            assert!((region.tissue_fraction - brute).abs() < 1e-15);
        }
    }
}

#[test]
fn discard_rule_matches_brute_force() {
    let mut r = rng(2);
    for _ in 0..30 {
        let (w, h) = (r.gen_range(10..50), r.gen_range(10..50));
        let density = r.gen_range(0.0..0.25);
        let mask = random_mask(&mut r, w, h, density);
        let kept = extract_regions(&mask, 10, 0.10).unwrap();
        let mut expected = Vec::new();
        for y in (0..mask.height).step_by(10) {
            for x in (0..mask.width).step_by(10) {
                // integer form of count / 100 >= 0.10
                if brute_count(&mask, x, y, 10) >= 10 {
                    expected.push((x, y));
                }
            }
        }
        let got: Vec<_> = kept.iter().map(|k| (k.x, k.y)).collect();
        assert_eq!(got, expected);
    }
}

#[test]
fn planted_patch_is_sole_unmasked_token() {
    for target in 0..16 {
        let (px, py) = (target % 4, target / 4);
        let mut bitmap = vec![0u8; 64 * 64];
        // one fully tissue patch in a 32x32 region of 8x8 patches, region (32, 0)
        for y in py * 8..py * 8 + 8 {
            for x in 32 + px * 8..32 + px * 8 + 8 {
                bitmap[y * 64 + x] = 1;
            }
        }
        let mask = TissueMaskRaster::new(64, 64, 0.5, bitmap).unwrap();
        let image = GrayImage::new(64, 64, vec![200; 64 * 64]).unwrap();
        let sample = preprocess_slide("p", &mask, &image, 1, 32, 8, 0.05).unwrap().unwrap();
        assert_eq!(sample.region_coords, vec![(32, 0)]);
        let tissue = &sample.tissue[0];
        for j in 0..16 {
            assert_eq!(tissue.is_background(j), j != target);
            let tf = sample.patch_features.at(&[0, j, 0]);
            assert_eq!(tf, if j == target { 1.0 } else { 0.0 });
        }
    }
}

#[test]
fn preprocess_skips_background_slide() {
    let mask = TissueMaskRaster::new(16, 16, 0.5, vec![0; 256]).unwrap();
    let image = GrayImage::new(16, 16, vec![9; 256]).unwrap();
    assert!(preprocess_slide("b", &mask, &image, 0, 8, 4, 0.1).unwrap().is_none());
}

fn small_spec() -> SyntheticSlideSpec {
    SyntheticSlideSpec {
        region_size: 128,
        patch_size: 32,
        ..SyntheticSlideSpec::default()
    }
}

#[test]
fn synthetic_generation_is_deterministic_and_label_sound() {
    let a = synthesize_slides(&small_spec(), 12, 5).unwrap();
    let b = synthesize_slides(&small_spec(), 12, 5).unwrap();
    assert_eq!(a, b);
    let c = synthesize_slides(&small_spec(), 12, 6).unwrap();
    assert_ne!(a, c);
    for s in &a {
        assert_eq!(label_from_tissue(&s.mask, &s.image), Some(s.label));
        assert!(!extract_regions(&s.mask, 128, 0.10).unwrap().is_empty());
    }
    let labels: Vec<u8> = a.iter().map(|s| s.label).collect();
    for g in 0..6 {
        assert!(labels.contains(&g), "grade {g} missing from {labels:?}");
    }
}

#[test]
fn zeroing_background_keeps_label_signal() {
    let slides = synthesize_slides(&small_spec(), 12, 8).unwrap();
    let data = synthesize_dataset(&small_spec(), 12, 8).unwrap();
    for (slide, sample) in slides.iter().zip(&data) {
        let mut image = slide.image.clone();
        for (p, m) in image.pixels.iter_mut().zip(&slide.mask.bitmap) {
            if *m == 0 {
                *p = 0;
            }
        }
        assert_eq!(label_from_tissue(&slide.mask, &image), Some(sample.label));

        // zero the features of zero-tissue patches: tissue-restricted means
        // of tissue patches are untouched
        let mut zeroed = sample.clone();
        let t = sample.tissue[0].len();
        for (m, tissue) in sample.tissue.iter().enumerate() {
            for j in 0..t {
                if tissue.is_background(j) {
                    for k in 0..FEATURE_DIM {
                        zeroed.patch_features.data_mut()[(m * t + j) * FEATURE_DIM + k] = 0.0;
                    }
                } else {
                    assert_eq!(
                        zeroed.patch_features.at(&[m, j, 3]),
                        sample.patch_features.at(&[m, j, 3])
                    );
                }
            }
        }
    }
}

#[test]
fn background_pixels_never_change_labels() {
    let slides = synthesize_slides(&small_spec(), 6, 9).unwrap();
    let mut r = rng(9);
    for s in slides {
        let mut image = s.image.clone();
        for (p, m) in image.pixels.iter_mut().zip(&s.mask.bitmap) {
            if *m == 0 {
                *p = r.gen();
            }
        }
        assert_eq!(label_from_tissue(&s.mask, &image), Some(s.label));
    }
}

#[test]
fn six_balanced_classes_over_five_folds() {
    let labels: Vec<u8> = (0..36).map(|i| (i % 6) as u8).collect();
    let folds = stratified_folds(&labels, 5, 3).unwrap();
    for f in &folds {
        for c in 0..6u8 {
            let n = f.iter().filter(|&&i| labels[i] == c).count();
            assert!((1..=2).contains(&n));
        }
    }
}

proptest! {
    #[test]
    fn folds_partition_and_stratify(labels in proptest::collection::vec(0u8..6, 5..80), k in 2usize..6, seed in any::<u64>()) {
        prop_assume!(k <= labels.len());
        let folds = stratified_folds(&labels, k, seed).unwrap();
        prop_assert_eq!(folds.len(), k);
        let mut all: Vec<usize> = folds.iter().flatten().copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..labels.len()).collect::<Vec<_>>());
        for c in 0..6u8 {
            let counts: Vec<usize> = folds.iter().map(|f| f.iter().filter(|&&i| labels[i] == c).count()).collect();
            let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
            prop_assert!(hi - lo <= 1);
        }
        prop_assert_eq!(stratified_folds(&labels, k, seed).unwrap(), folds);
    }
}
