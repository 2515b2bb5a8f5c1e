//! Property-based invariants across the pipeline: metric bounds and
//! identities, augmentation closure properties, softmax normalization,
//! ROI masking, split bookkeeping and the early-stopping rule.

use ndarray::Array4;
use proptest::prelude::*;

use lesion_core::augment::{augment_pair, sample_seed, AugmentConfig};
use lesion_core::cascade::extract_roi;
use lesion_core::clsmodel::{argmax_class, softmax};
use lesion_core::dataio::{
    split, DatasetManifest, LesionClass, ManifestSamples, NormalizationMode, SegSample, SplitTag,
};
use lesion_core::losses::{binary_cross_entropy, dice_loss};
use lesion_core::metrics::{dice_score, iou};
use lesion_core::segmodel::threshold_mask;
use lesion_core::tensor::Tensor4;
use lesion_core::trainer::early_stop_check;

fn binary_mask(bits: &[bool], h: usize, w: usize) -> Tensor4 {
    Array4::from_shape_fn((1, h, w, 1), |(_, y, x, _)| f64::from(bits[y * w + x]))
}

proptest! {
    #[test]
    fn metric_bounds_symmetry_and_identity(
        a in proptest::collection::vec(any::<bool>(), 64),
        b in proptest::collection::vec(any::<bool>(), 64),
    ) {
        let p = binary_mask(&a, 8, 8);
        let g = binary_mask(&b, 8, 8);
        let d = dice_score(&p, &g).unwrap();
        let j = iou(&p, &g).unwrap();
        prop_assert!((0.0..=1.0).contains(&d));
        prop_assert!((0.0..=1.0).contains(&j));
        // both are symmetric in their arguments
        prop_assert_eq!(d, dice_score(&g, &p).unwrap());
        prop_assert_eq!(j, iou(&g, &p).unwrap());
        // IoU never exceeds Dice and is tied to it by j = d/(2-d)
        prop_assert!(j <= d + 1e-12);
        prop_assert!((j - d / (2.0 - d)).abs() < 1e-12);
        // perfect and disjoint extremes
        prop_assert_eq!(dice_score(&p, &p).unwrap(), 1.0);
    }

    #[test]
    fn loss_bounds(
        probs in proptest::collection::vec(0.001f64..0.999, 16),
        truth in proptest::collection::vec(any::<bool>(), 16),
    ) {
        let p = Array4::from_shape_vec((1, 4, 4, 1), probs).unwrap();
        let g = Array4::from_shape_vec(
            (1, 4, 4, 1),
            truth.iter().map(|&b| f64::from(b)).collect(),
        )
        .unwrap();
        let dl = dice_loss(&p, &g, 1.0).unwrap();
        prop_assert!((0.0..=1.0).contains(&dl));
        prop_assert!(binary_cross_entropy(&p, &g).unwrap() >= 0.0);
    }

    #[test]
    fn augmentation_keeps_masks_binary_and_images_in_range(
        seed in any::<u64>(),
        rot in 0.0f64..45.0,
        zoom_lo in 0.7f64..1.0,
        zoom_hi in 1.0f64..1.4,
        bright in 0.0f64..0.3,
    ) {
        let config = AugmentConfig {
            rotation_degrees: (-rot, rot),
            shear_degrees: (-15.0, 15.0),
            zoom_factor: (zoom_lo, zoom_hi),
            brightness_delta: (-bright, bright),
            horizontal_flip: 0.5,
            vertical_flip: 0.5,
            seed: 0,
        };
        let image = Array4::from_shape_fn((1, 12, 12, 3), |(_, y, x, c)| {
            ((y * 31 + x * 17 + c * 7) % 97) as f64 / 96.0
        });
        let mask = Array4::from_shape_fn((1, 12, 12, 1), |(_, y, x, _)| {
            f64::from((3..9).contains(&y) && (3..9).contains(&x))
        });
        let (ai, am) = augment_pair(&image, &mask, &config, seed, (0.0, 1.0));
        prop_assert!(am.iter().all(|&v| v == 0.0 || v == 1.0));
        prop_assert!(ai.iter().all(|&v| (0.0..=1.0).contains(&v)));
        // pure function of (config, seed)
        let (bi, bm) = augment_pair(&image, &mask, &config, seed, (0.0, 1.0));
        prop_assert_eq!(ai, bi);
        prop_assert_eq!(am, bm);
    }

    #[test]
    fn per_sample_seeds_are_deterministic(
        global in any::<u64>(),
        epoch in 0usize..10_000,
        idx in 0usize..10_000,
    ) {
        prop_assert_eq!(
            sample_seed(global, epoch, idx),
            sample_seed(global, epoch, idx)
        );
    }

    #[test]
    fn softmax_rows_are_distributions_and_shift_invariant(
        logits in proptest::collection::vec(-30.0f64..30.0, 7),
        shift in -50.0f64..50.0,
    ) {
        let x = Array4::from_shape_vec((1, 1, 1, 7), logits.clone()).unwrap();
        let p = softmax(&x);
        let sum: f64 = p.iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-9);
        prop_assert!(p.iter().all(|&v| v > 0.0));
        let shifted = x.mapv(|v| v + shift);
        prop_assert_eq!(argmax_class(&p, 0), argmax_class(&softmax(&shifted), 0));
    }

    #[test]
    fn thresholded_maps_are_binary(
        vals in proptest::collection::vec(0.0f64..1.0, 16),
        threshold in 0.0f64..1.0,
    ) {
        let prob = Array4::from_shape_vec((1, 4, 4, 1), vals).unwrap();
        let mask = threshold_mask(&prob, threshold);
        prop_assert!(mask.iter().all(|&v| v == 0.0 || v == 1.0));
    }

    #[test]
    fn roi_is_zero_outside_and_identity_inside_the_mask(
        bits in proptest::collection::vec(any::<bool>(), 36),
    ) {
        let image = Array4::from_shape_fn((1, 6, 6, 3), |(_, y, x, c)| {
            (y * 13 + x * 5 + c) as f64 * 0.01 + 0.1
        });
        let mask = binary_mask(&bits, 6, 6);
        let roi = extract_roi(&image, &mask).unwrap();
        for y in 0..6 {
            for x in 0..6 {
                for c in 0..3 {
                    let expect = image[(0, y, x, c)] * mask[(0, y, x, 0)];
                    prop_assert_eq!(roi[(0, y, x, c)], expect);
                }
            }
        }
        // masking is idempotent
        prop_assert_eq!(extract_roi(&roi, &mask).unwrap(), roi);
    }

    #[test]
    fn split_counts_are_exact_and_deterministic(
        n in 2usize..300,
        fraction in 0.05f64..0.95,
        seed in any::<u64>(),
    ) {
        let samples: Vec<SegSample> = (0..n)
            .map(|i| SegSample {
                image_path: format!("images/s{i:05}.png").into(),
                mask_path: format!("masks/s{i:05}.png").into(),
                split: SplitTag::Train,
            })
            .collect();
        let manifest = DatasetManifest {
            samples: ManifestSamples::Seg(samples),
            class_counts: Default::default(),
            seed: 0,
            split_fraction: None,
        };
        let a = split(&manifest, fraction, seed).unwrap();
        let train = a
            .seg_samples()
            .unwrap()
            .iter()
            .filter(|s| s.split == SplitTag::Train)
            .count();
        prop_assert_eq!(train, (n as f64 * fraction).floor() as usize);
        prop_assert_eq!(a, split(&manifest, fraction, seed).unwrap());
    }

    #[test]
    fn strictly_improving_history_never_stops(
        start in 1.0f64..10.0,
        step in 0.01f64..0.5,
        len in 1usize..40,
        patience in 1usize..10,
    ) {
        let history: Vec<f64> = (0..len).map(|i| start - step * i as f64).collect();
        prop_assert!(!early_stop_check(&history, patience, step / 2.0));
    }

    #[test]
    fn normalization_byte_round_trip(byte in any::<u8>()) {
        for mode in [NormalizationMode::UnitInterval, NormalizationMode::SymmetricUnit] {
            prop_assert_eq!(mode.to_byte(mode.apply(byte)), byte);
        }
    }

    #[test]
    fn class_index_round_trip(i in 0usize..7) {
        let class = LesionClass::from_index(i).unwrap();
        prop_assert_eq!(class.index(), i);
        prop_assert_eq!(LesionClass::parse(class.as_str()).unwrap(), class);
    }
}
