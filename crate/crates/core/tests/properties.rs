use pneunet_core::image::{
    augment, hflip, resize_bilinear, resize_grid, to_tensor, AugmentationConfig, ImageBuffer,
};
use pneunet_core::loss::{bce_loss, focal_loss, FocalLossParams};
use pneunet_core::metrics::{auc, confusion, roc_curve};
use pneunet_core::model::is_positive;
use pneunet_core::rng::{purpose, stream};
use pneunet_core::train::batch_indices;
use pneunet_core::{Tape, Tensor};
use proptest::prelude::*;

/// Pairwise Mann–Whitney statistic, ties counted as one half.
fn mann_whitney(scores: &[f64], labels: &[u8]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] == 1 && labels[j] == 0 {
                pairs += 1.0;
                if si > sj {
                    wins += 1.0;
                } else if si == sj {
                    wins += 0.5;
                }
            }
        }
    }
    wins / pairs
}

/// Scores drawn from a small grid so ties are common, with both classes present.
fn scored_labels() -> impl Strategy<Value = (Vec<f64>, Vec<u8>)> {
    (2usize..120)
        .prop_flat_map(|n| {
            (
                prop::collection::vec((0u32..20).prop_map(|k| k as f64 / 19.0), n),
                prop::collection::vec(0u8..2, n),
            )
        })
        .prop_map(|(s, mut y)| {
            y[0] = 0;
            y[1] = 1;
            (s, y)
        })
}

fn gray_image() -> impl Strategy<Value = ImageBuffer> {
    (1usize..12, 1usize..12).prop_flat_map(|(w, h)| {
        prop::collection::vec(any::<u8>(), w * h)
            .prop_map(move |px| ImageBuffer::gray(w, h, px).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn auc_equals_pairwise_statistic((scores, labels) in scored_labels()) {
        let a = auc(&roc_curve(&scores, &labels).unwrap());
        prop_assert!((a - mann_whitney(&scores, &labels)).abs() < 1e-9);
    }

    #[test]
    fn auc_ignores_monotone_transforms((scores, labels) in scored_labels()) {
        let moved: Vec<f64> = scores.iter().map(|s| 3.0 * s * s * s + 0.25).collect();
        let a = auc(&roc_curve(&scores, &labels).unwrap());
        let b = auc(&roc_curve(&moved, &labels).unwrap());
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn inverting_labels_mirrors_auc((scores, labels) in scored_labels()) {
        let flipped: Vec<u8> = labels.iter().map(|&l| 1 - l).collect();
        let a = auc(&roc_curve(&scores, &labels).unwrap());
        let b = auc(&roc_curve(&scores, &flipped).unwrap());
        prop_assert!((a + b - 1.0).abs() < 1e-12);
    }

    #[test]
    fn confusion_matches_direct_count((scores, labels) in scored_labels(), t in 0.0f64..1.0) {
        let cm = confusion(&scores, &labels, t).unwrap();
        let count = |pred: bool, actual: u8| {
            scores.iter().zip(&labels).filter(|(&s, &l)| (s >= t) == pred && l == actual).count() as u64
        };
        prop_assert_eq!(cm.tp, count(true, 1));
        prop_assert_eq!(cm.fp, count(true, 0));
        prop_assert_eq!(cm.tn, count(false, 0));
        prop_assert_eq!(cm.fn_, count(false, 1));
    }

    #[test]
    fn raising_the_threshold_never_adds_positives((scores, labels) in scored_labels(), a in 0.0f64..1.0, b in 0.0f64..1.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let low = confusion(&scores, &labels, lo).unwrap();
        let high = confusion(&scores, &labels, hi).unwrap();
        prop_assert!(high.tp + high.fp <= low.tp + low.fp);
        for &s in &scores {
            if is_positive(s as f32, hi as f32) {
                prop_assert!(is_positive(s as f32, lo as f32));
            }
        }
    }

    #[test]
    fn hflip_is_an_involution(img in gray_image()) {
        prop_assert_eq!(hflip(&hflip(&img)), img);
    }

    #[test]
    fn to_tensor_stays_in_unit_range(img in gray_image(), channels in prop::sample::select(vec![1usize, 3])) {
        let t = to_tensor(&img, channels).unwrap();
        prop_assert_eq!(t.shape(), &[channels, img.height(), img.width()][..]);
        prop_assert!(t.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn augmentation_keeps_dimensions(img in gray_image(), seed in any::<u64>(), deg in 0.0f64..45.0) {
        let cfg = AugmentationConfig { hflip_prob: 0.5, rotation_max_degrees: deg };
        let out = augment(&img, &cfg, &mut stream(seed, purpose::AUGMENT, 0));
        prop_assert_eq!((out.width(), out.height(), out.channels()), (img.width(), img.height(), 1));
    }

    #[test]
    fn batches_cover_the_split_once(n in 1usize..300, bs in 1usize..40, seed in any::<u64>(), epoch in 0usize..5) {
        let plan = batch_indices(n, bs, Some((seed, epoch)));
        prop_assert!(plan.iter().all(|b| !b.is_empty() && b.len() <= bs));
        let mut all: Vec<usize> = plan.into_iter().flatten().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn focal_without_modulation_is_cross_entropy(p in 1e-6f64..(1.0 - 1e-6), y in 0u8..2) {
        let plain = FocalLossParams { alpha: None, gamma: 0.0 };
        prop_assert!((focal_loss(p, y, &plain).unwrap() - bce_loss(p, y).unwrap()).abs() <= 1e-12);
    }

    #[test]
    fn focal_is_nonnegative_and_falls_as_confidence_rises(a in 0.001f64..0.999, b in 0.001f64..0.999, gamma in 0.0f32..5.0, alpha in 0.01f32..0.99) {
        let params = FocalLossParams { alpha: Some(alpha), gamma };
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        // p_t = p for y = 1 and 1 - p for y = 0.
        let pos = (focal_loss(lo, 1, &params).unwrap(), focal_loss(hi, 1, &params).unwrap());
        let neg = (focal_loss(hi, 0, &params).unwrap(), focal_loss(lo, 0, &params).unwrap());
        prop_assert!(pos.0 >= 0.0 && pos.1 >= 0.0 && neg.0 >= 0.0 && neg.1 >= 0.0);
        prop_assert!(pos.1 <= pos.0);
        prop_assert!(neg.1 <= neg.0);
    }

    #[test]
    fn same_padding_preserves_spatial_size(h in 1usize..10, w in 1usize..10, k in prop::sample::select(vec![1usize, 3, 5])) {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(&[1, 2, h, w]));
        let kern = tape.constant(Tensor::zeros(&[3, 2, k, k]));
        let pad = (k - 1) / 2;
        if h + 2 * pad >= k && w + 2 * pad >= k {
            let y = tape.conv2d(x, kern, None, 1, pad).unwrap();
            prop_assert_eq!(tape.shape(y), &[1, 3, h, w][..]);
        }
    }
}

#[test]
fn upsampling_two_by_two_follows_half_pixel_centres() {
    // Independent interpolation script, half-pixel centres with edge clamping.
    let expected = [
        0.0, 0.5, 1.5, 2.0, //
        0.5, 1.0, 2.0, 2.5, //
        1.5, 2.0, 3.0, 3.5, //
        2.0, 2.5, 3.5, 4.0,
    ];
    assert_eq!(resize_grid(&[0.0, 2.0, 2.0, 4.0], 2, 2, 4, 4), expected);
    let img = ImageBuffer::gray(2, 2, vec![0, 100, 100, 200]).unwrap();
    let out = resize_bilinear(&img, 4, 4).unwrap();
    let scaled: Vec<u8> = expected.iter().map(|v| (v * 50.0) as u8).collect();
    assert_eq!(out.pixels(), &scaled[..]);
}
