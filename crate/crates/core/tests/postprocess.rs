mod common;

use std::path::Path;

use adahead_core::anchors::BoxN;
use adahead_core::postprocess::{
    filter_confidence, format_detections, nms, parse_detections, Detection,
};
use proptest::prelude::*;
use rand::SeedableRng;

use common::{iou_oracle, nms_oracle, random_detections};

fn det(category: usize, score: f64, cx: f64) -> Detection {
    Detection::new(category, score, BoxN::new(cx, 0.5, 0.2, 0.2))
}

#[test]
fn confidence_filter_examples() {
    let dets = [det(0, 0.2, 0.1), det(0, 0.5, 0.3), det(0, 0.9, 0.5)];
    let kept = filter_confidence(&dets, 0.4);
    assert_eq!(kept, vec![dets[1], dets[2]]);
    assert!(filter_confidence(&dets, 1.0).is_empty());
    assert_eq!(filter_confidence(&dets, 0.0).len(), 3);
    assert_eq!(filter_confidence(&dets, 0.5).len(), 2);
}

#[test]
fn nms_examples() {
    assert_eq!(nms(&[det(1, 0.7, 0.5)], 0.45), vec![0]);
    assert!(nms(&[], 0.45).is_empty());
    let twins = [det(0, 0.8, 0.5), det(0, 0.9, 0.5)];
    assert_eq!(nms(&twins, 0.45), vec![1]);
    let cross = [det(0, 0.8, 0.5), det(1, 0.9, 0.5)];
    assert_eq!(nms(&cross, 0.45), vec![1, 0]);
    // IoU of boxes shifted by 0.1 is 1/3
    let near = [det(0, 0.9, 0.5), det(0, 0.8, 0.6)];
    assert_eq!(nms(&near, 0.3), vec![0]);
    assert_eq!(nms(&near, 0.4), vec![0, 1]);
}

#[test]
fn nms_matches_brute_force_on_seeded_instances() {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
    for _ in 0..300 {
        let dets = random_detections(&mut rng, 40, 3);
        for thr in [0.2, 0.45, 0.7] {
            assert_eq!(nms(&dets, thr), nms_oracle(&dets, thr));
        }
    }
}

#[test]
fn detection_file_roundtrip() {
    let dets = vec![
        Detection::new(0, 0.912345678, BoxN::new(0.5, 0.25, 0.125, 0.333333333)),
        Detection::new(2, 0.25, BoxN::new(0.0001, 0.999999, 1.0, 0.05)),
    ];
    let text = format_detections(&dets);
    assert_eq!(
        text.lines().next().unwrap(),
        "0 0.912346 0.5 0.25 0.125 0.333333"
    );
    let back = parse_detections(Path::new("d.txt"), &text).unwrap();
    assert_eq!(back.len(), 2);
    for (a, b) in dets.iter().zip(&back) {
        assert_eq!(a.category, b.category);
        assert!((a.score - b.score).abs() <= 1e-6 * a.score.abs().max(1e-6));
        assert!((a.bbox.cx - b.bbox.cx).abs() <= 1e-6);
        assert!((a.bbox.h - b.bbox.h).abs() <= 1e-6);
    }
    assert!(parse_detections(Path::new("d.txt"), "0 0.5 0.5").is_err());
    assert!(parse_detections(Path::new("d.txt"), "x 0.5 0.5 0.5 0.1 0.1").is_err());
}

proptest! {
    #[test]
    fn kept_boxes_do_not_overlap_beyond_threshold(seed in 0u64..1000, thr in 0.1f64..0.9) {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let dets = random_detections(&mut rng, 30, 3);
        let kept = nms(&dets, thr);
        for (a, &i) in kept.iter().enumerate() {
            for &j in &kept[a + 1..] {
                if dets[i].category == dets[j].category {
                    prop_assert!(iou_oracle(&dets[i].bbox, &dets[j].bbox) <= thr);
                }
            }
        }
    }

    #[test]
    fn nms_is_idempotent(seed in 0u64..1000, thr in 0.1f64..0.9) {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let dets = random_detections(&mut rng, 30, 3);
        let once: Vec<Detection> = nms(&dets, thr).into_iter().map(|i| dets[i]).collect();
        let twice: Vec<Detection> = nms(&once, thr).into_iter().map(|i| once[i]).collect();
        prop_assert_eq!(once, twice);
    }

    #[test]
    fn nms_ignores_input_order(seed in 0u64..1000, thr in 0.1f64..0.9) {
        use rand::seq::SliceRandom;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let dets = random_detections(&mut rng, 30, 3);
        let mut shuffled = dets.clone();
        shuffled.shuffle(&mut rng);
        let a: Vec<Detection> = nms(&dets, thr).into_iter().map(|i| dets[i]).collect();
        let b: Vec<Detection> = nms(&shuffled, thr).into_iter().map(|i| shuffled[i]).collect();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn nms_never_suppresses_across_categories(seed in 0u64..500) {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let dets = random_detections(&mut rng, 20, 3);
        let kept = nms(&dets, 0.5);
        for c in 0..3 {
            let only: Vec<Detection> = dets.iter().filter(|d| d.category == c).copied().collect();
            let expect: Vec<Detection> = nms(&only, 0.5).into_iter().map(|i| only[i]).collect();
            let got: Vec<Detection> = kept.iter().map(|&i| dets[i]).filter(|d| d.category == c).collect();
            prop_assert_eq!(got, expect);
        }
    }
}
