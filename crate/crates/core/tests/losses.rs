use adahead_core::losses::{
    clamp_events, class_weights, cls_loss, coord_loss, cross_entropy_term, focal_term, noobj_loss,
    softmax, total_loss, LossConfig,
};
use proptest::prelude::*;

fn ce_config(n: usize) -> LossConfig {
    LossConfig {
        use_focal_cls: false,
        ..LossConfig::new(n)
    }
}

#[test]
fn class_weight_examples() {
    assert_eq!(class_weights(&[1.0, 1.0]).unwrap(), vec![2.0, 2.0]);
    let a = class_weights(&[3.0, 1.0]).unwrap();
    assert!((a[0] - 4.0 / 3.0).abs() < 1e-15 && a[1] == 4.0);
    assert!(class_weights(&[1.0, 0.0]).is_err());
    assert!(class_weights(&[]).is_err());
}

#[test]
fn focal_examples() {
    assert_eq!(focal_term(1.0, 0.7, 2.0), 0.0);
    assert!((focal_term(0.5, 1.0, 0.0) - std::f64::consts::LN_2).abs() < 1e-15);
    // 0.25 · 0.1² · (−ln 0.9) evaluated term by term
    let expect = 0.25 * 0.01 * 0.105_360_515_657_826_3;
    assert!((focal_term(0.9, 0.25, 2.0) - expect).abs() < 1e-15);
    assert!((focal_term(0.9, 0.25, 2.0) - 2.634e-4).abs() < 1e-7);
}

#[test]
fn clamped_probabilities_are_counted() {
    let before = clamp_events();
    let v = focal_term(0.0, 1.0, 0.0);
    assert!((v - (-(1e-12f64).ln())).abs() < 1e-9);
    assert!(clamp_events() > before);
}

#[test]
fn cls_loss_examples() {
    let cfg = ce_config(3);
    assert_eq!(cls_loss(&[vec![0.0, 1.0, 0.0]], &[1], &cfg).unwrap(), 0.0);
    let uniform = vec![1.0 / 3.0; 3];
    assert!((cls_loss(&[uniform], &[2], &cfg).unwrap() - 3f64.ln()).abs() < 1e-15);
    let two = [vec![0.5, 0.5, 0.0], vec![0.25, 0.5, 0.25]];
    let v = cls_loss(&two, &[0, 2], &cfg).unwrap();
    assert!((v - (2f64.ln() + 4f64.ln()) / 2.0).abs() < 1e-15);
    assert!((v - 1.0397).abs() < 1e-4);
    assert!(cls_loss(&[vec![0.5, 0.5]], &[2], &ce_config(2)).is_err());
}

#[test]
fn cls_loss_focal_uses_category_alpha() {
    let cfg = LossConfig {
        alpha: vec![1.0, 3.0],
        gamma: 2.0,
        ..LossConfig::new(2)
    };
    let v = cls_loss(&[vec![0.4, 0.6]], &[1], &cfg).unwrap();
    assert!((v - 3.0 * 0.4f64.powi(2) * -(0.6f64.ln())).abs() < 1e-15);
}

#[test]
fn coord_examples() {
    let t = [0.1, -0.2, 0.3, 0.4];
    assert_eq!(coord_loss(&[t], &[t]), (0.0, true));
    assert_eq!(
        coord_loss(&[[1.0, 0.0, 0.0, 0.0]], &[[0.0; 4]]),
        (1.0, true)
    );
    assert_eq!(
        coord_loss(&[[0.5, -0.5, 1.0, 2.0]], &[[0.0; 4]]),
        (5.5, true)
    );
    assert_eq!(coord_loss(&[], &[]), (0.0, false));
}

#[test]
fn noobj_examples() {
    assert_eq!(noobj_loss(&[0.0, 0.0], &[true, true]), 0.0);
    assert_eq!(noobj_loss(&[0.5], &[true]), 0.25);
    let v = noobj_loss(&[0.1, 0.3, 0.9], &[true, true, false]);
    assert!((v - 0.05).abs() < 1e-15);
}

#[test]
fn total_examples() {
    let cfg = LossConfig::new(3);
    assert_eq!((cfg.lambda_coord, cfg.lambda_noobj), (5.0, 0.5));
    assert_eq!(total_loss(1.0, 2.0, 4.0, 0.0, &cfg).unwrap().total, 13.0);
    assert_eq!(total_loss(0.0, 0.0, 0.0, 0.0, &cfg).unwrap().total, 0.0);
    let off = LossConfig {
        lambda_noobj: 0.0,
        ..LossConfig::new(3)
    };
    let a = total_loss(1.0, 2.0, 4.0, 0.0, &off).unwrap().total;
    let b = total_loss(1.0, 2.0, 400.0, 0.0, &off).unwrap().total;
    assert_eq!(a, b);
    let err = total_loss(1.0, f64::NAN, 0.0, 0.0, &cfg).unwrap_err();
    assert!(err.to_string().contains("coord"), "{err}");
}

#[test]
fn loss_config_validation() {
    assert!(LossConfig::new(3).validate().is_ok());
    let bad = LossConfig {
        lambda_coord: 0.0,
        ..LossConfig::new(3)
    };
    assert!(bad.validate().is_err());
    let bad = LossConfig {
        gamma: -1.0,
        ..LossConfig::new(3)
    };
    assert!(bad.validate().is_err());
}

#[test]
fn softmax_rows_sum_to_one() {
    let p = softmax(&[1000.0, 999.0, -5.0]);
    assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    assert!(p[0] > p[1] && p[1] > p[2]);
}

proptest! {
    #[test]
    fn focal_reduces_to_cross_entropy(p in 1e-9f64..=1.0) {
        prop_assert!((focal_term(p, 1.0, 0.0) - cross_entropy_term(p)).abs() <= 1e-12);
    }

    #[test]
    fn focal_is_nonnegative_and_decreasing(p in 0.001f64..1.0, q in 0.001f64..1.0, g in 0.0f64..5.0, a in 0.1f64..5.0) {
        let (lo, hi) = if p <= q { (p, q) } else { (q, p) };
        prop_assert!(focal_term(lo, a, g) >= 0.0);
        prop_assert!(focal_term(lo, a, g) >= focal_term(hi, a, g));
    }

    #[test]
    fn focusing_shrinks_easy_examples(p in 0.5f64..=1.0, a in 0.1f64..5.0) {
        prop_assert!(focal_term(p, a, 2.0) <= focal_term(p, a, 0.0));
    }

    #[test]
    fn weighted_alpha_is_constant(w in proptest::collection::vec(0.01f64..100.0, 1..8)) {
        let a = class_weights(&w).unwrap();
        let sum: f64 = w.iter().sum();
        for (wi, ai) in w.iter().zip(&a) {
            prop_assert!((wi * ai - sum).abs() <= 1e-12 * sum);
        }
    }
}
