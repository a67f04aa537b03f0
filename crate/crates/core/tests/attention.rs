use adahead_core::attention::{
    dvf_apply, jgr_forward, joint_score, multiscale_conv, scale_attention, scale_gates,
    spatial_attention, task_attention_forced, BranchOrder, DvfParams, JgrParams, MultiScaleParams,
    SamplingField, SamplingParams, ScaleParams, ThetaParams,
};
use adahead_core::tensor::with_precision;
use adahead_core::{Precision, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn f64_mode<R>(f: impl FnOnce() -> R) -> R {
    with_precision(Precision::F64, f)
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

#[test]
fn scale_gate_examples() {
    f64_mode(|| {
        let id = ScaleParams::identity(1);
        let ones = Tensor::full(&[1, 2, 2, 3], 1.0);
        assert_eq!(scale_attention(&ones, &id).unwrap(), ones);
        let neg = Tensor::full(&[1, 2, 2, 3], -1.0);
        assert!(scale_attention(&neg, &id)
            .unwrap()
            .data()
            .iter()
            .all(|v| *v == 0.0));

        // level 0 has mean 0, level 1 has mean 0.5
        let f = Tensor::from_fn(&[2, 2, 2, 1], |i| {
            if i < 4 {
                [1.0, -1.0, 2.0, -2.0][i]
            } else {
                [0.0, 1.0, 0.25, 0.75][i - 4]
            }
        });
        let id2 = ScaleParams::identity(2);
        assert_eq!(scale_gates(&f, &id2).unwrap(), vec![0.5, 0.75]);
        let out = scale_attention(&f, &id2).unwrap();
        for i in 0..8 {
            let g = if i < 4 { 0.5 } else { 0.75 };
            assert_eq!(out.data()[i], f.data()[i] * g);
        }
    });
}

#[test]
fn spatial_examples() {
    f64_mode(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let one = random(&mut rng, &[1, 3, 4, 2]);
        assert_eq!(
            spatial_attention(&one, &SamplingField::degenerate(1, 3, 4, 1)).unwrap(),
            one
        );

        let two = random(&mut rng, &[2, 3, 4, 2]);
        let out = spatial_attention(&two, &SamplingField::degenerate(2, 3, 4, 1)).unwrap();
        let half = 12 * 2;
        for i in 0..half {
            let mean = (two.data()[i] + two.data()[half + i]) * 0.5;
            assert!((out.data()[i] - mean).abs() < 1e-15);
            assert_eq!(out.data()[i], out.data()[half + i]);
        }

        let row = Tensor::new(vec![1, 1, 3, 1], vec![1.0, 2.0, 3.0]).unwrap();
        let field = SamplingField {
            offsets: Tensor::from_fn(&[1, 3, 2, 2], |i| if i % 4 == 3 { 1.0 } else { 0.0 }),
            masks: Tensor::full(&[1, 3, 2], 1.0),
            weights: Tensor::full(&[1, 1, 3, 2], 0.5),
        };
        let out = spatial_attention(&row, &field).unwrap();
        assert_eq!(out.data(), &[1.5, 2.5, 1.5]);
    });
}

#[test]
fn spatial_rejects_empty_sampling_set() {
    let f = Tensor::zeros(&[1, 2, 2, 1]);
    assert!(spatial_attention(&f, &SamplingField::degenerate(1, 2, 2, 0)).is_err());
    assert!(SamplingParams::init(4, 0).is_err());
}

#[test]
fn task_attention_forced_cases() {
    let f = Tensor::new(vec![1, 1, 2, 1], vec![-2.0, 3.0]).unwrap();
    let relu = Tensor::new(vec![1, 4], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
    assert_eq!(
        task_attention_forced(&f, &relu).unwrap().data(),
        &[0.0, 3.0]
    );
    let abs = Tensor::new(vec![1, 4], vec![1.0, -1.0, 0.0, 0.0]).unwrap();
    assert_eq!(task_attention_forced(&f, &abs).unwrap().data(), &[2.0, 3.0]);
    let id = Tensor::new(vec![1, 4], vec![1.0, 1.0, 0.0, 0.0]).unwrap();
    assert_eq!(task_attention_forced(&f, &id).unwrap(), f);
}

/// Gate 1, degenerate single-point sampling and θ saturated at (1, 1, 0, 0).
fn identity_dvf(channels: usize) -> DvfParams {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut theta = ThetaParams::init(&mut rng, channels, 4).unwrap();
    theta.fc2_weight = Tensor::zeros(theta.fc2_weight.shape());
    theta.fc2_bias = Tensor::from_fn(&[4 * channels], |i| if i % 4 < 2 { 80.0 } else { 0.0 });
    DvfParams {
        scale: ScaleParams {
            weight: Tensor::zeros(&[1, 1]),
            bias: Tensor::full(&[1], 1.0),
        },
        sampling: SamplingParams::init(channels, 1).unwrap(),
        theta,
    }
}

#[test]
fn dvf_identity_composition() {
    f64_mode(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = random(&mut rng, &[1, 3, 3, 4]);
        assert_eq!(dvf_apply(&f, &identity_dvf(4)).unwrap(), f);
    });
}

#[test]
fn closed_scale_gate_gives_constant_field() {
    f64_mode(|| {
        let mut p = identity_dvf(2);
        p.scale = ScaleParams::identity(1);
        // pre-activation (α1, α2, β1, β2) per channel
        p.theta.fc2_bias =
            Tensor::new(vec![8], vec![1.0, 1.0, 1.0, -0.5, 1.0, 1.0, -3.0, 0.2]).unwrap();
        let f = Tensor::full(&[1, 2, 3, 2], -1.5);
        let out = dvf_apply(&f, &p).unwrap();
        let expect = [0.5f64.tanh(), 0.1f64.tanh()];
        for (i, v) in out.data().iter().enumerate() {
            assert!((v - expect[i % 2]).abs() < 1e-15, "{i}: {v}");
        }
    });
}

#[test]
fn multiscale_examples() {
    f64_mode(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let level = random(&mut rng, &[4, 5, 3]);
        let zero = MultiScaleParams::zeros(3);
        assert!(multiscale_conv(&level, &zero)
            .unwrap()
            .data()
            .iter()
            .all(|v| *v == 0.0));

        let mut id = MultiScaleParams::zeros(3);
        id.kernels[0] = Tensor::from_fn(&[1, 1, 3, 3], |i| if i / 3 == i % 3 { 1.0 } else { 0.0 });
        assert_eq!(multiscale_conv(&level, &id).unwrap(), level);

        let mut box3 = MultiScaleParams::zeros(1);
        box3.kernels[1] = Tensor::full(&[3, 3, 1, 1], 1.0);
        let v = 0.7;
        let out = multiscale_conv(&Tensor::full(&[4, 4, 1], v), &box3).unwrap();
        assert_eq!(out.shape(), &[4, 4, 1]);
        let at = |y: usize, x: usize| out.data()[y * 4 + x];
        assert!((at(1, 2) - 9.0 * v).abs() < 1e-12);
        assert!((at(0, 0) - 4.0 * v).abs() < 1e-12);
        assert!((at(3, 3) - 4.0 * v).abs() < 1e-12);
        assert!((at(0, 2) - 6.0 * v).abs() < 1e-12);
    });
}

#[test]
fn jgr_zero_and_fixed_logits() {
    let levels = vec![Tensor::zeros(&[1, 3, 3, 4]), Tensor::zeros(&[1, 2, 2, 4])];
    let zero = JgrParams::zeros(4, 2, 3, 2);
    let out = jgr_forward(&levels, &zero, BranchOrder::ClassFirst).unwrap();
    assert_eq!(out.n_anchors(), (9 + 4) * 2);
    assert_eq!(out.class_logits.len(), out.n_anchors() * 3);
    assert!(out.joint_score.iter().all(|s| *s == 0.25));
    assert!(out.box_params.iter().all(|b| *b == [0.0; 4]));

    let mut fixed = JgrParams::zeros(4, 2, 3, 2);
    fixed.cls_out.1 = Tensor::full(&[8], 3f64.ln());
    let out = jgr_forward(&levels, &fixed, BranchOrder::BoxFirst).unwrap();
    for s in &out.joint_score {
        assert!((s - 0.5625).abs() < 1e-7, "{s}");
    }
    assert!((joint_score(3f64.ln(), 3f64.ln()) - 0.5625).abs() < 1e-15);
    assert!(joint_score(50.0, 50.0) > 1.0 - 1e-12);
}

#[test]
fn jgr_branch_order_is_irrelevant() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let params = JgrParams::init(&mut rng, 6, 4, 3, 3);
    let levels = vec![
        random(&mut rng, &[1, 4, 4, 6]),
        random(&mut rng, &[1, 2, 2, 6]),
    ];
    let a = jgr_forward(&levels, &params, BranchOrder::ClassFirst).unwrap();
    let b = jgr_forward(&levels, &params, BranchOrder::BoxFirst).unwrap();
    let c = jgr_forward(&levels, &params, BranchOrder::Concurrent).unwrap();
    assert_eq!(a, b);
    assert_eq!(a, c);
}

#[test]
fn jgr_rejects_mismatched_levels() {
    let params = JgrParams::zeros(4, 2, 3, 2);
    assert!(jgr_forward(
        &[Tensor::zeros(&[1, 2, 2, 5])],
        &params,
        BranchOrder::ClassFirst
    )
    .is_err());
}

proptest! {
    #[test]
    fn joint_score_is_bounded_and_monotone(c in -30.0f64..30.0, o in -30.0f64..30.0, d in 0.0f64..5.0) {
        let s = joint_score(c, o);
        prop_assert!((0.0..=1.0).contains(&s));
        prop_assert!(joint_score(c + d, o) >= s);
        prop_assert!(joint_score(c, o + d) >= s);
    }

    #[test]
    fn scale_ratio_is_constant_per_level(seed in 0u64..200) {
        f64_mode(|| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let f = random(&mut rng, &[3, 2, 3, 2]);
            let p = ScaleParams { weight: random(&mut rng, &[3, 3]), bias: random(&mut rng, &[3]) };
            let out = scale_attention(&f, &p).unwrap();
            let gates = scale_gates(&f, &p).unwrap();
            for (i, (o, x)) in out.data().iter().zip(f.data()).enumerate() {
                prop_assert!((o - x * gates[i / 12]).abs() <= 1e-12);
            }
            Ok(())
        })?;
    }

    #[test]
    fn spatial_is_linear_in_features(seed in 0u64..200, a in -2.0f64..2.0) {
        f64_mode(|| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random(&mut rng, &[2, 3, 3, 2]);
            let y = random(&mut rng, &[2, 3, 3, 2]);
            let field = SamplingField {
                offsets: Tensor::from_fn(&[3, 3, 4, 2], |_| rng.gen_range(-1.5..1.5)),
                masks: Tensor::from_fn(&[3, 3, 4], |_| rng.gen_range(0.0..1.0)),
                weights: random(&mut rng, &[2, 3, 3, 4]),
            };
            let mix = Tensor::from_fn(&[2, 3, 3, 2], |i| a * x.data()[i] + y.data()[i]);
            let lhs = spatial_attention(&mix, &field).unwrap();
            let sx = spatial_attention(&x, &field).unwrap();
            let sy = spatial_attention(&y, &field).unwrap();
            for i in 0..lhs.len() {
                prop_assert!((lhs.data()[i] - (a * sx.data()[i] + sy.data()[i])).abs() <= 1e-12);
            }
            Ok(())
        })?;
    }

    #[test]
    fn task_attention_picks_one_branch(seed in 0u64..200) {
        f64_mode(|| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let f = random(&mut rng, &[2, 2, 2, 3]);
            let coeffs = random(&mut rng, &[3, 4]);
            let out = task_attention_forced(&f, &coeffs).unwrap();
            for (i, (o, x)) in out.data().iter().zip(f.data()).enumerate() {
                let c = &coeffs.data()[(i % 3) * 4..(i % 3) * 4 + 4];
                let (a, b) = (x * c[0] + c[2], x * c[1] + c[3]);
                prop_assert!(*o == a || *o == b);
                prop_assert!(*o >= a.min(b));
            }
            Ok(())
        })?;
    }
}
