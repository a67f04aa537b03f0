use adahead_core::attention::dvf_apply_t;
use adahead_core::attention::DvfParams;
use adahead_core::gradcheck::{check_graph, Options};
use adahead_core::ops::{affine, conv2d, hard_sigmoid, reduce_mean, shifted_sigmoid, Activation};
use adahead_core::tensor::{with_precision, Precision};
use adahead_core::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn f64_mode<R>(f: impl FnOnce() -> R) -> R {
    with_precision(Precision::F64, f)
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

#[test]
fn pointwise_identity_kernel_is_identity() {
    f64_mode(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&mut rng, &[2, 3, 4, 5]);
        let k = Tensor::from_fn(&[1, 1, 5, 5], |i| if i / 5 == i % 5 { 1.0 } else { 0.0 });
        let y = conv2d(&x, &k, Some(&Tensor::zeros(&[5])), 1, 0).unwrap();
        assert_eq!(y, x);
    });
}

#[test]
fn zero_input_gives_bias() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let k = random(&mut rng, &[3, 3, 2, 4]);
    let b = t(&[4], &[0.5, -1.0, 2.0, 0.25]);
    let y = conv2d(&Tensor::zeros(&[1, 6, 6, 2]), &k, Some(&b), 1, 1).unwrap();
    for px in y.data().chunks(4) {
        assert_eq!(px, b.data());
    }
}

#[test]
fn ones_kernel_sums_zero_padded_neighbourhood() {
    let x = Tensor::from_fn(&[1, 5, 5, 1], |i| i as f64);
    let y = conv2d(&x, &Tensor::full(&[3, 3, 1, 1], 1.0), None, 1, 1).unwrap();
    // corner (0,0): its valid neighbours are 0, 1, 5 and 6
    assert_eq!(y.data()[0], 12.0);
    // direct summation everywhere
    for r in 0..5i64 {
        for c in 0..5i64 {
            let mut s = 0.0;
            for dr in -1..=1 {
                for dc in -1..=1 {
                    let (rr, cc) = (r + dr, c + dc);
                    if (0..5).contains(&rr) && (0..5).contains(&cc) {
                        s += (rr * 5 + cc) as f64;
                    }
                }
            }
            assert_eq!(y.data()[(r * 5 + c) as usize], s);
        }
    }
}

#[test]
fn conv_output_size_follows_stride_arithmetic() {
    for (h, k, s, p) in [(7, 3, 2, 1), (8, 3, 2, 1), (9, 5, 1, 2), (10, 1, 3, 0)] {
        let y = conv2d(
            &Tensor::zeros(&[1, h, h, 1]),
            &Tensor::zeros(&[k, k, 1, 1]),
            None,
            s,
            p,
        )
        .unwrap();
        let expect = (h + 2 * p - k) / s + 1;
        assert_eq!(y.shape(), &[1, expect, expect, 1]);
    }
}

#[test]
fn conv_shape_mismatch_names_axes() {
    let err = conv2d(
        &Tensor::zeros(&[1, 4, 4, 3]),
        &Tensor::zeros(&[3, 3, 2, 1]),
        None,
        1,
        1,
    )
    .unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("Cin") || msg.contains("channel"), "{msg}");
}

#[test]
fn reduce_mean_examples() {
    assert_eq!(
        reduce_mean(&t(&[4], &[1.0, 2.0, 3.0, 4.0]), &[0], false)
            .unwrap()
            .data(),
        &[2.5]
    );
    let m = reduce_mean(&t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]), &[1], false).unwrap();
    assert_eq!(m.shape(), &[2]);
    assert_eq!(m.data(), &[2.0, 5.0]);
    let k = reduce_mean(&Tensor::full(&[2, 3, 4], 0.75), &[0, 2], true).unwrap();
    assert_eq!(k.shape(), &[1, 3, 1]);
    assert!(k.data().iter().all(|&v| v == 0.75));
}

#[test]
fn reduce_mean_rejects_bad_axes() {
    assert!(reduce_mean(&Tensor::zeros(&[2, 3]), &[2], false).is_err());
    assert!(reduce_mean(&Tensor::zeros(&[2, 0]), &[1], false).is_err());
}

#[test]
fn scalar_nonlinearity_examples() {
    assert_eq!(hard_sigmoid(0.0), 0.5);
    assert_eq!(hard_sigmoid(1.0), 1.0);
    assert_eq!(hard_sigmoid(-1.0), 0.0);
    assert_eq!(hard_sigmoid(0.5), 0.75);
    assert_eq!(shifted_sigmoid(0.0), 0.0);
    assert!((shifted_sigmoid(3f64.ln()) - 0.5).abs() <= 1e-15);
    assert!(shifted_sigmoid(50.0) <= 1.0 && shifted_sigmoid(50.0) > 0.999_999);
    // 2·logistic(x) − 1 written out
    for x in [-3.0f64, -0.4, 0.3, 2.0] {
        let direct = 2.0 / (1.0 + (-x).exp()) - 1.0;
        assert!((shifted_sigmoid(x) - direct).abs() < 1e-15);
    }
}

#[test]
fn affine_examples() {
    let x = t(&[2], &[1.0, 2.0]);
    let y = affine(
        &x,
        &t(&[2, 2], &[1.0, 0.0, 1.0, 1.0]),
        Some(&t(&[2], &[0.0, 1.0])),
    )
    .unwrap();
    assert_eq!(y.data(), &[3.0, 3.0]);
    let id = affine(&x, &t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]), None).unwrap();
    assert_eq!(id.data(), x.data());
    let b = affine(
        &x,
        &Tensor::zeros(&[2, 3]),
        Some(&t(&[3], &[4.0, 5.0, 6.0])),
    )
    .unwrap();
    assert_eq!(b.data(), &[4.0, 5.0, 6.0]);
    assert!(affine(&x, &Tensor::zeros(&[3, 2]), None).is_err());
}

#[test]
fn tensor_rejects_inconsistent_shape() {
    assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
}

#[test]
fn tnsr_roundtrip() {
    let x = t(&[2, 3], &[0.5, -1.0, 2.0, 3.25, 0.0, -7.5]);
    let mut buf = Vec::new();
    x.write_tnsr(&mut buf).unwrap();
    assert!(buf.starts_with(b"TNSR"));
    let back = Tensor::read_tnsr(&mut std::io::Cursor::new(buf)).unwrap();
    assert_eq!(back, x);
}

#[test]
fn ops_are_bit_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&mut rng, &[2, 9, 9, 4]);
    let k = random(&mut rng, &[3, 3, 4, 6]);
    let a = conv2d(&x, &k, None, 2, 1).unwrap();
    let b = conv2d(&x, &k, None, 2, 1).unwrap();
    assert_eq!(a.data(), b.data());
}

#[test]
fn gradcheck_linear_op_is_exact() {
    f64_mode(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let inputs = [
            random(&mut rng, &[3, 5]),
            random(&mut rng, &[5, 4]),
            random(&mut rng, &[4]),
        ];
        let r = check_graph("affine", &inputs, 1, &Options::default(), |tape, v| {
            tape.affine(v[0], v[1], Some(v[2]))
        })
        .unwrap();
        // the objective is bilinear, so central differences are exact up to rounding
        assert!(r.max_rel_err <= 1e-9, "{}", r.max_rel_err);
    });
}

#[test]
fn gradcheck_shifted_sigmoid_at_point() {
    f64_mode(|| {
        let r = check_graph(
            "shifted_sigmoid",
            &[t(&[1], &[0.3])],
            1,
            &Options::default(),
            |tape, v| tape.activation(v[0], Activation::ShiftedSigmoid),
        )
        .unwrap();
        assert!(r.max_rel_err <= 1e-6, "{}", r.max_rel_err);
    });
    // closed form 2σ(x)(1−σ(x)) against the analytic tape gradient
    f64_mode(|| {
        let mut tape = adahead_core::tape::Tape::new();
        let x = tape.leaf(t(&[1], &[0.3]));
        let y = tape.activation(x, Activation::ShiftedSigmoid).unwrap();
        let g = tape.backward(&[(y, vec![1.0])]).unwrap();
        let s = 1.0 / (1.0 + (-0.3f64).exp());
        assert!((g.get(x).unwrap()[0] - 2.0 * s * (1.0 - s)).abs() < 1e-15);
    });
}

#[test]
fn gradcheck_full_attention_stack() {
    f64_mode(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        // L=2, S=8 (2x4 map), C=4
        let f = random(&mut rng, &[2, 2, 4, 4]);
        let mut p = DvfParams::init(&mut rng, 2, 4, 9, 2).unwrap();
        p.sampling.weight =
            Tensor::from_fn(p.sampling.weight.shape(), |_| rng.gen_range(-0.2..0.2));
        let r = check_graph("dvf", &[f], 7, &Options::default(), |tape, v| {
            let vars = p.record(tape);
            dvf_apply_t(tape, v[0], vars)
        })
        .unwrap();
        assert!(r.max_rel_err <= 1e-4, "{}", r.max_rel_err);
    });
}

proptest! {
    #[test]
    fn conv_is_linear(seed in 0u64..1000, a in -2.0f64..2.0, b in -2.0f64..2.0) {
        f64_mode(|| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random(&mut rng, &[1, 5, 6, 2]);
            let y = random(&mut rng, &[1, 5, 6, 2]);
            let k = random(&mut rng, &[3, 3, 2, 3]);
            let mix = Tensor::from_fn(x.shape(), |i| a * x.data()[i] + b * y.data()[i]);
            let lhs = conv2d(&mix, &k, None, 1, 1).unwrap();
            let cx = conv2d(&x, &k, None, 1, 1).unwrap();
            let cy = conv2d(&y, &k, None, 1, 1).unwrap();
            for i in 0..lhs.len() {
                let rhs = a * cx.data()[i] + b * cy.data()[i];
                prop_assert!((lhs.data()[i] - rhs).abs() <= 1e-12);
            }
            Ok(())
        })?;
    }

    #[test]
    fn nonlinearities_are_bounded_and_monotone(x in -50.0f64..50.0, y in -50.0f64..50.0) {
        let (lo, hi) = if x <= y { (x, y) } else { (y, x) };
        prop_assert!((0.0..=1.0).contains(&hard_sigmoid(x)));
        prop_assert!(shifted_sigmoid(x) >= -1.0 && shifted_sigmoid(x) <= 1.0);
        prop_assert!(hard_sigmoid(lo) <= hard_sigmoid(hi));
        prop_assert!(shifted_sigmoid(lo) <= shifted_sigmoid(hi));
        prop_assert_eq!(shifted_sigmoid(-x), -shifted_sigmoid(x));
    }

    #[test]
    fn mean_of_concatenation_is_weighted_mean(a in proptest::collection::vec(-5.0f64..5.0, 1..20),
                                              b in proptest::collection::vec(-5.0f64..5.0, 1..20)) {
        f64_mode(|| {
            let ma = reduce_mean(&t(&[a.len()], &a), &[0], false).unwrap().data()[0];
            let mb = reduce_mean(&t(&[b.len()], &b), &[0], false).unwrap().data()[0];
            let both: Vec<f64> = a.iter().chain(&b).copied().collect();
            let m = reduce_mean(&t(&[both.len()], &both), &[0], false).unwrap().data()[0];
            let weighted = (ma * a.len() as f64 + mb * b.len() as f64) / both.len() as f64;
            prop_assert!((m - weighted).abs() <= 1e-12);
            Ok(())
        })?;
    }
}
