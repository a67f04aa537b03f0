use std::path::Path;

use adahead_core::anchors::{BoxN, Label};
use adahead_core::backbone::BackboneConfig;
use adahead_core::checkpoint::Checkpoint;
use adahead_core::model::{Model, ModelConfig};
use adahead_core::synth::scene::{write_dataset, SceneConfig};
use adahead_core::train::{clip_grad_norm, cosine_lr, focal_alpha, train, TrainConfig, LOG_HEADER};
use adahead_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny_model() -> ModelConfig {
    ModelConfig {
        input_h: 32,
        input_w: 32,
        backbone: BackboneConfig {
            stem: 4,
            widths: vec![8, 8, 8],
            strides: vec![4, 8],
            channels: 8,
        },
        anchor_scales: vec![2.0],
        head_hidden: 8,
        ..ModelConfig::default()
    }
}

fn tiny_scenes(train_count: usize, val_count: usize) -> SceneConfig {
    SceneConfig {
        height: 32,
        width: 32,
        objects: (1, 3),
        radius: vec![(4.0, 6.0), (3.0, 4.0), (2.0, 3.0)],
        train_count,
        val_count,
        ..SceneConfig::default()
    }
}

fn tiny_run(root: &Path, epochs: usize, lr: f64) -> TrainConfig {
    TrainConfig {
        epochs,
        lr,
        batch_size: 4,
        model: tiny_model(),
        data: root.join("data"),
        checkpoint: root.join("model.ckpt"),
        log: root.join("train_log.csv"),
        ..TrainConfig::default()
    }
}

#[test]
fn cosine_schedule_endpoints() {
    assert_eq!(cosine_lr(0.01, 0, 100), 0.01);
    assert!((cosine_lr(0.01, 99, 100) - 1e-4).abs() < 1e-18);
    assert!((cosine_lr(0.01, 50, 101) - (0.01 + 1e-4) / 2.0).abs() < 1e-15);
    assert_eq!(cosine_lr(0.01, 0, 1), 0.01);
}

#[test]
fn alpha_follows_smoothed_counts() {
    let labels = vec![
        vec![Label::new(0, BoxN::new(0.5, 0.5, 0.1, 0.1)); 3],
        vec![],
    ];
    let a = focal_alpha(&labels, 2).unwrap();
    // counts plus one: 4 and 1
    assert_eq!(a, vec![5.0 / 4.0, 5.0]);
    assert!(focal_alpha(&[vec![Label::new(2, BoxN::new(0.5, 0.5, 0.1, 0.1))]], 2).is_err());
}

#[test]
fn gradient_clipping() {
    let mut g = vec![vec![3.0], vec![4.0]];
    assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
    assert!((g[0][0] - 0.6).abs() < 1e-15 && (g[1][0] - 0.8).abs() < 1e-15);
    let mut g = vec![vec![3.0, 4.0]];
    clip_grad_norm(&mut g, 0.0);
    assert_eq!(g, vec![vec![3.0, 4.0]]);
}

#[test]
fn zero_learning_rate_leaves_parameters_untouched() {
    let dir = tempfile::tempdir().unwrap();
    write_dataset(&tiny_scenes(6, 2), &dir.path().join("data")).unwrap();
    let cfg = tiny_run(dir.path(), 1, 0.0);
    let out = train(&cfg, |_| {}).unwrap();
    let fresh = Model::init(&mut ChaCha8Rng::seed_from_u64(cfg.seed), cfg.model.clone()).unwrap();
    assert_eq!(out.model, fresh);
    let log = std::fs::read_to_string(&cfg.log).unwrap();
    assert_eq!(log.lines().next().unwrap(), LOG_HEADER);
    assert_eq!(log.lines().count(), 2);
}

#[test]
fn small_overfit_loss_keeps_falling() {
    let dir = tempfile::tempdir().unwrap();
    write_dataset(&tiny_scenes(10, 2), &dir.path().join("data")).unwrap();
    let cfg = TrainConfig {
        batch_size: 10,
        augment: false,
        ..tiny_run(dir.path(), 12, 0.005)
    };
    let out = train(&cfg, |_| {}).unwrap();
    let totals: Vec<f64> = out.epochs.iter().map(|e| e.loss.total).collect();
    for w in totals[2..].windows(2) {
        assert!(w[1] <= w[0], "{totals:?}");
    }
    assert!(totals.iter().all(|t| t.is_finite()));
}

#[test]
fn checkpoint_roundtrip_preserves_forward_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let model = Model::init(&mut rng, tiny_model()).unwrap();
    let ck = Checkpoint {
        model,
        epoch: 3,
        rng_seed: 9,
        rng_stream: 1,
        rng_word_pos: 12345,
        train_echo: vec![("lr".into(), "0.01".into())],
    };
    let path = dir.path().join("m.ckpt");
    ck.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back, ck);
    let x = Tensor::from_fn(&[1, 32, 32, 3], |_| rng.gen_range(0.0..1.0));
    let (a, fa) = ck.model.infer(&x).unwrap();
    let (b, fb) = back.model.infer(&x).unwrap();
    assert_eq!(a, b);
    assert_eq!(fa, fb);

    let mut bytes = std::fs::read(&path).unwrap();
    bytes.truncate(bytes.len() - 7);
    std::fs::write(&path, bytes).unwrap();
    assert!(Checkpoint::load(&path).is_err());
}

#[test]
fn train_config_rejects_unknown_keys() {
    let dir = tempfile::tempdir().unwrap();
    let ok = dir.path().join("ok.cfg");
    std::fs::write(&ok, "epochs = 2\nlr = 0.02\ndata = d\n").unwrap();
    let cfg = TrainConfig::load(&ok).unwrap();
    assert_eq!((cfg.epochs, cfg.lr), (2, 0.02));
    assert_eq!(cfg.data, dir.path().join("d"));

    let bad = dir.path().join("bad.cfg");
    std::fs::write(&bad, "epochs = 2\nlearning_rate = 0.02\n").unwrap();
    let err = TrainConfig::load(&bad).unwrap_err();
    assert!(err.to_string().contains("learning_rate"), "{err}");

    std::fs::write(&bad, "epochs = 0\n").unwrap();
    assert!(TrainConfig::load(&bad).is_err());
    std::fs::write(&bad, "epochs = two\n").unwrap();
    assert!(TrainConfig::load(&bad).is_err());
}

#[test]
fn config_text_roundtrips() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_run(dir.path(), 3, 0.02);
    let p = dir.path().join("t.cfg");
    std::fs::write(&p, cfg.to_kv()).unwrap();
    assert_eq!(TrainConfig::load(&p).unwrap(), cfg);
}
