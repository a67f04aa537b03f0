use std::path::Path;
use std::process::{Command, Output};

fn adahead(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_adahead"))
        .args(args)
        .current_dir(dir)
        .env_remove("ADAHEAD_PRECISION")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const DATASET: &str = "height = 32\nwidth = 32\nobjects_min = 1\nobjects_max = 3\n\
radius_min = 4, 3, 2\nradius_max = 6, 4, 3\ntrain_count = 6\nval_count = 3\n";

const TRAIN: &str = "epochs = 1\nbatch_size = 3\ndata = data\ncheckpoint = model.ckpt\nlog = train_log.csv\n\
model.input_h = 32\nmodel.input_w = 32\nmodel.stem = 4\nmodel.widths = 8, 8, 8\nmodel.strides = 4, 8\n\
model.channels = 8\nmodel.anchor_scales = 2\nmodel.head_hidden = 8\n";

/// Generates the tiny dataset and trains one epoch in `dir`.
fn trained(dir: &Path) {
    std::fs::write(dir.join("dataset.cfg"), DATASET).unwrap();
    std::fs::write(dir.join("train.cfg"), TRAIN).unwrap();
    let o = adahead(
        &["gen-data", "--config", "dataset.cfg", "--out", "data"],
        dir,
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(dir.join("data/images/train/000005.ppm").exists());
    assert!(dir.join("data/labels/val/000002.txt").exists());
    let o = adahead(&["train", "--config", "train.cfg"], dir);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("epoch,cls,coord,noobj,obj,total,val_mAP50\n1,"));
    assert!(dir.join("model.ckpt").exists());
    let log = std::fs::read_to_string(dir.join("train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 2);
}

#[test]
fn generate_train_evaluate_and_infer() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    trained(dir);

    let o = adahead(
        &[
            "eval",
            "--ckpt",
            "model.ckpt",
            "--data",
            "data",
            "--ap",
            "paper",
            "--out",
            "report",
        ],
        dir,
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let metrics = std::fs::read_to_string(dir.join("report/metrics.csv")).unwrap();
    assert!(metrics.starts_with("category,precision,recall,ap50,ap5095\n"));
    assert!(metrics.contains("mAP50"));
    let confusion = std::fs::read_to_string(dir.join("report/confusion.csv")).unwrap();
    assert_eq!(confusion.lines().count(), 5);
    assert!(confusion.lines().next().unwrap().ends_with("background"));

    let blank = dir.join("blank.ppm");
    adahead_core::synth::Image::filled(32, 32, [0.5; 3])
        .write_ppm(&blank)
        .unwrap();
    let none = adahead(
        &[
            "infer",
            "--ckpt",
            "model.ckpt",
            "--image",
            "blank.ppm",
            "--conf",
            "1.0",
        ],
        dir,
    );
    assert!(none.status.success(), "{}", stderr(&none));
    assert_eq!(stdout(&none), "");

    let args = [
        "infer",
        "--ckpt",
        "model.ckpt",
        "--image",
        "data/images/val/000000.ppm",
        "--conf",
        "0.01",
    ];
    let a = adahead(&args, dir);
    let b = adahead(&args, dir);
    assert!(a.status.success(), "{}", stderr(&a));
    assert_eq!(a.stdout, b.stdout);
    for line in stdout(&a).lines() {
        assert_eq!(line.split_whitespace().count(), 6, "{line}");
    }

    let o = adahead(
        &[
            "infer",
            "--ckpt",
            "model.ckpt",
            "--image",
            "blank.ppm",
            "--out",
            "d.txt",
            "--dump-features",
            "f.tnsr",
        ],
        dir,
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let dump = std::fs::File::open(dir.join("f.tnsr")).unwrap();
    let t = adahead_core::Tensor::read_tnsr(&mut std::io::BufReader::new(dump)).unwrap();
    assert_eq!(t.shape().last(), Some(&8));
}

#[test]
fn missing_image_is_a_validation_error_naming_the_path() {
    let tmp = tempfile::tempdir().unwrap();
    trained(tmp.path());
    let o = adahead(
        &["infer", "--ckpt", "model.ckpt", "--image", "nope.ppm"],
        tmp.path(),
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("nope.ppm"), "{}", stderr(&o));
}

#[test]
fn bad_configs_exit_with_one() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    std::fs::write(dir.join("bad.cfg"), "epochs = 1\nlearning_rate = 3\n").unwrap();
    let o = adahead(&["train", "--config", "bad.cfg"], dir);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("learning_rate"), "{}", stderr(&o));

    std::fs::write(dir.join("ds.cfg"), "ratios = 0.5, 0.6\n").unwrap();
    let o = adahead(&["gen-data", "--config", "ds.cfg", "--out", "d"], dir);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn gradcheck_passes_and_reports_corruption() {
    let tmp = tempfile::tempdir().unwrap();
    let o = adahead(&["gradcheck", "--scope", "ops"], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("conv2d"));

    let o = adahead(&["gradcheck", "--scope", "loss"], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));

    let o = adahead(
        &["gradcheck", "--scope", "ops", "--corrupt", "conv2d"],
        tmp.path(),
    );
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("conv2d"), "{}", stderr(&o));
}

#[test]
fn bench_reports_counts_and_context() {
    let tmp = tempfile::tempdir().unwrap();
    let o = adahead(&["bench"], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("ada/plain head ratio"));
    assert!(text.contains("published context"));
    assert!(text.contains("318312"));
}
