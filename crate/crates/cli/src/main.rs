use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use adahead_core::bench::bench;
use adahead_core::checkpoint::Checkpoint;
use adahead_core::eval::ApMode;
use adahead_core::gradcheck::{self, Scope};
use adahead_core::model::ModelConfig;
use adahead_core::postprocess::{
    format_detections, postprocess, DEFAULT_CONFIDENCE, DEFAULT_NMS_IOU,
};
use adahead_core::synth::{load_split, write_dataset, Image, SceneConfig, Split};
use adahead_core::train::{evaluate_model, prepare_image, train, TrainConfig, LOG_HEADER};
use adahead_core::Precision;
use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

/// Adaptive detection head: data generation, training, evaluation and inference.
#[derive(Parser, Debug)]
#[command(name = "adahead", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic dataset.
    GenData {
        /// Dataset config (`key = value`); defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes the checkpoint and `train_log.csv` every epoch.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Worker threads for batch-parallel forward/backward passes.
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Evaluate a checkpoint on a dataset split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = ApArg::Interp)]
        ap: ApArg,
        #[arg(long, value_enum, default_value_t = SplitArg::Val)]
        split: SplitArg,
        /// Directory for `metrics.csv` and `confusion.csv`.
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Detect objects in one PPM image.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value_t = DEFAULT_CONFIDENCE)]
        conf: f64,
        #[arg(long, default_value_t = DEFAULT_NMS_IOU)]
        iou: f64,
        #[arg(long, default_value_t = 300)]
        max_dets: usize,
        /// Detection file; printed to stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Writes the post-attention feature tensor as a TNSR dump.
        #[arg(long)]
        dump_features: Option<PathBuf>,
    },
    /// Finite-difference gradient checks in 64-bit mode.
    Gradcheck {
        #[arg(long, value_enum, default_value_t = ScopeArg::All)]
        scope: ScopeArg,
        /// Corrupts the analytic gradient of the named check.
        #[arg(long, hide = true)]
        corrupt: Option<String>,
    },
    /// Parameter and FLOP accounting for a model config.
    Bench {
        /// Training config whose `model.*` keys are used; defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ApArg {
    Paper,
    Interp,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Val,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ScopeArg {
    Ops,
    Head,
    Loss,
    All,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    let numeric = e.chain().any(|c| {
        c.downcast_ref::<adahead_core::Error>()
            .is_some_and(|e| e.is_numeric())
            || c.downcast_ref::<NumericFailure>().is_some()
    });
    if numeric {
        2
    } else {
        1
    }
}

/// Raised when a gradient check exceeds tolerance.
#[derive(Debug)]
struct NumericFailure(String);

impl std::fmt::Display for NumericFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for NumericFailure {}

fn run(cli: Cli) -> Result<()> {
    Precision::from_env()?;
    match cli.command {
        Command::GenData { config, out } => gen_data(config.as_deref(), &out),
        Command::Train { config, threads } => run_train(&config, threads),
        Command::Eval {
            ckpt,
            data,
            ap,
            split,
            out,
        } => run_eval(&ckpt, &data, ap, split, &out),
        Command::Infer {
            ckpt,
            image,
            conf,
            iou,
            max_dets,
            out,
            dump_features,
        } => run_infer(
            &ckpt,
            &image,
            conf,
            iou,
            max_dets,
            out.as_deref(),
            dump_features.as_deref(),
        ),
        Command::Gradcheck { scope, corrupt } => run_gradcheck(scope, corrupt),
        Command::Bench { config } => run_bench(config.as_deref()),
    }
}

fn gen_data(config: Option<&Path>, out: &Path) -> Result<()> {
    let cfg = match config {
        Some(p) => SceneConfig::load(p)?,
        None => SceneConfig::default(),
    };
    write_dataset(&cfg, out).with_context(|| format!("writing dataset to {}", out.display()))?;
    println!(
        "wrote {} train and {} val images to {}",
        cfg.train_count,
        cfg.val_count,
        out.display()
    );
    Ok(())
}

fn run_train(config: &Path, threads: Option<usize>) -> Result<()> {
    let mut cfg = TrainConfig::load(config)?;
    if let Some(t) = threads {
        cfg.threads = t;
    }
    cfg.validate()?;
    println!("{LOG_HEADER}");
    let outcome = train(&cfg, |s| println!("{}", s.csv_row()))
        .with_context(|| format!("training from {}", config.display()))?;
    let last = outcome.epochs.last().map(|s| s.val_map50).unwrap_or(0.0);
    println!(
        "checkpoint {} (final val mAP@50 {last:.4})",
        cfg.checkpoint.display()
    );
    Ok(())
}

fn run_eval(ckpt: &Path, data: &Path, ap: ApArg, split: SplitArg, out: &Path) -> Result<()> {
    let ck = Checkpoint::load(ckpt)?;
    let split = match split {
        SplitArg::Train => Split::Train,
        SplitArg::Val => Split::Val,
    };
    let mode = match ap {
        ApArg::Paper => ApMode::Paper,
        ApArg::Interp => ApMode::Interp,
    };
    let samples = load_split(data, split, ck.model.config.n_categories)?;
    if samples.is_empty() {
        bail!("no {} images under {}", split.name(), data.display());
    }
    let report = evaluate_model(&ck.model, &samples, mode)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let metrics = out.join("metrics.csv");
    fs::write(&metrics, report.to_csv())
        .with_context(|| format!("writing {}", metrics.display()))?;
    let confusion = out.join("confusion.csv");
    fs::write(&confusion, report.confusion.to_csv())
        .with_context(|| format!("writing {}", confusion.display()))?;

    println!("{} images, AP mode {:?}", samples.len(), mode);
    print!("{}", report.to_csv());
    println!(
        "precision {:.4}  recall {:.4}  (confidence {})",
        report.mean_precision(),
        report.mean_recall(),
        adahead_core::eval::REPORT_CONFIDENCE
    );
    for note in &report.notes {
        println!("note: {note}");
    }
    println!(
        "published reference on real blood-cell data (not reproduced here): \
         mAP@50 0.912, mAP@50-95 0.630, precision 0.860"
    );
    Ok(())
}

fn run_infer(
    ckpt: &Path,
    image: &Path,
    conf: f64,
    iou: f64,
    max_dets: usize,
    out: Option<&Path>,
    dump: Option<&Path>,
) -> Result<()> {
    let ck = Checkpoint::load(ckpt)?;
    let img = Image::read_ppm(image)?;
    let x = prepare_image(&img, &ck.model.config)?.to_tensor();
    let (head, features) = ck.model.infer(&x)?;
    let anchors = ck.model.config.anchors()?;
    let dets = postprocess(&head, &anchors, conf, iou, max_dets);
    let text = format_detections(&dets);
    match out {
        Some(p) => fs::write(p, &text).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{text}"),
    }
    if let Some(p) = dump {
        let mut f = std::io::BufWriter::new(
            fs::File::create(p).with_context(|| format!("creating {}", p.display()))?,
        );
        features
            .write_tnsr(&mut f)
            .with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

fn run_gradcheck(scope: ScopeArg, corrupt: Option<String>) -> Result<()> {
    let scope = match scope {
        ScopeArg::Ops => Scope::Ops,
        ScopeArg::Head => Scope::Head,
        ScopeArg::Loss => Scope::Loss,
        ScopeArg::All => Scope::All,
    };
    let results = gradcheck::run(scope, &gradcheck::Options { corrupt })?;
    print!("{}", gradcheck::format_results(&results));
    let failed: Vec<&str> = results
        .iter()
        .filter(|r| !r.passed())
        .map(|r| r.name.as_str())
        .collect();
    if !failed.is_empty() {
        return Err(NumericFailure(format!(
            "gradient check failed for {} (tolerance {:e})",
            failed.join(", "),
            gradcheck::TOLERANCE
        ))
        .into());
    }
    println!("all {} checks passed", results.len());
    Ok(())
}

fn run_bench(config: Option<&Path>) -> Result<()> {
    let model = match config {
        Some(p) => TrainConfig::load(p)?.model,
        None => ModelConfig::default(),
    };
    print!("{}", bench(&model)?.render());
    Ok(())
}
