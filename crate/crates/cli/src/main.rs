//! `edgedet` — command-line front end for the detector library.
//!
//! Every subcommand resolves its configuration (defaults < TOML file <
//! flags), echoes the result into a fresh run directory as
//! `config.resolved.toml`, and writes its artifacts next to it. Reruns
//! never mutate prior run directories.
//!
//! Exit codes: 0 success, 2 configuration error, 3 I/O or data-integrity
//! error, 4 numerical failure, 5 quality gate failed.

mod config;

use std::fmt;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use config::{FileConfig, ResolvedConfig, ResolvedCorpus, TrainFlags};
use edgedet::detector::{build_student, build_teacher, Detector, DetectorSpec};
use edgedet::eval::{evaluate, ApInterp, EvalReport, ImageEval, DEFAULT_IOU_THRESHOLD};
use edgedet::quant::{apply_quantization, calibrate, size_audit, QuantSpec};
use edgedet::synthcorpus::{generate, Corpus, Split};
use edgedet::targets::Detection;
use edgedet::trainer::{self, MU_SWEEP};
use edgedet::{Error, Result};

#[derive(Parser)]
#[command(
    name = "edgedet",
    version,
    about = "Train, evaluate and quantize a small two-class detector on a synthetic corpus"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every subcommand.
#[derive(Args, Debug)]
struct Common {
    /// TOML configuration file (flags override it)
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Run directory; must not already exist. Defaults to runs/<name>-<utc>
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Run name used for the default run-directory naming
    #[arg(long)]
    name: Option<String>,

    /// Master seed for corpus, weight init and shuffling
    #[arg(long)]
    seed: Option<u64>,

    /// Pin the fallback seed to 0 instead of drawing a random one
    #[arg(long)]
    deterministic: Option<bool>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a deterministic synthetic corpus with a checksum manifest
    GenData {
        #[command(flatten)]
        common: Common,
        /// Remove an existing corpus directory before generating
        #[arg(long)]
        force: bool,
        /// Training images (default 180)
        #[arg(long)]
        n_train: Option<usize>,
        /// Validation images (default 20)
        #[arg(long)]
        n_val: Option<usize>,
        /// Held-out test images (default 20)
        #[arg(long)]
        n_test: Option<usize>,
        /// Square image side in pixels (default 128)
        #[arg(long)]
        image_size: Option<usize>,
    },
    /// Train a detector from scratch
    Train {
        #[command(flatten)]
        common: Common,
        /// Corpus directory (overrides [corpus].root)
        #[arg(long, value_name = "DIR")]
        corpus: Option<PathBuf>,
        /// Network to train: student, teacher34, teacher50 or teacher101
        #[arg(long, default_value = "student")]
        arch: String,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        /// Classification loss: bce, wce or focal
        #[arg(long)]
        cls_loss: Option<String>,
        /// Box regression loss: iou, giou, diou or ciou
        #[arg(long)]
        reg_loss: Option<String>,
        /// Easy/hard threshold for the wce classification loss
        #[arg(long)]
        wce_mu: Option<f64>,
        /// Center-sampling radius in strides (0 = every in-box cell positive)
        #[arg(long)]
        center_radius: Option<f64>,
    },
    /// Train a student under a frozen teacher's feature guidance
    TrainKd {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "DIR")]
        corpus: Option<PathBuf>,
        /// Teacher checkpoint (overrides [train].teacher_checkpoint)
        #[arg(long, value_name = "FILE")]
        teacher: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        cls_loss: Option<String>,
        #[arg(long)]
        reg_loss: Option<String>,
        #[arg(long)]
        wce_mu: Option<f64>,
        #[arg(long)]
        center_radius: Option<f64>,
    },
    /// Evaluate a checkpoint (or replay ground truth) on one corpus split
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "DIR")]
        corpus: Option<PathBuf>,
        /// Detector checkpoint to evaluate
        #[arg(long, value_name = "FILE")]
        checkpoint: Option<PathBuf>,
        /// Corpus split: train, val or test
        #[arg(long, default_value = "test")]
        split: String,
        /// Replay the ground truth as detections (sanity ceiling, no checkpoint)
        #[arg(long)]
        oracle: bool,
        /// Also evaluate under simulated int8 inference
        #[arg(long)]
        quantized: bool,
        /// Quantization spec produced by the quantize subcommand
        #[arg(long, value_name = "FILE")]
        quantspec: Option<PathBuf>,
        /// Fail (exit 5) if int8 mAP differs from float by more than this many points
        #[arg(long, value_name = "PTS", allow_negative_numbers = true)]
        max_delta: Option<f64>,
        /// Use 11-point AP interpolation instead of all-point
        #[arg(long)]
        eleven_point: bool,
    },
    /// Calibrate int8 quantization for a checkpoint and audit its size
    Quantize {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "DIR")]
        corpus: Option<PathBuf>,
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        /// Activation clipping quantile in (0.5, 1]
        #[arg(long)]
        percentile: Option<f64>,
        /// Number of training images used for calibration
        #[arg(long)]
        calibration_images: Option<usize>,
        /// Fail (exit 5) if the int8 size audit exceeds the budget
        #[arg(long)]
        enforce_budget: bool,
    },
    /// Train the full loss-function grid and the wce threshold sweep
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "DIR")]
        corpus: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
    },
    /// Dump classification-loss weighting and comparison curves as CSV
    Curves {
        #[command(flatten)]
        common: Common,
        /// Comma-separated wce thresholds (default 0.4,0.5,0.6,0.7,0.8)
        #[arg(long)]
        mu: Option<String>,
    },
}

// ---------------------------------------------------------------------------
// Error handling and exit codes
// ---------------------------------------------------------------------------

#[derive(Debug)]
enum CliError {
    Core(Error),
    /// A quality gate the user asked for did not hold (budget, mAP delta).
    Gate(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Gate(m) => write!(f, "gate failed: {m}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> CliError {
        CliError::Core(e)
    }
}

impl CliError {
    fn class_exit(&self) -> (&'static str, i32) {
        match self {
            CliError::Core(Error::Invalid(_) | Error::Shape(_)) => ("config", 2),
            CliError::Core(Error::Io { .. }) => ("io", 3),
            CliError::Core(Error::Integrity(_)) => ("integrity", 3),
            CliError::Core(Error::Numerical(_)) => ("numerical", 4),
            CliError::Gate(_) => ("gate", 5),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn main() {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::GenData { common, force, n_train, n_val, n_test, image_size } => {
            cmd_gen_data(&common, force, n_train, n_val, n_test, image_size)
        }
        Command::Train {
            common,
            corpus,
            arch,
            epochs,
            batch_size,
            cls_loss,
            reg_loss,
            wce_mu,
            center_radius,
        } => {
            let flags = TrainFlags {
                epochs,
                batch_size,
                cls_loss,
                reg_loss,
                wce_mu,
                center_radius,
                teacher: None,
            };
            cmd_train(&common, corpus.as_deref(), &arch, flags, false)
        }
        Command::TrainKd {
            common,
            corpus,
            teacher,
            epochs,
            batch_size,
            cls_loss,
            reg_loss,
            wce_mu,
            center_radius,
        } => {
            let flags = TrainFlags {
                epochs,
                batch_size,
                cls_loss,
                reg_loss,
                wce_mu,
                center_radius,
                teacher,
            };
            cmd_train(&common, corpus.as_deref(), "student", flags, true)
        }
        Command::Eval {
            common,
            corpus,
            checkpoint,
            split,
            oracle,
            quantized,
            quantspec,
            max_delta,
            eleven_point,
        } => cmd_eval(
            &common,
            corpus.as_deref(),
            checkpoint.as_deref(),
            &split,
            oracle,
            quantized,
            quantspec.as_deref(),
            max_delta,
            eleven_point,
        ),
        Command::Quantize {
            common,
            corpus,
            checkpoint,
            percentile,
            calibration_images,
            enforce_budget,
        } => cmd_quantize(
            &common,
            corpus.as_deref(),
            &checkpoint,
            percentile,
            calibration_images,
            enforce_budget,
        ),
        Command::Ablate { common, corpus, epochs, batch_size } => {
            cmd_ablate(&common, corpus.as_deref(), epochs, batch_size)
        }
        Command::Curves { common, mu } => cmd_curves(&common, mu.as_deref()),
    };
    if let Err(e) = outcome {
        let (class, code) = e.class_exit();
        eprintln!("error: {e}");
        eprintln!(
            "{}",
            serde_json::json!({"error": {"class": class, "message": e.to_string(), "exit": code}})
        );
        std::process::exit(code);
    }
}

// ---------------------------------------------------------------------------
// Shared resolution helpers
// ---------------------------------------------------------------------------

struct Base {
    file: FileConfig,
    name: String,
    seed: u64,
    deterministic: bool,
}

fn resolve_base(common: &Common, default_name: &str) -> Result<Base> {
    let file = FileConfig::load(common.config.as_deref())?;
    let deterministic = common.deterministic.or(file.deterministic).unwrap_or(true);
    let seed = common
        .seed
        .or(file.seed)
        .unwrap_or_else(|| if deterministic { 0 } else { rand::random() });
    let name = common
        .name
        .clone()
        .or_else(|| file.name.clone())
        .unwrap_or_else(|| default_name.to_string());
    Ok(Base { file, name, seed, deterministic })
}

/// Create the run directory: `--out` verbatim (refusing to reuse an
/// existing one) or a timestamped directory under `runs/`.
fn make_run_dir(out: Option<&Path>, name: &str) -> Result<PathBuf> {
    if let Some(out) = out {
        if out.exists() {
            return Err(Error::invalid(format!(
                "run directory {} already exists; reruns never mutate prior run directories",
                out.display()
            )));
        }
        std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        return Ok(out.to_path_buf());
    }
    let stamp = chrono::Utc::now().format("%Y%m%d-%H%M%S");
    for k in 0u32.. {
        let dir = if k == 0 {
            PathBuf::from("runs").join(format!("{name}-{stamp}"))
        } else {
            PathBuf::from("runs").join(format!("{name}-{stamp}-{k}"))
        };
        if !dir.exists() {
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            return Ok(dir);
        }
    }
    unreachable!("run-directory suffixes exhausted");
}

fn write_text(dir: &Path, file: &str, text: &str) -> Result<()> {
    let path = dir.join(file);
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

fn parse_split(s: &str) -> Result<Split> {
    match s {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        other => Err(Error::invalid(format!("unknown split '{other}' (expected train, val or test)"))),
    }
}

fn build_net(arch: &str, spec: &DetectorSpec, seed: u64) -> Result<Detector> {
    match arch {
        "student" => build_student(spec, seed),
        "teacher34" => build_teacher(34, spec, seed),
        "teacher50" => build_teacher(50, spec, seed),
        "teacher101" => build_teacher(101, spec, seed),
        other => Err(Error::invalid(format!(
            "unknown arch '{other}' (expected student, teacher34, teacher50 or teacher101)"
        ))),
    }
}

/// Detector spec for a run that reads an existing corpus: the configured
/// profile, adopting the corpus image size unless the config pinned one.
fn spec_for_corpus(base: &Base, corpus: &Corpus) -> Result<DetectorSpec> {
    let mut spec = base.file.detector.resolve()?;
    if base.file.detector.input_hw.is_none() {
        spec.input_hw = corpus.manifest.spec.image_size;
        spec.validate()?;
    }
    Ok(spec)
}

fn report_line(label: &str, report: &EvalReport) -> String {
    let (map, f1) = trainer::selection_scores(report);
    format!("{label}  mAP@0.50 {map:.3}  macro-F1 {f1:.3}")
}

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

fn cmd_gen_data(
    common: &Common,
    force: bool,
    n_train: Option<usize>,
    n_val: Option<usize>,
    n_test: Option<usize>,
    image_size: Option<usize>,
) -> CliResult<()> {
    let base = resolve_base(common, "corpus")?;
    let mut corpus = base.file.corpus.resolve(common.out.as_deref())?;
    if let Some(n) = n_train {
        corpus.n_train = n;
    }
    if let Some(n) = n_val {
        corpus.n_val = n;
    }
    if let Some(n) = n_test {
        corpus.n_test = n;
    }
    let mut scene = base.file.scene.resolve(base.seed)?;
    if let Some(s) = image_size {
        scene.image_size = (s, s);
        scene.validate()?;
    }
    if force && corpus.root.exists() {
        std::fs::remove_dir_all(&corpus.root).map_err(|e| Error::io(&corpus.root, e))?;
    }
    generate(&scene, &corpus.root, corpus.n_train, corpus.n_val, corpus.n_test)?;
    let resolved = ResolvedConfig {
        command: "gen-data".into(),
        name: base.name,
        seed: base.seed,
        deterministic: base.deterministic,
        detector: base.file.detector.resolve()?,
        scene: scene.clone(),
        corpus: Some(corpus.clone()),
        train: base.file.train.resolve(&TrainFlags::default(), base.seed, false)?,
        quant: base.file.quant.resolve(None, None),
    };
    resolved.write(&corpus.root)?;
    println!("wrote corpus to {}", corpus.root.display());
    println!(
        "  scene seed {}  image {}x{}",
        scene.seed, scene.image_size.0, scene.image_size.1
    );
    println!(
        "  train {}  val {}  test {}  ({} images)",
        corpus.n_train,
        corpus.n_val,
        corpus.n_test,
        corpus.n_train + corpus.n_val + corpus.n_test
    );
    Ok(())
}

fn cmd_train(
    common: &Common,
    corpus_flag: Option<&Path>,
    arch: &str,
    flags: TrainFlags,
    with_kd: bool,
) -> CliResult<()> {
    let base = resolve_base(common, if with_kd { "train-kd" } else { "train" })?;
    let corpus_cfg = base.file.corpus.resolve(corpus_flag)?;
    let corpus = Corpus::open(&corpus_cfg.root)?;
    let spec = spec_for_corpus(&base, &corpus)?;
    let cfg = base.file.train.resolve(&flags, base.seed, with_kd)?;

    let mut net = build_net(arch, &spec, base.seed)?;
    let mut teacher = if with_kd {
        let path = cfg.teacher_checkpoint.clone().ok_or_else(|| {
            Error::invalid("teacher-guided training needs --teacher or [train].teacher_checkpoint")
        })?;
        Some(Detector::load(&path)?)
    } else {
        None
    };

    let train_data = corpus.load_split(Split::Train)?;
    let val_data = corpus.load_split(Split::Val)?;

    let run_dir = make_run_dir(common.out.as_deref(), &base.name)?;
    let resolved = ResolvedConfig {
        command: if with_kd { "train-kd".into() } else { format!("train --arch {arch}") },
        name: base.name,
        seed: base.seed,
        deterministic: base.deterministic,
        detector: spec,
        scene: corpus.manifest.spec.clone(),
        corpus: Some(ResolvedCorpus {
            root: corpus_cfg.root,
            n_train: corpus.manifest.n_train,
            n_val: corpus.manifest.n_val,
            n_test: corpus.manifest.n_test,
        }),
        train: cfg.clone(),
        quant: base.file.quant.resolve(None, None),
    };
    resolved.write(&run_dir)?;

    let outcome = match teacher.as_mut() {
        Some(t) => trainer::train_kd(&mut net, t, &cfg, &train_data, &val_data)?,
        None => trainer::train(&mut net, &cfg, &train_data, &val_data)?,
    };

    write_text(&run_dir, "metrics.jsonl", &outcome.metrics_jsonl()?)?;
    let report = trainer::evaluate_detector(&mut net, &val_data, ApInterp::AllPoint)?;
    write_text(&run_dir, "report.json", &report.to_json()?)?;
    net.save(&run_dir.join("checkpoint.bin"))?;

    let best = outcome.best();
    println!("run dir {}", run_dir.display());
    println!(
        "best epoch {}/{}  val mAP@0.50 {:.3}  macro-F1 {:.3}",
        outcome.best_epoch, cfg.epochs, best.map, best.f1
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    common: &Common,
    corpus_flag: Option<&Path>,
    checkpoint: Option<&Path>,
    split_name: &str,
    oracle: bool,
    quantized: bool,
    quantspec: Option<&Path>,
    max_delta: Option<f64>,
    eleven_point: bool,
) -> CliResult<()> {
    if oracle && quantized {
        return Err(Error::invalid("--oracle and --quantized are mutually exclusive").into());
    }
    let base = resolve_base(common, "eval")?;
    let corpus_cfg = base.file.corpus.resolve(corpus_flag)?;
    let corpus = Corpus::open(&corpus_cfg.root)?;
    let split = parse_split(split_name)?;
    let interp = if eleven_point { ApInterp::ElevenPoint } else { ApInterp::AllPoint };

    let mut net = match (oracle, checkpoint) {
        (true, _) => None,
        (false, Some(p)) => Some(Detector::load(p)?),
        (false, None) => {
            return Err(Error::invalid("--checkpoint is required unless --oracle is set").into())
        }
    };

    let run_dir = make_run_dir(common.out.as_deref(), &base.name)?;
    let det_spec = match net.as_ref() {
        Some(n) => n.spec().clone(),
        None => spec_for_corpus(&base, &corpus)?,
    };
    let resolved = ResolvedConfig {
        command: format!("eval --split {}", split.as_str()),
        name: base.name,
        seed: base.seed,
        deterministic: base.deterministic,
        detector: det_spec,
        scene: corpus.manifest.spec.clone(),
        corpus: Some(ResolvedCorpus {
            root: corpus_cfg.root,
            n_train: corpus.manifest.n_train,
            n_val: corpus.manifest.n_val,
            n_test: corpus.manifest.n_test,
        }),
        train: base.file.train.resolve(&TrainFlags::default(), base.seed, false)?,
        quant: base.file.quant.resolve(None, None),
    };
    resolved.write(&run_dir)?;

    let report = if let Some(net) = net.as_mut() {
        let data = corpus.load_split(split)?;
        trainer::evaluate_detector(net, &data, interp)?
    } else {
        let mut images = Vec::new();
        for rec in corpus.records(split) {
            let gts = rec.gts()?;
            let dets = gts
                .iter()
                .map(|g| Detection { bbox: g.bbox, class_id: g.class_id, score: 1.0 })
                .collect();
            images.push(ImageEval { dets, gts });
        }
        evaluate(&images, DEFAULT_IOU_THRESHOLD, interp)?
    };
    write_text(&run_dir, "report.json", &report.to_json()?)?;
    write_text(&run_dir, "pr_curves.csv", &report.pr_curve_csv())?;

    println!("run dir {}", run_dir.display());
    let label = if oracle { "oracle" } else { "float " };
    println!("{}", report_line(&format!("{label} {}", split.as_str()), &report));

    if quantized {
        let qpath = quantspec
            .ok_or_else(|| Error::invalid("--quantized needs --quantspec <FILE>"))?;
        let qtext = std::fs::read_to_string(qpath).map_err(|e| Error::io(qpath, e))?;
        let qspec = QuantSpec::from_json(&qtext)?;
        let net = net.as_mut().expect("quantized eval always has a checkpoint");
        apply_quantization(net, &qspec)?;
        let data = corpus.load_split(split)?;
        let qreport = trainer::evaluate_detector(net, &data, interp)?;
        write_text(&run_dir, "report.int8.json", &qreport.to_json()?)?;
        println!("{}", report_line(&format!("int8   {}", split.as_str()), &qreport));
        let delta =
            (report.map.unwrap_or(0.0) - qreport.map.unwrap_or(0.0)) * 100.0;
        println!("delta  {delta:.2} mAP points (float - int8)");
        if let Some(allowed) = max_delta {
            if delta.abs() > allowed {
                return Err(CliError::Gate(format!(
                    "int8 mAP shift {:.2} points exceeds the allowed {allowed:.2}",
                    delta.abs()
                )));
            }
        }
    }
    Ok(())
}

fn cmd_quantize(
    common: &Common,
    corpus_flag: Option<&Path>,
    checkpoint: &Path,
    percentile: Option<f64>,
    calibration_images: Option<usize>,
    enforce_budget: bool,
) -> CliResult<()> {
    let base = resolve_base(common, "quantize")?;
    let corpus_cfg = base.file.corpus.resolve(corpus_flag)?;
    let corpus = Corpus::open(&corpus_cfg.root)?;
    let mut net = Detector::load(checkpoint)?;
    let q = base.file.quant.resolve(percentile, calibration_images);

    let train_data = corpus.load_split(Split::Train)?;
    let images: Vec<_> =
        train_data.iter().take(q.calibration_images).map(|(img, _)| img.clone()).collect();

    let run_dir = make_run_dir(common.out.as_deref(), &base.name)?;
    let resolved = ResolvedConfig {
        command: "quantize".into(),
        name: base.name,
        seed: base.seed,
        deterministic: base.deterministic,
        detector: net.spec().clone(),
        scene: corpus.manifest.spec.clone(),
        corpus: Some(ResolvedCorpus {
            root: corpus_cfg.root,
            n_train: corpus.manifest.n_train,
            n_val: corpus.manifest.n_val,
            n_test: corpus.manifest.n_test,
        }),
        train: base.file.train.resolve(&TrainFlags::default(), base.seed, false)?,
        quant: q.clone(),
    };
    resolved.write(&run_dir)?;

    let qspec = calibrate(&mut net, &images, Some(q.percentile))?;
    write_text(&run_dir, "quantspec.json", &qspec.to_json()?)?;
    let audit = size_audit(&mut net);

    println!("run dir {}", run_dir.display());
    println!(
        "calibrated {} activation ranges and {} weight tensors on {} images (percentile {})",
        qspec.activations.len(),
        qspec.weights.len(),
        images.len(),
        q.percentile
    );
    println!(
        "int8 size audit: {} B params + {} B overhead = {} B (budget {} B) -> {}",
        audit.param_bytes,
        audit.overhead_bytes,
        audit.total_bytes,
        audit.budget_bytes,
        if audit.pass { "pass" } else { "FAIL" }
    );
    if enforce_budget && !audit.pass {
        return Err(CliError::Gate(format!(
            "int8 model size {} B exceeds the {} B budget",
            audit.total_bytes, audit.budget_bytes
        )));
    }
    Ok(())
}

fn cmd_ablate(
    common: &Common,
    corpus_flag: Option<&Path>,
    epochs: Option<usize>,
    batch_size: Option<usize>,
) -> CliResult<()> {
    let base = resolve_base(common, "ablate")?;
    let corpus_cfg = base.file.corpus.resolve(corpus_flag)?;
    let corpus = Corpus::open(&corpus_cfg.root)?;
    let spec = spec_for_corpus(&base, &corpus)?;
    let flags = TrainFlags { epochs, batch_size, ..TrainFlags::default() };
    let cfg = base.file.train.resolve(&flags, base.seed, false)?;

    let train_data = corpus.load_split(Split::Train)?;
    let val_data = corpus.load_split(Split::Val)?;

    let run_dir = make_run_dir(common.out.as_deref(), &base.name)?;
    let resolved = ResolvedConfig {
        command: "ablate".into(),
        name: base.name,
        seed: base.seed,
        deterministic: base.deterministic,
        detector: spec.clone(),
        scene: corpus.manifest.spec.clone(),
        corpus: Some(ResolvedCorpus {
            root: corpus_cfg.root,
            n_train: corpus.manifest.n_train,
            n_val: corpus.manifest.n_val,
            n_test: corpus.manifest.n_test,
        }),
        train: cfg.clone(),
        quant: base.file.quant.resolve(None, None),
    };
    resolved.write(&run_dir)?;

    let table = trainer::run_ablation_grid(&cfg, &spec, &train_data, &val_data)?;
    let grid = table.grid_csv();
    write_text(&run_dir, "ablation_grid.csv", &grid)?;
    write_text(&run_dir, "mu_sweep.csv", &table.mu_csv())?;

    println!("run dir {}", run_dir.display());
    print!("{grid}");
    Ok(())
}

fn cmd_curves(common: &Common, mu: Option<&str>) -> CliResult<()> {
    let base = resolve_base(common, "curves")?;
    let mus: Vec<f64> = match mu {
        Some(list) => list
            .split(',')
            .map(|t| {
                let t = t.trim();
                t.parse::<f64>()
                    .map_err(|_| Error::invalid(format!("bad wce threshold '{t}' in --mu")))
            })
            .collect::<Result<_>>()?,
        None => MU_SWEEP.to_vec(),
    };
    let run_dir = make_run_dir(common.out.as_deref(), &base.name)?;
    let resolved = ResolvedConfig {
        command: "curves".into(),
        name: base.name,
        seed: base.seed,
        deterministic: base.deterministic,
        detector: base.file.detector.resolve()?,
        scene: base.file.scene.resolve(base.seed)?,
        corpus: None,
        train: base.file.train.resolve(&TrainFlags::default(), base.seed, false)?,
        quant: base.file.quant.resolve(None, None),
    };
    resolved.write(&run_dir)?;
    let path = run_dir.join("curves.csv");
    edgedet::losses::emit_loss_curves(&mus, &path)?;
    println!("run dir {}", run_dir.display());
    println!("wrote {} ({} thresholds)", path.display(), mus.len());
    Ok(())
}
