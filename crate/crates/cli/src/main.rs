use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use nodule3d::config::load_config;
use nodule3d::gradcheck::{run_gradcheck, GradcheckOptions, DEFAULT_TRIALS, EPSILON};
use nodule3d::inference::{
    detections_to_csv, write_outputs, DEFAULT_STRIDE, DEFAULT_THRESHOLD, DETECTIONS_CSV,
};
use nodule3d::network::group_thousands;
use nodule3d::pipeline::{load_dataset, predict_scan, preprocess_directory};
use nodule3d::synth::{write_dataset, write_detection_scan, SynthConfig, ANNOTATIONS_FILE};
use nodule3d::train::{partition, split_series, BEST_CHECKPOINT};
use nodule3d::{
    evaluate, fit, load_checkpoint, CubeSample, Error, Network, NetworkSpec, OptimizerState,
    PipelineConfig,
};

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_VERIFY: u8 = 3;

/// 3D CNN lung nodule classification and detection.
#[derive(Parser, Debug)]
#[command(name = "nodule3d", version)]
struct Cli {
    /// Worker threads (1 gives bit-exact reference behaviour).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Resample, normalize and cut training cubes from a directory of MHD scans.
    Preprocess {
        #[arg(long)]
        scans: PathBuf,
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Train on a preprocessed cube cache.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        /// Quarter-width network.
        #[arg(long)]
        small: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Loss and accuracy of a checkpoint on the test split of a cache.
    Evaluate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Score every cube instead of the test split.
        #[arg(long)]
        all: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Sliding-window detection on one scan.
    Predict {
        #[arg(long)]
        scan: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = DEFAULT_STRIDE)]
        stride: usize,
        #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
        threshold: f64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Finite-difference check of every layer's backward pass.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = DEFAULT_TRIALS)]
        trials: usize,
        /// Central-difference step.
        #[arg(long, default_value_t = EPSILON)]
        epsilon: f64,
        #[arg(long, hide = true)]
        corrupt_conv_backward: bool,
    },
    /// Print the layer table and parameter count.
    Inspect {
        #[arg(long, conflicts_with = "small")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        small: bool,
        #[arg(long)]
        csv: bool,
    },
    /// Write a synthetic sphere dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 250)]
        scans: usize,
        #[arg(long, default_value_t = 48)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write one scan with a single sphere for detection instead.
        #[arg(long)]
        detection: bool,
    },
}

/// An error with the exit code it maps to.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure {
            code: EXIT_DATA,
            error: e.into(),
        }
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(EXIT_USAGE);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_USAGE);
        }
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

fn run(command: Command) -> CmdResult {
    match command {
        Command::Preprocess {
            scans,
            annotations,
            out,
            common,
        } => preprocess(&scans, &annotations, &out, &common),
        Command::Train {
            data,
            out,
            epochs,
            small,
            common,
        } => train(&data, &out, epochs, small, &common),
        Command::Evaluate {
            data,
            checkpoint,
            all,
            common,
        } => evaluate_cmd(&data, &checkpoint, all, &common),
        Command::Predict {
            scan,
            checkpoint,
            stride,
            threshold,
            out,
            config,
        } => predict(
            &scan,
            &checkpoint,
            stride,
            threshold,
            &out,
            config.as_deref(),
        ),
        Command::Gradcheck {
            seed,
            trials,
            epsilon,
            corrupt_conv_backward,
        } => gradcheck(seed, trials, epsilon, corrupt_conv_backward),
        Command::Inspect {
            checkpoint,
            small,
            csv,
        } => inspect(checkpoint.as_deref(), small, csv),
        Command::Synth {
            out,
            scans,
            size,
            seed,
            detection,
        } => synth(&out, scans, size, seed, detection),
    }
}

fn pipeline_config(common: &Common) -> Result<PipelineConfig, Failure> {
    let mut cfg = match &common.config {
        Some(p) => load_config(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.set_seed(seed);
    }
    cfg.validate().map_err(|e| Failure {
        code: EXIT_USAGE,
        error: e.into(),
    })?;
    Ok(cfg)
}

fn preprocess(scans: &Path, annotations: &Path, out: &Path, common: &Common) -> CmdResult {
    let cfg = pipeline_config(common)?;
    let report = preprocess_directory(scans, annotations, out, &cfg.sampler)?;
    for s in &report.scans {
        println!(
            "{}: {} positive, {} negative",
            s.series, s.positives, s.negatives
        );
        for note in &s.skipped {
            println!("  skipped {note}");
        }
    }
    let total: usize = report.scans.iter().map(|s| s.positives + s.negatives).sum();
    println!(
        "{} scans, {total} cubes written to {}",
        report.scans.len(),
        out.display()
    );
    if report.failures.is_empty() {
        return Ok(());
    }
    for (path, e) in &report.failures {
        eprintln!("{}: {e}", path.display());
    }
    Err(anyhow::anyhow!(
        "{} of {} scans failed",
        report.failures.len(),
        report.failures.len() + report.scans.len()
    )
    .into())
}

/// Train, validation and test cubes.
type Splits = (Vec<CubeSample>, Vec<CubeSample>, Vec<CubeSample>);

fn load_splits(data: &Path, cfg: &PipelineConfig) -> Result<Splits, Failure> {
    let samples = load_dataset(data, cfg.sampler.cube_edge)
        .with_context(|| format!("loading cube cache {}", data.display()))?;
    let split = split_series(samples.iter().map(|s| s.source_series.as_str()), &cfg.train);
    Ok(partition(samples, &split))
}

fn train(
    data: &Path,
    out: &Path,
    epochs: Option<usize>,
    small: bool,
    common: &Common,
) -> CmdResult {
    let mut cfg = pipeline_config(common)?;
    if let Some(e) = epochs {
        cfg.train.epochs = e;
    }
    if small {
        cfg.width_divisor = 4;
    }
    cfg.train.checkpoint_dir = Some(out.to_path_buf());
    cfg.train.metrics_path = Some(out.join("metrics.csv"));
    let (tr, va, _) = load_splits(data, &cfg)?;
    println!("{} train cubes, {} validation cubes", tr.len(), va.len());

    let spec = cfg.network_spec()?;
    let mut net = Network::<f32>::build(&spec, cfg.train.seed)?;
    let mut state = OptimizerState::new(cfg.train.lr, cfg.train.momentum, &net.params());
    let report = fit(&mut net, &mut state, &tr, &va, &cfg.train, |r| {
        println!(
            "epoch {:>3}  train loss {:.4} acc {:.4}  val loss {:.4} acc {:.4}",
            r.epoch, r.train_loss, r.train_acc, r.val_loss, r.val_acc
        );
    })?;
    match report.history.last() {
        Some(last) => println!(
            "final val loss {:.4} val acc {:.4}",
            last.val_loss, last.val_acc
        ),
        None => println!("no epochs run"),
    }
    println!(
        "best epoch {} written to {}",
        report.best_epoch,
        out.join(BEST_CHECKPOINT).display()
    );
    Ok(())
}

fn evaluate_cmd(data: &Path, checkpoint: &Path, all: bool, common: &Common) -> CmdResult {
    let cfg = pipeline_config(common)?;
    let (net, _) = load_checkpoint(checkpoint)?;
    let (tr, va, te) = load_splits(data, &cfg)?;
    let samples = if all { [tr, va, te].concat() } else { te };
    if samples.is_empty() {
        return Err(Error::EmptyDataset.into());
    }
    let m = evaluate(&net, &samples, cfg.train.batch_size)?;
    println!(
        "{} cubes  loss {:.4}  accuracy {:.4}",
        samples.len(),
        m.loss,
        m.accuracy
    );
    Ok(())
}

fn predict(
    scan: &Path,
    checkpoint: &Path,
    stride: usize,
    threshold: f64,
    out: &Path,
    config: Option<&Path>,
) -> CmdResult {
    let cfg = match config {
        Some(p) => load_config(p)?,
        None => PipelineConfig::default(),
    };
    let (net, _) = load_checkpoint(checkpoint)?;
    let mut sampler = cfg.sampler.clone();
    sampler.cube_edge = net.input_edge();
    let p = predict_scan(scan, &net, &sampler, stride, threshold)?;
    write_outputs(out, &p.map, &p.detections)?;
    println!(
        "grid {}x{}x{}, {} windows above {threshold}, {} after denoising",
        p.map.dims[0],
        p.map.dims[1],
        p.map.dims[2],
        p.raw_hits,
        p.detections.len()
    );
    print!("{}", detections_to_csv(&p.detections));
    println!(
        "outputs written to {} ({DETECTIONS_CSV}, ...)",
        out.display()
    );
    Ok(())
}

fn gradcheck(seed: u64, trials: usize, epsilon: f64, corrupt: bool) -> CmdResult {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Failure {
            code: EXIT_USAGE,
            error: anyhow::anyhow!("--epsilon must be positive"),
        });
    }
    let opts = GradcheckOptions {
        seed,
        trials,
        epsilon,
        corrupt_conv_backward: corrupt,
    };
    let report = run_gradcheck(&opts)?;
    println!(
        "{:<12}{:>14}{:>12}{:>10}  result",
        "layer", "max rel err", "threshold", "coords"
    );
    for l in &report.layers {
        println!(
            "{:<12}{:>14.3e}{:>12.0e}{:>10}  {}",
            l.layer,
            l.max_rel_error,
            l.threshold,
            l.coordinates,
            if l.passed() { "ok" } else { "FAIL" }
        );
    }
    if report.passed() {
        Ok(())
    } else {
        Err(Failure {
            code: EXIT_VERIFY,
            error: anyhow::anyhow!("gradient check failed"),
        })
    }
}

fn inspect(checkpoint: Option<&Path>, small: bool, csv: bool) -> CmdResult {
    let spec = match checkpoint {
        Some(p) => load_checkpoint(p)?.0.spec().clone(),
        None if small => NetworkSpec::canonical_scaled(4),
        None => NetworkSpec::canonical(),
    };
    let table = spec.layer_table()?;
    let total = spec.param_count()?;
    if csv {
        println!("layer,kind,output_shape,params");
        for row in &table {
            let dims: Vec<String> = row.output_shape.iter().map(|d| d.to_string()).collect();
            println!(
                "{},{},{},{}",
                row.name,
                row.kind,
                dims.join("x"),
                row.params
            );
        }
        println!("total,,,{total}");
    } else {
        println!("{:<32}{:<28}Param #", "Layer (type)", "Output Shape");
        println!("{}", "=".repeat(72));
        for row in &table {
            println!("{row}");
        }
        println!("{}", "=".repeat(72));
        println!("Total params: {}", group_thousands(total));
    }
    Ok(())
}

fn synth(out: &Path, scans: usize, size: usize, seed: u64, detection: bool) -> CmdResult {
    let cfg = SynthConfig::default();
    if detection {
        let (path, sphere) = write_detection_scan(out, "detect00000", size, 48, seed, &cfg)?;
        println!(
            "{}: sphere at ({:.2}, {:.2}, {:.2}) radius {:.2}",
            path.display(),
            sphere.center[0],
            sphere.center[1],
            sphere.center[2],
            sphere.radius
        );
    } else {
        let paths = write_dataset(out, scans, size, seed, &cfg)?;
        println!(
            "{} scans and {ANNOTATIONS_FILE} written to {}",
            paths.len(),
            out.display()
        );
    }
    Ok(())
}
