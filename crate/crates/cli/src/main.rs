//! Operator surface: subcommands binding configs, datasets, checkpoints, and
//! the packed deployment engine.
//!
//! Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numerical
//! abort.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use bnnkit::bitpack::{export, PackedModel};
use bnnkit::config;
use bnnkit::data::Dataset;
use bnnkit::engine::{
    evaluate, export_features, fre_over_dataset, recalibrate_bn, train, Checkpoint, Strategy,
    TrainConfig,
};
use bnnkit::error::Error;
use bnnkit::models::ForwardMode;

#[derive(Parser)]
#[command(
    name = "bnnkit",
    version,
    about = "Binary neural network training with a latent-weight dual path, \
             plus bit-packed xnor/popcount deployment",
    after_help = "Run `bnnkit print-config` to see every config key with its \
                  default; the same keys work with --set."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Config file (key = value lines); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. --set lambda=1e-3 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory (default: $BNNKIT_OUT or ./bnnkit-out).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write metrics plus checkpoints.
    Train(Common),
    /// Evaluate a checkpoint in one inference mode.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// eval_B | eval_W | eval_W_outdated
        #[arg(long, default_value = "eval_B")]
        mode: String,
        /// train | test
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Recalculate the latent branch's BN statistics from data.
    Recalibrate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Number of batches to stream.
        #[arg(long, default_value_t = 32)]
        batches: usize,
    },
    /// Train once per lambda in a grid and tabulate accuracies.
    SweepLambda {
        #[command(flatten)]
        common: Common,
        /// Comma-separated lambda grid.
        #[arg(long, default_value = "1e-5,1e-4,1e-3,1e-2")]
        lambdas: String,
    },
    /// Export penultimate features of both paths to CSV.
    ExportFeatures {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Export the bit-packed deployment model.
    ExportPacked {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Run packed inference over a split and report accuracy.
    Infer {
        #[command(flatten)]
        common: Common,
        /// Packed model file written by export-packed.
        #[arg(long)]
        packed: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Per-layer feature reconstruction error table.
    FreReport {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Print the fully-resolved config and exit.
    PrintConfig(Common),
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Config { .. } | Error::InvalidArgument { .. } => 1,
        Error::Format { .. } | Error::Io { .. } | Error::ShapeMismatch { .. } => 2,
        Error::NonFinite { .. } => 3,
    }
}

fn resolve_config(common: &Common) -> Result<TrainConfig, Error> {
    let text = match &common.config {
        Some(path) => {
            fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?
        }
        None => String::new(),
    };
    let mut overrides = Vec::new();
    for kv in &common.set {
        let Some((k, v)) = kv.split_once('=') else {
            return Err(Error::Config {
                msg: format!("--set expects KEY=VALUE, got '{kv}'"),
            });
        };
        overrides.push((k.trim().to_string(), v.trim().to_string()));
    }
    config::resolve(&text, &overrides)
}

fn out_dir(common: &Common) -> PathBuf {
    common
        .out
        .clone()
        .or_else(|| std::env::var_os("BNNKIT_OUT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("bnnkit-out"))
}

/// Every run drops the fully-resolved config next to its outputs, so the run
/// reproduces from that file alone.
fn prepare_out(common: &Common, cfg: &TrainConfig) -> Result<PathBuf, Error> {
    let dir = out_dir(common);
    fs::create_dir_all(&dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let resolved = dir.join("config.resolved.cfg");
    fs::write(&resolved, config::to_text(cfg))
        .map_err(|e| Error::io(resolved.display().to_string(), e))?;
    Ok(dir)
}

fn split_of<'a>(
    train_ds: &'a Dataset,
    test_ds: &'a Dataset,
    split: &str,
) -> Result<&'a Dataset, Error> {
    match split {
        "train" => Ok(train_ds),
        "test" => Ok(test_ds),
        other => Err(Error::Config {
            msg: format!("unknown split '{other}' (train | test)"),
        }),
    }
}

fn write_text(path: &Path, text: &str) -> Result<(), Error> {
    fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Train(common) => {
            let cfg = resolve_config(&common)?;
            let dir = prepare_out(&common, &cfg)?;
            let (train_ds, test_ds) = config::load_datasets(&cfg.data)?;
            let out = train(&cfg, &train_ds, &test_ds, Some(&dir))?;
            let last = out.history.last().expect("at least one epoch");
            println!(
                "trained {} epochs: acc_B={:.4} acc_W={:.4} (artifacts in {})",
                cfg.epochs,
                last.acc_b,
                last.acc_w,
                dir.display()
            );
        }
        Command::Eval {
            common,
            checkpoint,
            mode,
            split,
        } => {
            let cfg = resolve_config(&common)?;
            let dir = prepare_out(&common, &cfg)?;
            let mode = ForwardMode::parse(&mode)?;
            let (train_ds, test_ds) = config::load_datasets(&cfg.data)?;
            let ds = split_of(&train_ds, &test_ds, &split)?;
            let ckpt = Checkpoint::load(&checkpoint)?;
            let acc = evaluate(&ckpt.model, ds, mode)?;
            let line = format!("{} {} accuracy {:.6}\n", mode.name(), split, acc);
            print!("{line}");
            write_text(&dir.join("eval.txt"), &line)?;
        }
        Command::Recalibrate {
            common,
            checkpoint,
            batches,
        } => {
            let cfg = resolve_config(&common)?;
            let dir = prepare_out(&common, &cfg)?;
            let (train_ds, _) = config::load_datasets(&cfg.data)?;
            let mut ckpt = Checkpoint::load(&checkpoint)?;
            recalibrate_bn(&mut ckpt.model, &train_ds, batches, cfg.batch_size)?;
            let out_path = dir.join("recalibrated.bnnf");
            ckpt.save(&out_path)?;
            println!("recalibrated over {batches} batches -> {}", out_path.display());
        }
        Command::SweepLambda { common, lambdas } => {
            let mut cfg = resolve_config(&common)?;
            if cfg.strategy == Strategy::Baseline {
                cfg.strategy = Strategy::LabelAware;
            }
            let dir = prepare_out(&common, &cfg)?;
            let (train_ds, test_ds) = config::load_datasets(&cfg.data)?;
            let grid: Vec<f64> = lambdas
                .split(',')
                .map(|s| {
                    s.trim().parse().map_err(|_| Error::Config {
                        msg: format!("bad lambda '{s}'"),
                    })
                })
                .collect::<Result<_, _>>()?;
            let mut csv = String::from("lambda,acc_b,acc_w\n");
            for &lambda in &grid {
                let mut run_cfg = cfg.clone();
                run_cfg.lambda = lambda;
                let out = train(&run_cfg, &train_ds, &test_ds, None)?;
                let last = out.history.last().unwrap();
                csv.push_str(&format!("{lambda},{},{}\n", last.acc_b, last.acc_w));
                println!(
                    "lambda={lambda}: acc_B={:.4} acc_W={:.4}",
                    last.acc_b, last.acc_w
                );
            }
            write_text(&dir.join("sweep.csv"), &csv)?;
        }
        Command::ExportFeatures {
            common,
            checkpoint,
            split,
        } => {
            let cfg = resolve_config(&common)?;
            let dir = prepare_out(&common, &cfg)?;
            let (train_ds, test_ds) = config::load_datasets(&cfg.data)?;
            let ds = split_of(&train_ds, &test_ds, &split)?;
            let ckpt = Checkpoint::load(&checkpoint)?;
            let path = dir.join("features.csv");
            export_features(&ckpt.model, ds, &path)?;
            println!("wrote {}", path.display());
        }
        Command::ExportPacked { common, checkpoint } => {
            let cfg = resolve_config(&common)?;
            let dir = prepare_out(&common, &cfg)?;
            let ckpt = Checkpoint::load(&checkpoint)?;
            let packed = export(&ckpt.model)?;
            let path = dir.join("model.bnnp");
            packed.save(&path)?;
            println!(
                "packed {} weight words -> {}",
                packed.total_weight_words(),
                path.display()
            );
        }
        Command::Infer {
            common,
            packed,
            split,
        } => {
            let cfg = resolve_config(&common)?;
            let dir = prepare_out(&common, &cfg)?;
            let model = PackedModel::load(&packed)?;
            let (train_ds, test_ds) = config::load_datasets(&cfg.data)?;
            let ds = split_of(&train_ds, &test_ds, &split)?;
            let (images, labels) = ds.gather(&(0..ds.len()).collect::<Vec<_>>());
            let logits = model.infer(&images)?;
            let k = logits.dim(1);
            let mut csv = String::from("label,pred\n");
            let mut correct = 0usize;
            for (i, &label) in labels.iter().enumerate() {
                let row = &logits.data()[i * k..(i + 1) * k];
                let mut best = 0;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                if best == label {
                    correct += 1;
                }
                csv.push_str(&format!("{label},{best}\n"));
            }
            let acc = correct as f64 / labels.len().max(1) as f64;
            println!("packed {split} accuracy {acc:.6}");
            write_text(&dir.join("predictions.csv"), &csv)?;
        }
        Command::FreReport {
            common,
            checkpoint,
            split,
        } => {
            let cfg = resolve_config(&common)?;
            let dir = prepare_out(&common, &cfg)?;
            let (train_ds, test_ds) = config::load_datasets(&cfg.data)?;
            let ds = split_of(&train_ds, &test_ds, &split)?;
            let ckpt = Checkpoint::load(&checkpoint)?;
            let per_layer = fre_over_dataset(&ckpt.model, ds)?;
            let mut csv = String::from("layer,fre\n");
            for (i, v) in per_layer.iter().enumerate() {
                csv.push_str(&format!("block{i:02},{v}\n"));
            }
            let avg = per_layer.iter().sum::<f64>() / per_layer.len().max(1) as f64;
            csv.push_str(&format!("average,{avg}\n"));
            print!("{csv}");
            write_text(&dir.join("fre.csv"), &csv)?;
        }
        Command::PrintConfig(common) => {
            let cfg = resolve_config(&common)?;
            print!("{}", config::to_text(&cfg));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // help and version arrive here too; only real usage errors fail
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
