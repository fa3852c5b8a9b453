//! `phaseformer` command line.
//!
//! Exit status: 0 success, 1 usage or configuration error, 2 data error,
//! 3 numerical failure.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context, Result};
use clap::{Parser, Subcommand};

use phaseformer::metrics::MetricReport;
use phaseformer::model::{count_parameters, estimate_flops, infer};
use phaseformer::pipeline::checkpoint::Checkpoint;
use phaseformer::pipeline::dataset::{worker_threads, PairedDataset};
use phaseformer::pipeline::diagnose::diagnose_phase;
use phaseformer::pipeline::image::{load_image, resize_bilinear, save_image};
use phaseformer::pipeline::selftest::{micro_config, model_gradcheck};
use phaseformer::pipeline::train::{Event, RunConfig, TrainState, Trainer};
use phaseformer::{Error, Tensor};

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "phaseformer", version, about = "Phase-attention underwater image restoration")]
struct Cli {
    /// Configuration file of `key = value` lines.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Use the small single-core preset.
    #[arg(long, global = true, conflicts_with = "config")]
    desk: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train on a paired dataset; writes a checkpoint after every epoch.
    Train {
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        #[arg(long)]
        epochs: Option<u64>,
        /// Stop after this many epochs in this invocation; the schedule still spans all epochs.
        #[arg(long, value_name = "N")]
        stop_after: Option<u64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Resume from this checkpoint.
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        /// Checkpoint to write.
        #[arg(long, value_name = "PATH", default_value = "phaseformer.ckpt")]
        out: PathBuf,
    },
    /// Restore one image, or every image of a directory.
    Infer {
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        /// Input image or directory.
        #[arg(long, value_name = "PATH")]
        data: PathBuf,
        /// Output image (`.png` or `.ppm`) or directory.
        #[arg(long, value_name = "PATH")]
        out: PathBuf,
        /// Write the doubled-resolution output.
        #[arg(long)]
        x2: bool,
    },
    /// Score restorations of `DIR/degraded` against `DIR/clean`.
    Eval {
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        /// Also write the table here.
        #[arg(long, value_name = "PATH")]
        out: Option<PathBuf>,
    },
    /// Trainable parameter count of the configuration.
    ParamCount {
        /// Print the per-module breakdown.
        #[arg(long)]
        detail: bool,
    },
    /// Analytic forward FLOPs at the configured input size.
    Flops,
    /// Finite-difference check of a miniature network.
    GradCheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        samples: usize,
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
    /// Amplitude versus phase distance between degraded and clean images.
    DiagnosePhase {
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
    },
    /// Configuration utilities.
    Config {
        #[command(subcommand)]
        action: ConfigAction,
    },
}

#[derive(Subcommand, Debug)]
enum ConfigAction {
    /// Print the effective configuration.
    Show,
}

/// Failure carrying its exit status.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<Error>() {
        Some(Error::Usage(_) | Error::Config(_)) => EXIT_USAGE,
        Some(Error::Numerical(_)) => EXIT_NUMERICAL,
        _ => EXIT_DATA,
    }
}

impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        Failure {
            code: exit_code(&error),
            error,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        anyhow::Error::from(e).into()
    }
}

fn run_config(cli: &Cli) -> Result<RunConfig, Failure> {
    if cli.desk {
        return Ok(RunConfig::desk());
    }
    match &cli.config {
        None => Ok(RunConfig::full()),
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Failure {
                    code: EXIT_USAGE,
                    error: anyhow!("cannot read config {}: {e}", path.display()),
                })?;
            Ok(RunConfig::parse(&text).with_context(|| format!("in {}", path.display()))?)
        }
    }
}

struct TrainArgs<'a> {
    data: &'a Path,
    epochs: Option<u64>,
    stop_after: Option<u64>,
    seed: u64,
    resume: Option<&'a Path>,
    out: &'a Path,
}

fn train(cli: &Cli, args: TrainArgs) -> Result<(), Failure> {
    let TrainArgs {
        data,
        epochs,
        stop_after,
        seed,
        resume,
        out,
    } = args;
    let mut state = match resume {
        Some(p) => TrainState::from_checkpoint(&Checkpoint::load(p)?)?,
        None => TrainState::new(run_config(cli)?, seed)?,
    };
    if let Some(e) = epochs {
        state.config.train.epochs = e;
    }
    let ds = PairedDataset::open(data, state.config.model.input_size)?;
    let pairs = ds.load_all(worker_threads())?;
    let mut trainer = Trainer::new(state, pairs)?;
    if let Some(doubles) = ds.load_doubles(worker_threads())? {
        trainer = trainer.with_double_targets(doubles)?;
    }
    trainer.checkpoint_path = Some(out.to_path_buf());
    let stdout = std::io::stdout();
    let mut lock = stdout.lock();
    let mut write_err = None;
    let last = match stop_after {
        Some(n) => trainer.state.config.train.epochs.min(trainer.state.epoch + n),
        None => trainer.state.config.train.epochs,
    };
    let mut on_event = |ev: &Event| match ev {
        Event::Step(s) => {
            if let Err(e) = writeln!(lock, "{s}") {
                write_err.get_or_insert(e);
            }
        }
        Event::Epoch(e) => {
            let psnr = e.holdout_psnr.map_or("-".to_string(), |p| format!("{p:.3}"));
            let o = e.omega;
            eprintln!(
                "epoch {} mean_loss {:.6} omega {:.4} {:.4} {:.4} {:.4} holdout_psnr {psnr}",
                e.epoch, e.mean_loss, o[0], o[1], o[2], o[3]
            );
        }
    };
    while trainer.state.epoch < last {
        trainer.run_epoch(&mut on_event)?;
    }
    if let Some(e) = write_err {
        return Err(anyhow::Error::from(e).into());
    }
    Ok(())
}

fn infer_one(ck_cfg: &RunConfig, params: &phaseformer::tensor::ParamStore<f32>, input: &Path, out: &Path, x2: bool) -> Result<(), Failure> {
    let img = load_image(input)?;
    let (h, w) = ck_cfg.model.input_size;
    let img = if img.shape()[1..] != [h, w] { resize_bilinear(&img, h, w)? } else { img };
    let x = Tensor::stack(&[img])?;
    let y = infer(&ck_cfg.model, params, &x)?;
    let result = if x2 { y.double_res } else { y.full_res };
    save_image(out, &result.index0(0))?;
    Ok(())
}

fn load_model(path: &Path) -> Result<TrainState, Failure> {
    Ok(TrainState::from_checkpoint(&Checkpoint::load(path)?)?)
}

fn run(cli: Cli) -> Result<(), Failure> {
    match &cli.command {
        Command::Train {
            data,
            epochs,
            stop_after,
            seed,
            checkpoint,
            out,
        } => train(
            &cli,
            TrainArgs {
                data,
                epochs: *epochs,
                stop_after: *stop_after,
                seed: *seed,
                resume: checkpoint.as_deref(),
                out,
            },
        ),
        Command::Infer {
            checkpoint,
            data,
            out,
            x2,
        } => {
            let state = load_model(checkpoint)?;
            if data.is_dir() {
                std::fs::create_dir_all(out).map_err(anyhow::Error::from)?;
                let mut entries: Vec<PathBuf> = std::fs::read_dir(data)
                    .map_err(anyhow::Error::from)?
                    .filter_map(|e| e.ok().map(|e| e.path()))
                    .filter(|p| p.is_file())
                    .collect();
                entries.sort();
                for input in entries {
                    let name = input.file_name().expect("file entries have names");
                    infer_one(&state.config, &state.params, &input, &out.join(name), *x2)?;
                }
                Ok(())
            } else {
                infer_one(&state.config, &state.params, data, out, *x2)
            }
        }
        Command::Eval { checkpoint, data, out } => {
            let state = load_model(checkpoint)?;
            let ds = PairedDataset::open(data, state.config.model.input_size)?;
            let pairs = ds.load_all(worker_threads())?;
            let mut items = Vec::new();
            for ((deg, clean), (path, _)) in pairs.iter().zip(&ds.pairs) {
                let y = infer(&state.config.model, &state.params, &Tensor::stack(std::slice::from_ref(deg))?)?;
                let name = path.file_name().map_or_else(String::new, |n| n.to_string_lossy().into_owned());
                items.push((name, y.full_res.index0(0), clean.clone()));
            }
            let table = MetricReport::build(&items)?.to_table();
            print!("{table}");
            if let Some(p) = out {
                std::fs::write(p, &table).map_err(anyhow::Error::from)?;
            }
            Ok(())
        }
        Command::ParamCount { detail } => {
            let cfg = run_config(&cli)?;
            let count = count_parameters(&cfg.model)?;
            println!("{}", count.total);
            if *detail {
                for (module, n) in &count.by_module {
                    println!("{module}\t{n}");
                }
            }
            Ok(())
        }
        Command::Flops => {
            let cfg = run_config(&cli)?;
            let (h, w) = cfg.model.input_size;
            let f = estimate_flops(&cfg.model, h, w)?;
            println!("{f}\t{:.3} GFLOPs at {h}x{w}", f as f64 / 1e9);
            Ok(())
        }
        Command::GradCheck {
            seed,
            samples,
            inject_fault,
        } => {
            let report = model_gradcheck(&micro_config(), *samples, *seed, *inject_fault)?;
            println!("checked {} coordinates, max relative error {:.3e}", report.checked, report.max_rel_error);
            if report.passes(1e-3) {
                Ok(())
            } else {
                Err(Failure {
                    code: EXIT_NUMERICAL,
                    error: anyhow!("gradient check failed: {:?}", report.worst),
                })
            }
        }
        Command::DiagnosePhase { data } => {
            let size = run_config(&cli)?.model.input_size;
            let ds = PairedDataset::open(data, size)?;
            let pairs = ds.load_all(worker_threads())?;
            let report = diagnose_phase(&pairs)?;
            println!("image\td_amp\td_phase");
            for ((path, _), d) in ds.pairs.iter().zip(&report.pairs) {
                let name = path.file_name().map_or_else(String::new, |n| n.to_string_lossy().into_owned());
                println!("{name}\t{:.6}\t{:.6}", d.d_amp, d.d_phase);
            }
            println!("mean\t{:.6}\t{:.6}", report.mean_amp, report.mean_phase);
            println!("amp_dominant_fraction\t{:.4}", report.amp_dominant_fraction);
            Ok(())
        }
        Command::Config {
            action: ConfigAction::Show,
        } => {
            print!("{}", run_config(&cli)?.to_text());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(EXIT_USAGE),
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
