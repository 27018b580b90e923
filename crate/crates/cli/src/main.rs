use std::fs::File;
use std::io::BufWriter;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use syenet::io::config::{load_config, ConfigFile};
use syenet::io::image::{load_png, save_png};
use syenet::io::weights::{load_weights, read_table, save_weights};
use syenet::loss::{loss_analysis_emit, write_analysis_csv};
use syenet::metrics::{mai_score, ScoreParams};
use syenet::network::{verify_models, Mode, SyeNetModel, Task};
use syenet::tensor::{DType, Element};
use syenet::train::data::make_synthetic_dataset;
use syenet::train::gradcheck::{config_grad_check, GradCheckOptions};
use syenet::train::toy::{bicubic_psnr, train_toy, write_log_csv, Objective, TrainConfig};
use syenet::Error;

/// Outcome of a command that ran to completion.
enum Outcome {
    Pass,
    /// A verification ran and did not meet its tolerance.
    CheckFailed,
}

#[derive(Parser)]
#[command(name = "syenet", version, about = "Train, fold, verify and run SYENet models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Folded,
    Training,
}

#[derive(Subcommand)]
enum Command {
    /// Run a model on one PNG image.
    Infer {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Form to run in; defaults to the form stored in the weights file.
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
    },
    /// Fold training-form weights into single convolutions.
    Reparam {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 8)]
        trials: usize,
        /// Defaults to 1e-4 for f32 models and 1e-9 for f64.
        #[arg(long)]
        tol: Option<f64>,
    },
    /// Compare a training-form and a folded model on random inputs.
    Verify {
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "weights-train")]
        weights_train: PathBuf,
        #[arg(long = "weights-folded")]
        weights_folded: PathBuf,
        #[arg(long, default_value_t = 8)]
        trials: usize,
        #[arg(long)]
        tol: Option<f64>,
    },
    /// Train on synthetic patches.
    TrainToy {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        iters: usize,
        /// Defaults to the seed in the config file.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        log: PathBuf,
        #[arg(long = "warmup-iters", default_value_t = 0)]
        warmup_iters: usize,
        /// Start from these training-form weights instead of a fresh model.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Print the PSNR/latency score.
    Score {
        #[arg(long)]
        psnr: f64,
        #[arg(long = "latency-ms")]
        latency_ms: f64,
        #[arg(long = "c-norm")]
        c_norm: f64,
    },
    /// Write loss-weight, loss and density curves for a set of alphas.
    AnalyzeLoss {
        /// Comma-separated, e.g. `0.1,1,10`.
        #[arg(long, value_delimiter = ',', required = true)]
        alphas: Vec<f64>,
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        p: u8,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100_000)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Finite-difference check of full-model gradients.
    GradCheck {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        #[arg(long, default_value_t = 24)]
        coords: usize,
    },
}

fn default_tol(p: DType) -> f64 {
    match p {
        DType::F32 => 1e-4,
        DType::F64 => 1e-9,
    }
}

fn infer<T: Element>(cfg: &ConfigFile, weights: &PathBuf, input: &PathBuf, output: &PathBuf, mode: Option<ModeArg>) -> syenet::Result<Outcome> {
    let mut model: SyeNetModel<T> = load_weights(weights, &cfg.model)?;
    match (mode, model.mode()) {
        (Some(ModeArg::Folded), Mode::Training) => model = model.fold()?,
        (Some(ModeArg::Training), Mode::Folded) => {
            return Err(Error::Mode("folded weights cannot run in training form".into()));
        }
        _ => {}
    }
    let img = load_png::<T>(input)?;
    let want = cfg.model.task.input_channels();
    if img.tensor.dims().c != want {
        return Err(Error::Image(format!(
            "{} expects a {}-channel image, got {}",
            cfg.model.task.name(),
            want,
            img.tensor.dims().c
        )));
    }
    let y = model.forward(&img.tensor)?;
    save_png(output, &y, img.bits)?;
    println!("wrote {} ({})", output.display(), y.dims());
    Ok(Outcome::Pass)
}

fn report(label: &str, max_abs_diff: f64, tol: f64, pass: bool) -> Outcome {
    println!("{label}: max_abs_diff {max_abs_diff:.3e} (tolerance {tol:.1e}) {}", if pass { "PASS" } else { "FAIL" });
    if pass {
        Outcome::Pass
    } else {
        Outcome::CheckFailed
    }
}

fn reparam<T: Element>(cfg: &ConfigFile, weights: &PathBuf, output: &PathBuf, trials: usize, tol: f64) -> syenet::Result<Outcome> {
    let model: SyeNetModel<T> = load_weights(weights, &cfg.model)?;
    if model.mode() == Mode::Folded {
        return Err(Error::Mode("weights are already folded".into()));
    }
    let folded = model.fold()?;
    let r = verify_models(&model, &folded, trials, tol, cfg.seed)?;
    let outcome = report("fold equivalence", r.max_abs_diff, tol, r.pass);
    if r.pass {
        save_weights(output, &folded)?;
        println!("wrote {} ({} parameters)", output.display(), folded.param_count(true));
    }
    Ok(outcome)
}

fn verify<T: Element>(cfg: &ConfigFile, a: &PathBuf, b: &PathBuf, trials: usize, tol: f64) -> syenet::Result<Outcome> {
    let train: SyeNetModel<T> = load_weights(a, &cfg.model)?;
    let folded: SyeNetModel<T> = load_weights(b, &cfg.model)?;
    if folded.mode() != Mode::Folded {
        return Err(Error::Mode(format!("{} does not hold folded weights", b.display())));
    }
    let r = verify_models(&train, &folded, trials, tol, cfg.seed)?;
    Ok(report("equivalence", r.max_abs_diff, tol, r.pass))
}

/// Toy patch size: 32 pixels, rounded up to a multiple of the SR scale.
fn default_patch(task: Task) -> usize {
    let s = task.scale();
    32usize.div_ceil(s) * s
}

const VAL_COUNT: usize = 32;

#[allow(clippy::too_many_arguments)]
fn train<T: Element>(
    cfg: &ConfigFile,
    iters: usize,
    seed: u64,
    out: &PathBuf,
    log: &PathBuf,
    warmup_iters: usize,
    init: Option<&PathBuf>,
) -> syenet::Result<Outcome> {
    let mut model: SyeNetModel<T> = match init {
        Some(path) => load_weights(path, &cfg.model)?,
        None => SyeNetModel::seeded(cfg.model.clone(), seed)?,
    };
    let task = cfg.model.task;
    let patch = cfg.train.patch.unwrap_or_else(|| default_patch(task));
    let train_set = make_synthetic_dataset::<T>(task, cfg.train.train_count.unwrap_or(256), patch, seed)?;
    let val_set = make_synthetic_dataset::<T>(task, VAL_COUNT, patch, seed.wrapping_add(1))?;
    let mut tc = TrainConfig::new(iters, seed, Objective::OutlierAware(cfg.loss));
    tc.warmup_iters = warmup_iters;
    if let Some(lr) = cfg.train.lr {
        tc.lr = lr;
    }
    if let Some(b) = cfg.train.batch_size {
        tc.batch_size = b;
    }
    let r = train_toy(&mut model, &train_set, Some(&val_set), &tc)?;
    save_weights(out, &model)?;
    write_log_csv(&r.log, BufWriter::new(File::create(log)?))?;
    if let Some((before, after)) = r.warmup_probe {
        println!("warm-up objective {before:.6} -> {after:.6}");
    }
    if let (Some(first), Some(last)) = (r.log.first(), r.log.last()) {
        println!("loss {:.6} -> {:.6} over {} iterations", first.loss, last.loss, r.log.len());
    }
    if let Some(p) = r.final_val_psnr() {
        println!("validation PSNR {p:.3} dB");
    }
    if matches!(task, Task::Sr { .. }) {
        println!("bicubic PSNR {:.3} dB", bicubic_psnr(&val_set)?);
    }
    println!("wrote {} and {}", out.display(), log.display());
    Ok(Outcome::Pass)
}

fn run(cli: Cli) -> syenet::Result<Outcome> {
    match cli.command {
        Command::Infer { config, weights, input, output, mode } => {
            let cfg = load_config(&config)?;
            match precision_of(&cfg, &weights)? {
                DType::F32 => infer::<f32>(&cfg, &weights, &input, &output, mode),
                DType::F64 => infer::<f64>(&cfg, &weights, &input, &output, mode),
            }
        }
        Command::Reparam { config, weights, output, trials, tol } => {
            let cfg = load_config(&config)?;
            let p = precision_of(&cfg, &weights)?;
            let tol = tol.unwrap_or(default_tol(p));
            match p {
                DType::F32 => reparam::<f32>(&cfg, &weights, &output, trials, tol),
                DType::F64 => reparam::<f64>(&cfg, &weights, &output, trials, tol),
            }
        }
        Command::Verify { config, weights_train, weights_folded, trials, tol } => {
            let cfg = load_config(&config)?;
            let p = precision_of(&cfg, &weights_train)?;
            let tol = tol.unwrap_or(default_tol(p));
            match p {
                DType::F32 => verify::<f32>(&cfg, &weights_train, &weights_folded, trials, tol),
                DType::F64 => verify::<f64>(&cfg, &weights_train, &weights_folded, trials, tol),
            }
        }
        Command::TrainToy { config, iters, seed, out, log, warmup_iters, init } => {
            let cfg = load_config(&config)?;
            let seed = seed.unwrap_or(cfg.seed);
            match cfg.model.precision {
                DType::F32 => train::<f32>(&cfg, iters, seed, &out, &log, warmup_iters, init.as_ref()),
                DType::F64 => train::<f64>(&cfg, iters, seed, &out, &log, warmup_iters, init.as_ref()),
            }
        }
        Command::Score { psnr, latency_ms, c_norm } => {
            let s = mai_score(psnr, &ScoreParams::new(c_norm, latency_ms)?);
            println!("{s:.3}");
            Ok(Outcome::Pass)
        }
        Command::AnalyzeLoss { alphas, p, out, samples, seed } => {
            let rows = loss_analysis_emit(&alphas, p, samples, seed)?;
            write_analysis_csv(&rows, BufWriter::new(File::create(&out)?))?;
            println!("wrote {} rows to {}", rows.len(), out.display());
            Ok(Outcome::Pass)
        }
        Command::GradCheck { config, seed, tol, coords } => {
            let cfg = load_config(&config)?;
            let opts = GradCheckOptions { tolerance: tol, ..Default::default() };
            let r = config_grad_check(&cfg.model, &cfg.loss, seed, coords, opts)?;
            println!(
                "checked {} coordinates: max relative error {:.3e} (tolerance {:.1e}) {}",
                r.checked,
                r.max_rel_error,
                tol,
                if r.pass { "PASS" } else { "FAIL" }
            );
            Ok(if r.pass { Outcome::Pass } else { Outcome::CheckFailed })
        }
    }
}

/// Precision comes from the weights file; the config must agree with it.
fn precision_of(cfg: &ConfigFile, weights: &PathBuf) -> syenet::Result<DType> {
    let (header, _) = read_table(&std::fs::read(weights)?)?;
    if header.precision != cfg.model.precision {
        return Err(Error::Config(format!(
            "config says {}, weights are {}",
            cfg.model.precision.name(),
            header.precision.name()
        )));
    }
    Ok(header.precision)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(Outcome::Pass) => ExitCode::SUCCESS,
        Ok(Outcome::CheckFailed) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
