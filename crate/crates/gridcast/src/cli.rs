//! Command-line interface: `synth`, `train`, `eval`, and `tune`.
//!
//! Every command resolves its configuration from defaults, an optional
//! `key = value` config file, and flags (flags win), validates it fully,
//! prints the resolved values as a reproducibility header, and only then
//! starts computing. Output files are written after the computation
//! finishes, so a validation failure never leaves partial outputs.
//! Exit codes: 0 success, 1 runtime failure, 2 usage/validation error.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use gridcast_core::baselines::{
    baseline_predictor, model_predictor, BaselineKind, MetricTable,
};
use gridcast_core::data::{default_target_slots, split_train_val, MovieDataset};
use gridcast_core::hypertune::{
    hyperband_schedule, run_search, trace_to_csv, training_trial_runner, SearchSpace,
};
use gridcast_core::models::{BiasCombo, ModelParams, TrConfig};
use gridcast_core::synth::{on_road_fraction, synthesize_city, SynthSpec};
use gridcast_core::tape::Activation;
use gridcast_core::train::{train, ModelInit, TrainConfig};

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::ConfigSource;
use crate::format::{load_movie, save_movie};
use crate::parallel::{evaluate_parallel, make_pool, PooledRunner};
use crate::{CliError, Result};

#[derive(Parser, Debug)]
#[command(
    name = "gridcast",
    about = "Spatio-temporal grid forecasting: synthetic cities, temporal regression with bias tables, baselines, and HyperBand tuning"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic city movie file
    Synth(SynthArgs),
    /// Train a model and write a checkpoint plus a training-log CSV
    Train(TrainArgs),
    /// Evaluate baselines and checkpoints into a metric table
    Eval(EvalArgs),
    /// HyperBand search over the hyperparameter space
    Tune(TuneArgs),
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(args) => run_synth(args),
        Command::Train(args) => run_train(args),
        Command::Eval(args) => run_eval(args),
        Command::Tune(args) => run_tune(args),
    }
}

fn print_header(command: &str, entries: &[(&str, String)]) {
    println!("# resolved {command} configuration");
    for (key, value) in entries {
        println!("{key} = {value}");
    }
}

fn parse_list<T: std::str::FromStr>(text: &str, what: &str) -> Result<Vec<T>> {
    text.split(',')
        .map(|part| {
            part.trim()
                .parse()
                .map_err(|_| CliError::usage(format!("cannot parse {what} element '{part}'")))
        })
        .collect()
}

fn fmt_list<T: std::fmt::Display>(items: &[T]) -> String {
    items
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

fn load_data(path: &PathBuf) -> Result<MovieDataset> {
    if !path.exists() {
        return Err(CliError::usage(format!(
            "data file not found: {}",
            path.display()
        )));
    }
    Ok(load_movie(path)?)
}

// ── synth ──────────────────────────────────────────────────────────────

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Optional key = value config file; flags override it
    #[arg(long)]
    config: Option<PathBuf>,
    /// Grid height
    #[arg(long)]
    h: Option<usize>,
    /// Grid width
    #[arg(long)]
    w: Option<usize>,
    /// Channels per pixel
    #[arg(long)]
    c: Option<usize>,
    /// Number of days to generate
    #[arg(long)]
    days: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Fraction of pixels carrying a road, in (0, 1)
    #[arg(long = "road-density")]
    road_density: Option<f64>,
    /// Hour-of-day profile amplitude
    #[arg(long = "hour-amp")]
    hour_amp: Option<f64>,
    /// Max per-pixel cycles per day of the hour profile
    #[arg(long = "hour-harmonics")]
    hour_harmonics: Option<usize>,
    /// Day-of-week profile amplitude
    #[arg(long = "week-amp")]
    week_amp: Option<f64>,
    /// Month-of-year profile amplitude
    #[arg(long = "month-amp")]
    month_amp: Option<f64>,
    /// Uniform noise half-width
    #[arg(long)]
    noise: Option<f64>,
    /// Minutes per frame
    #[arg(long)]
    interval: Option<u16>,
    /// Unix timestamp of frame 0
    #[arg(long)]
    start: Option<i64>,
    /// Output movie path
    #[arg(long)]
    out: Option<PathBuf>,
}

fn run_synth(args: SynthArgs) -> Result<()> {
    let mut src = ConfigSource::load(args.config.as_ref())?;
    let mut spec = SynthSpec::new(
        args.h.or(src.take("h")?).unwrap_or(64),
        args.w.or(src.take("w")?).unwrap_or(64),
        args.c.or(src.take("c")?).unwrap_or(3),
        args.days.or(src.take("days")?).unwrap_or(30),
        args.seed.or(src.take("seed")?).unwrap_or(0),
    );
    if let Some(v) = args.road_density.or(src.take("road-density")?) {
        spec.road_density = v;
    }
    if let Some(v) = args.hour_amp.or(src.take("hour-amp")?) {
        spec.hour_amplitude = v;
    }
    if let Some(v) = args.hour_harmonics.or(src.take("hour-harmonics")?) {
        spec.hour_harmonics = v;
    }
    if let Some(v) = args.week_amp.or(src.take("week-amp")?) {
        spec.week_amplitude = v;
    }
    if let Some(v) = args.month_amp.or(src.take("month-amp")?) {
        spec.month_amplitude = v;
    }
    if let Some(v) = args.noise.or(src.take("noise")?) {
        spec.noise = v;
    }
    if let Some(v) = args.interval.or(src.take("interval")?) {
        spec.interval_minutes = v;
    }
    if let Some(v) = args.start.or(src.take("start")?) {
        spec.start_unix_seconds = v;
    }
    let out = args
        .out
        .or(src.take("out")?)
        .ok_or_else(|| CliError::usage("missing required --out path"))?;
    src.finish()?;
    spec.validate()?;

    print_header(
        "synth",
        &[
            ("h", spec.height.to_string()),
            ("w", spec.width.to_string()),
            ("c", spec.channels.to_string()),
            ("days", spec.n_days.to_string()),
            ("seed", spec.seed.to_string()),
            ("road-density", spec.road_density.to_string()),
            ("hour-amp", spec.hour_amplitude.to_string()),
            ("hour-harmonics", spec.hour_harmonics.to_string()),
            ("week-amp", spec.week_amplitude.to_string()),
            ("month-amp", spec.month_amplitude.to_string()),
            ("noise", spec.noise.to_string()),
            ("interval", spec.interval_minutes.to_string()),
            ("start", spec.start_unix_seconds.to_string()),
            ("out", out.display().to_string()),
        ],
    );

    let dataset = synthesize_city(&spec)?;
    save_movie(&dataset, &out)?;
    println!(
        "wrote {}: {} frames of {}x{}x{} ({} days), on-road fraction {:.3}",
        out.display(),
        dataset.n_frames(),
        dataset.height(),
        dataset.width(),
        dataset.channels(),
        dataset.n_days(),
        on_road_fraction(&dataset)
    );
    Ok(())
}

// ── train ──────────────────────────────────────────────────────────────

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Input movie file
    #[arg(long)]
    data: Option<PathBuf>,
    /// Model kind: tr, tr+b, or masked
    #[arg(long)]
    model: Option<String>,
    /// Total layer count of the regression stack
    #[arg(long)]
    layers: Option<usize>,
    /// Hidden channels per layer
    #[arg(long)]
    hidden: Option<usize>,
    /// History length in frames
    #[arg(long)]
    history: Option<usize>,
    /// Odd neighborhood size (1 = per-pixel)
    #[arg(long)]
    kernel: Option<usize>,
    /// relu, elu, selu, or leaky_relu
    #[arg(long)]
    activation: Option<String>,
    /// Hour bins per day (must divide 1440)
    #[arg(long = "hour-bins")]
    hour_bins: Option<usize>,
    /// Bias tables for tr+b/masked: subsets of lxh+wxh+m, or none
    #[arg(long)]
    biases: Option<String>,
    /// Learning rate
    #[arg(long)]
    lr: Option<f64>,
    /// Fraction of training days sampled per epoch
    #[arg(long = "day-fraction")]
    day_fraction: Option<f64>,
    #[arg(long = "plateau-patience")]
    plateau_patience: Option<usize>,
    #[arg(long = "plateau-factor")]
    plateau_factor: Option<f64>,
    #[arg(long = "early-stop")]
    early_stop: Option<usize>,
    #[arg(long = "max-epochs")]
    max_epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Fraction of days held out for validation
    #[arg(long = "val-fraction")]
    val_fraction: Option<f64>,
    /// Comma-separated per-day prediction slots
    #[arg(long)]
    slots: Option<String>,
    /// Output checkpoint path
    #[arg(long)]
    out: Option<PathBuf>,
    /// Training-log CSV path
    #[arg(long)]
    log: Option<PathBuf>,
}

fn model_init(model: &str, config: TrConfig, biases: Option<&str>) -> Result<ModelInit> {
    match model {
        "tr" => {
            if biases.is_some() {
                return Err(CliError::usage(
                    "--biases cannot be combined with --model tr (it has none)",
                ));
            }
            Ok(ModelInit::Trb {
                config,
                combo: BiasCombo::NONE,
            })
        }
        "tr+b" | "trb" => Ok(ModelInit::Trb {
            config,
            combo: biases.map(BiasCombo::parse).transpose()?.unwrap_or(BiasCombo::ALL),
        }),
        "masked" => Ok(ModelInit::Masked {
            config,
            combo: biases.map(BiasCombo::parse).transpose()?.unwrap_or(BiasCombo::ALL),
        }),
        other => Err(CliError::usage(format!(
            "unknown model '{other}' (expected tr, tr+b, or masked)"
        ))),
    }
}

fn run_train(args: TrainArgs) -> Result<()> {
    let mut src = ConfigSource::load(args.config.as_ref())?;
    let data = args
        .data
        .or(src.take("data")?)
        .ok_or_else(|| CliError::usage("missing required --data path"))?;
    let model = args.model.or(src.take("model")?).unwrap_or_else(|| "tr+b".into());
    let config = TrConfig {
        n_layers: args.layers.or(src.take("layers")?).unwrap_or(2),
        hidden_channels: args.hidden.or(src.take("hidden")?).unwrap_or(16),
        history: args.history.or(src.take("history")?).unwrap_or(4),
        activation: Activation::parse(
            &args
                .activation
                .or(src.take("activation")?)
                .unwrap_or_else(|| "elu".into()),
        )?,
        kernel_size: args.kernel.or(src.take("kernel")?).unwrap_or(1),
    };
    let biases = args.biases.or(src.take("biases")?);
    let init = model_init(&model, config, biases.as_deref())?;
    let n_hour_bins = args.hour_bins.or(src.take("hour-bins")?).unwrap_or(12);
    let train_cfg = TrainConfig {
        learning_rate: args.lr.or(src.take("lr")?).unwrap_or(3e-3),
        epoch_day_fraction: args.day_fraction.or(src.take("day-fraction")?).unwrap_or(0.2),
        plateau_patience: args
            .plateau_patience
            .or(src.take("plateau-patience")?)
            .unwrap_or(2),
        plateau_factor: args
            .plateau_factor
            .or(src.take("plateau-factor")?)
            .unwrap_or(0.2),
        early_stop_patience: args.early_stop.or(src.take("early-stop")?).unwrap_or(5),
        max_epochs: args.max_epochs.or(src.take("max-epochs")?).unwrap_or(50),
        seed: args.seed.or(src.take("seed")?).unwrap_or(0),
    };
    let val_fraction = args.val_fraction.or(src.take("val-fraction")?).unwrap_or(0.2);
    let slots_text: Option<String> = args.slots.or(src.take("slots")?);
    let out = args
        .out
        .or(src.take("out")?)
        .ok_or_else(|| CliError::usage("missing required --out checkpoint path"))?;
    let log_path = args.log.or(src.take("log")?).unwrap_or_else(|| {
        let mut p = out.clone().into_os_string();
        p.push(".log.csv");
        PathBuf::from(p)
    });
    src.finish()?;
    train_cfg.validate()?;
    config.validate()?;

    let dataset = load_data(&data)?;
    let slots = match &slots_text {
        Some(text) => parse_list::<usize>(text, "slot")?,
        None => default_target_slots(dataset.frames_per_day(), 5),
    };
    let (train_days, val_days) = split_train_val(dataset.n_days(), val_fraction)?;

    print_header(
        "train",
        &[
            ("data", data.display().to_string()),
            ("model", model.clone()),
            ("layers", config.n_layers.to_string()),
            ("hidden", config.hidden_channels.to_string()),
            ("history", config.history.to_string()),
            ("kernel", config.kernel_size.to_string()),
            ("activation", config.activation.name().to_string()),
            ("hour-bins", n_hour_bins.to_string()),
            (
                "biases",
                match init {
                    ModelInit::Trb { combo, .. } | ModelInit::Masked { combo, .. } => combo.label(),
                },
            ),
            ("lr", train_cfg.learning_rate.to_string()),
            ("day-fraction", train_cfg.epoch_day_fraction.to_string()),
            ("plateau-patience", train_cfg.plateau_patience.to_string()),
            ("plateau-factor", train_cfg.plateau_factor.to_string()),
            ("early-stop", train_cfg.early_stop_patience.to_string()),
            ("max-epochs", train_cfg.max_epochs.to_string()),
            ("seed", train_cfg.seed.to_string()),
            ("val-fraction", val_fraction.to_string()),
            ("slots", fmt_list(&slots)),
            ("out", out.display().to_string()),
            ("log", log_path.display().to_string()),
        ],
    );

    let (params, log) = train(
        init,
        &dataset,
        &train_days,
        &val_days,
        &slots,
        n_hour_bins,
        &train_cfg,
    )?;

    save_checkpoint(&params, &out)?;
    crate::write_file(&log_path, log.to_csv().as_bytes())?;
    println!(
        "trained {} epochs; best epoch {} with validation MSE {:.6e}",
        log.epochs.len(),
        log.best_epoch,
        log.best_val_mse()
    );
    println!("checkpoint: {}", out.display());
    println!("log: {}", log_path.display());
    Ok(())
}

// ── eval ───────────────────────────────────────────────────────────────

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Baseline to evaluate (repeatable): zeros, naive, seasonal, average
    #[arg(long)]
    baseline: Vec<String>,
    /// Trained checkpoint to evaluate (repeatable)
    #[arg(long)]
    checkpoint: Vec<PathBuf>,
    /// Comma-separated per-day prediction slots
    #[arg(long)]
    slots: Option<String>,
    /// Trailing fraction of days used as the evaluation set
    #[arg(long = "eval-fraction")]
    eval_fraction: Option<f64>,
    #[arg(long = "hour-bins")]
    hour_bins: Option<usize>,
    /// Worker threads for evaluation
    #[arg(long)]
    threads: Option<usize>,
    /// Also write the table as CSV
    #[arg(long = "out-csv")]
    out_csv: Option<PathBuf>,
}

enum EvalMethod {
    Baseline(BaselineKind),
    Model(String, ModelParams),
}

fn run_eval(args: EvalArgs) -> Result<()> {
    let mut src = ConfigSource::load(args.config.as_ref())?;
    let data = args
        .data
        .or(src.take("data")?)
        .ok_or_else(|| CliError::usage("missing required --data path"))?;
    let baselines: Vec<String> = if args.baseline.is_empty() {
        src.take::<String>("baseline")?
            .map(|s| s.split(',').map(|p| p.trim().to_string()).collect())
            .unwrap_or_default()
    } else {
        let _ = src.take::<String>("baseline")?;
        args.baseline
    };
    let checkpoints: Vec<PathBuf> = if args.checkpoint.is_empty() {
        src.take::<String>("checkpoint")?
            .map(|s| s.split(',').map(|p| PathBuf::from(p.trim())).collect())
            .unwrap_or_default()
    } else {
        let _ = src.take::<String>("checkpoint")?;
        args.checkpoint
    };
    let slots_text: Option<String> = args.slots.or(src.take("slots")?);
    let eval_fraction = args
        .eval_fraction
        .or(src.take("eval-fraction")?)
        .unwrap_or(0.2);
    let n_hour_bins = args.hour_bins.or(src.take("hour-bins")?).unwrap_or(12);
    let threads = args.threads.or(src.take("threads")?).unwrap_or(1);
    let out_csv: Option<PathBuf> = args.out_csv.or(src.take("out-csv")?);
    src.finish()?;

    if baselines.is_empty() && checkpoints.is_empty() {
        return Err(CliError::usage(
            "nothing to evaluate: pass --baseline and/or --checkpoint",
        ));
    }
    if !(eval_fraction > 0.0 && eval_fraction < 1.0) {
        return Err(CliError::usage("eval-fraction must lie in (0, 1)"));
    }

    let dataset = load_data(&data)?;
    let mut methods = Vec::new();
    for name in &baselines {
        methods.push(EvalMethod::Baseline(BaselineKind::parse(name)?));
    }
    for path in &checkpoints {
        if !path.exists() {
            return Err(CliError::usage(format!(
                "checkpoint not found: {}",
                path.display()
            )));
        }
        let params = load_checkpoint(path)?;
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "model".into());
        methods.push(EvalMethod::Model(name, params));
    }

    let slots = match &slots_text {
        Some(text) => parse_list::<usize>(text, "slot")?,
        None => default_target_slots(dataset.frames_per_day(), 5),
    };

    // The evaluation set must give every requested method its context.
    let n_days = dataset.n_days();
    let n_eval = ((n_days as f64 * eval_fraction) + 0.5).round().max(1.0) as usize;
    let first_day = n_days.saturating_sub(n_eval);
    let min_day = methods
        .iter()
        .map(|m| match m {
            EvalMethod::Baseline(k) => k.min_day(),
            EvalMethod::Model(_, _) => 0,
        })
        .max()
        .unwrap_or(0);
    if first_day < min_day {
        return Err(CliError::usage(format!(
            "evaluation starts at day {first_day} but a requested method needs {min_day} prior days; grow the dataset or shrink --eval-fraction"
        )));
    }
    let days: Vec<usize> = (first_day..n_days).collect();
    let min_slot = methods
        .iter()
        .map(|m| match m {
            EvalMethod::Baseline(k) => k.min_slot(),
            EvalMethod::Model(_, p) => p.history(),
        })
        .max()
        .unwrap_or(0);
    let fpd = dataset.frames_per_day();
    for &s in &slots {
        if s < min_slot || s + 3 > fpd {
            return Err(CliError::usage(format!(
                "slot {s} lacks context for a requested method (needs {min_slot} prior frames and 3 target frames in a {fpd}-frame day)"
            )));
        }
    }

    print_header(
        "eval",
        &[
            ("data", data.display().to_string()),
            (
                "methods",
                methods
                    .iter()
                    .map(|m| match m {
                        EvalMethod::Baseline(k) => k.name().to_string(),
                        EvalMethod::Model(name, _) => name.clone(),
                    })
                    .collect::<Vec<_>>()
                    .join(","),
            ),
            ("days", format!("{first_day}..{n_days}")),
            ("slots", fmt_list(&slots)),
            ("hour-bins", n_hour_bins.to_string()),
            ("threads", threads.to_string()),
        ],
    );

    let pool = make_pool(threads)?;
    let mut table = MetricTable::new(vec![dataset.city_name.clone()], dataset.channels());
    for method in &methods {
        let (name, cells) = match method {
            EvalMethod::Baseline(kind) => (
                kind.name().to_string(),
                evaluate_parallel(&pool, baseline_predictor(*kind), &dataset, &days, &slots)?,
            ),
            EvalMethod::Model(name, params) => (
                name.clone(),
                evaluate_parallel(
                    &pool,
                    model_predictor(params, n_hour_bins),
                    &dataset,
                    &days,
                    &slots,
                )?,
            ),
        };
        table.push_row(name, cells)?;
    }

    print!("{}", table.to_markdown());
    if let Some(path) = out_csv {
        crate::write_file(&path, table.to_csv().as_bytes())?;
        println!("csv: {}", path.display());
    }
    Ok(())
}

// ── tune ───────────────────────────────────────────────────────────────

#[derive(Args, Debug)]
pub struct TuneArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Maximum epochs per configuration
    #[arg(long)]
    r: Option<usize>,
    /// Successive-halving reduction factor
    #[arg(long)]
    eta: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long = "val-fraction")]
    val_fraction: Option<f64>,
    #[arg(long)]
    slots: Option<String>,
    #[arg(long = "hour-bins")]
    hour_bins: Option<usize>,
    /// Activation used by every sampled model
    #[arg(long)]
    activation: Option<String>,
    #[arg(long = "day-fraction")]
    day_fraction: Option<f64>,
    #[arg(long = "plateau-patience")]
    plateau_patience: Option<usize>,
    #[arg(long = "plateau-factor")]
    plateau_factor: Option<f64>,
    #[arg(long = "early-stop")]
    early_stop: Option<usize>,
    #[arg(long = "lr-min")]
    lr_min: Option<f64>,
    #[arg(long = "lr-max")]
    lr_max: Option<f64>,
    /// Comma-separated layer counts to sample from
    #[arg(long = "layers-set")]
    layers_set: Option<String>,
    #[arg(long = "hidden-set")]
    hidden_set: Option<String>,
    #[arg(long = "kernel-set")]
    kernel_set: Option<String>,
    #[arg(long = "history-set")]
    history_set: Option<String>,
    /// Comma-separated bias combinations, e.g. "lxh+wxh+m,none"
    #[arg(long = "bias-set")]
    bias_set: Option<String>,
    /// Worker threads for trials within a rung
    #[arg(long)]
    threads: Option<usize>,
    /// Trace CSV output path
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Best-configuration output (train-compatible config file)
    #[arg(long = "best-out")]
    best_out: Option<PathBuf>,
}

fn run_tune(args: TuneArgs) -> Result<()> {
    let mut src = ConfigSource::load(args.config.as_ref())?;
    let data = args
        .data
        .or(src.take("data")?)
        .ok_or_else(|| CliError::usage("missing required --data path"))?;
    let r_max = args.r.or(src.take("r")?).unwrap_or(27);
    let eta = args.eta.or(src.take("eta")?).unwrap_or(3);
    let seed = args.seed.or(src.take("seed")?).unwrap_or(0);
    let val_fraction = args.val_fraction.or(src.take("val-fraction")?).unwrap_or(0.2);
    let n_hour_bins = args.hour_bins.or(src.take("hour-bins")?).unwrap_or(12);
    let activation = Activation::parse(
        &args
            .activation
            .or(src.take("activation")?)
            .unwrap_or_else(|| "elu".into()),
    )?;
    let base = TrainConfig {
        learning_rate: 1e-3, // replaced per trial
        epoch_day_fraction: args.day_fraction.or(src.take("day-fraction")?).unwrap_or(0.2),
        plateau_patience: args
            .plateau_patience
            .or(src.take("plateau-patience")?)
            .unwrap_or(2),
        plateau_factor: args
            .plateau_factor
            .or(src.take("plateau-factor")?)
            .unwrap_or(0.2),
        early_stop_patience: args.early_stop.or(src.take("early-stop")?).unwrap_or(5),
        max_epochs: 1, // replaced per trial
        seed,
    };
    let space = SearchSpace {
        learning_rate: (
            args.lr_min.or(src.take("lr-min")?).unwrap_or(1e-4),
            args.lr_max.or(src.take("lr-max")?).unwrap_or(1e-1),
        ),
        n_layers: match args.layers_set.or(src.take("layers-set")?) {
            Some(t) => parse_list(&t, "layers-set")?,
            None => vec![1, 2, 3],
        },
        hidden_channels: match args.hidden_set.or(src.take("hidden-set")?) {
            Some(t) => parse_list(&t, "hidden-set")?,
            None => vec![8, 16, 32],
        },
        kernel_size: match args.kernel_set.or(src.take("kernel-set")?) {
            Some(t) => parse_list(&t, "kernel-set")?,
            None => vec![1],
        },
        history: match args.history_set.or(src.take("history-set")?) {
            Some(t) => parse_list(&t, "history-set")?,
            None => vec![2, 4, 8],
        },
        bias_combos: match args.bias_set.or(src.take("bias-set")?) {
            Some(t) => t
                .split(',')
                .map(|p| BiasCombo::parse(p.trim()))
                .collect::<gridcast_core::Result<Vec<_>>>()?,
            None => vec![BiasCombo::ALL, BiasCombo::NONE],
        },
    };
    let threads = args.threads.or(src.take("threads")?).unwrap_or(1);
    let slots_text: Option<String> = args.slots.or(src.take("slots")?);
    let trace_path = args
        .trace
        .or(src.take("trace")?)
        .unwrap_or_else(|| PathBuf::from("hyperband_trace.csv"));
    let best_path = args
        .best_out
        .or(src.take("best-out")?)
        .unwrap_or_else(|| PathBuf::from("best_config.conf"));
    src.finish()?;
    space.validate()?;

    let dataset = load_data(&data)?;
    let slots = match &slots_text {
        Some(text) => parse_list::<usize>(text, "slot")?,
        None => default_target_slots(dataset.frames_per_day(), 5),
    };
    let (train_days, val_days) = split_train_val(dataset.n_days(), val_fraction)?;

    let schedule = hyperband_schedule(r_max, eta)?;
    let total_trials: usize = schedule.iter().map(|b| b.trial_count()).sum();

    print_header(
        "tune",
        &[
            ("data", data.display().to_string()),
            ("r", r_max.to_string()),
            ("eta", eta.to_string()),
            ("seed", seed.to_string()),
            ("brackets", schedule.len().to_string()),
            ("trials", total_trials.to_string()),
            ("lr-min", space.learning_rate.0.to_string()),
            ("lr-max", space.learning_rate.1.to_string()),
            ("layers-set", fmt_list(&space.n_layers)),
            ("hidden-set", fmt_list(&space.hidden_channels)),
            ("kernel-set", fmt_list(&space.kernel_size)),
            ("history-set", fmt_list(&space.history)),
            (
                "bias-set",
                space
                    .bias_combos
                    .iter()
                    .map(|c| c.label())
                    .collect::<Vec<_>>()
                    .join(","),
            ),
            ("slots", fmt_list(&slots)),
            ("threads", threads.to_string()),
            ("trace", trace_path.display().to_string()),
            ("best-out", best_path.display().to_string()),
        ],
    );

    let run_one = training_trial_runner(
        &dataset,
        &train_days,
        &val_days,
        &slots,
        n_hour_bins,
        activation,
        base,
    );
    let pool = make_pool(threads)?;
    let mut runner = PooledRunner::new(&pool, run_one);
    let result = run_search(&space, r_max, eta, seed, &mut runner)?;

    crate::write_file(&trace_path, trace_to_csv(&result.trace).as_bytes())?;
    let best = &result.best;
    let best_file = format!(
        "# best trial {} (bracket {}, budget {} epochs): validation MSE {:.6e}\n\
         model = tr+b\nlr = {}\nlayers = {}\nhidden = {}\nkernel = {}\nhistory = {}\nbiases = {}\n",
        best.trial_id,
        best.bracket,
        best.budget_epochs,
        best.val_mse,
        best.config.learning_rate,
        best.config.n_layers,
        best.config.hidden_channels,
        best.config.kernel_size,
        best.config.history,
        best.config.combo.label(),
    );
    crate::write_file(&best_path, best_file.as_bytes())?;

    println!(
        "ran {} trials; best validation MSE {:.6e} (trial {})",
        result.trace.len(),
        best.val_mse,
        best.trial_id
    );
    println!("trace: {}", trace_path.display());
    println!("best config: {}", best_path.display());
    Ok(())
}
