use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use balnorm::autodiff::GradCheckOptions;
use balnorm::check::{gradcheck_suite, run_checks, CheckOptions, Injection};
use balnorm::metrics::{aggregate, read_metrics_csv, write_aggregate_csv, write_metrics_csv};
use balnorm::model::NormKind;
use balnorm::optim::ScheduleSpec;
use balnorm::tensor::PaddingMode;
use balnorm::train::{train, DataSource, DecayScope, TrainConfig};
use balnorm::Error;

const EXIT_FAILED: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

#[derive(Parser)]
#[command(name = "balnorm", version, about = "Balanced weight normalization: training, invariant checks and gradient checks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a TinyNet and write per-epoch metrics.
    Train(TrainArgs),
    /// Run the invariant catalog over random layer configurations.
    Check(CheckArgs),
    /// Compare analytic and finite-difference gradients.
    Gradcheck(GradcheckArgs),
    /// Combine per-run metrics CSVs into median and quartile bands.
    Aggregate(AggregateArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// balnorm, balnorm-two-pass, batchnorm or none
    #[arg(long, default_value = "balnorm", value_parser = parse_norm)]
    norm: NormKind,
    /// synth, synth:<classes> or cifar10:<dir>
    #[arg(long, default_value = "synth", value_parser = parse_dataset)]
    dataset: DataSource,
    /// Training instances [default: 4000 for synth, 5000 for cifar10]
    #[arg(long)]
    subset: Option<usize>,
    /// Test instances
    #[arg(long, default_value_t = 1000)]
    test_size: usize,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 128)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.1)]
    lr: f64,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    #[arg(long, default_value_t = 1e-4)]
    weight_decay: f64,
    /// Parameters weight decay applies to
    #[arg(long, value_enum, default_value_t = Scope::All)]
    decay_scope: Scope,
    /// step:<e1,e2,...> (divide by 10 at each milestone) or onecycle
    #[arg(long, default_value = "step:150,225", value_parser = parse_schedule)]
    schedule: ScheduleSpec,
    /// Fraction of each batch the input sums are taken from
    #[arg(long, default_value_t = 1.0)]
    stat_fraction: f64,
    /// Beta(alpha, alpha) mixing; 0 disables mixup
    #[arg(long, default_value_t = 0.0)]
    mixup_alpha: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Per-epoch metrics CSV
    #[arg(long, default_value = "metrics.csv")]
    out: PathBuf,
    /// Write the trained network here, plus a .manifest file [default: none]
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Padding::Cyclic)]
    padding: Padding,
    /// Treat the input sums as constants in the backward pass [default: off]
    #[arg(long)]
    stop_grad_v: bool,
    /// Record elapsed seconds in the CSV instead of 0 [default: off]
    #[arg(long)]
    record_time: bool,
}

#[derive(Args)]
struct CheckArgs {
    /// Random configurations per invariant
    #[arg(long, default_value_t = 100)]
    configs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = Padding::Cyclic)]
    padding: Padding,
    /// Deliberately break the generated kernels [default: none]
    #[arg(long, value_enum)]
    inject: Option<Inject>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Check the function in which the input sums are held constant [default: off]
    #[arg(long)]
    stop_grad_v: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Central-difference step
    #[arg(long, default_value_t = 1e-6)]
    h: f64,
    /// Largest acceptable relative error
    #[arg(long, default_value_t = 1e-5)]
    tolerance: f64,
}

#[derive(Args)]
struct AggregateArgs {
    /// Per-run metrics CSVs
    #[arg(required = true)]
    paths: Vec<PathBuf>,
    /// Band CSV [default: standard output]
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Padding {
    Cyclic,
    Zero,
}

impl From<Padding> for PaddingMode {
    fn from(p: Padding) -> Self {
        match p {
            Padding::Cyclic => PaddingMode::Cyclic,
            Padding::Zero => PaddingMode::Zero,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Scope {
    All,
    Weights,
}

#[derive(Clone, Copy, ValueEnum)]
enum Inject {
    AllPositiveChannel,
}

fn parse_norm(s: &str) -> Result<NormKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_schedule(s: &str) -> Result<ScheduleSpec, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_dataset(s: &str) -> Result<DataSource, String> {
    match s.split_once(':') {
        None if s == "synth" => Ok(DataSource::Synth { classes: 4 }),
        Some(("synth", k)) => k
            .parse()
            .ok()
            .filter(|&k: &usize| k >= 1)
            .map(|classes| DataSource::Synth { classes })
            .ok_or_else(|| format!("bad class count {k:?}")),
        Some(("cifar10", dir)) if !dir.is_empty() => Ok(DataSource::Cifar10(PathBuf::from(dir))),
        _ => Err(format!("expected synth, synth:<classes> or cifar10:<dir>, got {s:?}")),
    }
}

fn exit_for(err: &Error) -> ExitCode {
    eprintln!("error: {err}");
    if let Error::Layer { layer, .. } = err {
        eprintln!("failing layer: {layer}");
    }
    ExitCode::from(if err.is_numerical() { EXIT_NUMERICAL } else { EXIT_CONFIG })
}

fn create(path: &Path) -> Result<BufWriter<File>, Error> {
    Ok(BufWriter::new(File::create(path)?))
}

fn cmd_train(args: TrainArgs) -> ExitCode {
    let cfg = TrainConfig {
        norm: args.norm,
        data: args.dataset,
        subset: args.subset,
        test_size: args.test_size,
        epochs: args.epochs,
        batch_size: args.batch_size,
        lr: args.lr,
        momentum: args.momentum,
        weight_decay: args.weight_decay,
        decay_scope: match args.decay_scope {
            Scope::All => DecayScope::All,
            Scope::Weights => DecayScope::Weights,
        },
        schedule: args.schedule,
        stat_fraction: args.stat_fraction,
        mixup_alpha: args.mixup_alpha,
        padding: args.padding.into(),
        stop_grad_v: args.stop_grad_v,
        seed: args.seed,
        record_time: args.record_time,
        ..Default::default()
    };
    let run = || -> Result<(), Error> {
        cfg.validate()?;
        let (train_set, test_set) = cfg.load_data()?;
        let outcome = train(&cfg, &train_set, &test_set, |r| {
            eprintln!(
                "epoch {:>3}  lr {:.4}  train loss {:.4} acc {:.4}  test loss {:.4} acc {:.4}",
                r.epoch, r.lr, r.train_loss, r.train_acc, r.test_loss, r.test_acc
            );
        })?;
        let mut out = create(&args.out)?;
        write_metrics_csv(&mut out, &outcome.metrics)?;
        out.flush()?;
        if let Some(path) = &args.checkpoint {
            outcome.network.save_checkpoint(path)?;
        }
        Ok(())
    };
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => exit_for(&e),
    }
}

fn cmd_check(args: CheckArgs) -> ExitCode {
    if args.configs == 0 {
        eprintln!("error: --configs must be positive");
        return ExitCode::from(EXIT_CONFIG);
    }
    let report = run_checks(&CheckOptions {
        configs: args.configs,
        seed: args.seed,
        padding: args.padding.into(),
        inject: args.inject.map(|Inject::AllPositiveChannel| Injection::AllPositiveChannel),
    });
    print!("{report}");
    match report.first_failure() {
        None => ExitCode::SUCCESS,
        Some(r) => {
            eprintln!("first failing invariant: {} ({})", r.name, r.detail);
            ExitCode::from(EXIT_FAILED)
        }
    }
}

fn cmd_gradcheck(args: GradcheckArgs) -> ExitCode {
    let opts = GradCheckOptions {
        h: args.h,
        tolerance: args.tolerance,
        seed: args.seed,
        ..Default::default()
    };
    let scenarios = match gradcheck_suite(args.stop_grad_v, args.seed, &opts) {
        Ok(s) => s,
        Err(e) => return exit_for(&e),
    };
    println!("{:<26} {:>8} {:>13} {:>9}", "scenario", "status", "max rel err", "excluded");
    let mut worst: Option<(String, usize, usize, f64, f64, f64)> = None;
    for s in &scenarios {
        let r = &s.report;
        let status = if r.passed { "PASS" } else { "FAIL" };
        println!("{:<26} {:>8} {:>13.3e} {:>9}", s.name, status, r.max_rel_error(), r.excluded());
        for (i, p) in r.params.iter().enumerate() {
            if let Some((coord, a, n)) = p.worst {
                if !r.passed && worst.as_ref().map_or(true, |w| p.max_rel_error > w.3) {
                    worst = Some((s.name.clone(), i, coord, p.max_rel_error, a, n));
                }
            }
        }
    }
    match worst {
        None if scenarios.iter().all(|s| s.report.passed) => ExitCode::SUCCESS,
        None => ExitCode::from(EXIT_FAILED),
        Some((name, param, coord, err, a, n)) => {
            eprintln!(
                "worst coordinate: {name}, parameter {param}, index {coord}: relative error {err:.3e} (analytic {a:.6e}, numeric {n:.6e})"
            );
            ExitCode::from(EXIT_FAILED)
        }
    }
}

fn cmd_aggregate(args: AggregateArgs) -> ExitCode {
    let run = || -> Result<(), Error> {
        let runs = args
            .paths
            .iter()
            .map(|p| {
                File::open(p)
                    .map_err(Error::from)
                    .and_then(read_metrics_csv)
                    .map_err(|e| Error::Format(format!("{}: {e}", p.display())))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let bands = aggregate(&runs).map_err(|e| match e {
            Error::MisalignedEpochs { runs } => Error::Config(format!(
                "epoch grids differ from {}: {}",
                args.paths[0].display(),
                runs.iter().map(|&i| args.paths[i].display().to_string()).collect::<Vec<_>>().join(", ")
            )),
            other => other,
        })?;
        match &args.out {
            Some(path) => {
                let mut out = create(path)?;
                write_aggregate_csv(&mut out, &bands)?;
                out.flush()?;
            }
            None => write_aggregate_csv(io::stdout().lock(), &bands)?,
        }
        Ok(())
    };
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_CONFIG)
        }
    }
}

fn init_threads() -> Result<(), String> {
    let threads = match std::env::var("BALNORM_THREADS") {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n >= 1)
            .ok_or_else(|| format!("BALNORM_THREADS must be a positive integer, got {v:?}"))?,
        Err(_) => 1,
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(msg) = init_threads() {
        eprintln!("error: {msg}");
        return ExitCode::from(EXIT_CONFIG);
    }
    match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Check(a) => cmd_check(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Aggregate(a) => cmd_aggregate(a),
    }
}
