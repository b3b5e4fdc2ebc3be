//! `ge`: counting, training, evaluation, gradient checks and feature analysis.

mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use gather_excite::analysis;
use gather_excite::cost;
use gather_excite::gradcheck::{self, Precision};
use gather_excite::train::{self, metrics, Checkpoint, EpochMetrics, Trainer};
use gather_excite::zoo::{ArchSpec, GePlacement, Model, Order, Probes};
use gather_excite::Error;

use config::RunConfig;

const EXIT_CONFIG: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

#[derive(Parser)]
#[command(name = "ge", version, about = "Gather-excite networks: cost, training and analysis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print parameter and multiply-accumulate counts of an architecture.
    Count {
        /// Family or preset, e.g. resnet50, resnet101, cifar-resnet-110, wrn-16-8.
        #[arg(long)]
        arch: String,
        /// GE placement, e.g. theta:global:all or theta-plus:e8:stage3,stage4.
        #[arg(long)]
        ge: Option<GePlacement>,
        /// Square input side in pixels.
        #[arg(long)]
        input_size: Option<usize>,
        /// Divide every stage width by this factor.
        #[arg(long)]
        width_divisor: Option<usize>,
        /// Print the report as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Train the configured model, writing metrics and checkpoints to the run directory.
    Train {
        config: PathBuf,
        /// Continue from a checkpoint written by the same configuration.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Top-1 and top-5 error of a checkpoint on the test split.
    Eval {
        config: PathBuf,
        /// Defaults to the run's last checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Finite-difference gradient checks.
    #[command(group = clap::ArgGroup::new("target").required(true).multiple(true))]
    Gradcheck {
        /// Operator name, or `all`.
        #[arg(long, group = "target")]
        op: Option<String>,
        /// Assembled GE unit name, or `all`.
        #[arg(long, group = "target")]
        model: Option<String>,
        #[arg(long, value_enum, default_value_t = PrecisionArg::Single)]
        precision: PrecisionArg,
    },
    /// Class selectivity histogram of a post-activation layer.
    Selectivity {
        config: PathBuf,
        /// Layer name such as conv4-6-relu.
        #[arg(long)]
        layer: String,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Accuracy while zeroing a block's gated channels by gate importance.
    Prune {
        config: PathBuf,
        /// Block name such as conv5-1.
        #[arg(long)]
        block: String,
        #[arg(long, value_enum, default_value_t = Orders::Both)]
        orders: Orders,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum PrecisionArg {
    Single,
    Double,
}

#[derive(Clone, Copy, ValueEnum)]
enum Orders {
    Ascending,
    Descending,
    Both,
}

impl Orders {
    fn list(self) -> Vec<Order> {
        match self {
            Orders::Ascending => vec![Order::Ascending],
            Orders::Descending => vec![Order::Descending],
            Orders::Both => vec![Order::Ascending, Order::Descending],
        }
    }
}

/// Why a command stopped.
enum Failure {
    Error(Error),
    /// Gradient checks ran but some failed.
    Checks,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Error(e)
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::NonFinite { .. } | Error::State(_) => EXIT_NUMERIC,
        _ => EXIT_CONFIG,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Checks) => ExitCode::from(EXIT_NUMERIC),
        Err(Failure::Error(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::Count {
            arch,
            ge,
            input_size,
            width_divisor,
            json,
        } => count(&arch, ge, input_size, width_divisor, json)?,
        Command::Train { config, resume } => train(&config, resume.as_deref())?,
        Command::Eval { config, checkpoint } => eval(&config, checkpoint)?,
        Command::Gradcheck { op, model, precision } => return run_gradcheck(op, model, precision),
        Command::Selectivity {
            config,
            layer,
            checkpoint,
        } => selectivity(&config, &layer, checkpoint)?,
        Command::Prune {
            config,
            block,
            orders,
            checkpoint,
        } => prune(&config, &block, orders, checkpoint)?,
    }
    Ok(())
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.into(),
        source,
    }
}

fn count(
    arch: &str,
    ge: Option<GePlacement>,
    input_size: Option<usize>,
    width_divisor: Option<usize>,
    json: bool,
) -> Result<(), Error> {
    let mut spec = ArchSpec::preset(arch)?;
    if let Some(s) = input_size {
        spec.input = [spec.input[0], s, s];
    }
    if let Some(d) = width_divisor {
        spec.width_divisor = d;
    }
    if let Some(p) = &ge {
        p.validate(&spec)?;
    }
    let report = cost::count(&spec, ge.as_ref())?;
    if json {
        println!("{}", report.to_json());
    } else {
        print!("{}", report.to_text());
    }
    Ok(())
}

fn checkpoint_dir(cfg: &RunConfig) -> PathBuf {
    cfg.run_dir().join("checkpoints")
}

fn last_checkpoint(cfg: &RunConfig) -> PathBuf {
    checkpoint_dir(cfg).join("last.gekt")
}

fn analysis_dir(cfg: &RunConfig) -> Result<PathBuf, Error> {
    let dir = cfg.run_dir().join("analysis");
    fs::create_dir_all(&dir).map_err(io(&dir))?;
    Ok(dir)
}

/// Keeps the header and rows up to `epoch`.
fn truncate_metrics(path: &Path, epoch: usize) -> Result<(), Error> {
    let Ok(text) = fs::read_to_string(path) else {
        return Ok(());
    };
    let mut rows = Vec::new();
    for line in text.lines().skip(1).filter(|l| !l.is_empty()) {
        let row = EpochMetrics::parse_row(line)?;
        if row.epoch <= epoch {
            rows.push(row);
        }
    }
    fs::write(path, metrics::metrics_csv(&rows)).map_err(io(path))
}

fn train(config: &Path, resume: Option<&Path>) -> Result<(), Error> {
    let cfg = RunConfig::load(config)?;
    let resumed = resume.map(Checkpoint::load).transpose()?;
    let experiment = cfg.experiment();
    if let Some(ck) = &resumed {
        if ck.config_echo != experiment.echo() {
            return Err(Error::Config(format!(
                "checkpoint was written by a different configuration than {}",
                config.display()
            )));
        }
    }
    let data = cfg.load_data()?;
    let dir = cfg.run_dir();
    let ckdir = checkpoint_dir(&cfg);
    fs::create_dir_all(&ckdir).map_err(io(&ckdir))?;
    let cfg_path = dir.join("config.toml");
    fs::write(&cfg_path, cfg.to_toml()).map_err(io(&cfg_path))?;

    let metrics_path = dir.join("metrics.csv");
    let mut trainer = match &resumed {
        Some(ck) => {
            let t = Trainer::from_checkpoint(ck)?;
            truncate_metrics(&metrics_path, t.epoch())?;
            t
        }
        None => {
            if metrics_path.exists() {
                fs::remove_file(&metrics_path).map_err(io(&metrics_path))?;
            }
            Trainer::new(experiment)?
        }
    };
    eprintln!(
        "training {} for {} epochs on {} images ({} test)",
        cfg.name,
        cfg.train.epochs,
        data.train.len(),
        data.test.len()
    );
    println!("{}", metrics::CSV_HEADER);
    while !trainer.is_done() {
        let row = trainer.run_epoch(&data.train, &data.test, &data.stats)?;
        metrics::append_metrics(&metrics_path, &row)?;
        println!("{}", row.csv_row());
        let every = cfg.train.checkpoint_every;
        if trainer.is_done() || every.is_some_and(|k| row.epoch % k == 0) {
            let ck = trainer.checkpoint();
            ck.save(&ckdir.join(format!("epoch-{:04}.gekt", row.epoch)))?;
            ck.save(&last_checkpoint(&cfg))?;
        }
    }
    if let Some(l) = trainer.initial_loss {
        eprintln!("initial batch loss {l}");
    }
    Ok(())
}

/// Config, trained model and data for the analysis commands.
fn restore(config: &Path, checkpoint: Option<PathBuf>) -> Result<(RunConfig, Model<f32>, config::Splits), Error> {
    let cfg = RunConfig::load(config)?;
    let path = checkpoint.unwrap_or_else(|| last_checkpoint(&cfg));
    let ck = Checkpoint::load(&path)?;
    let model = train::load_model(&ck)?;
    if model.arch() != &cfg.arch || model.placement() != cfg.placement.as_ref() {
        return Err(Error::Config(format!(
            "{} holds a different architecture than {}",
            path.display(),
            config.display()
        )));
    }
    let data = cfg.load_data()?;
    Ok((cfg, model, data))
}

fn eval(config: &Path, checkpoint: Option<PathBuf>) -> Result<(), Error> {
    let (cfg, model, data) = restore(config, checkpoint)?;
    let e = train::evaluate(
        &model,
        &data.test,
        &data.stats,
        cfg.train.eval_batch,
        &Probes::default(),
    )?;
    let text = format!("top1,top5\n{},{}\n", e.top1, e.top5);
    let path = analysis_dir(&cfg)?.join("eval.csv");
    fs::write(&path, &text).map_err(io(&path))?;
    print!("{text}");
    Ok(())
}

fn selectivity(config: &Path, layer: &str, checkpoint: Option<PathBuf>) -> Result<(), Error> {
    let (cfg, model, data) = restore(config, checkpoint)?;
    let h = analysis::class_selectivity(&model, &data.test, &data.stats, layer, cfg.train.eval_batch)?;
    let path = analysis_dir(&cfg)?.join(format!("selectivity-{layer}.csv"));
    h.export(&path)?;
    println!("bin_lo,count");
    for (i, n) in h.bins().iter().enumerate() {
        println!("{},{n}", i as f64 / analysis::BINS as f64);
    }
    eprintln!("wrote {}", path.display());
    Ok(())
}

fn prune(config: &Path, block: &str, orders: Orders, checkpoint: Option<PathBuf>) -> Result<(), Error> {
    let (cfg, model, data) = restore(config, checkpoint)?;
    let curves = orders
        .list()
        .into_iter()
        .map(|o| analysis::prune_curve(&model, &data.test, &data.stats, block, o, cfg.train.eval_batch))
        .collect::<Result<Vec<_>, _>>()?;
    let path = analysis_dir(&cfg)?.join(format!("prune-{block}.csv"));
    analysis::export_curves(&curves, &path)?;
    print!("{}", analysis::curves_csv(&curves));
    eprintln!("wrote {}", path.display());
    Ok(())
}

fn select<'a>(arg: &str, names: &[&'a str]) -> Result<Vec<&'a str>, Error> {
    if arg == "all" {
        return Ok(names.to_vec());
    }
    names
        .iter()
        .find(|&&n| n == arg)
        .map(|&n| vec![n])
        .ok_or_else(|| Error::Usage(format!("unknown check `{arg}`; known: {}", names.join(", "))))
}

fn run_gradcheck(op: Option<String>, model: Option<String>, precision: PrecisionArg) -> Result<(), Failure> {
    let mut names = Vec::new();
    if let Some(op) = &op {
        names.extend(select(op, gradcheck::OP_NAMES)?);
    }
    if let Some(m) = &model {
        names.extend(select(m, gradcheck::UNIT_NAMES)?);
    }
    let precision = match precision {
        PrecisionArg::Single => Precision::Single,
        PrecisionArg::Double => Precision::Double,
    };
    let mut failed = 0;
    for name in names {
        let r = gradcheck::run_named(name, precision)?;
        println!(
            "{} {name}: {}/{} within tolerance, max rel {:.2e}",
            if r.passed { "PASS" } else { "FAIL" },
            r.within,
            r.checked,
            r.max_rel
        );
        if !r.passed {
            failed += 1;
            for c in &r.failing {
                println!(
                    "  input {} index {}: analytic {:e} numeric {:e} rel {:.2e}",
                    c.input, c.index, c.analytic, c.numeric, c.rel
                );
            }
        }
    }
    if failed > 0 {
        eprintln!("{failed} gradient check(s) failed");
        return Err(Failure::Checks);
    }
    Ok(())
}
