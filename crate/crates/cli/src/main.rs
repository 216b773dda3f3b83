use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use twin_core::exec::{with_threads, Execution};
use twin_core::experiment::{cmd_costs, cmd_generate, cmd_run, failure_report_path, Donors, ExperimentConfig};
use twin_core::federation::check_step_size;
use twin_core::twin::{OpKind, TrainMode, TwinCheckpoint, TwinOp};
use twin_core::Error;

#[derive(Parser)]
#[command(name = "twin", version, about = "Multi-modal network twins: federated mapping, transfer, merge and split")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic dataset CSVs and a manifest.
    Generate(Common),
    /// Map donors and run every configured op for every fusor and seed.
    Run(Common),
    /// Run a single transfer.
    Transfer(OpArgs),
    /// Run a single merge.
    Merge(OpArgs),
    /// Run a single split.
    Split(OpArgs),
    /// Closed-form federated and centralized byte counts.
    Costs(Common),
    /// Evaluate the local step-size bound for given constants.
    CheckBound(BoundArgs),
}

#[derive(Args)]
struct Common {
    /// JSON config (or a previous run's manifest.json).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory; defaults to the config's `output`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the world seed and runs this single training seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
}

#[derive(Args)]
struct OpArgs {
    #[command(flatten)]
    common: Common,
    /// Op spec, e.g. `V->W`, `V+W->S`, `S->V,W`.
    #[arg(long)]
    op: TwinOp,
    /// Donor twin checkpoints; donors are mapped from scratch when omitted.
    #[arg(long = "donor")]
    donors: Vec<PathBuf>,
}

#[derive(Args)]
struct BoundArgs {
    #[arg(long)]
    g: f64,
    #[arg(long)]
    l: f64,
    #[arg(long)]
    mu: f64,
    #[arg(long)]
    beta: f64,
    #[arg(long)]
    eta: f64,
    /// Local rate to test against the bound.
    #[arg(long)]
    local_lr: Option<f64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Unified,
    Specific,
}

impl From<ModeArg> for TrainMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Unified => TrainMode::Unified,
            ModeArg::Specific => TrainMode::Specific,
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Divergence { .. } | Error::BoundViolation { .. } => 2,
        Error::Io { .. } | Error::Csv(_) => 3,
        _ => 1,
    }
}

fn load(common: &Common) -> Result<(ExperimentConfig, PathBuf), Error> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg = cfg.with_seed(s);
    }
    if let Some(m) = common.mode {
        cfg.mode = m.into();
    }
    if let Some(out) = &common.out {
        cfg.output = out.clone();
    }
    cfg.validate()?;
    let out = cfg.output.clone();
    Ok((cfg, out))
}

fn threaded<R: Send>(threads: Option<usize>, f: impl FnOnce() -> R + Send) -> R {
    match threads {
        Some(n) => with_threads(n, f),
        None => f(),
    }
}

fn run(cfg: &ExperimentConfig, out: &Path, donors: Donors, threads: Option<usize>) -> Result<(), Error> {
    let outcome = threaded(threads, || cmd_run(cfg, out, donors, Execution::Parallel));
    match outcome {
        Ok(o) => {
            for r in &o.results {
                println!("{}\t{}\tseed {}\tnmse {:.4}", r.fusor, r.op, r.seed, r.nmse);
            }
            println!("wrote {} files to {}", o.files.len(), out.display());
            Ok(())
        }
        Err(e) => {
            if let Some(p) = failure_report_path(out, &e) {
                eprintln!("failure report: {}", p.display());
            }
            Err(e)
        }
    }
}

fn single_op(kind: OpKind, args: OpArgs) -> Result<(), Error> {
    if args.op.kind() != kind {
        return Err(Error::Config(format!("`{}` is not a {kind:?} op", args.op)));
    }
    let (mut cfg, out) = load(&args.common)?;
    cfg.ops = vec![args.op];
    let donors = if args.donors.is_empty() {
        Donors::Train
    } else {
        let twins = args
            .donors
            .iter()
            .map(|p| TwinCheckpoint::read(p)?.to_twin())
            .collect::<Result<Vec<_>, _>>()?;
        cfg.twin.fusor = twins[0].fusor;
        cfg.twin.fusors = None;
        Donors::Given(twins)
    };
    run(&cfg, &out, donors, args.common.threads)
}

fn dispatch(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Generate(c) => {
            let (cfg, out) = load(&c)?;
            let files = cmd_generate(&cfg, &out)?;
            println!("wrote {} files to {}", files.len(), out.display());
            Ok(())
        }
        Command::Run(c) => {
            let (cfg, out) = load(&c)?;
            run(&cfg, &out, Donors::Train, c.threads)
        }
        Command::Transfer(a) => single_op(OpKind::Transfer, a),
        Command::Merge(a) => single_op(OpKind::Merge, a),
        Command::Split(a) => single_op(OpKind::Split, a),
        Command::Costs(c) => {
            let (cfg, out) = load(&c)?;
            for (label, l) in cmd_costs(&cfg, &out)? {
                println!("{label}\t{:?}\t{} bytes", l.mode, l.total_bytes());
            }
            Ok(())
        }
        Command::CheckBound(b) => {
            let bound = check_step_size(b.g, b.l, b.mu, b.beta, b.eta)?;
            println!("{}", serde_json::to_string_pretty(&bound)?);
            match b.local_lr {
                Some(lr) if !bound.admits(lr) => Err(Error::BoundViolation {
                    local_lr: lr,
                    bound: bound.bound,
                }),
                Some(lr) => {
                    println!("local rate {lr} admitted");
                    Ok(())
                }
                None => Ok(()),
            }
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("TWIN_LOG", "warn")).init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
