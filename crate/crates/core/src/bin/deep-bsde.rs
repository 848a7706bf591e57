use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use deep_bsde::harness::{emit_curves, emit_report, train, ExperimentConfig, ReportFormat};
use deep_bsde::oracles::reference_estimate;
use deep_bsde::optim::OptimizerKind;
use deep_bsde::problems::by_name;
use deep_bsde::Error;

#[derive(Parser)]
#[command(name = "deep-bsde", version, about = "Deep BSDE solver for semilinear parabolic PDEs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum OptimizerArg {
    Adam,
    Sgd,
}

#[derive(Subcommand)]
enum Command {
    /// Train the solver on a benchmark problem and write reports.
    Solve {
        problem: String,
        #[arg(long)]
        iterations: Option<u64>,
        #[arg(long)]
        runs: Option<usize>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        checkpoint_every: Option<u64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long, value_enum)]
        optimizer: Option<OptimizerArg>,
        #[arg(long)]
        no_batch_norm: bool,
        /// JSON experiment configuration; flags override its values.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Compute the independent reference value of a problem.
    Oracle {
        problem: String,
        #[arg(long, default_value_t = 1_000_000)]
        samples: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::NonFinite { .. } | Error::NonFiniteInput(_) => 3,
        _ => 2,
    }
}

fn run(cli: Cli) -> Result<u8, Error> {
    match cli.command {
        Command::Oracle { problem, samples, seed } => {
            let spec = by_name(&problem)?;
            let est = reference_estimate(&spec, samples, seed)?;
            println!("{}", serde_json::to_string(&est)?);
            Ok(0)
        }
        Command::Solve {
            problem,
            iterations,
            runs,
            batch,
            seed,
            checkpoint_every,
            out,
            optimizer,
            no_batch_norm,
            config,
        } => {
            let mut cfg = match config {
                Some(path) => ExperimentConfig::from_json_file(&path)?,
                None => ExperimentConfig::new(problem.clone()),
            };
            cfg.problem = problem;
            cfg.iterations = iterations.or(cfg.iterations);
            cfg.runs = runs.unwrap_or(cfg.runs);
            cfg.batch = batch.unwrap_or(cfg.batch);
            cfg.seed = seed.unwrap_or(cfg.seed);
            cfg.checkpoint_every = checkpoint_every.unwrap_or(cfg.checkpoint_every);
            if let Some(o) = optimizer {
                cfg.optimizer = match o {
                    OptimizerArg::Adam => OptimizerKind::Adam,
                    OptimizerArg::Sgd => OptimizerKind::Sgd,
                };
            }
            if no_batch_norm {
                cfg.use_batch_norm = false;
            }
            let exp = train(&cfg)?;
            std::fs::create_dir_all(&out).map_err(|e| Error::Io { path: out.clone(), source: e })?;
            emit_report(&exp.report, ReportFormat::Csv, &out.join("report.csv"))?;
            emit_report(&exp.report, ReportFormat::Json, &out.join("report.json"))?;
            emit_curves(&exp.curves(), &out.join("curve"))?;
            for r in &exp.report.rows {
                let err = r.rel_l1_err.map(|e| format!("{e:.5}")).unwrap_or_else(|| "-".into());
                eprintln!(
                    "step {:>6}  u0 {:.6} ± {:.6}  rel.err {}  loss {:.6}  {:.1}s",
                    r.step, r.mean_u, r.std_u, err, r.loss_mean, r.runtime_s
                );
            }
            let failed: Vec<_> = exp.report.failures().collect();
            for f in &failed {
                let why = f.failure.as_ref().expect("filtered");
                eprintln!("run {} aborted at iteration {}: {}", f.run, why.step, why.message);
            }
            Ok(if failed.is_empty() { 0 } else { 3 })
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
