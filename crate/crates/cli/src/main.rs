use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use riskfuse_core::data::{synth_generate, write_tables};
use riskfuse_core::pipeline::{
    aggregate, collect_reports, explain_case, run, run_seeds, score, write_run, write_scores,
    write_scores_to, DataSource, RunConfig, VARIANTS,
};
use riskfuse_core::{Error, ErrorKind};

#[derive(Parser)]
#[command(
    name = "riskfuse",
    version,
    about = "Calibrated, fairness-aware credit risk scoring"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Run configuration (JSON); defaults apply to omitted fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct InputArgs {
    /// Directory written by `run` (or its `models/` subdirectory).
    #[arg(long)]
    model_dir: PathBuf,
    /// Base table CSV.
    #[arg(long)]
    input: PathBuf,
    /// Auxiliary table CSVs.
    #[arg(long, num_args = 0..)]
    aux: Vec<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset as CSV tables.
    Synth(RunArgs),
    /// Train, evaluate and write models, scores, plots and the report.
    Run {
        #[command(flatten)]
        args: RunArgs,
        /// Repeat the run over this many consecutive seeds.
        #[arg(long)]
        seeds: Option<usize>,
    },
    /// Score a table with persisted models.
    Score {
        #[command(flatten)]
        input: InputArgs,
        /// Output CSV; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Attribute one case's GBDT margin to its features.
    Explain {
        #[command(flatten)]
        input: InputArgs,
        #[arg(long)]
        case_id: i64,
        /// Number of contributions to keep.
        #[arg(long, default_value_t = 10)]
        k: usize,
    },
    /// Aggregate the reports under a run directory and print a summary.
    Report {
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(args: &RunArgs) -> Result<RunConfig, Error> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::from_json_file(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn print_summary(dir: &Path) -> Result<(), Error> {
    let reports = collect_reports(dir)?;
    let agg = aggregate(&reports);
    println!(
        "{:<18} {:>9} {:>9} {:>9} {:>9} {:>9} {:>9}",
        "variant", "auc_roc", "auc_pr", "brier", "ece", "dp_gap", "drop"
    );
    for v in VARIANTS {
        let m = &agg.metrics[v];
        println!(
            "{:<18} {:>9.4} {:>9.4} {:>9.4} {:>9.4} {:>9.4} {:>9.4}",
            v,
            m["auc_roc"].mean,
            m["auc_pr"].mean,
            m["brier"].mean,
            m["ece"].mean,
            m["dp_gap"].mean,
            m["stability_drop"].mean
        );
    }
    let mut s = serde_json::to_string_pretty(&agg)?;
    s.push('\n');
    fs::write(dir.join("aggregate.json"), s)?;
    Ok(())
}

fn execute(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Synth(args) => {
            let cfg = load_config(&args)?;
            let DataSource::Synth { synth } = &cfg.data else {
                return Err(Error::Config(
                    "synth needs a config whose data source is synthetic".into(),
                ));
            };
            synth.validate()?;
            let ds = synth_generate(synth, cfg.seed)?;
            for p in write_tables(&ds, &args.out)? {
                println!("{}", p.display());
            }
        }
        Command::Run { args, seeds } => {
            let cfg = load_config(&args)?;
            match seeds {
                Some(n) if n > 1 => {
                    run_seeds(&cfg, n, &args.out)?;
                    print_summary(&args.out)?;
                }
                _ => {
                    let output = run(&cfg)?;
                    write_run(&args.out, &output)?;
                    print_summary(&args.out)?;
                }
            }
        }
        Command::Score { input, out } => {
            let rows = score(&input.model_dir, &input.input, &input.aux)?;
            match out {
                Some(p) => write_scores(&p, &rows)?,
                None => write_scores_to(std::io::stdout().lock(), &rows)?,
            }
        }
        Command::Explain { input, case_id, k } => {
            let a = explain_case(&input.model_dir, &input.input, &input.aux, case_id, k)?;
            println!("{}", serde_json::to_string_pretty(&a)?);
        }
        Command::Report { out } => print_summary(&out)?,
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.kind() {
                ErrorKind::Config => 2,
                ErrorKind::Data => 3,
                ErrorKind::Numerical => 4,
            })
        }
    }
}
