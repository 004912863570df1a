use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use dpok::harness::{compare, evaluate_against, resolve_output, run_experiment, EvalReport, ExperimentConfig};
use dpok::model::load_checkpoint;
use dpok::rewards::scenario_by_name;
use dpok::verify::verify_all;
use dpok::ScheduleSpec;

#[derive(Parser)]
#[command(name = "dpok", about = "Reward fine-tuning experiments for small diffusion models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a JSON config.
    Run { config: PathBuf },
    /// Side-by-side CSV of two or more JSON reports.
    Compare {
        #[arg(required = true, num_args = 2..)]
        reports: Vec<PathBuf>,
        /// Write the CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the numerical verification suite; exits nonzero on any failure.
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write the JSON report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a scenario.
    Eval {
        checkpoint: PathBuf,
        scenario: String,
        /// KL is measured against this checkpoint (default: the model itself).
        #[arg(long)]
        anchor: Option<PathBuf>,
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> dpok::Result<ExitCode> {
    match cli.command {
        Command::Run { config } => {
            let cfg = ExperimentConfig::from_json_file(&config)?;
            let report = run_experiment(&cfg)?;
            println!("{}", report.to_json()?);
            eprintln!("wrote {}", cfg.resolved_output_dir().display());
        }
        Command::Compare { reports, out } => {
            let reports = reports
                .iter()
                .map(|p| EvalReport::read(p))
                .collect::<dpok::Result<Vec<_>>>()?;
            let csv = compare(&reports)?.to_csv();
            match out {
                Some(path) => std::fs::write(resolve_output(&path), csv)?,
                None => print!("{csv}"),
            }
        }
        Command::Verify { seed, out } => {
            let suite = verify_all(seed)?;
            for r in &suite.reports {
                println!(
                    "{} {:<40} lhs={:+.6e} rhs={:+.6e} se={:.3e}",
                    if r.pass { "PASS" } else { "FAIL" },
                    r.name,
                    r.lhs,
                    r.rhs,
                    r.se
                );
            }
            if let Some(path) = out {
                std::fs::write(resolve_output(&path), serde_json::to_string_pretty(&suite)?)?;
            }
            if !suite.pass {
                return Ok(ExitCode::from(1));
            }
        }
        Command::Eval {
            checkpoint,
            scenario,
            anchor,
            n,
            seed,
        } => {
            let (snap, spec) = load_checkpoint(&checkpoint)?;
            let anchor = match anchor {
                Some(p) => load_checkpoint(&p)?.0,
                None => snap.clone(),
            };
            let scenario = scenario_by_name(&scenario)?;
            let schedule = spec.unwrap_or_else(ScheduleSpec::default).build()?;
            let metrics = evaluate_against(snap.view(), anchor.view(), &schedule, &scenario, n, seed)?;
            println!("{}", serde_json::to_string_pretty(&metrics)?);
        }
    }
    Ok(ExitCode::SUCCESS)
}
