use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use mploc::pipeline::{load_scenario, run_scenario, summary_csv, write_report, PipelineError, Scenario};

#[derive(Parser)]
#[command(name = "mploc", version, about = "Multipath-assisted localization simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the Monte-Carlo simulation and write CSV reports.
    Run {
        scenario: PathBuf,
        /// Output directory.
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Override the number of runs.
        #[arg(long)]
        runs: Option<usize>,
        /// Override the master seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Check a scenario file and report unknown keys.
    Validate { scenario: PathBuf },
    /// Print the physical and virtual anchors of a scenario.
    Vas { scenario: PathBuf },
}

fn exit_code(err: &PipelineError) -> u8 {
    match err.category() {
        "io" => 3,
        "parse" => 4,
        "validation" => 5,
        _ => 6,
    }
}

fn load(path: &Path) -> Result<Scenario, PipelineError> {
    let (scenario, report) = load_scenario(path)?;
    for key in &report.unknown_keys {
        eprintln!("warning: unknown key `{key}` ignored");
    }
    Ok(scenario)
}

fn execute(cmd: Command) -> Result<(), PipelineError> {
    match cmd {
        Command::Run {
            scenario,
            out,
            runs,
            seed,
        } => {
            let mut s = load(&scenario)?;
            if let Some(r) = runs {
                if r == 0 {
                    return Err(PipelineError::Invalid {
                        key: "--runs".into(),
                        message: "must be >= 1".into(),
                    });
                }
                s.runs = r;
            }
            if let Some(seed) = seed {
                s.seed = seed;
            }
            let report = run_scenario(&s)?;
            for path in write_report(&report, &out)? {
                eprintln!("wrote {}", path.display());
            }
            print!("{}", summary_csv(&report));
        }
        Command::Validate { scenario } => {
            let s = load(&scenario)?;
            println!(
                "ok: {} walls, {} anchors, {} steps, {} runs",
                s.plan.walls().len(),
                s.pas.len(),
                s.trajectory.len(),
                s.runs
            );
        }
        Command::Vas { scenario } => {
            let s = load(&scenario)?;
            let anchors = s.anchors().map_err(|e| PipelineError::Invalid {
                key: "walls".into(),
                message: e.to_string(),
            })?;
            println!("pa,anchor,order,x_m,y_m");
            for a in anchors.iter().flatten() {
                println!(
                    "{},{},{},{:.6},{:.6}",
                    a.parent_pa,
                    a.id,
                    a.order(),
                    a.position.x,
                    a.position.y
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.category());
            ExitCode::from(exit_code(&e))
        }
    }
}
