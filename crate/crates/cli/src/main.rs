use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use qbsde_cli::commands::{
    bounds_text, load, run_bounds, run_solve, run_validate, write_outputs, CliError, SolveFlags, EXIT_FAILURE,
};
use qbsde_cli::config::PlanKind;
use qbsde_cli::verify::{run_verify, verify_text, Scale};

#[derive(Parser)]
#[command(name = "qbsde", version, about = "Diagonally quadratic BSDE solver and bound checker")]
struct Cli {
    /// Cap on worker threads (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Text,
    Json,
}

#[derive(Subcommand)]
enum Command {
    /// Check the structural assumptions on sampled points.
    Validate {
        config: PathBuf,
        #[arg(long, value_enum, default_value = "text")]
        format: Format,
    },
    /// Evaluate every explicit constant and bound.
    Bounds {
        config: PathBuf,
        #[arg(long, value_enum, default_value = "text")]
        format: Format,
        /// Exponential-moment order.
        #[arg(long, default_value_t = 2.0)]
        q: f64,
    },
    /// Solve and write summary.json, trace.csv and optionally fields.bin.
    Solve {
        config: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Overrides run.plan.
        #[arg(long, value_enum)]
        plan: Option<PlanArg>,
        /// Interior stitching times for `--plan explicit`, comma separated.
        #[arg(long, value_delimiter = ',')]
        boundaries: Option<Vec<f64>>,
        /// Leave timestamps and timings out so reruns are byte-identical.
        #[arg(long)]
        deterministic: bool,
        /// Also write the full Y and Z fields.
        #[arg(long)]
        fields: bool,
    },
    /// Run the built-in oracle suite.
    Verify {
        /// M = 5000, N = 25 with looser tolerances.
        #[arg(long)]
        quick: bool,
        #[arg(long)]
        case: Option<String>,
        #[arg(long, value_enum, default_value = "text")]
        format: Format,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum PlanArg {
    Auto,
    Single,
    Explicit,
}

fn fail(e: &CliError) -> i32 {
    eprintln!("error: {e}");
    e.exit_code()
}

fn run(cli: Cli) -> i32 {
    if let Some(t) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(t.max(1)).build_global() {
            eprintln!("error: thread pool: {e}");
            return EXIT_FAILURE;
        }
    }
    match cli.command {
        Command::Validate { config, format } => match load(&config) {
            Ok(r) => {
                let report = run_validate(&r);
                match format {
                    Format::Text => print!("{}", report.to_text()),
                    Format::Json => println!("{}", serde_json::to_string_pretty(&report).expect("serializes")),
                }
                report.exit_code()
            }
            Err(e) => fail(&e),
        },
        Command::Bounds { config, format, q } => match load(&config) {
            Ok(r) => {
                let report = run_bounds(&r, q);
                match format {
                    Format::Text => print!("{}", bounds_text(&report)),
                    Format::Json => println!("{}", serde_json::to_string_pretty(&report).expect("serializes")),
                }
                0
            }
            Err(e) => fail(&e),
        },
        Command::Solve {
            config,
            out,
            plan,
            boundaries,
            deterministic,
            fields,
        } => {
            let r = match load(&config) {
                Ok(r) => r,
                Err(e) => return fail(&e),
            };
            let flags = SolveFlags {
                deterministic,
                plan: plan.map(|p| match p {
                    PlanArg::Auto => PlanKind::Auto,
                    PlanArg::Single => PlanKind::Single,
                    PlanArg::Explicit => PlanKind::Explicit,
                }),
                boundaries,
                dump_fields: fields,
            };
            match run_solve(&r, &flags) {
                Ok(outcome) => {
                    if let Err(e) = write_outputs(&outcome, &out) {
                        eprintln!("error: writing {}: {e}", out.display());
                        return EXIT_FAILURE;
                    }
                    for w in &outcome.summary.warnings {
                        eprintln!("warning: {w}");
                    }
                    for s in &outcome.summary.y0 {
                        println!("Y0[{}] = {:.8} (sd {:.2e})", s.component, s.mean, s.sd);
                    }
                    let code = outcome.exit_code();
                    if code != 0 {
                        eprintln!("not converged after {} iterations", outcome.summary.iterations);
                    }
                    code
                }
                Err(e) => {
                    if let CliError::Diverged { trace_csv, .. } = &e {
                        let _ = std::fs::create_dir_all(&out).and_then(|_| std::fs::write(out.join("trace.csv"), trace_csv));
                    }
                    fail(&e)
                }
            }
        }
        Command::Verify { quick, case, format } => {
            let scale = if quick { Scale::QUICK } else { Scale::DEFAULT };
            match run_verify(case.as_deref(), scale) {
                Ok(results) => {
                    match format {
                        Format::Text => print!("{}", verify_text(&results)),
                        Format::Json => println!("{}", serde_json::to_string_pretty(&results).expect("serializes")),
                    }
                    if results.iter().all(|r| r.pass) {
                        0
                    } else {
                        EXIT_FAILURE
                    }
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    EXIT_FAILURE
                }
            }
        }
    }
}

fn main() -> ExitCode {
    let code = run(Cli::parse());
    ExitCode::from(code as u8)
}
