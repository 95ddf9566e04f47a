use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use iup_cli::{
    emit_report, load_fitted, mobility_report, overhead_table, parse_scenario, phase_table, rtt_of,
    CliError, Format, MobilityKind, MobilityMode, OutputConfig,
};
use iup_core::sim::run_scenario;

#[derive(Parser, Debug)]
#[command(name = "iup", version, about = "Downlink user-plane simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run a scenario and write its report.
    Run {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the scenario's seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum, default_value = "both")]
        format: Format,
    },
    /// Encapsulated size of a payload under each header stack.
    Overhead {
        #[arg(long)]
        payload: u64,
        #[arg(long)]
        stack: Option<String>,
    },
    /// Round-trip time of a deployment scenario.
    Rtt {
        #[arg(long = "scenario-name")]
        scenario_name: String,
        /// Leg delay table to use instead of the shipped one.
        #[arg(long)]
        fitted: Option<PathBuf>,
    },
    /// Forwarding legs for a handover or a roaming session.
    Mobility {
        #[arg(long, value_enum)]
        mode: MobilityMode,
        #[arg(long, value_enum)]
        kind: MobilityKind,
        #[arg(long, default_value_t = 1400)]
        payload: u64,
    },
    /// Parse and check a scenario without running it.
    Validate {
        #[arg(long)]
        scenario: PathBuf,
    },
}

fn run(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::Run {
            scenario,
            out,
            seed,
            format,
        } => {
            let mut spec = parse_scenario(&scenario)?;
            if let Some(s) = seed {
                spec.seed = s;
            }
            let report = run_scenario(&spec).map_err(|e| CliError::Runtime(e.to_string()))?;
            let written = emit_report(&report, &OutputConfig { out_dir: out, format })?;
            print!("{}", phase_table(&report));
            for p in written {
                println!("wrote {}", p.display());
            }
            if !report.conservation_ok {
                return Err(CliError::Runtime("packet conservation audit failed".into()));
            }
        }
        Command::Overhead { payload, stack } => print!("{}", overhead_table(payload, stack.as_deref())?),
        Command::Rtt { scenario_name, fitted } => {
            let cfg = load_fitted(fitted.as_deref())?;
            print!("{}", rtt_of(&scenario_name, &cfg)?);
        }
        Command::Mobility { mode, kind, payload } => print!("{}", mobility_report(mode, kind, payload)?),
        Command::Validate { scenario } => {
            let spec = parse_scenario(&scenario)?;
            let advisories = spec.validate().map_err(|e| CliError::Validation(e.to_string()))?;
            for a in advisories {
                println!("note: {a}");
            }
            println!("ok");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
