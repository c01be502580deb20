use std::process::ExitCode;

use clap::Parser;
use scal_core::runner::{parse_args, run, ExperimentConfig};

/// Augmented Lagrangian experiments on tabular MDPs.
///
/// Every config key is also a flag: `scal scal --scal.mu 1.0 --seeds 0,1`.
/// `--config FILE` splices in a key = value file at that position, so
/// `scal --config runs/scal/config.echo` repeats a run.
#[derive(Debug, Parser)]
#[command(name = "scal", version)]
struct Cli {
    /// oracle, alm, scal, deep-alm, ablate-grad, ablate-multistep or verify.
    /// May be omitted when a config file sets `command`.
    #[arg(value_name = "COMMAND", allow_hyphen_values = true)]
    command: Option<String>,

    /// `--key value` or `--key=value` pairs.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "FLAGS")]
    flags: Vec<String>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let mut cli = Cli::parse();
    // a leading flag lands in `command` when no command is given
    if let Some(c) = &cli.command {
        if c.starts_with("--") {
            cli.flags.insert(0, cli.command.take().unwrap());
        }
    }
    let outcome = parse_args(&cli.flags)
        .and_then(|pairs| ExperimentConfig::resolve(cli.command.as_deref(), &pairs))
        .and_then(|cfg| run(&cfg));
    if let Ok(o) = &outcome {
        print!("{}", o.console);
    }
    match outcome {
        Ok(o) if o.passed() => ExitCode::SUCCESS,
        Ok(o) => {
            let failed = o.checks.iter().filter(|c| !c.pass).count();
            eprintln!("scal: {failed} check(s) failed");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("scal: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
