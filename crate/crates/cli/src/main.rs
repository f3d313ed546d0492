mod args;
mod commands;
mod error;

use std::process::ExitCode;

use clap::Parser;

use args::{apply_config, Cli, Command};
use commands::Outputs;
use error::CliResult;

fn run(cli: Cli) -> CliResult<bool> {
    let out = Outputs::new(cli.out_root);
    let config = cli.config.as_deref();
    macro_rules! merged {
        ($args:expr) => {
            match config {
                Some(path) => apply_config($args, path)?,
                None => $args,
            }
        };
    }
    match cli.command {
        Command::Generate(a) => commands::generate(&merged!(a), &out)?,
        Command::ChooseC(a) => commands::choose_c(&merged!(a), &out)?,
        Command::Train(a) => commands::train(&merged!(a), &out)?,
        Command::Sweep(a) => commands::sweep_command(&merged!(a), &out)?,
        Command::Select(a) => commands::select(&merged!(a), &out)?,
        Command::Eval(a) => commands::eval(&merged!(a), &out)?,
        Command::Gradcheck(a) => return commands::gradcheck_command(&merged!(a)),
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
