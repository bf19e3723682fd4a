use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use plat_cli::{execute, CliError, CommandName, ExperimentConfig, RunStatus};

#[derive(Debug, Parser)]
#[command(name = "plat", version, about = "p-Laplacian attention experiments")]
struct Args {
    #[arg(value_enum)]
    command: Command,
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
enum Command {
    Equivcheck,
    Gradcheck,
    Flow,
    Spectral,
    Train,
    Audit,
}

impl From<Command> for CommandName {
    fn from(c: Command) -> Self {
        match c {
            Command::Equivcheck => CommandName::Equivcheck,
            Command::Gradcheck => CommandName::Gradcheck,
            Command::Flow => CommandName::Flow,
            Command::Spectral => CommandName::Spectral,
            Command::Train => CommandName::Train,
            Command::Audit => CommandName::Audit,
        }
    }
}

fn fail(err: &CliError) -> ExitCode {
    eprintln!("{}", err.to_json());
    ExitCode::from(if matches!(err, CliError::Config(_)) { 2 } else { 1 })
}

fn main() -> ExitCode {
    let args = Args::parse();
    let text = match std::fs::read_to_string(&args.config) {
        Ok(t) => t,
        Err(e) => return fail(&CliError::io(&args.config, e)),
    };
    let config = match ExperimentConfig::from_json(&text) {
        Ok(c) => c,
        Err(e) => return fail(&e),
    };
    let wanted = CommandName::from(args.command);
    if config.command.name() != wanted {
        return fail(&CliError::Config(format!(
            "config is for `{}` but `{}` was requested",
            config.command.name().as_str(),
            wanted.as_str()
        )));
    }
    let output_dir = args
        .output_dir
        .or_else(|| config.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from(format!("runs/{}", wanted.as_str())));
    let mut resolved = config.clone();
    resolved.output_dir = Some(output_dir.clone());
    println!("{}", resolved.to_json());

    match execute(&config, &output_dir) {
        Ok(outcome) => {
            println!("{}", serde_json::json!({ "status": outcome.status, "summary": outcome.summary }));
            if outcome.status == RunStatus::Failed {
                eprintln!(
                    "{}",
                    serde_json::json!({ "error": { "kind": "run_failed", "message": outcome.failure } })
                );
                return ExitCode::from(1);
            }
            ExitCode::SUCCESS
        }
        Err(e) => fail(&e),
    }
}
