use std::path::Path;
use std::process::ExitCode;

use cdr_cli::{execute, CliError, Command, RunConfig, WORKERS_ENV};

const USAGE: &str = "usage: cdr <fit|bands|decompose|simulate> <config-file> [key=value ...]";

fn fail(e: CliError) -> ExitCode {
    eprintln!("{}", serde_json::to_string(&e.report()).expect("serializable"));
    ExitCode::from(e.exit_code() as u8)
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let (Some(cmd), Some(path)) = (args.first(), args.get(1)) else {
        eprintln!("{USAGE}");
        return ExitCode::from(2);
    };
    let Some(command) = Command::parse(cmd) else {
        eprintln!("{USAGE}");
        return ExitCode::from(2);
    };
    let path = Path::new(path);
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) => return fail(CliError::Config(format!("cannot read {}: {e}", path.display()))),
    };
    let base = path.parent().unwrap_or(Path::new("."));
    let config = match RunConfig::parse(&text, base, &args[2..]) {
        Ok(c) => c,
        Err(e) => return fail(e),
    };
    let workers = match std::env::var(WORKERS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(w) if w > 0 => Some(w),
            _ => return fail(CliError::Config(format!("{WORKERS_ENV}: '{v}' is not a positive integer"))),
        },
        Err(_) => None,
    };
    ExitCode::from(execute(command, &config, workers) as u8)
}
