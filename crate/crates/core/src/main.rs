use std::fs;
use std::process::ExitCode;

use clap::Parser;
use hdsel::cli::{execute, Cli, RunConfig};

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    let cfg = match RunConfig::from_sources(&cli.flags) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    match toml::to_string(&cfg) {
        Ok(t) => eprintln!("# effective configuration\n{t}"),
        Err(e) => log::warn!("could not render configuration: {e}"),
    }
    let outcome = match execute(cli.command.kind(), &cfg) {
        Ok(o) => o,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(if e.is_numerical() { 3 } else { 2 });
        }
    };
    print!("{}", outcome.text);
    if let Some(path) = &cfg.output {
        let body = serde_json::to_string_pretty(&outcome.report).expect("report serializes");
        if let Err(e) = fs::write(path, body + "\n") {
            eprintln!("error: cannot write {}: {e}", path.display());
            return ExitCode::from(2);
        }
    }
    ExitCode::SUCCESS
}
