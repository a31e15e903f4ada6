use std::fs;
use std::process::ExitCode;

use clap::Parser;

use gradsae_cli::{run, Cli};

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = cli.common.resolve().and_then(|cfg| Ok((run(cli.command, &cfg)?, cfg)));
    match result {
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Ok((out, _)) if out.failures.is_empty() => ExitCode::SUCCESS,
        Ok((out, cfg)) => {
            let json = serde_json::to_string_pretty(&out.failures).unwrap_or_default();
            eprintln!("threshold failures:\n{json}");
            let path = cfg.reports().join("failures.json");
            if let Err(e) = fs::create_dir_all(cfg.reports()).and_then(|_| fs::write(&path, &json)) {
                eprintln!("cannot write {}: {e}", path.display());
            }
            ExitCode::from(2)
        }
    }
}
