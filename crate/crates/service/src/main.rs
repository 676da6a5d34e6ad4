use std::net::SocketAddr;
use std::process::ExitCode;

use anyhow::Context;
use clap::Parser;
use d4d_service::api::{self, AppState};
use d4d_service::cli::{self, Cli, Command};
use d4d_service::Failure;

fn serve(port: u16, data_dir: Option<std::path::PathBuf>) -> anyhow::Result<()> {
    let state = AppState::open(data_dir).map_err(|e| anyhow::anyhow!(e.line()))?;
    let rt = tokio::runtime::Runtime::new().context("starting the async runtime")?;
    rt.block_on(api::serve(state, SocketAddr::from(([0, 0, 0, 0], port))))
        .with_context(|| format!("serving on port {port}"))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            eprintln!("{}", Failure::Usage(first.to_string()).line());
            eprintln!("{}", msg.trim_end());
            return ExitCode::from(1);
        }
    };
    let result = match &cli.command {
        Command::Serve { port, data_dir } => serve(*port, data_dir.clone()).map_err(|e| Failure::Input(format!("{e:#}"))),
        _ => cli::run(&cli),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{}", f.line());
            ExitCode::from(f.exit_code() as u8)
        }
    }
}
