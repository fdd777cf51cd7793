//! The `premsel` command-line tool: one binary whose subcommands run each
//! pipeline stage and write versioned artifacts stamped with the resolved
//! run configuration.

pub mod args;
pub mod commands;
pub mod config;

use std::ffi::OsString;

use clap::Parser;

pub use args::{Cli, Command};
pub use config::RunConfig;

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

fn init_tracing(verbose: u8) {
    let default = match verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    let filter = tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| tracing_subscriber::EnvFilter::new(default));
    let _ = tracing_subscriber::fmt().with_env_filter(filter).with_writer(std::io::stderr).try_init();
}

/// Layers file, environment and flags into the final run config.
pub fn resolve_config(cli: &Cli, env: impl IntoIterator<Item = (String, String)>) -> anyhow::Result<RunConfig> {
    let mut cfg = RunConfig::resolve(cli.global.config.as_deref(), env)?;
    if cli.global.seed.is_some() {
        cfg.seed = cli.global.seed;
    }
    cfg.sequential |= cli.global.sequential;
    cfg.apply_seed();
    commands::apply_flags(&mut cfg, &cli.command)?;
    Ok(cfg)
}

/// Parses `argv`, runs one subcommand and returns the process exit code.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    init_tracing(cli.global.verbose);
    let cfg = match resolve_config(&cli, std::env::vars()) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e:#}");
            return EXIT_USAGE;
        }
    };
    let ctx = commands::Ctx::new(cfg, &cli.command);
    tracing::debug!(config = %ctx.stamp, "resolved run config");
    match commands::run(&ctx, &cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e:#}");
            EXIT_RUNTIME
        }
    }
}
