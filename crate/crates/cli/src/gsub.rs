//! `gsub <site> <binary> <script>`: stage and submit one task in
//! shared-filesystem mode from the current directory.

#[allow(dead_code)]
mod state;

use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Parser;
use gridlet::orchestrator::JobSpec;
use gridlet::vo::DistinguishedName;

#[derive(Parser)]
#[command(name = "gsub", version, about = "Submit one task to a site, working in a shared directory")]
struct Cli {
    site: String,
    binary: String,
    script: String,
    /// Identity to submit as.
    #[arg(long, env = "GRIDLET_DN")]
    dn: String,
    /// Working directory holding the script and task list (default: current directory).
    #[arg(long)]
    workdir: Option<PathBuf>,
    #[arg(long)]
    state: Option<PathBuf>,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("gsub: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    let dir = state::resolve_state_dir(cli.state.as_deref());
    let mut grid = dir.load()?;
    let wd = match cli.workdir {
        Some(w) => w,
        None => std::env::current_dir()?,
    };
    let wd = wd.canonicalize().with_context(|| wd.display().to_string())?;
    let dn = DistinguishedName::parse(&cli.dn)?;
    let handle = grid.gsub(&JobSpec::shared_fs(&cli.site, &cli.binary, &cli.script, &wd, dn))?;
    dir.save(&grid)?;
    let nn = handle.nn.map_or("-".to_string(), |n| n.to_string());
    println!("{} {} {} {}", handle.job_id, handle.site_id, nn, handle.state);
    Ok(())
}
