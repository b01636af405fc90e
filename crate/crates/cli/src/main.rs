mod state;

use std::collections::BTreeMap;
use std::fs;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use gridlet::catalog::MetadataCatalog;
use gridlet::clock::SimClock;
use gridlet::collector::{collect_shared_fs, fetch_bundles, merge, publish_bundle};
use gridlet::orchestrator::{Grid, GridConfig};
use gridlet::query::{allocate_priority, select_files, split_by_index, Balance, SelectionCriteria, SitePlan};
use gridlet::sandbox::{build_manifest, expand, DirResolver, Script};
use gridlet::sitesim::parse_scenario;
use gridlet::status::{format_row, load_manifest, load_plan, serve, StatusContext};
use gridlet::vo::DistinguishedName;

use state::{resolve_state_dir, StateDir};

#[derive(Parser)]
#[command(name = "gridlet", version, about = "Simulated multi-site grid: authorization, catalogs, submission, collection")]
struct Cli {
    /// State directory (default: $GRIDLET_STATE or ./gridlet-state).
    #[arg(long, global = true)]
    state: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Create a fresh grid from a scenario file.
    Init {
        #[arg(long)]
        scenario: PathBuf,
        /// Overwrite an existing state.
        #[arg(long)]
        force: bool,
    },
    #[command(subcommand)]
    Vo(VoCmd),
    #[command(subcommand)]
    Catalog(CatalogCmd),
    #[command(subcommand)]
    Skimdata(SkimCmd),
    #[command(subcommand)]
    Sandbox(SandboxCmd),
    /// Upload a delegated proxy for later submissions.
    Delegate {
        #[arg(long)]
        dn: String,
        /// Lifetime in simulated seconds (default: the grid's proxy lifetime).
        #[arg(long)]
        lifetime: Option<u64>,
    },
    #[command(subcommand)]
    Hyperjob(HyperjobCmd),
    #[command(subcommand)]
    Jobs(JobsCmd),
    #[command(subcommand)]
    Collect(CollectCmd),
    #[command(subcommand)]
    Sim(SimCmd),
    /// Answer status-protocol requests on a TCP socket.
    Serve {
        #[arg(long, default_value = "127.0.0.1:7070")]
        addr: String,
        /// Real milliseconds between simulation ticks; 0 disables the ticker.
        #[arg(long, default_value_t = 0)]
        tick_ms: u64,
        /// Simulated seconds per tick.
        #[arg(long, default_value_t = 60)]
        step: u64,
        /// Stop after this many requests.
        #[arg(long)]
        max_requests: Option<usize>,
    },
}

#[derive(Subcommand)]
enum VoCmd {
    /// Write a registration file into the home registry.
    Register { user: String, dn: String },
    /// Authorize or revoke a registered user.
    Acl {
        user: String,
        #[arg(long, conflicts_with = "deny")]
        allow: bool,
        #[arg(long)]
        deny: bool,
    },
    /// Forward authorized registrations to the VO server.
    TickScan,
    /// Fold the last scan into a new VO list version.
    Publish,
    /// Push the VO list into one site's gridmap.
    Sync {
        #[arg(long)]
        site: String,
    },
    /// Scan, publish and sync every site.
    Round,
    ShowPool {
        #[arg(long)]
        site: String,
    },
    ShowGridmap {
        #[arg(long)]
        site: String,
    },
}

#[derive(Subcommand)]
enum CatalogCmd {
    /// Load a `<dataset> <local:0|1>` catalog file into a site.
    Load {
        #[arg(long)]
        site: String,
        file: PathBuf,
    },
    Flag {
        #[arg(long)]
        site: String,
        #[arg(long)]
        run: u32,
        #[arg(long, conflicts_with = "off")]
        on: bool,
        #[arg(long)]
        off: bool,
    },
    /// Nightly availability sync across all sites.
    Sync,
    Resolve {
        #[arg(long)]
        site: String,
        logical_path: String,
    },
    /// Print a site's catalog file.
    Show {
        #[arg(long)]
        site: String,
    },
}

#[derive(Args, Clone)]
struct Criteria {
    /// Run range as `lo-hi`.
    #[arg(long)]
    runs: String,
    #[arg(long = "type", default_value = "AllEvents")]
    data_type: String,
    #[arg(long = "proc", default_value = "R14")]
    processing: String,
    #[arg(long)]
    max_files: Option<usize>,
}

impl Criteria {
    fn build(&self) -> Result<SelectionCriteria> {
        let (lo, hi) = self
            .runs
            .split_once('-')
            .map(|(a, b)| (a.trim().parse::<u32>(), b.trim().parse::<u32>()))
            .with_context(|| format!("run range {:?} is not lo-hi", self.runs))?;
        let mut c = SelectionCriteria::new(lo?, hi?, &self.data_type, &self.processing)?;
        if let Some(m) = self.max_files {
            c = c.with_max_files(m);
        }
        Ok(c)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum PlanMode {
    Priority,
    Index,
}

#[derive(Clone, Copy, ValueEnum)]
enum BalanceArg {
    None,
    Rr,
}

#[derive(Subcommand)]
enum SkimCmd {
    /// List matching logical paths at one site.
    Select {
        #[arg(long)]
        site: String,
        #[command(flatten)]
        criteria: Criteria,
    },
    /// Split a selection across sites and write plan + task lists.
    Plan {
        #[arg(long, value_enum, default_value = "index")]
        mode: PlanMode,
        /// Sites in priority order, comma separated.
        #[arg(long, value_delimiter = ',')]
        sites: Vec<String>,
        #[arg(long, default_value_t = 100)]
        chunk: usize,
        #[arg(long, value_enum, default_value = "none")]
        balance: BalanceArg,
        #[command(flatten)]
        criteria: Criteria,
        /// Output directory for plan.txt and <site>/data-<nn>.tcl.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum SandboxCmd {
    /// Print the flattened script.
    Expand { script: PathBuf },
    /// Print (or write) the sandbox manifest.
    Manifest {
        script: PathBuf,
        #[arg(long)]
        binary: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum HyperjobCmd {
    Submit {
        #[arg(long)]
        plan: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Delegation token id (default: the most recent one).
        #[arg(long)]
        token: Option<String>,
    },
    List,
}

#[derive(Subcommand)]
enum JobsCmd {
    /// Poll a job or a hyperjob.
    Poll { id: String },
    /// Retrieve a job's log (costs simulated latency).
    Log { id: String },
    /// Print the state-transition event log.
    Events,
}

#[derive(Subcommand)]
enum CollectCmd {
    /// Download each superjob's rolling tar.
    Fetch {
        hyperjob: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fetch, merge and publish the bundle.
    Merge {
        hyperjob: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// List shared-filesystem outputs in a working directory.
    Ls { working_dir: PathBuf },
}

#[derive(Subcommand)]
enum SimCmd {
    Advance { seconds: u64 },
    Drain,
    Now,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    let dir = resolve_state_dir(cli.state.as_deref());
    match cli.command {
        Command::Init { scenario, force } => init(&dir, &scenario, force),
        Command::Sandbox(cmd) => sandbox(cmd),
        Command::Collect(CollectCmd::Ls { working_dir }) => {
            for p in collect_shared_fs(&working_dir) {
                println!("{}", p.display());
            }
            Ok(())
        }
        Command::Serve {
            addr,
            tick_ms,
            step,
            max_requests,
        } => serve_cmd(dir, &addr, tick_ms, step, max_requests),
        other => {
            let mut grid = dir.load()?;
            let mutated = stateful(&dir, &mut grid, other)?;
            if mutated {
                dir.save(&grid)?;
            }
            Ok(())
        }
    }
}

fn init(dir: &StateDir, scenario: &Path, force: bool) -> Result<()> {
    if dir.exists() && !force {
        bail!("{} already holds a grid; pass --force to replace it", dir.root.display());
    }
    let text = fs::read_to_string(scenario).with_context(|| scenario.display().to_string())?;
    let sites = parse_scenario(&text)?;
    let grid = Grid::new(GridConfig::default(), sites)?;
    dir.save(&grid)?;
    println!("initialized {} site(s): {}", grid.site_ids().len(), grid.site_ids().join(","));
    Ok(())
}

fn sandbox(cmd: SandboxCmd) -> Result<()> {
    let read = |script: &Path| -> Result<(Script, DirResolver)> {
        let text = fs::read_to_string(script).with_context(|| script.display().to_string())?;
        let name = script.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let root = script.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok((Script::parse(name, &text), DirResolver::new(root)))
    };
    match cmd {
        SandboxCmd::Expand { script } => {
            let (s, r) = read(&script)?;
            print!("{}", expand(&s, &r)?.to_text());
        }
        SandboxCmd::Manifest { script, binary, out } => {
            let (s, r) = read(&script)?;
            let text = build_manifest(&s, &r, &binary)?.to_text();
            match out {
                Some(p) => fs::write(&p, text)?,
                None => print!("{text}"),
            }
        }
    }
    Ok(())
}

/// Runs a command against loaded state; returns whether it must be saved.
fn stateful(dir: &StateDir, grid: &mut Grid, cmd: Command) -> Result<bool> {
    match cmd {
        Command::Vo(c) => vo(dir, grid, c),
        Command::Catalog(c) => catalog(grid, c),
        Command::Skimdata(c) => skimdata(grid, c),
        Command::Delegate { dn, lifetime } => {
            let dn = DistinguishedName::parse(&dn)?;
            let lifetime = lifetime.unwrap_or(grid.config.proxy_lifetime);
            let t = grid.delegate_proxy(dn, lifetime);
            println!("TOKEN {} {}", t.id, t.expires_at);
            Ok(true)
        }
        Command::Hyperjob(HyperjobCmd::Submit { plan, manifest, token }) => {
            let plan = load_plan(&plan).map_err(anyhow::Error::msg)?;
            let manifest = load_manifest(&manifest).map_err(anyhow::Error::msg)?;
            let token = match token {
                Some(t) => t,
                None => grid.latest_token().context("no delegation uploaded; run `gridlet delegate`")?.id.clone(),
            };
            let hj = grid.submit_hyperjob(&plan, &manifest, &token)?;
            println!("HYPERJOB {hj}");
            Ok(true)
        }
        Command::Hyperjob(HyperjobCmd::List) => {
            for id in grid.hyperjob_ids() {
                let settled = grid.hyperjob_settled(&id)?;
                println!("{id} {}", if settled { "settled" } else { "active" });
            }
            Ok(false)
        }
        Command::Jobs(JobsCmd::Poll { id }) => {
            let snap = if grid.hyperjob(&id).is_ok() {
                grid.poll_hyperjob(&id)?
            } else {
                grid.poll_job(&id)?
            };
            println!("# epoch {} t={}", snap.epoch, snap.at);
            for r in &snap.rows {
                println!("{}", format_row(r));
            }
            Ok(true)
        }
        Command::Jobs(JobsCmd::Log { id }) => {
            print!("{}", grid.retrieve_log(&id)?);
            Ok(true)
        }
        Command::Jobs(JobsCmd::Events) => {
            for l in grid.event_log() {
                println!("{l}");
            }
            Ok(false)
        }
        Command::Collect(CollectCmd::Fetch { hyperjob, out }) => {
            let report = fetch_bundles(grid, &hyperjob)?;
            fs::create_dir_all(&out)?;
            for b in &report.bundles {
                let p = out.join(format!("{}-{}.tar", b.superjob_id, b.site_id));
                fs::write(&p, &b.tar)?;
                println!("{}", p.display());
            }
            for s in &report.pending {
                println!("pending {s}");
            }
            Ok(true)
        }
        Command::Collect(CollectCmd::Merge { hyperjob, out }) => {
            let report = fetch_bundles(grid, &hyperjob)?;
            let plan = grid.hyperjob(&hyperjob)?.plan.clone();
            let bundle = merge(&hyperjob, &report.bundles, &plan)?;
            let rec = publish_bundle(&bundle, &out.unwrap_or_else(|| dir.results_dir()))?;
            println!("{} {} {}", rec.path.display(), bundle.progress(), rec.media_type);
            for s in &report.pending {
                println!("pending {s}");
            }
            Ok(true)
        }
        Command::Sim(SimCmd::Advance { seconds }) => {
            grid.advance(seconds);
            println!("t={}", grid.now());
            Ok(true)
        }
        Command::Sim(SimCmd::Drain) => {
            grid.drain();
            println!("t={}", grid.now());
            Ok(true)
        }
        Command::Sim(SimCmd::Now) => {
            println!("t={} epoch={}", grid.now(), grid.epoch());
            Ok(false)
        }
        Command::Init { .. } | Command::Sandbox(_) | Command::Serve { .. } | Command::Collect(CollectCmd::Ls { .. }) => {
            unreachable!("handled without loaded state")
        }
    }
}

fn vo(dir: &StateDir, grid: &mut Grid, cmd: VoCmd) -> Result<bool> {
    let registry = dir.registry();
    match cmd {
        VoCmd::Register { user, dn } => {
            let dn = DistinguishedName::parse(&dn)?;
            registry.register_dn(&user, &dn)?;
            println!("registered {user}");
            Ok(false)
        }
        VoCmd::Acl { user, allow, deny } => {
            if allow == deny {
                bail!("pass exactly one of --allow or --deny");
            }
            grid.acl.set(user, allow);
            Ok(true)
        }
        VoCmd::TickScan => {
            let r = grid.vo.receive(&registry, &grid.acl, &mut grid.transport)?;
            println!("forwarded {} undelivered {} skipped {}", r.forwarded, r.undelivered, r.skipped.len());
            Ok(true)
        }
        VoCmd::Publish => {
            let now = grid.now();
            let list = grid.vo.publish(now);
            println!("vo version {} with {} member(s)", list.version, list.len());
            Ok(true)
        }
        VoCmd::Sync { site } => {
            let s = grid.site(&site)?;
            let (gm, prefix) = (s.gridmap.clone(), s.pool.config().prefix.clone());
            let next = grid.vo.sync_site(&site, &gm, &grid.blocklist, &prefix, &mut grid.transport)?;
            println!("{site}: {} vo-appended line(s)", next.appended().count());
            grid.site_mut(&site)?.gridmap = next;
            Ok(true)
        }
        VoCmd::Round => {
            let r = grid.vo_round(&registry)?;
            let list = |v: &[String]| if v.is_empty() { "-".to_string() } else { v.join(",") };
            println!(
                "forwarded {} version {} synced {} unsynced {}",
                r.scan.forwarded,
                r.vo_version,
                list(&r.synced),
                list(&r.unsynced)
            );
            Ok(true)
        }
        VoCmd::ShowPool { site } => {
            let pool = &grid.site(&site)?.pool;
            for (dn, acct) in pool.live() {
                println!("{acct} {dn}");
            }
            println!("# live {} free {}", pool.live_count(), pool.free_count());
            Ok(false)
        }
        VoCmd::ShowGridmap { site } => {
            print!("{}", grid.site(&site)?.gridmap.to_text());
            Ok(false)
        }
    }
}

fn catalog(grid: &mut Grid, cmd: CatalogCmd) -> Result<bool> {
    match cmd {
        CatalogCmd::Load { site, file } => {
            let text = fs::read_to_string(&file).with_context(|| file.display().to_string())?;
            let s = grid.site_mut(&site)?;
            let n = s.catalog.load_catalog_text(&text)?;
            s.materialize_local_data();
            println!("{site}: loaded {n} record(s), {} local", s.catalog.local_paths().len());
            Ok(true)
        }
        CatalogCmd::Flag { site, run, on, off } => {
            if on == off {
                bail!("pass exactly one of --on or --off");
            }
            let s = grid.site_mut(&site)?;
            let n = s.catalog.set_run_local(run, on);
            if on {
                s.materialize_local_data();
            }
            println!("{site}: {n} file(s) of run {run} flagged {}", if on { "local" } else { "absent" });
            Ok(true)
        }
        CatalogCmd::Sync => {
            let out = grid.catalog_sync();
            print!("{}", out.matrix.to_index_text());
            eprintln!("# {} message(s), stale: {:?}", out.message_count, out.stale);
            Ok(true)
        }
        CatalogCmd::Resolve { site, logical_path } => {
            println!("{}", grid.site(&site)?.catalog.resolve_path(&logical_path)?);
            Ok(false)
        }
        CatalogCmd::Show { site } => {
            print!("{}", grid.site(&site)?.catalog.to_catalog_text());
            Ok(false)
        }
    }
}

fn skimdata(grid: &mut Grid, cmd: SkimCmd) -> Result<bool> {
    match cmd {
        SkimCmd::Select { site, criteria } => {
            let crit = criteria.build()?;
            for f in select_files(&crit, &grid.site(&site)?.catalog) {
                println!("{}", f.logical_path);
            }
            Ok(false)
        }
        SkimCmd::Plan {
            mode,
            sites,
            chunk,
            balance,
            criteria,
            out,
        } => {
            let crit = criteria.build()?;
            let balance = match balance {
                BalanceArg::None => Balance::None,
                BalanceArg::Rr => Balance::RoundRobin,
            };
            let plan = match mode {
                PlanMode::Priority => {
                    if matches!(balance, Balance::RoundRobin) {
                        bail!("--balance rr needs --mode index");
                    }
                    let catalogs: BTreeMap<_, _> = sites
                        .iter()
                        .map(|s| Ok((s.clone(), grid.site(s)?.catalog.clone())))
                        .collect::<Result<_>>()?;
                    let mut clock = SimClock::at(grid.now());
                    let plan = allocate_priority(&crit, &sites, &catalogs, chunk, &mut clock, grid.config.query_latency)?;
                    let spent = clock.now() - grid.now();
                    grid.advance(spent);
                    eprintln!("# remote queries took {spent} simulated seconds");
                    plan
                }
                PlanMode::Index => {
                    let mut meta = MetadataCatalog::new();
                    for s in grid.sites() {
                        meta.absorb(s.catalog.meta())?;
                    }
                    split_by_index(&crit, &meta, grid.availability.matrix(), &sites, chunk, balance)?
                }
            };
            write_plan(&plan, &out)?;
            for a in &plan.assignments {
                println!("{} {} run(s) {} task(s)", a.site_id, a.runs.len(), a.tasks.len());
            }
            if !plan.uncovered.is_empty() {
                println!("uncovered {}", plan.uncovered.len());
            }
            println!("{}", out.join("plan.txt").display());
            Ok(true)
        }
    }
}

fn write_plan(plan: &SitePlan, out: &Path) -> Result<()> {
    for a in &plan.assignments {
        let d = out.join(&a.site_id);
        fs::create_dir_all(&d)?;
        for t in &a.tasks {
            fs::write(d.join(t.file_name()), t.to_text())?;
        }
    }
    fs::create_dir_all(out)?;
    fs::write(out.join("plan.txt"), plan.to_plan_text())?;
    Ok(())
}

fn serve_cmd(dir: StateDir, addr: &str, tick_ms: u64, step: u64, max_requests: Option<usize>) -> Result<()> {
    let grid = Arc::new(Mutex::new(dir.load()?));
    let listener = TcpListener::bind(addr).with_context(|| format!("bind {addr}"))?;
    eprintln!("listening on {}", listener.local_addr()?);
    let dir = Arc::new(dir);
    if tick_ms > 0 {
        let (grid, dir) = (Arc::clone(&grid), Arc::clone(&dir));
        std::thread::spawn(move || loop {
            std::thread::sleep(Duration::from_millis(tick_ms));
            let mut g = grid.lock().unwrap_or_else(|p| p.into_inner());
            g.advance(step);
            if let Err(e) = dir.save(&g) {
                log::warn!("saving state: {e}");
            }
        });
    }
    let ctx = StatusContext {
        results_dir: dir.results_dir(),
    };
    let saver = Arc::clone(&dir);
    serve(listener, grid, ctx, max_requests, move |g| {
        if let Err(e) = saver.save(g) {
            log::warn!("saving state: {e}");
        }
    })?;
    Ok(())
}
