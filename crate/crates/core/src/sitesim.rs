//! A simulated remote site: gatekeeper, artifact cache, FIFO batch queue,
//! stub analysis binary and per-superjob outboxes with a rolling tar.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::archive::build_ustar;
use crate::catalog::{resolve_with, DatasetName, MetadataCatalog, SiteCatalog};
use crate::sandbox::Script;
use crate::vo::{AccountKind, AccountPool, AuthzError, DistinguishedName, GridmapFile, PoolConfig};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SiteError {
    #[error("scenario line {line}: {reason}")]
    Scenario { line: usize, reason: String },
    #[error("site {site_id}: {reason}")]
    Config { site_id: String, reason: String },
    #[error("request for {dn} carries an expired token")]
    TokenExpired { dn: DistinguishedName },
    #[error(transparent)]
    Rejected(#[from] AuthzError),
    #[error("output-{nn} already finished in {superjob_id}")]
    DuplicateOutput { superjob_id: String, nn: usize },
    #[error("no outbox {0}")]
    UnknownOutbox(String),
    #[error("account {account} may not read outbox {superjob_id}")]
    AccessDenied { account: String, superjob_id: String },
    #[error("io: {0}")]
    Io(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteConfig {
    pub site_id: String,
    pub bfroot: String,
    pub workers: usize,
    pub failure_rate: f64,
    pub loss_rate: f64,
    pub seed: u64,
    pub pool: PoolConfig,
}

impl SiteConfig {
    pub fn new(site_id: impl Into<String>, bfroot: impl Into<String>) -> Self {
        Self {
            site_id: site_id.into(),
            bfroot: bfroot.into(),
            workers: 1,
            failure_rate: 0.0,
            loss_rate: 0.0,
            seed: 0,
            pool: PoolConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<(), SiteError> {
        let bad = |reason: String| SiteError::Config {
            site_id: self.site_id.clone(),
            reason,
        };
        if self.workers == 0 {
            return Err(bad("workers must be at least 1".into()));
        }
        for (name, p) in [("failure_rate", self.failure_rate), ("loss_rate", self.loss_rate)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(bad(format!("{name} {p} outside [0, 1]")));
            }
        }
        if self.bfroot.is_empty() {
            return Err(bad("empty bfroot".into()));
        }
        self.pool.validate()?;
        Ok(())
    }
}

/// Parses site blocks: `site <id>` opens a block, then `bfroot`, `workers`,
/// `failure_rate`, `loss_rate`, `seed`, `pool_size`, `pool_prefix` lines.
/// Blank lines and `#` comments are ignored.
pub fn parse_scenario(text: &str) -> Result<Vec<SiteConfig>, SiteError> {
    let mut sites: Vec<SiteConfig> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let err = |reason: String| SiteError::Scenario { line: i + 1, reason };
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once(char::is_whitespace)
            .map(|(k, v)| (k, v.trim()))
            .ok_or_else(|| err(format!("expected '<key> <value>', got {line:?}")))?;
        if key == "site" {
            if sites.iter().any(|s| s.site_id == value) {
                return Err(err(format!("site {value} declared twice")));
            }
            sites.push(SiteConfig::new(value, ""));
            continue;
        }
        let site = sites
            .last_mut()
            .ok_or_else(|| err(format!("{key} before any 'site' line")))?;
        let num = |what: &str| err(format!("{key}: {value:?} is not a valid {what}"));
        match key {
            "bfroot" => site.bfroot = value.to_string(),
            "workers" => site.workers = value.parse().map_err(|_| num("count"))?,
            "failure_rate" => site.failure_rate = value.parse().map_err(|_| num("probability"))?,
            "loss_rate" => site.loss_rate = value.parse().map_err(|_| num("probability"))?,
            "seed" => site.seed = value.parse().map_err(|_| num("seed"))?,
            "pool_size" => site.pool.size = value.parse().map_err(|_| num("count"))?,
            "pool_prefix" => site.pool.prefix = value.to_string(),
            other => return Err(err(format!("unknown key {other:?}"))),
        }
    }
    for s in &sites {
        s.validate()?;
    }
    Ok(sites)
}

/// An authenticated gatekeeper session.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Session {
    pub dn: DistinguishedName,
    pub account: String,
    pub kind: AccountKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StageOutcome {
    Cached,
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StubRunResult {
    pub task_index: usize,
    pub runs_processed: Vec<u32>,
    pub events: u64,
    pub payload: Vec<u8>,
    pub manifest_text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, thiserror::Error)]
pub enum StubFailure {
    #[error("missing input file {0}")]
    MissingFile(String),
    #[error("missing auxiliary file {0}")]
    MissingAux(String),
    #[error("unresolvable entry {0}")]
    Unresolvable(String),
    #[error("injected failure")]
    Injected,
}

/// The stub binary's output, `SITE=..`, `TASK=..`, `RUNS=..`, `EVENTS=..`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StubPayload {
    pub site_id: String,
    pub task_index: usize,
    pub runs: Vec<u32>,
    pub events: u64,
}

impl StubPayload {
    pub fn render(&self) -> Vec<u8> {
        let runs: Vec<String> = self.runs.iter().map(u32::to_string).collect();
        format!(
            "SITE={}\nTASK={}\nRUNS={}\nEVENTS={}\n",
            self.site_id,
            self.task_index,
            runs.join(","),
            self.events
        )
        .into_bytes()
    }

    pub fn parse(bytes: &[u8]) -> Option<Self> {
        let text = std::str::from_utf8(bytes).ok()?;
        let mut fields = BTreeMap::new();
        for line in text.lines() {
            let (k, v) = line.split_once('=')?;
            fields.insert(k, v);
        }
        let runs = match *fields.get("RUNS")? {
            "" => Vec::new(),
            csv => csv.split(',').map(str::parse).collect::<Result<_, _>>().ok()?,
        };
        Some(Self {
            site_id: fields.get("SITE")?.to_string(),
            task_index: fields.get("TASK")?.parse().ok()?,
            runs,
            events: fields.get("EVENTS")?.parse().ok()?,
        })
    }
}

/// Gatekeeper directory `<superjob_id>/` plus its rolling tar.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SuperjobOutbox {
    pub superjob_id: String,
    pub owner: String,
    files: BTreeMap<String, Vec<u8>>,
    rolling_tar: Vec<u8>,
}

impl SuperjobOutbox {
    fn new(superjob_id: &str, owner: &str) -> Self {
        Self {
            superjob_id: superjob_id.to_string(),
            owner: owner.to_string(),
            files: BTreeMap::new(),
            rolling_tar: Vec::new(),
        }
    }

    pub fn dir_listing(&self) -> BTreeSet<String> {
        self.files.keys().cloned().collect()
    }

    pub fn tar(&self) -> &[u8] {
        &self.rolling_tar
    }

    pub fn is_empty(&self) -> bool {
        self.files.is_empty()
    }

    pub fn file(&self, name: &str) -> Option<&[u8]> {
        self.files.get(name).map(Vec::as_slice)
    }

    fn rebuild(&mut self) {
        self.rolling_tar = build_ustar(self.files.iter().map(|(n, b)| (n.as_str(), b.as_slice())));
    }
}

pub fn output_name(nn: usize) -> String {
    format!("output-{nn}")
}

/// Reads the `nn` back out of `output-<nn>`.
pub fn output_index(name: &str) -> Option<usize> {
    name.rsplit('/').next()?.strip_prefix("output-")?.parse().ok()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Site {
    pub config: SiteConfig,
    pub gridmap: GridmapFile,
    pub pool: AccountPool,
    pub catalog: SiteCatalog,
    /// Logical paths whose files physically exist here.
    present: BTreeSet<String>,
    artifacts: BTreeMap<String, Vec<u8>>,
    transfers: usize,
    /// `<superjob_id>/<name>` files staged by job0.
    sandbox: BTreeMap<String, BTreeSet<String>>,
    outboxes: BTreeMap<String, SuperjobOutbox>,
    queue: VecDeque<String>,
    running: BTreeSet<String>,
    rng: ChaCha8Rng,
}

impl Site {
    pub fn new(config: SiteConfig) -> Result<Self, SiteError> {
        config.validate()?;
        Ok(Self {
            gridmap: GridmapFile::new(),
            pool: AccountPool::new(config.site_id.clone(), config.pool.clone())?,
            catalog: SiteCatalog::new(config.site_id.clone(), config.bfroot.clone()),
            present: BTreeSet::new(),
            artifacts: BTreeMap::new(),
            transfers: 0,
            sandbox: BTreeMap::new(),
            outboxes: BTreeMap::new(),
            queue: VecDeque::new(),
            running: BTreeSet::new(),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            config,
        })
    }

    pub fn id(&self) -> &str {
        &self.config.site_id
    }

    pub fn bfroot(&self) -> &str {
        &self.config.bfroot
    }

    /// Makes the files flagged local in the catalog physically present.
    pub fn materialize_local_data(&mut self) {
        self.present = self.catalog.local_paths().into_iter().map(str::to_string).collect();
    }

    /// Replaces the catalog with a replica of `meta`, flags `local_runs` as
    /// present and materializes them.
    pub fn load_replica(&mut self, meta: &MetadataCatalog, local_runs: &BTreeSet<u32>) {
        self.catalog = SiteCatalog::replica(self.config.site_id.clone(), self.config.bfroot.clone(), meta);
        for &r in local_runs {
            self.catalog.set_run_local(r, true);
        }
        self.materialize_local_data();
    }

    /// Removes a file while leaving its catalog flag alone.
    pub fn remove_physical(&mut self, logical_path: &str) -> bool {
        self.present.remove(logical_path)
    }

    pub fn is_present(&self, logical_path: &str) -> bool {
        self.present.contains(logical_path)
    }

    /// Authenticates `dn` through gridmap precedence and the pool.
    pub fn gatekeep(
        &mut self,
        dn: &DistinguishedName,
        token_expires_at: u64,
        now: u64,
    ) -> Result<Session, SiteError> {
        if token_expires_at <= now {
            return Err(SiteError::TokenExpired { dn: dn.clone() });
        }
        let a = self.pool.map_dn(&self.gridmap, dn)?;
        log::debug!("{}: {} -> {}", self.id(), dn, a.account_name);
        Ok(Session {
            dn: dn.clone(),
            account: a.account_name,
            kind: a.kind,
        })
    }

    pub fn stage_artifact(&mut self, _session: &Session, name: &str, bytes: &[u8]) -> StageOutcome {
        if self.artifacts.contains_key(name) {
            return StageOutcome::Skipped;
        }
        self.artifacts.insert(name.to_string(), bytes.to_vec());
        self.transfers += 1;
        StageOutcome::Cached
    }

    pub fn has_artifact(&self, name: &str) -> bool {
        self.artifacts.contains_key(name)
    }

    pub fn transfer_count(&self) -> usize {
        self.transfers
    }

    /// Job0's work: copy the sandbox into `<superjob_id>/` and open an
    /// outbox owned by `session`'s account.
    pub fn stage_sandbox(&mut self, session: &Session, superjob_id: &str, files: &[String]) {
        self.sandbox
            .insert(superjob_id.to_string(), files.iter().cloned().collect());
        self.outboxes
            .entry(superjob_id.to_string())
            .or_insert_with(|| SuperjobOutbox::new(superjob_id, &session.account));
    }

    pub fn sandbox_files(&self, superjob_id: &str) -> Option<&BTreeSet<String>> {
        self.sandbox.get(superjob_id)
    }

    pub fn enqueue(&mut self, job_id: &str) {
        self.queue.push_back(job_id.to_string());
    }

    /// Starts queued jobs, oldest first, while worker slots are free.
    pub fn dispatch(&mut self) -> Vec<String> {
        let mut started = Vec::new();
        while self.running.len() < self.config.workers {
            let Some(job) = self.queue.pop_front() else { break };
            self.running.insert(job.clone());
            started.push(job);
        }
        started
    }

    pub fn free_worker(&mut self, job_id: &str) -> bool {
        self.running.remove(job_id)
    }

    pub fn queue_len(&self) -> usize {
        self.queue.len()
    }

    pub fn running_count(&self) -> usize {
        self.running.len()
    }

    /// One draw against `loss_rate`, taken when a job starts running.
    pub fn draw_loss(&mut self) -> bool {
        let u: f64 = self.rng.gen();
        u < self.config.loss_rate
    }

    /// Runs the stub analysis over `entries`. `script` supplies run-time aux
    /// demands, which must all be in `aux_available`. Always consumes one
    /// failure draw so schedules stay reproducible.
    pub fn run_stub_binary(
        &mut self,
        task_index: usize,
        entries: &[String],
        script: Option<&Script>,
        aux_available: &BTreeSet<String>,
    ) -> Result<StubRunResult, StubFailure> {
        let u: f64 = self.rng.gen();
        if let Some(s) = script {
            if let Some(missing) = s
                .runtime_aux_demands()
                .into_iter()
                .find(|a| !aux_available.contains(a))
            {
                return Err(StubFailure::MissingAux(missing));
            }
        }
        let mut runs = BTreeSet::new();
        for entry in entries {
            let physical = resolve_with(self.bfroot(), entry)
                .map_err(|_| StubFailure::Unresolvable(entry.clone()))?;
            if !self.present.contains(entry) {
                return Err(StubFailure::MissingFile(physical));
            }
            let name = entry.rsplit('/').next().unwrap_or(entry);
            let ds = DatasetName::parse(name).map_err(|_| StubFailure::Unresolvable(entry.clone()))?;
            runs.insert(ds.run_number);
        }
        if u < self.config.failure_rate {
            return Err(StubFailure::Injected);
        }
        let meta = self.catalog.meta();
        let events = runs
            .iter()
            .map(|r| meta.run(*r).map_or(crate::catalog::NOMINAL_RUN_EVENTS, |rec| rec.event_count))
            .sum();
        let runs: Vec<u32> = runs.into_iter().collect();
        let payload = StubPayload {
            site_id: self.id().to_string(),
            task_index,
            runs: runs.clone(),
            events,
        };
        let csv: Vec<String> = runs.iter().map(u32::to_string).collect();
        Ok(StubRunResult {
            task_index,
            manifest_text: format!("task {task_index} runs {} events {events}\n", csv.join(",")),
            runs_processed: runs,
            events,
            payload: payload.render(),
        })
    }

    /// Moves a finished output into the superjob's outbox and rebuilds its tar.
    pub fn finish_job(
        &mut self,
        superjob_id: &str,
        result: &StubRunResult,
    ) -> Result<&SuperjobOutbox, SiteError> {
        let outbox = self
            .outboxes
            .get_mut(superjob_id)
            .ok_or_else(|| SiteError::UnknownOutbox(superjob_id.to_string()))?;
        let name = output_name(result.task_index);
        if outbox.files.contains_key(&name) {
            return Err(SiteError::DuplicateOutput {
                superjob_id: superjob_id.to_string(),
                nn: result.task_index,
            });
        }
        outbox.files.insert(name, result.payload.clone());
        outbox.rebuild();
        Ok(outbox)
    }

    /// Access as a given account; other accounts are refused.
    pub fn read_outbox(&self, account: &str, superjob_id: &str) -> Result<&SuperjobOutbox, SiteError> {
        let outbox = self.outbox(superjob_id)?;
        if outbox.owner != account {
            return Err(SiteError::AccessDenied {
                account: account.to_string(),
                superjob_id: superjob_id.to_string(),
            });
        }
        Ok(outbox)
    }

    /// Gatekeeper-level read used by the grid-side fetch.
    pub fn outbox(&self, superjob_id: &str) -> Result<&SuperjobOutbox, SiteError> {
        self.outboxes
            .get(superjob_id)
            .ok_or_else(|| SiteError::UnknownOutbox(superjob_id.to_string()))
    }

    /// Writes `<dir>/<superjob_id>/output-<nn>` and `<dir>/<superjob_id>.tar`.
    pub fn export_gatekeeper(&self, dir: &Path) -> Result<(), SiteError> {
        let io = |e: std::io::Error| SiteError::Io(e.to_string());
        for (id, outbox) in &self.outboxes {
            let sub = dir.join(id);
            fs::create_dir_all(&sub).map_err(io)?;
            for (name, bytes) in &outbox.files {
                fs::write(sub.join(name), bytes).map_err(io)?;
            }
            if !outbox.is_empty() {
                fs::write(dir.join(format!("{id}.tar")), &outbox.rolling_tar).map_err(io)?;
            }
        }
        Ok(())
    }
}

impl fmt::Display for StageOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StageOutcome::Cached => "cached",
            StageOutcome::Skipped => "skipped",
        })
    }
}
