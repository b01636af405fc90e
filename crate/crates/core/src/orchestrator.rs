//! Both submission paths over a simulated grid: per-task `gsub` into a
//! shared working directory, and hyperjobs made of one superjob per site,
//! each gated by a stage-in `job0`.
//!
//! Time is simulated. Public operations run at the current clock; queued
//! work only progresses through [`Grid::advance`] and [`Grid::drain`].

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::catalog::{AvailabilitySync, SyncOutcome};
use crate::clock::SimClock;
use crate::query::{task_index_from_name, SitePlan};
use crate::sandbox::{expand, DirResolver, SandboxManifest, Script};
use crate::sitesim::{output_name, Site, SiteConfig, SiteError, StageOutcome, StubFailure};
use crate::transport::{Endpoint, MessageKind, Transport};
use crate::vo::{AclList, AuthzError, Blocklist, DistinguishedName, Registry, ScanRound, VoServer};

/// Name of the token-login helper staged alongside the binary.
pub const TOKEN_LOGIN_HELPER: &str = "gsiklog";

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum OrchestratorError {
    #[error("unknown site {0}")]
    UnknownSite(String),
    #[error("unknown job {0}")]
    UnknownJob(String),
    #[error("unknown hyperjob {0}")]
    UnknownHyperjob(String),
    #[error("unknown superjob {0}")]
    UnknownSuperjob(String),
    #[error("unknown delegation token {0}")]
    UnknownToken(String),
    #[error("delegation {token} for {dn} expired at {expired_at}")]
    DelegationExpired { token: String, dn: DistinguishedName, expired_at: u64 },
    #[error("plan has no task lists")]
    EmptyPlan,
    #[error("gsub needs shared-filesystem mode")]
    WrongMode,
    #[error("authorization failed at {site}: {source}")]
    Authorization { site: String, source: SiteError },
    #[error("site {0} unreachable")]
    SiteUnreachable(String),
    #[error("job {0} has no log (it never ran or was lost)")]
    NoLog(String),
    #[error("vo: {0}")]
    Vo(#[from] AuthzError),
    #[error("site: {0}")]
    Site(SiteError),
}

pub type Result<T> = std::result::Result<T, OrchestratorError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridConfig {
    pub gsub_latency: u64,
    pub log_latency: u64,
    pub job_runtime: u64,
    pub job0_runtime: u64,
    /// Silence after which a running job is declared lost.
    pub lost_timeout: u64,
    pub proxy_lifetime: u64,
    pub query_latency: u64,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            gsub_latency: 10,
            log_latency: 30,
            job_runtime: 600,
            job0_runtime: 60,
            lost_timeout: 3600,
            proxy_lifetime: 12 * 3600,
            query_latency: crate::query::DEFAULT_REMOTE_QUERY_SECS,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum JobState {
    New,
    Submitted,
    Staged,
    Queued,
    Running,
    Done,
    Failed,
    Lost,
}

impl JobState {
    pub const ALL: [JobState; 8] = [
        JobState::New,
        JobState::Submitted,
        JobState::Staged,
        JobState::Queued,
        JobState::Running,
        JobState::Done,
        JobState::Failed,
        JobState::Lost,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            JobState::New => "new",
            JobState::Submitted => "submitted",
            JobState::Staged => "staged",
            JobState::Queued => "queued",
            JobState::Running => "running",
            JobState::Done => "done",
            JobState::Failed => "failed",
            JobState::Lost => "lost",
        }
    }

    pub fn is_terminal(self) -> bool {
        matches!(self, JobState::Done | JobState::Failed | JobState::Lost)
    }

    /// The only legal successor relation.
    pub fn can_become(self, next: JobState) -> bool {
        use JobState::*;
        matches!(
            (self, next),
            (New, Submitted)
                | (Submitted, Staged)
                | (Staged, Queued)
                | (Queued, Running)
                | (Running, Done | Failed | Lost)
        )
    }

    /// True when `seq` starts at `new` and follows the legal chain.
    pub fn is_legal_sequence(seq: &[JobState]) -> bool {
        seq.first().is_none_or(|s| *s == JobState::New)
            && seq.windows(2).all(|w| w[0].can_become(w[1]))
    }
}

impl fmt::Display for JobState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for JobState {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        JobState::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| format!("unknown job state {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum JobKind {
    Job0,
    Member,
    Gsub,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum SubmitMode {
    SharedFs { working_dir: PathBuf },
    StagedSandbox { manifest: SandboxManifest },
}

/// What the `gsub` command line describes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobSpec {
    pub site_id: String,
    pub binary: String,
    pub script: String,
    pub mode: SubmitMode,
    pub dn: DistinguishedName,
}

impl JobSpec {
    pub fn shared_fs(
        site_id: impl Into<String>,
        binary: impl Into<String>,
        script: impl Into<String>,
        working_dir: impl Into<PathBuf>,
        dn: DistinguishedName,
    ) -> Self {
        Self {
            site_id: site_id.into(),
            binary: binary.into(),
            script: script.into(),
            mode: SubmitMode::SharedFs {
                working_dir: working_dir.into(),
            },
            dn,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobHandle {
    pub job_id: String,
    pub site_id: String,
    pub nn: Option<usize>,
    pub state: JobState,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Job {
    pub id: String,
    pub kind: JobKind,
    pub site_id: String,
    /// Task index; `None` for job0.
    pub nn: Option<usize>,
    pub state: JobState,
    pub dn: DistinguishedName,
    pub binary: String,
    pub script: String,
    pub superjob_id: Option<String>,
    pub working_dir: Option<PathBuf>,
    /// Input entries of the task list (members only).
    pub entries: Vec<String>,
    /// `(time, state)` for every state entered.
    pub history: Vec<(u64, JobState)>,
    pub log: Option<String>,
    pub failure: Option<String>,
    doomed: bool,
}

impl Job {
    pub fn handle(&self) -> JobHandle {
        JobHandle {
            job_id: self.id.clone(),
            site_id: self.site_id.clone(),
            nn: self.nn,
            state: self.state,
        }
    }

    pub fn entered(&self, state: JobState) -> Option<u64> {
        self.history.iter().find(|(_, s)| *s == state).map(|(t, _)| *t)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Superjob {
    pub id: String,
    pub hyperjob_id: String,
    pub site_id: String,
    pub job0: String,
    pub jobs: Vec<String>,
    /// Set when job0 failed or the site refused the superjob.
    pub failed: Option<String>,
    /// Set when members could not be released after job0 (e.g. expired proxy).
    pub blocked: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Hyperjob {
    pub id: String,
    pub dn: DistinguishedName,
    pub token_id: String,
    pub superjobs: Vec<String>,
    pub plan: SitePlan,
    pub manifest: SandboxManifest,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProxyToken {
    pub id: String,
    pub dn: DistinguishedName,
    pub issued_at: u64,
    pub expires_at: u64,
}

impl ProxyToken {
    pub fn is_valid_at(&self, now: u64) -> bool {
        now < self.expires_at
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ForcedFate {
    Fail,
    Lose,
}

/// Deterministic fault injection on top of the sites' random rates.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaultPlan {
    pub job0_failures: BTreeSet<String>,
    pub forced: Vec<(String, usize, ForcedFate)>,
}

impl FaultPlan {
    fn forced(&self, site: &str, nn: usize) -> Option<ForcedFate> {
        self.forced
            .iter()
            .find(|(s, n, _)| s == site && *n == nn)
            .map(|(_, _, f)| *f)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobRow {
    pub job_id: String,
    pub site_id: String,
    pub nn: Option<usize>,
    pub kind: JobKind,
    pub state: JobState,
}

/// States read in one epoch.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Snapshot {
    pub epoch: u64,
    pub at: u64,
    pub rows: Vec<JobRow>,
}

impl Snapshot {
    pub fn count(&self, state: JobState) -> usize {
        self.rows.iter().filter(|r| r.state == state).count()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
enum Event {
    Dispatch { site: String },
    Finish { job: String },
    LostTimeout { job: String },
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
struct Scheduled {
    at: u64,
    seq: u64,
    event: Event,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VoRound {
    pub scan: ScanRound,
    pub vo_version: u64,
    pub synced: Vec<String>,
    pub unsynced: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Grid {
    pub config: GridConfig,
    clock: SimClock,
    pub transport: Transport,
    epoch: u64,
    sites: BTreeMap<String, Site>,
    pub vo: VoServer,
    pub acl: AclList,
    pub blocklist: Blocklist,
    pub availability: AvailabilitySync,
    pub faults: FaultPlan,
    jobs: BTreeMap<String, Job>,
    superjobs: BTreeMap<String, Superjob>,
    hyperjobs: BTreeMap<String, Hyperjob>,
    tokens: BTreeMap<String, ProxyToken>,
    event_log: Vec<String>,
    pending: BTreeSet<Scheduled>,
    seq: u64,
    counters: BTreeMap<String, u64>,
    /// Jobs between queued and terminal, per site and DN.
    active: BTreeMap<String, BTreeMap<DistinguishedName, usize>>,
}

impl Grid {
    pub fn new(config: GridConfig, sites: impl IntoIterator<Item = SiteConfig>) -> Result<Self> {
        let mut grid = Self {
            config,
            clock: SimClock::new(),
            transport: Transport::new(),
            epoch: 0,
            sites: BTreeMap::new(),
            vo: VoServer::new(),
            acl: AclList::new(),
            blocklist: Blocklist::new(),
            availability: AvailabilitySync::new(),
            faults: FaultPlan::default(),
            jobs: BTreeMap::new(),
            superjobs: BTreeMap::new(),
            hyperjobs: BTreeMap::new(),
            tokens: BTreeMap::new(),
            event_log: Vec::new(),
            pending: BTreeSet::new(),
            seq: 0,
            counters: BTreeMap::new(),
            active: BTreeMap::new(),
        };
        for s in sites {
            grid.add_site(s)?;
        }
        Ok(grid)
    }

    pub fn add_site(&mut self, config: SiteConfig) -> Result<()> {
        let site = Site::new(config).map_err(OrchestratorError::Site)?;
        self.availability.register_site(site.id());
        self.sites.insert(site.id().to_string(), site);
        Ok(())
    }

    pub fn now(&self) -> u64 {
        self.clock.now()
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn site(&self, id: &str) -> Result<&Site> {
        self.sites.get(id).ok_or_else(|| OrchestratorError::UnknownSite(id.to_string()))
    }

    pub fn site_mut(&mut self, id: &str) -> Result<&mut Site> {
        self.sites
            .get_mut(id)
            .ok_or_else(|| OrchestratorError::UnknownSite(id.to_string()))
    }

    pub fn sites(&self) -> impl Iterator<Item = &Site> {
        self.sites.values()
    }

    pub fn site_ids(&self) -> Vec<String> {
        self.sites.keys().cloned().collect()
    }

    pub fn job(&self, id: &str) -> Result<&Job> {
        self.jobs.get(id).ok_or_else(|| OrchestratorError::UnknownJob(id.to_string()))
    }

    pub fn jobs(&self) -> impl Iterator<Item = &Job> {
        self.jobs.values()
    }

    pub fn superjob(&self, id: &str) -> Result<&Superjob> {
        self.superjobs
            .get(id)
            .ok_or_else(|| OrchestratorError::UnknownSuperjob(id.to_string()))
    }

    pub fn hyperjob(&self, id: &str) -> Result<&Hyperjob> {
        self.hyperjobs
            .get(id)
            .ok_or_else(|| OrchestratorError::UnknownHyperjob(id.to_string()))
    }

    pub fn hyperjob_ids(&self) -> Vec<String> {
        self.hyperjobs.keys().cloned().collect()
    }

    pub fn token(&self, id: &str) -> Result<&ProxyToken> {
        self.tokens.get(id).ok_or_else(|| OrchestratorError::UnknownToken(id.to_string()))
    }

    /// Most recently issued delegation.
    pub fn latest_token(&self) -> Option<&ProxyToken> {
        self.tokens.values().max_by_key(|t| (t.issued_at, token_number(&t.id)))
    }

    /// `epoch <n> job <id> <from> <to>` lines, oldest first.
    pub fn event_log(&self) -> &[String] {
        &self.event_log
    }

    pub fn has_pending_events(&self) -> bool {
        !self.pending.is_empty()
    }

    fn next_id(&mut self, prefix: &str) -> String {
        let n = self.counters.entry(prefix.to_string()).or_insert(0);
        *n += 1;
        format!("{prefix}{n}")
    }

    fn bump(&mut self) {
        self.epoch += 1;
    }

    fn schedule(&mut self, at: u64, event: Event) {
        self.seq += 1;
        self.pending.insert(Scheduled { at, seq: self.seq, event });
    }

    // ---- VO and catalog rounds ----

    /// Scan, publish, then push the VO list to every site's gridmap.
    pub fn vo_round(&mut self, registry: &Registry) -> Result<VoRound> {
        self.bump();
        let scan = self.vo.receive(registry, &self.acl, &mut self.transport)?;
        let now = self.clock.now();
        let vo_version = self.vo.publish(now).version;
        let mut synced = Vec::new();
        let mut unsynced = Vec::new();
        for (id, site) in self.sites.iter_mut() {
            let prefix = site.pool.config().prefix.clone();
            match self
                .vo
                .sync_site(id, &site.gridmap, &self.blocklist, &prefix, &mut self.transport)
            {
                Ok(g) => {
                    site.gridmap = g;
                    synced.push(id.clone());
                }
                Err(e) => {
                    log::warn!("{e}");
                    unsynced.push(id.clone());
                }
            }
        }
        Ok(VoRound {
            scan,
            vo_version,
            synced,
            unsynced,
        })
    }

    pub fn catalog_sync(&mut self) -> SyncOutcome {
        self.bump();
        self.availability
            .nightly_sync(self.sites.values_mut().map(|s| &mut s.catalog), &mut self.transport)
    }

    // ---- delegation ----

    pub fn delegate_proxy(&mut self, dn: DistinguishedName, lifetime: u64) -> ProxyToken {
        self.bump();
        let now = self.clock.now();
        let token = ProxyToken {
            id: self.next_id("t"),
            dn,
            issued_at: now,
            expires_at: now + lifetime,
        };
        self.tokens.insert(token.id.clone(), token.clone());
        token
    }

    fn valid_token(&self, token_id: &str) -> Result<ProxyToken> {
        let t = self.token(token_id)?;
        if !t.is_valid_at(self.clock.now()) {
            return Err(OrchestratorError::DelegationExpired {
                token: t.id.clone(),
                dn: t.dn.clone(),
                expired_at: t.expires_at,
            });
        }
        Ok(t.clone())
    }

    // ---- job bookkeeping ----

    fn transition(&mut self, job_id: &str, to: JobState) {
        let now = self.clock.now();
        let job = self.jobs.get_mut(job_id).expect("transition on tracked job");
        assert!(job.state.can_become(to), "illegal {} -> {} for {job_id}", job.state, to);
        self.event_log
            .push(format!("epoch {} job {} {} {}", self.epoch, job_id, job.state, to));
        job.state = to;
        job.history.push((now, to));
        if to == JobState::Queued {
            *self
                .active
                .entry(job.site_id.clone())
                .or_default()
                .entry(job.dn.clone())
                .or_insert(0) += 1;
        }
        if to.is_terminal() {
            let (site_id, dn) = (job.site_id.clone(), job.dn.clone());
            self.retire_active(&site_id, &dn);
        }
    }

    fn retire_active(&mut self, site_id: &str, dn: &DistinguishedName) {
        let Some(per_dn) = self.active.get_mut(site_id) else { return };
        let Some(n) = per_dn.get_mut(dn) else { return };
        *n -= 1;
        if *n == 0 {
            per_dn.remove(dn);
            if let Some(site) = self.sites.get_mut(site_id) {
                if site.pool.live_account(dn).is_some() {
                    site.pool.release_account(dn);
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn create_job(
        &mut self,
        kind: JobKind,
        site_id: &str,
        nn: Option<usize>,
        dn: &DistinguishedName,
        binary: &str,
        script: &str,
        superjob_id: Option<String>,
        working_dir: Option<PathBuf>,
        entries: Vec<String>,
    ) -> String {
        let id = self.next_id("j");
        let job = Job {
            id: id.clone(),
            kind,
            site_id: site_id.to_string(),
            nn,
            state: JobState::New,
            dn: dn.clone(),
            binary: binary.to_string(),
            script: script.to_string(),
            superjob_id,
            working_dir,
            entries,
            history: vec![(self.clock.now(), JobState::New)],
            log: None,
            failure: None,
            doomed: false,
        };
        self.jobs.insert(id.clone(), job);
        self.transition(&id, JobState::Submitted);
        id
    }

    fn enqueue(&mut self, job_id: &str, from: Endpoint) {
        let site_id = self.jobs[job_id].site_id.clone();
        if let Err(e) = self
            .transport
            .send(from, Endpoint::site(&site_id), MessageKind::JobSubmit)
        {
            log::warn!("{e}");
        }
        self.transition(job_id, JobState::Queued);
        self.sites
            .get_mut(&site_id)
            .expect("queued on tracked site")
            .enqueue(job_id);
        let now = self.clock.now();
        self.schedule(now, Event::Dispatch { site: site_id });
    }

    /// Sends one artifact unless the site already caches it.
    fn stage(&mut self, site_id: &str, from: Endpoint, session: &crate::sitesim::Session, name: &str) -> Result<()> {
        let site = &self.sites[site_id];
        if site.has_artifact(name) {
            return Ok(());
        }
        self.transport
            .send(from, Endpoint::site(site_id), MessageKind::StageTransfer)
            .map_err(|_| OrchestratorError::SiteUnreachable(site_id.to_string()))?;
        let bytes = format!("stub artifact {name}\n");
        let out = self
            .sites
            .get_mut(site_id)
            .expect("tracked site")
            .stage_artifact(session, name, bytes.as_bytes());
        debug_assert_eq!(out, StageOutcome::Cached);
        Ok(())
    }

    // ---- gsub path ----

    /// Stage step then submit step for one task in shared-filesystem mode.
    /// The returned handle is `queued`.
    pub fn gsub(&mut self, spec: &JobSpec) -> Result<JobHandle> {
        self.bump();
        let SubmitMode::SharedFs { working_dir } = &spec.mode else {
            return Err(OrchestratorError::WrongMode);
        };
        self.site(&spec.site_id)?;
        self.clock.advance(self.config.gsub_latency);
        let now = self.clock.now();
        let site_ep = Endpoint::site(&spec.site_id);
        if !self.transport.reachable(&site_ep) {
            return Err(OrchestratorError::SiteUnreachable(spec.site_id.clone()));
        }
        // the caller holds a fresh local proxy
        let expiry = now + self.config.proxy_lifetime;
        let session = self
            .site_mut(&spec.site_id)?
            .gatekeep(&spec.dn, expiry, now)
            .map_err(|source| OrchestratorError::Authorization {
                site: spec.site_id.clone(),
                source,
            })?;
        self.stage(&spec.site_id, Endpoint::User, &session, TOKEN_LOGIN_HELPER)?;
        self.stage(&spec.site_id, Endpoint::User, &session, &spec.binary)?;

        let nn = task_index_from_name(&spec.script).unwrap_or_else(|| {
            self.jobs
                .values()
                .filter(|j| j.kind == JobKind::Gsub && j.working_dir.as_ref() == Some(working_dir))
                .count()
        });
        let id = self.create_job(
            JobKind::Gsub,
            &spec.site_id,
            Some(nn),
            &spec.dn,
            &spec.binary,
            &spec.script,
            None,
            Some(working_dir.clone()),
            Vec::new(),
        );
        self.transition(&id, JobState::Staged);
        self.enqueue(&id, Endpoint::User);
        Ok(self.jobs[&id].handle())
    }

    // ---- hyperjob path ----

    /// One superjob per planned site. Each job0 is queued now; members wait
    /// in `submitted` until their job0 is done.
    pub fn submit_hyperjob(
        &mut self,
        plan: &SitePlan,
        manifest: &SandboxManifest,
        token_id: &str,
    ) -> Result<String> {
        self.bump();
        if plan.total_tasks() == 0 {
            return Err(OrchestratorError::EmptyPlan);
        }
        let token = self.valid_token(token_id)?;
        for a in &plan.assignments {
            self.site(&a.site_id)?;
        }
        let hj = self.next_id("hj");
        let mut superjob_ids = Vec::new();
        let script = manifest.script_file_name().to_string();
        for a in plan.assignments.iter().filter(|a| !a.tasks.is_empty()) {
            let sj = self.next_id("sj");
            let job0 = self.create_job(
                JobKind::Job0,
                &a.site_id,
                None,
                &token.dn,
                &manifest.binary,
                &script,
                Some(sj.clone()),
                None,
                Vec::new(),
            );
            let members: Vec<String> = a
                .tasks
                .iter()
                .map(|t| {
                    self.create_job(
                        JobKind::Member,
                        &a.site_id,
                        Some(t.index),
                        &token.dn,
                        &manifest.binary,
                        &t.file_name(),
                        Some(sj.clone()),
                        None,
                        t.entries.clone(),
                    )
                })
                .collect();
            self.superjobs.insert(
                sj.clone(),
                Superjob {
                    id: sj.clone(),
                    hyperjob_id: hj.clone(),
                    site_id: a.site_id.clone(),
                    job0: job0.clone(),
                    jobs: members,
                    failed: None,
                    blocked: None,
                },
            );
            superjob_ids.push(sj.clone());
            if let Err(reason) = self.launch_job0(&sj, &job0, &token, manifest) {
                log::warn!("superjob {sj} at {}: {reason}", a.site_id);
                self.superjobs.get_mut(&sj).expect("just inserted").failed = Some(reason);
            }
        }
        self.hyperjobs.insert(
            hj.clone(),
            Hyperjob {
                id: hj.clone(),
                dn: token.dn.clone(),
                token_id: token.id.clone(),
                superjobs: superjob_ids,
                plan: plan.clone(),
                manifest: manifest.clone(),
            },
        );
        Ok(hj)
    }

    fn launch_job0(
        &mut self,
        sj: &str,
        job0: &str,
        token: &ProxyToken,
        manifest: &SandboxManifest,
    ) -> std::result::Result<(), String> {
        let site_id = self.superjobs[sj].site_id.clone();
        if !self.transport.reachable(&Endpoint::site(&site_id)) {
            return Err("site unreachable".into());
        }
        let now = self.clock.now();
        let session = self
            .sites
            .get_mut(&site_id)
            .expect("tracked site")
            .gatekeep(&token.dn, token.expires_at, now)
            .map_err(|e| e.to_string())?;
        self.stage(&site_id, Endpoint::Server, &session, &manifest.binary)
            .map_err(|e| e.to_string())?;
        // the flattened script and each aux file travel with every superjob
        for _ in 0..1 + manifest.aux_files.len() {
            self.transport
                .send(Endpoint::Server, Endpoint::site(&site_id), MessageKind::StageTransfer)
                .map_err(|e| e.to_string())?;
        }
        self.transition(job0, JobState::Staged);
        self.enqueue(job0, Endpoint::Server);
        Ok(())
    }

    fn release_members(&mut self, sj: &str) {
        let superjob = self.superjobs[sj].clone();
        let hj = &self.hyperjobs[&superjob.hyperjob_id];
        let token = self.tokens[&hj.token_id].clone();
        let now = self.clock.now();
        let gate = self
            .sites
            .get_mut(&superjob.site_id)
            .expect("tracked site")
            .gatekeep(&token.dn, token.expires_at, now);
        if let Err(e) = gate {
            log::warn!("superjob {sj}: members held: {e}");
            self.superjobs.get_mut(sj).expect("tracked").blocked = Some(e.to_string());
            return;
        }
        for m in &superjob.jobs {
            self.transition(m, JobState::Staged);
            self.enqueue(m, Endpoint::Server);
        }
    }

    // ---- simulation ----

    /// Processes every event due within the next `dt` seconds.
    pub fn advance(&mut self, dt: u64) {
        let target = self.clock.now() + dt;
        self.run_until(Some(target));
        self.clock.advance_to(target);
    }

    /// Runs until nothing is scheduled.
    pub fn drain(&mut self) {
        self.run_until(None);
    }

    fn run_until(&mut self, limit: Option<u64>) {
        while let Some(next) = self.pending.first().cloned() {
            if limit.is_some_and(|t| next.at > t) {
                break;
            }
            self.pending.remove(&next);
            self.clock.advance_to(next.at);
            self.bump();
            match next.event {
                Event::Dispatch { site } => self.on_dispatch(&site),
                Event::Finish { job } => self.on_finish(&job),
                Event::LostTimeout { job } => self.transition(&job, JobState::Lost),
            }
        }
    }

    fn on_dispatch(&mut self, site_id: &str) {
        let started = self.sites.get_mut(site_id).expect("tracked site").dispatch();
        let now = self.clock.now();
        for job_id in started {
            self.transition(&job_id, JobState::Running);
            let (kind, nn) = (self.jobs[&job_id].kind, self.jobs[&job_id].nn);
            let runtime = match kind {
                JobKind::Job0 => self.config.job0_runtime,
                _ => self.config.job_runtime,
            };
            let doomed = kind != JobKind::Job0 && {
                let drawn = self.sites.get_mut(site_id).expect("tracked site").draw_loss();
                let forced = nn.and_then(|n| self.faults.forced(site_id, n));
                drawn || forced == Some(ForcedFate::Lose)
            };
            self.schedule(now + runtime, Event::Finish { job: job_id.clone() });
            if doomed {
                self.jobs.get_mut(&job_id).expect("tracked").doomed = true;
                let silence = self.config.lost_timeout.max(runtime);
                self.schedule(now + silence, Event::LostTimeout { job: job_id });
            }
        }
    }

    fn on_finish(&mut self, job_id: &str) {
        let job = self.jobs[job_id].clone();
        let site_id = job.site_id.clone();
        self.sites.get_mut(&site_id).expect("tracked site").free_worker(job_id);
        let now = self.clock.now();
        self.schedule(now, Event::Dispatch { site: site_id.clone() });
        if job.doomed {
            // vanished without trace; the timeout marks it lost
            return;
        }
        match job.kind {
            JobKind::Job0 => self.finish_job0(&job),
            JobKind::Member => self.finish_member(&job),
            JobKind::Gsub => self.finish_gsub(&job),
        }
    }

    fn finish_job0(&mut self, job: &Job) {
        let sj = job.superjob_id.clone().expect("job0 belongs to a superjob");
        let site_id = &job.site_id;
        let mut log = vec![
            format!("job0 {sj} at {site_id}"),
            format!("mkdir {sj}"),
        ];
        if self.faults.job0_failures.contains(site_id) {
            log.push("ERROR: stage-in failed (injected)".into());
            self.set_outcome(&job.id, JobState::Failed, log, Some("job0 stage-in failed".into()));
            self.superjobs.get_mut(&sj).expect("tracked").failed = Some("job0 failed".into());
            return;
        }
        let manifest = self.hyperjobs[&self.superjobs[&sj].hyperjob_id].manifest.clone();
        let mut files = vec![manifest.binary.clone(), manifest.script_file_name().to_string()];
        files.extend(manifest.aux_files.iter().cloned());
        let now = self.clock.now();
        let token = self.tokens[&self.hyperjobs[&self.superjobs[&sj].hyperjob_id].token_id].clone();
        let site = self.sites.get_mut(site_id).expect("tracked site");
        // job0's session: the staged files belong to the mapped account
        let session = match site.gatekeep(&token.dn, token.expires_at.max(now + 1), now) {
            Ok(s) => s,
            Err(e) => {
                log.push(format!("ERROR: {e}"));
                self.set_outcome(&job.id, JobState::Failed, log, Some(e.to_string()));
                self.superjobs.get_mut(&sj).expect("tracked").failed = Some("job0 failed".into());
                return;
            }
        };
        site.stage_sandbox(&session, &sj, &files);
        for f in &files {
            log.push(format!("copy {f} -> {sj}/{f}"));
        }
        // members go out before job0's own slot is retired so the account stays mapped
        self.release_members(&sj);
        self.set_outcome(&job.id, JobState::Done, log, None);
    }

    fn finish_member(&mut self, job: &Job) {
        let sj = job.superjob_id.clone().expect("member belongs to a superjob");
        let nn = job.nn.expect("member has a task index");
        let manifest = self.hyperjobs[&self.superjobs[&sj].hyperjob_id].manifest.clone();
        let aux: BTreeSet<String> = manifest.aux_files.iter().cloned().collect();
        let site = self.sites.get_mut(&job.site_id).expect("tracked site");
        let mut log = vec![
            format!("session {} at {}", job.dn, job.site_id),
            format!("cd {sj}"),
            format!("export BFROOT={}", site.bfroot()),
            format!("{} {} {}", job.binary, manifest.script_file_name(), job.script),
        ];
        let mut outcome = site.run_stub_binary(nn, &job.entries, Some(&manifest.flattened_script), &aux);
        if outcome.is_ok() && self.faults.forced(&job.site_id, nn) == Some(ForcedFate::Fail) {
            outcome = Err(StubFailure::Injected);
        }
        match outcome {
            Ok(result) => {
                let site = self.sites.get_mut(&job.site_id).expect("tracked site");
                match site.finish_job(&sj, &result) {
                    Ok(_) => {
                        log.push(result.manifest_text.trim_end().to_string());
                        log.push(format!("mv {} {sj}/", output_name(nn)));
                        self.set_outcome(&job.id, JobState::Done, log, None);
                    }
                    Err(e) => {
                        log.push(format!("ERROR: {e}"));
                        self.set_outcome(&job.id, JobState::Failed, log, Some(e.to_string()));
                    }
                }
            }
            Err(f) => {
                log.push(format!("ERROR: {f}"));
                self.set_outcome(&job.id, JobState::Failed, log, Some(f.to_string()));
            }
        }
    }

    fn finish_gsub(&mut self, job: &Job) {
        let dir = job.working_dir.clone().expect("gsub job has a working dir");
        let nn = job.nn.expect("gsub job has an index");
        let site = self.sites.get_mut(&job.site_id).expect("tracked site");
        let mut log = vec![
            format!("{TOKEN_LOGIN_HELPER} {}", job.dn),
            format!("cd {}", dir.display()),
            format!("export BFROOT={}", site.bfroot()),
            format!("{} {}", job.binary, job.script),
        ];
        let outcome = run_shared_fs(site, &dir, &job.script, nn).and_then(|r| {
            if self.faults.forced(&job.site_id, nn) == Some(ForcedFate::Fail) {
                Err("injected failure".to_string())
            } else {
                Ok(r)
            }
        });
        match outcome {
            Ok(result) => {
                let out = dir.join(output_name(nn));
                match fs::write(&out, &result.payload) {
                    Ok(()) => {
                        log.push(result.manifest_text.trim_end().to_string());
                        self.set_outcome(&job.id, JobState::Done, log, None);
                    }
                    Err(e) => {
                        let msg = format!("cannot write {}: {e}", out.display());
                        log.push(format!("ERROR: {msg}"));
                        self.set_outcome(&job.id, JobState::Failed, log, Some(msg));
                    }
                }
            }
            Err(msg) => {
                log.push(format!("ERROR: {msg}"));
                self.set_outcome(&job.id, JobState::Failed, log, Some(msg));
            }
        }
    }

    fn set_outcome(&mut self, job_id: &str, state: JobState, log: Vec<String>, failure: Option<String>) {
        let job = self.jobs.get_mut(job_id).expect("tracked job");
        job.log = Some(log.join("\n") + "\n");
        job.failure = failure;
        self.transition(job_id, state);
    }

    // ---- monitoring ----

    pub fn poll_job(&mut self, job_id: &str) -> Result<Snapshot> {
        let job = self.job(job_id)?;
        Ok(Snapshot {
            epoch: self.epoch,
            at: self.clock.now(),
            rows: vec![row(job)],
        })
    }

    /// Rows ordered by plan site, job0 first.
    pub fn poll_hyperjob(&self, hyperjob_id: &str) -> Result<Snapshot> {
        let hj = self.hyperjob(hyperjob_id)?;
        let mut rows = Vec::new();
        for sj in &hj.superjobs {
            let s = &self.superjobs[sj];
            rows.push(row(&self.jobs[&s.job0]));
            rows.extend(s.jobs.iter().map(|j| row(&self.jobs[j])));
        }
        Ok(Snapshot {
            epoch: self.epoch,
            at: self.clock.now(),
            rows,
        })
    }

    /// True once nothing in the hyperjob can change state any more.
    pub fn hyperjob_settled(&self, hyperjob_id: &str) -> Result<bool> {
        let hj = self.hyperjob(hyperjob_id)?;
        Ok(hj.superjobs.iter().all(|sj| {
            let s = &self.superjobs[sj];
            let in_flight = std::iter::once(&s.job0).chain(&s.jobs).any(|j| {
                matches!(
                    self.jobs[j].state,
                    JobState::Staged | JobState::Queued | JobState::Running
                )
            });
            !in_flight && (s.failed.is_some() || self.jobs[&s.job0].state.is_terminal())
        }))
    }

    /// The wrapper output of a job that ran to completion or failure.
    pub fn retrieve_log(&mut self, job_id: &str) -> Result<String> {
        self.bump();
        let job = self.job(job_id)?.clone();
        let Some(log) = job.log else {
            return Err(OrchestratorError::NoLog(job_id.to_string()));
        };
        self.clock.advance(self.config.log_latency);
        self.transport
            .send(Endpoint::site(&job.site_id), Endpoint::Server, MessageKind::LogFetch)
            .map_err(|_| OrchestratorError::SiteUnreachable(job.site_id.clone()))?;
        Ok(log)
    }

    /// Copies one superjob's rolling tar back; `None` while its outbox is empty.
    pub fn fetch_outbox(&mut self, superjob_id: &str) -> Result<Option<Vec<u8>>> {
        let site_id = self.superjob(superjob_id)?.site_id.clone();
        self.transport
            .send(Endpoint::site(&site_id), Endpoint::Server, MessageKind::BundleFetch)
            .map_err(|_| OrchestratorError::SiteUnreachable(site_id.clone()))?;
        let site = self.site(&site_id)?;
        Ok(match site.outbox(superjob_id) {
            Ok(o) if !o.is_empty() => Some(o.tar().to_vec()),
            _ => None,
        })
    }
}

fn row(job: &Job) -> JobRow {
    JobRow {
        job_id: job.id.clone(),
        site_id: job.site_id.clone(),
        nn: job.nn,
        kind: job.kind,
        state: job.state,
    }
}

fn token_number(id: &str) -> u64 {
    id.trim_start_matches('t').parse().unwrap_or(0)
}

/// What the stub binary does when launched by the gsub wrapper: read the
/// script from the shared directory, follow its includes there, and read
/// any aux files from there too.
fn run_shared_fs(
    site: &mut Site,
    dir: &std::path::Path,
    script_name: &str,
    nn: usize,
) -> std::result::Result<crate::sitesim::StubRunResult, String> {
    let path = dir.join(script_name);
    let text = fs::read_to_string(&path).map_err(|_| format!("missing file {}", path.display()))?;
    let script = expand(&Script::parse(script_name, &text), &DirResolver::new(dir))
        .map_err(|e| e.to_string())?;
    let aux: BTreeSet<String> = script
        .runtime_aux_demands()
        .into_iter()
        .filter(|a| dir.join(a).is_file())
        .collect();
    let entries: Vec<String> = script.input_entries().map(str::to_string).collect();
    site.run_stub_binary(nn, &entries, Some(&script), &aux)
        .map_err(|e| e.to_string())
}
