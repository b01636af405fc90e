//! Data selection and site planning.
//!
//! Two planners split an analysis across sites:
//!
//! * [`allocate_priority`] queries each site in priority order, passing the
//!   runs already claimed by earlier sites as "badruns" so no run is
//!   assigned twice. Each query is a remote round trip.
//! * [`split_by_index`] computes the matching run list once and assigns runs
//!   from the synced availability index, with no per-site queries.
//!
//! On a fresh index with strict priority the two produce the same plan.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::catalog::{AvailabilityMatrix, FileRecord, MetadataCatalog, SiteCatalog, BFROOT_TOKEN};
use crate::clock::SimClock;

/// Files per task list when the caller does not say.
pub const DEFAULT_CHUNK_SIZE: usize = 100;

/// Simulated cost of one remote catalog query.
pub const DEFAULT_REMOTE_QUERY_SECS: u64 = 120;

/// Prefix of every data line in a task list file.
pub const INPUT_LINE_PREFIX: &str = "input add ";

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum QueryError {
    #[error("run range [{lo}, {hi}] is inverted")]
    InvertedRange { lo: u32, hi: u32 },
    #[error("chunk size must be at least 1")]
    ZeroChunk,
    #[error("site {0} listed twice in the priority order")]
    DuplicateSite(String),
    #[error("no catalog for site {0}")]
    UnknownSite(String),
    #[error("task list {name}: {reason}")]
    TaskList { name: String, reason: String },
    #[error("plan line {line}: {reason}")]
    PlanSyntax { line: usize, reason: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionCriteria {
    lo: u32,
    hi: u32,
    pub selection_type: String,
    pub processing_version: String,
    pub max_files: Option<usize>,
}

impl SelectionCriteria {
    pub fn new(
        lo: u32,
        hi: u32,
        selection_type: impl Into<String>,
        processing_version: impl Into<String>,
    ) -> Result<Self, QueryError> {
        if lo > hi {
            return Err(QueryError::InvertedRange { lo, hi });
        }
        Ok(Self {
            lo,
            hi,
            selection_type: selection_type.into(),
            processing_version: processing_version.into(),
            max_files: None,
        })
    }

    pub fn with_max_files(mut self, max: usize) -> Self {
        self.max_files = Some(max);
        self
    }

    pub fn run_range(&self) -> (u32, u32) {
        (self.lo, self.hi)
    }

    pub fn matches(&self, file: &FileRecord) -> bool {
        let d = &file.dataset;
        (self.lo..=self.hi).contains(&d.run_number)
            && d.selection_type == self.selection_type
            && d.processing_version == self.processing_version
    }

    fn uncapped(&self) -> Self {
        Self {
            max_files: None,
            ..self.clone()
        }
    }
}

/// Runs excluded from a query.
pub type BadRuns = BTreeSet<u32>;

fn sorted(mut files: Vec<FileRecord>) -> Vec<FileRecord> {
    files.sort_by(|a, b| (a.run(), &a.logical_path).cmp(&(b.run(), &b.logical_path)));
    files
}

/// Locally present files matching every criterion, ascending by run.
pub fn select_files(criteria: &SelectionCriteria, site: &SiteCatalog) -> Vec<FileRecord> {
    let mut files = sorted(
        site.meta()
            .files()
            .into_iter()
            .filter(|f| criteria.matches(f) && site.is_local(&f.logical_path))
            .cloned()
            .collect(),
    );
    if let Some(max) = criteria.max_files {
        files.truncate(max);
    }
    files
}

pub fn select_with_badruns(
    criteria: &SelectionCriteria,
    site: &SiteCatalog,
    badruns: &BadRuns,
) -> Vec<FileRecord> {
    select_files(criteria, site)
        .into_iter()
        .filter(|f| !badruns.contains(&f.run()))
        .collect()
}

/// One job's worth of input files, written out as `data-<nn>.tcl`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskList {
    pub index: usize,
    pub entries: Vec<String>,
}

impl TaskList {
    pub fn new(index: usize, entries: Vec<String>) -> Result<Self, QueryError> {
        let name = task_file_name(index);
        let bad = |reason: &str| QueryError::TaskList {
            name: name.clone(),
            reason: reason.to_string(),
        };
        if entries.is_empty() {
            return Err(bad("no entries"));
        }
        if let Some(e) = entries.iter().find(|e| !e.starts_with(BFROOT_TOKEN)) {
            return Err(bad(&format!("entry {e:?} lacks {BFROOT_TOKEN}")));
        }
        let unique: BTreeSet<&String> = entries.iter().collect();
        if unique.len() != entries.len() {
            return Err(bad("duplicate entry"));
        }
        Ok(Self { index, entries })
    }

    pub fn file_name(&self) -> String {
        task_file_name(self.index)
    }

    pub fn to_text(&self) -> String {
        self.entries
            .iter()
            .map(|e| format!("{INPUT_LINE_PREFIX}{e}\n"))
            .collect()
    }

    pub fn parse(index: usize, text: &str) -> Result<Self, QueryError> {
        let mut entries = Vec::new();
        for line in text.lines() {
            if line.trim().is_empty() {
                continue;
            }
            let path = line.strip_prefix(INPUT_LINE_PREFIX).ok_or_else(|| QueryError::TaskList {
                name: task_file_name(index),
                reason: format!("line {line:?} is not an input line"),
            })?;
            entries.push(path.trim().to_string());
        }
        Self::new(index, entries)
    }
}

pub fn task_file_name(index: usize) -> String {
    format!("data-{index}.tcl")
}

/// Parses the `nn` out of `data-<nn>.tcl`.
pub fn task_index_from_name(name: &str) -> Option<usize> {
    let file = name.rsplit('/').next()?;
    file.strip_prefix("data-")?.strip_suffix(".tcl")?.parse().ok()
}

pub fn chunk(records: &[FileRecord], chunk_size: usize) -> Result<Vec<TaskList>, QueryError> {
    if chunk_size == 0 {
        return Err(QueryError::ZeroChunk);
    }
    records
        .chunks(chunk_size)
        .enumerate()
        .map(|(i, c)| TaskList::new(i, c.iter().map(|f| f.logical_path.clone()).collect()))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SiteAssignment {
    pub site_id: String,
    pub runs: BTreeSet<u32>,
    pub tasks: Vec<TaskList>,
}

/// Which task lists run where. Sites appear in priority order and only if
/// they received at least one run.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SitePlan {
    pub assignments: Vec<SiteAssignment>,
    pub uncovered: BTreeSet<u32>,
}

impl SitePlan {
    pub fn is_empty(&self) -> bool {
        self.assignments.is_empty()
    }

    pub fn site(&self, site_id: &str) -> Option<&SiteAssignment> {
        self.assignments.iter().find(|a| a.site_id == site_id)
    }

    pub fn site_order(&self) -> Vec<&str> {
        self.assignments.iter().map(|a| a.site_id.as_str()).collect()
    }

    pub fn total_tasks(&self) -> usize {
        self.assignments.iter().map(|a| a.tasks.len()).sum()
    }

    pub fn assigned_runs(&self) -> BTreeSet<u32> {
        self.assignments.iter().flat_map(|a| a.runs.iter().copied()).collect()
    }

    /// `<site_id> data-<nn>.tcl` per task list.
    pub fn to_plan_text(&self) -> String {
        let mut out = String::new();
        for a in &self.assignments {
            for t in &a.tasks {
                out.push_str(&format!("{} {}\n", a.site_id, t.file_name()));
            }
        }
        out
    }

    /// Rebuilds a plan from its plan text, loading each task list through
    /// `load(site_id, file_name)`. Runs are recovered from dataset names in
    /// the entries; `uncovered` is not part of the file and comes back empty.
    pub fn from_plan_text(
        text: &str,
        mut load: impl FnMut(&str, &str) -> Result<String, String>,
    ) -> Result<Self, QueryError> {
        let mut plan = SitePlan::default();
        for (i, line) in text.lines().enumerate() {
            let syntax = |reason: String| QueryError::PlanSyntax { line: i + 1, reason };
            if line.trim().is_empty() {
                continue;
            }
            let (site, file) = line
                .split_once(' ')
                .ok_or_else(|| syntax("expected '<site_id> data-<nn>.tcl'".into()))?;
            let index = task_index_from_name(file)
                .ok_or_else(|| syntax(format!("bad task file name {file:?}")))?;
            let body = load(site, file).map_err(syntax)?;
            let task = TaskList::parse(index, &body)?;
            let runs: Vec<u32> = task
                .entries
                .iter()
                .filter_map(|e| e.rsplit('/').next())
                .filter_map(|n| crate::catalog::DatasetName::parse(n).ok())
                .map(|d| d.run_number)
                .collect();
            let slot = match plan.assignments.iter().position(|a| a.site_id == site) {
                Some(p) => p,
                None => {
                    plan.assignments.push(SiteAssignment {
                        site_id: site.to_string(),
                        runs: BTreeSet::new(),
                        tasks: Vec::new(),
                    });
                    plan.assignments.len() - 1
                }
            };
            plan.assignments[slot].runs.extend(runs);
            plan.assignments[slot].tasks.push(task);
        }
        Ok(plan)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Balance {
    /// Every run goes to the highest-priority site holding it.
    #[default]
    None,
    /// Runs held by several sites rotate among those holders.
    RoundRobin,
}

fn check_sites(sites: &[String]) -> Result<(), QueryError> {
    let mut seen = BTreeSet::new();
    for s in sites {
        if !seen.insert(s) {
            return Err(QueryError::DuplicateSite(s.clone()));
        }
    }
    Ok(())
}

/// Matching files of the whole catalog (flags ignored), with `max_files`
/// applied to the global list.
fn requested_files<'a>(
    criteria: &SelectionCriteria,
    files: impl IntoIterator<Item = &'a FileRecord>,
) -> Vec<FileRecord> {
    let mut seen = BTreeSet::new();
    let mut all = sorted(
        files
            .into_iter()
            .filter(|f| criteria.matches(f) && seen.insert(f.logical_path.clone()))
            .cloned()
            .collect(),
    );
    if let Some(max) = criteria.max_files {
        all.truncate(max);
    }
    all
}

fn assignment(site_id: &str, files: Vec<FileRecord>, chunk_size: usize) -> Result<SiteAssignment, QueryError> {
    Ok(SiteAssignment {
        site_id: site_id.to_string(),
        runs: files.iter().map(FileRecord::run).collect(),
        tasks: chunk(&files, chunk_size)?,
    })
}

/// Priority allocation by repeated remote queries with a growing badruns set.
/// Each site query advances `clock` by `query_latency` seconds.
pub fn allocate_priority(
    criteria: &SelectionCriteria,
    sites_in_priority: &[String],
    catalogs: &BTreeMap<String, SiteCatalog>,
    chunk_size: usize,
    clock: &mut SimClock,
    query_latency: u64,
) -> Result<SitePlan, QueryError> {
    check_sites(sites_in_priority)?;
    if chunk_size == 0 {
        return Err(QueryError::ZeroChunk);
    }
    let site_cats: Vec<&SiteCatalog> = sites_in_priority
        .iter()
        .map(|s| catalogs.get(s).ok_or_else(|| QueryError::UnknownSite(s.clone())))
        .collect::<Result<_, _>>()?;

    let requested = requested_files(
        criteria,
        site_cats.iter().flat_map(|c| c.meta().files()),
    );
    let requested_runs: BTreeSet<u32> = requested.iter().map(FileRecord::run).collect();
    let all_matching: BTreeSet<u32> = requested_files(
        &criteria.uncapped(),
        site_cats.iter().flat_map(|c| c.meta().files()),
    )
    .iter()
    .map(FileRecord::run)
    .collect();
    // runs cut by max_files are excluded up front
    let mut badruns: BadRuns = all_matching.difference(&requested_runs).copied().collect();
    let uncapped = criteria.uncapped();

    let mut plan = SitePlan::default();
    let mut claimed = BTreeSet::new();
    for cat in site_cats {
        clock.advance(query_latency);
        let files = select_with_badruns(&uncapped, cat, &badruns);
        if files.is_empty() {
            continue;
        }
        let a = assignment(&cat.site_id, files, chunk_size)?;
        claimed.extend(a.runs.iter().copied());
        badruns.extend(a.runs.iter().copied());
        plan.assignments.push(a);
    }
    plan.uncovered = requested_runs.difference(&claimed).copied().collect();
    Ok(plan)
}

/// Index-driven split: one global matching list, assignment by the
/// availability matrix.
pub fn split_by_index(
    criteria: &SelectionCriteria,
    catalog: &MetadataCatalog,
    matrix: &AvailabilityMatrix,
    sites_in_priority: &[String],
    chunk_size: usize,
    balance: Balance,
) -> Result<SitePlan, QueryError> {
    check_sites(sites_in_priority)?;
    if chunk_size == 0 {
        return Err(QueryError::ZeroChunk);
    }
    let requested = requested_files(criteria, catalog.files());
    let runs: BTreeSet<u32> = requested.iter().map(FileRecord::run).collect();

    let holders_of = |run: u32| -> Vec<&String> {
        let row = matrix.holders(run);
        sites_in_priority
            .iter()
            .filter(|s| row.is_some_and(|r| r.contains(*s)))
            .collect()
    };

    let mut owner: BTreeMap<u32, &String> = BTreeMap::new();
    let mut uncovered = BTreeSet::new();
    let mut shared_rank = 0usize;
    for &run in &runs {
        let holders = holders_of(run);
        match (holders.len(), balance) {
            (0, _) => {
                uncovered.insert(run);
            }
            (1, _) | (_, Balance::None) => {
                owner.insert(run, holders[0]);
            }
            (n, Balance::RoundRobin) => {
                owner.insert(run, holders[shared_rank % n]);
                shared_rank += 1;
            }
        }
    }

    let mut plan = SitePlan {
        uncovered,
        ..SitePlan::default()
    };
    for site in sites_in_priority {
        let files: Vec<FileRecord> = requested
            .iter()
            .filter(|f| owner.get(&f.run()) == Some(&site))
            .cloned()
            .collect();
        if !files.is_empty() {
            plan.assignments.push(assignment(site, files, chunk_size)?);
        }
    }
    Ok(plan)
}
