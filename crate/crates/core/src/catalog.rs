//! Run and dataset metadata catalog.
//!
//! Dataset names carry all the metadata a query needs, every site keeps a
//! replica of the catalog plus a per-file "local copy" flag, and a nightly
//! sync builds the run-by-site availability index from those flags.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::transport::{Endpoint, MessageKind, Transport};

/// Symbolic root every logical path starts with.
pub const BFROOT_TOKEN: &str = "$BFROOT/";

/// Nominal event count of one run.
pub const NOMINAL_RUN_EVENTS: u64 = 600_000;

const DATASET_SUFFIX: &str = ".data";

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CatalogError {
    #[error("dataset name {name:?}: bad {segment} segment ({reason})")]
    DatasetName {
        name: String,
        segment: &'static str,
        reason: String,
    },
    #[error("path {0:?} does not start with {BFROOT_TOKEN}")]
    MissingRootToken(String),
    #[error("unknown logical path {0:?}")]
    UnknownPath(String),
    #[error("run {run} already has a file for context {context}")]
    DuplicateDataset { run: u32, context: String },
    #[error("catalog line {line}: {reason}")]
    Syntax { line: usize, reason: String },
}

fn is_token(s: &str) -> bool {
    !s.is_empty() && s.bytes().all(|b| b.is_ascii_alphanumeric())
}

/// `run<6 digits>-proc<token>-sel<token>-typ<token>.data`
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct DatasetName {
    pub run_number: u32,
    pub processing_version: String,
    pub selection_version: String,
    pub selection_type: String,
}

impl DatasetName {
    pub fn new(
        run_number: u32,
        processing_version: &str,
        selection_version: &str,
        selection_type: &str,
    ) -> Result<Self, CatalogError> {
        let encoded = format!(
            "run{run_number:06}-proc{processing_version}-sel{selection_version}-typ{selection_type}{DATASET_SUFFIX}"
        );
        Self::parse(&encoded)
    }

    pub fn parse(name: &str) -> Result<Self, CatalogError> {
        let err = |segment, reason: &str| CatalogError::DatasetName {
            name: name.to_string(),
            segment,
            reason: reason.to_string(),
        };
        let stem = name
            .strip_suffix(DATASET_SUFFIX)
            .ok_or_else(|| err("suffix", "expected .data"))?;
        let segs: Vec<&str> = stem.split('-').collect();
        if segs.len() != 4 {
            return Err(err("structure", "expected four '-'-separated segments"));
        }
        let digits = segs[0]
            .strip_prefix("run")
            .ok_or_else(|| err("run", "missing 'run' prefix"))?;
        if digits.len() != 6 || !digits.bytes().all(|b| b.is_ascii_digit()) {
            return Err(err("run", "expected exactly six digits"));
        }
        let run_number: u32 = digits.parse().map_err(|_| err("run", "not a number"))?;
        if run_number == 0 {
            return Err(err("run", "run numbers start at 1"));
        }
        let token = |seg: &str, prefix: &str, label| -> Result<String, CatalogError> {
            let t = seg
                .strip_prefix(prefix)
                .ok_or_else(|| err(label, &format!("missing '{prefix}' prefix")))?;
            if !is_token(t) {
                return Err(err(label, "token must be [A-Za-z0-9]+"));
            }
            Ok(t.to_string())
        };
        Ok(Self {
            run_number,
            processing_version: token(segs[1], "proc", "processing")?,
            selection_version: token(segs[2], "sel", "selection")?,
            selection_type: token(segs[3], "typ", "type")?,
        })
    }

    /// The (processing, selection, type) triple a run number is unique within.
    pub fn context(&self) -> String {
        format!(
            "proc{}-sel{}-typ{}",
            self.processing_version, self.selection_version, self.selection_type
        )
    }
}

impl fmt::Display for DatasetName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "run{:06}-proc{}-sel{}-typ{}{DATASET_SUFFIX}",
            self.run_number, self.processing_version, self.selection_version, self.selection_type
        )
    }
}

impl FromStr for DatasetName {
    type Err = CatalogError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::parse(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_number: u32,
    pub event_count: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileRecord {
    pub dataset: DatasetName,
    pub logical_path: String,
    pub size_hint: u64,
}

impl FileRecord {
    /// Record at the default layout `$BFROOT/kanga/<dataset>`.
    pub fn for_dataset(dataset: DatasetName) -> Self {
        Self {
            logical_path: format!("{BFROOT_TOKEN}kanga/{dataset}"),
            dataset,
            size_hint: 0,
        }
    }

    pub fn run(&self) -> u32 {
        self.dataset.run_number
    }
}

fn context_key(f: &FileRecord) -> String {
    format!("{}/{}", f.run(), f.dataset.context())
}

/// Site-independent part of the catalog: runs and their files.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetadataCatalog {
    runs: BTreeMap<u32, RunRecord>,
    files: BTreeMap<String, FileRecord>,
    /// `<run>/<context>` -> logical path, enforcing one file per run and context.
    by_context: BTreeMap<String, String>,
}

impl MetadataCatalog {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a file, creating a nominal run record if the run is new.
    pub fn insert(&mut self, file: FileRecord) -> Result<(), CatalogError> {
        if !file.logical_path.starts_with(BFROOT_TOKEN) {
            return Err(CatalogError::MissingRootToken(file.logical_path));
        }
        if let Some(existing) = self.files.get(&file.logical_path) {
            if existing == &file {
                return Ok(());
            }
        }
        let key = context_key(&file);
        if let Some(path) = self.by_context.get(&key) {
            if path != &file.logical_path {
                return Err(CatalogError::DuplicateDataset {
                    run: file.run(),
                    context: file.dataset.context(),
                });
            }
        }
        if let Some(old) = self.files.get(&file.logical_path) {
            self.by_context.remove(&context_key(old));
        }
        self.by_context.insert(key, file.logical_path.clone());
        self.runs.entry(file.run()).or_insert(RunRecord {
            run_number: file.run(),
            event_count: NOMINAL_RUN_EVENTS,
        });
        self.files.insert(file.logical_path.clone(), file);
        Ok(())
    }

    pub fn set_run(&mut self, record: RunRecord) {
        self.runs.insert(record.run_number, record);
    }

    pub fn run(&self, run: u32) -> Option<&RunRecord> {
        self.runs.get(&run)
    }

    pub fn runs(&self) -> impl Iterator<Item = &RunRecord> {
        self.runs.values()
    }

    pub fn file(&self, logical_path: &str) -> Option<&FileRecord> {
        self.files.get(logical_path)
    }

    /// Files ordered by (run, path).
    pub fn files(&self) -> Vec<&FileRecord> {
        let mut v: Vec<&FileRecord> = self.files.values().collect();
        v.sort_by(|a, b| (a.run(), &a.logical_path).cmp(&(b.run(), &b.logical_path)));
        v
    }

    pub fn len(&self) -> usize {
        self.files.len()
    }

    pub fn is_empty(&self) -> bool {
        self.files.is_empty()
    }

    /// Merges another catalog's records into this one.
    pub fn absorb(&mut self, other: &MetadataCatalog) -> Result<(), CatalogError> {
        for f in other.files.values() {
            self.insert(f.clone())?;
        }
        for r in other.runs.values() {
            self.runs.insert(r.run_number, *r);
        }
        Ok(())
    }
}

/// One site's replica of the metadata catalog plus its local-copy flags.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SiteCatalog {
    pub site_id: String,
    /// Absolute mount point substituted for `$BFROOT` at this site.
    pub bfroot: String,
    meta: MetadataCatalog,
    local_flag: BTreeMap<String, bool>,
    /// Last availability index received from the central catalog.
    index: Option<AvailabilityMatrix>,
}

impl SiteCatalog {
    pub fn new(site_id: impl Into<String>, bfroot: impl Into<String>) -> Self {
        Self {
            site_id: site_id.into(),
            bfroot: bfroot.into(),
            meta: MetadataCatalog::new(),
            local_flag: BTreeMap::new(),
            index: None,
        }
    }

    pub fn replica(
        site_id: impl Into<String>,
        bfroot: impl Into<String>,
        meta: &MetadataCatalog,
    ) -> Self {
        let mut cat = Self::new(site_id, bfroot);
        cat.meta = meta.clone();
        cat
    }

    pub fn meta(&self) -> &MetadataCatalog {
        &self.meta
    }

    pub fn meta_mut(&mut self) -> &mut MetadataCatalog {
        &mut self.meta
    }

    pub fn insert(&mut self, file: FileRecord) -> Result<(), CatalogError> {
        self.meta.insert(file)
    }

    pub fn set_local_flag(&mut self, logical_path: &str, present: bool) -> Result<(), CatalogError> {
        if self.meta.file(logical_path).is_none() {
            return Err(CatalogError::UnknownPath(logical_path.to_string()));
        }
        if present {
            self.local_flag.insert(logical_path.to_string(), true);
        } else {
            self.local_flag.remove(logical_path);
        }
        Ok(())
    }

    /// Sets the flag on every file of `run`. Returns how many files changed.
    pub fn set_run_local(&mut self, run: u32, present: bool) -> usize {
        let paths: Vec<String> = self
            .meta
            .files
            .values()
            .filter(|f| f.run() == run)
            .map(|f| f.logical_path.clone())
            .collect();
        for p in &paths {
            // paths come from the catalog itself
            let _ = self.set_local_flag(p, present);
        }
        paths.len()
    }

    pub fn is_local(&self, logical_path: &str) -> bool {
        self.local_flag.get(logical_path).copied().unwrap_or(false)
    }

    pub fn local_paths(&self) -> BTreeSet<&str> {
        self.local_flag
            .iter()
            .filter(|(_, &v)| v)
            .map(|(k, _)| k.as_str())
            .collect()
    }

    /// Runs with at least one locally flagged file.
    pub fn local_runs(&self) -> BTreeSet<u32> {
        self.local_paths()
            .into_iter()
            .filter_map(|p| self.meta.file(p))
            .map(FileRecord::run)
            .collect()
    }

    pub fn resolve_path(&self, logical_path: &str) -> Result<String, CatalogError> {
        resolve_with(&self.bfroot, logical_path)
    }

    pub fn index(&self) -> Option<&AvailabilityMatrix> {
        self.index.as_ref()
    }

    /// `<dataset_name> <local:0|1>` per line, sorted by run number.
    pub fn to_catalog_text(&self) -> String {
        self.meta
            .files()
            .into_iter()
            .map(|f| format!("{} {}\n", f.dataset, u8::from(self.is_local(&f.logical_path))))
            .collect()
    }

    /// Loads records in the [`SiteCatalog::to_catalog_text`] format into
    /// this catalog, using the default logical path layout.
    pub fn load_catalog_text(&mut self, text: &str) -> Result<usize, CatalogError> {
        let mut n = 0;
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let syntax = |reason: String| CatalogError::Syntax { line: i + 1, reason };
            let mut parts = line.split_whitespace();
            let (Some(name), Some(flag), None) = (parts.next(), parts.next(), parts.next()) else {
                return Err(syntax("expected '<dataset_name> <0|1>'".into()));
            };
            let dataset = DatasetName::parse(name).map_err(|e| syntax(e.to_string()))?;
            let local = match flag {
                "0" => false,
                "1" => true,
                other => return Err(syntax(format!("bad local flag {other:?}"))),
            };
            let record = FileRecord::for_dataset(dataset);
            let path = record.logical_path.clone();
            self.insert(record)?;
            self.set_local_flag(&path, local)?;
            n += 1;
        }
        Ok(n)
    }
}

/// Replaces the `$BFROOT/` token with a site mount point.
pub fn resolve_with(bfroot: &str, logical_path: &str) -> Result<String, CatalogError> {
    let suffix = logical_path
        .strip_prefix(BFROOT_TOKEN)
        .ok_or_else(|| CatalogError::MissingRootToken(logical_path.to_string()))?;
    Ok(format!("{}/{}", bfroot.trim_end_matches('/'), suffix))
}

/// Which runs are locally present at which sites, as of a sync round.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AvailabilityMatrix {
    pub rows: BTreeMap<u32, BTreeSet<String>>,
    pub as_of: u64,
}

impl AvailabilityMatrix {
    pub fn holders(&self, run: u32) -> Option<&BTreeSet<String>> {
        self.rows.get(&run)
    }

    /// Header `as_of <round>`, then `<run> <site>[,<site>...]` per available run.
    pub fn to_index_text(&self) -> String {
        let mut out = format!("as_of {}\n", self.as_of);
        for (run, sites) in &self.rows {
            if sites.is_empty() {
                continue;
            }
            let list: Vec<&str> = sites.iter().map(String::as_str).collect();
            out.push_str(&format!("{run} {}\n", list.join(",")));
        }
        out
    }

    pub fn parse_index_text(text: &str) -> Result<Self, CatalogError> {
        let mut lines = text.lines();
        let as_of = lines
            .next()
            .and_then(|l| l.strip_prefix("as_of "))
            .and_then(|v| v.trim().parse().ok())
            .ok_or(CatalogError::Syntax {
                line: 1,
                reason: "expected 'as_of <round>'".into(),
            })?;
        let mut rows = BTreeMap::new();
        for (i, line) in lines.enumerate() {
            let syntax = |reason: &str| CatalogError::Syntax {
                line: i + 2,
                reason: reason.to_string(),
            };
            let (run, sites) = line.split_once(' ').ok_or_else(|| syntax("expected '<run> <sites>'"))?;
            let run: u32 = run.parse().map_err(|_| syntax("bad run number"))?;
            let sites: BTreeSet<String> = sites.split(',').map(str::to_string).collect();
            if sites.iter().any(String::is_empty) {
                return Err(syntax("empty site id"));
            }
            if rows.insert(run, sites).is_some() {
                return Err(syntax("duplicate run"));
            }
        }
        Ok(Self { rows, as_of })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct SiteUpload {
    round: u64,
    runs: BTreeSet<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SyncOutcome {
    pub matrix: AvailabilityMatrix,
    pub message_count: usize,
    /// Sites whose contribution is a reused earlier upload (or nothing).
    pub stale: BTreeSet<String>,
}

/// The central side of the nightly availability sync.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AvailabilitySync {
    registered: BTreeSet<String>,
    uploads: BTreeMap<String, SiteUpload>,
    matrix: AvailabilityMatrix,
}

impl AvailabilitySync {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register_site(&mut self, site_id: impl Into<String>) {
        self.registered.insert(site_id.into());
    }

    pub fn registered(&self) -> &BTreeSet<String> {
        &self.registered
    }

    pub fn matrix(&self) -> &AvailabilityMatrix {
        &self.matrix
    }

    /// One round: each site uploads its flags, the index is rebuilt, and each
    /// site downloads a copy. Costs 2 messages per reachable site.
    pub fn nightly_sync<'a>(
        &mut self,
        sites: impl IntoIterator<Item = &'a mut SiteCatalog>,
        transport: &mut Transport,
    ) -> SyncOutcome {
        let round = self.matrix.as_of + 1;
        let mut sites: Vec<&mut SiteCatalog> = sites.into_iter().collect();
        let mut delivered = 0;
        let mut stale = BTreeSet::new();

        for site in sites.iter() {
            self.registered.insert(site.site_id.clone());
            let uploaded = transport.send(
                Endpoint::site(&site.site_id),
                Endpoint::CatalogCentral,
                MessageKind::FlagUpload,
            );
            match uploaded {
                Ok(()) => {
                    delivered += 1;
                    self.uploads.insert(
                        site.site_id.clone(),
                        SiteUpload {
                            round,
                            runs: site.local_runs(),
                        },
                    );
                }
                Err(e) => {
                    log::warn!("sync round {round}: {e}; reusing previous upload");
                    stale.insert(site.site_id.clone());
                }
            }
        }

        let mut rows: BTreeMap<u32, BTreeSet<String>> = BTreeMap::new();
        for (site_id, upload) in &self.uploads {
            if !self.registered.contains(site_id) {
                continue;
            }
            for &run in &upload.runs {
                rows.entry(run).or_default().insert(site_id.clone());
            }
        }
        self.matrix = AvailabilityMatrix { rows, as_of: round };

        for site in sites.iter_mut() {
            if transport
                .send(
                    Endpoint::CatalogCentral,
                    Endpoint::site(&site.site_id),
                    MessageKind::IndexDownload,
                )
                .is_ok()
            {
                delivered += 1;
                site.index = Some(self.matrix.clone());
            }
        }

        SyncOutcome {
            matrix: self.matrix.clone(),
            message_count: delivered,
            stale,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ds(run: u32) -> DatasetName {
        DatasetName::new(run, "R14", "V3", "Bch").unwrap()
    }

    fn site_with_runs(id: &str, runs: impl IntoIterator<Item = u32>) -> SiteCatalog {
        let mut s = SiteCatalog::new(id, format!("/data/{id}"));
        for r in runs {
            s.insert(FileRecord::for_dataset(ds(r))).unwrap();
        }
        s
    }

    #[test]
    fn dataset_name_grammar() {
        let d = DatasetName::parse("run000123-procR14-selV3-typBch.data").unwrap();
        assert_eq!(
            d,
            DatasetName {
                run_number: 123,
                processing_version: "R14".into(),
                selection_version: "V3".into(),
                selection_type: "Bch".into(),
            }
        );
        assert_eq!(d.to_string(), "run000123-procR14-selV3-typBch.data");
        for (bad, segment) in [
            ("garbage", "suffix"),
            ("garbage.data", "structure"),
            ("run12-procR14-selV3-typBch.data", "run"),
            ("run000000-procR14-selV3-typBch.data", "run"),
            ("run000001-proc-selV3-typBch.data", "processing"),
            ("run000001-procR14-xelV3-typBch.data", "selection"),
            ("run000001-procR14-selV3-typB_h.data", "type"),
        ] {
            match DatasetName::parse(bad) {
                Err(CatalogError::DatasetName { segment: s, .. }) => assert_eq!(s, segment, "{bad}"),
                other => panic!("{bad}: {other:?}"),
            }
        }
    }

    #[test]
    fn duplicate_context_rejected() {
        let mut m = MetadataCatalog::new();
        m.insert(FileRecord::for_dataset(ds(5))).unwrap();
        m.insert(FileRecord::for_dataset(ds(5))).unwrap();
        let mut other = FileRecord::for_dataset(ds(5));
        other.logical_path = "$BFROOT/elsewhere/x".into();
        assert!(matches!(m.insert(other), Err(CatalogError::DuplicateDataset { run: 5, .. })));
        // a different selection of the same run is fine
        m.insert(FileRecord::for_dataset(DatasetName::new(5, "R14", "V3", "Dst").unwrap()))
            .unwrap();
        let mut bad = FileRecord::for_dataset(ds(6));
        bad.logical_path = "relative/x".into();
        assert!(matches!(m.insert(bad), Err(CatalogError::MissingRootToken(_))));
    }

    #[test]
    fn local_flags() {
        let mut s = site_with_runs("A", 1..=100);
        let p = FileRecord::for_dataset(ds(3)).logical_path;
        s.set_local_flag(&p, true).unwrap();
        s.set_local_flag(&p, false).unwrap();
        assert!(s.local_paths().is_empty());
        assert!(matches!(
            s.set_local_flag("$BFROOT/nope", true),
            Err(CatalogError::UnknownPath(_))
        ));
        for r in (1..=100).step_by(10) {
            s.set_run_local(r, true);
        }
        assert_eq!(s.local_paths().len(), 10);
    }

    #[test]
    fn resolve_substitutes_root() {
        let a = SiteCatalog::new("A", "/data/a");
        let b = SiteCatalog::new("B", "/scratch/babar/");
        assert_eq!(a.resolve_path("$BFROOT/x/y").unwrap(), "/data/a/x/y");
        let pb = b.resolve_path("$BFROOT/x/y").unwrap();
        assert_eq!(pb, "/scratch/babar/x/y");
        assert!(pb.ends_with("/x/y"));
        assert!(matches!(
            a.resolve_path("relative/x"),
            Err(CatalogError::MissingRootToken(_))
        ));
    }

    #[test]
    fn catalog_text_round_trip() {
        let mut s = site_with_runs("A", [3, 1, 2]);
        s.set_run_local(2, true);
        let text = s.to_catalog_text();
        assert_eq!(
            text,
            "run000001-procR14-selV3-typBch.data 0\n\
             run000002-procR14-selV3-typBch.data 1\n\
             run000003-procR14-selV3-typBch.data 0\n"
        );
        let mut back = SiteCatalog::new("A", "/data/A");
        assert_eq!(back.load_catalog_text(&text).unwrap(), 3);
        assert_eq!(back.to_catalog_text(), text);
        assert!(back.load_catalog_text("run000001-procR14-selV3-typBch.data 2\n").is_err());
    }

    #[test]
    fn sync_counts_and_rows() {
        let mut t = Transport::new();
        let mut sync = AvailabilitySync::new();
        let none: Vec<&mut SiteCatalog> = Vec::new();
        let out = sync.nightly_sync(none, &mut t);
        assert!(out.matrix.rows.is_empty());
        assert_eq!(out.message_count, 0);

        let mut a = site_with_runs("A", 1..=10);
        let mut b = site_with_runs("B", 1..=10);
        let mut c = site_with_runs("C", 1..=10);
        a.set_run_local(7, true);
        c.set_run_local(7, true);
        b.set_run_local(3, true);
        let out = sync.nightly_sync([&mut a, &mut b, &mut c], &mut t);
        assert_eq!(out.message_count, 6);
        assert_eq!(t.len(), 6);
        let expect: BTreeSet<String> = ["A".to_string(), "C".to_string()].into();
        assert_eq!(out.matrix.rows[&7], expect);
        assert_eq!(out.matrix.as_of, 2);
        assert_eq!(a.index(), Some(&out.matrix));
    }

    #[test]
    fn staleness_lag() {
        let mut t = Transport::new();
        let mut sync = AvailabilitySync::new();
        let mut a = site_with_runs("A", 1..=3);
        a.set_run_local(1, true);
        sync.nightly_sync([&mut a], &mut t);
        a.set_run_local(2, true);
        assert!(sync.matrix().holders(2).is_none());
        sync.nightly_sync([&mut a], &mut t);
        assert!(sync.matrix().holders(2).is_some());
    }

    #[test]
    fn unreachable_site_reuses_previous_upload() {
        let mut t = Transport::new();
        let mut sync = AvailabilitySync::new();
        let mut a = site_with_runs("A", 1..=3);
        let mut b = site_with_runs("B", 1..=3);
        a.set_run_local(1, true);
        b.set_run_local(2, true);
        sync.nightly_sync([&mut a, &mut b], &mut t);
        b.set_run_local(3, true);
        t.cut_link(Endpoint::site("B"), Endpoint::CatalogCentral);
        let out = sync.nightly_sync([&mut a, &mut b], &mut t);
        assert_eq!(out.message_count, 2 * 2 - 1);
        assert_eq!(out.stale, BTreeSet::from(["B".to_string()]));
        assert!(out.matrix.holders(2).unwrap().contains("B"));
        assert!(out.matrix.holders(3).is_none());
        // fully partitioned: the download is not delivered either
        t.take_down(Endpoint::site("B"));
        let out = sync.nightly_sync([&mut a, &mut b], &mut t);
        assert_eq!(out.message_count, 2 * 2 - 2);
    }

    #[test]
    fn index_text_round_trip() {
        let mut m = AvailabilityMatrix { as_of: 4, ..Default::default() };
        m.rows.insert(7, ["A".to_string(), "C".to_string()].into());
        m.rows.insert(2, ["B".to_string()].into());
        let text = m.to_index_text();
        assert_eq!(text, "as_of 4\n2 B\n7 A,C\n");
        assert_eq!(AvailabilityMatrix::parse_index_text(&text).unwrap(), m);
        assert!(AvailabilityMatrix::parse_index_text("4\n").is_err());
    }

    proptest! {
        #[test]
        fn dataset_round_trip(run in 1u32..=999_999, p in "[A-Za-z0-9]{1,6}", s in "[A-Za-z0-9]{1,6}", ty in "[A-Za-z0-9]{1,6}") {
            let d = DatasetName::new(run, &p, &s, &ty).unwrap();
            prop_assert_eq!(DatasetName::parse(&d.to_string()).unwrap(), d.clone());
            prop_assert_eq!(d.to_string().parse::<DatasetName>().unwrap().to_string(), d.to_string());
        }

        #[test]
        fn matrix_equals_brute_force(flags in proptest::collection::vec(proptest::collection::vec(any::<bool>(), 12), 1..5)) {
            let mut sites: Vec<SiteCatalog> = (0..flags.len())
                .map(|i| site_with_runs(&format!("S{i}"), 1..=12))
                .collect();
            for (i, row) in flags.iter().enumerate() {
                for (r, &on) in row.iter().enumerate() {
                    sites[i].set_run_local(r as u32 + 1, on);
                }
            }
            let mut t = Transport::new();
            let out = AvailabilitySync::new().nightly_sync(sites.iter_mut(), &mut t);
            let mut expect: BTreeMap<u32, BTreeSet<String>> = BTreeMap::new();
            for (i, row) in flags.iter().enumerate() {
                for (r, &on) in row.iter().enumerate() {
                    if on {
                        expect.entry(r as u32 + 1).or_default().insert(format!("S{i}"));
                    }
                }
            }
            prop_assert_eq!(out.matrix.rows, expect);
            prop_assert_eq!(out.message_count, 2 * flags.len());
        }

        #[test]
        fn resolve_preserves_suffix(root in "/[a-z]{1,5}(/[a-z]{1,5}){0,2}", suffix in "[a-z0-9]{1,5}(/[a-z0-9.]{1,5}){0,3}") {
            let abs = resolve_with(&root, &format!("{BFROOT_TOKEN}{suffix}")).unwrap();
            let stripped = abs.strip_prefix(&format!("{root}/")).unwrap();
            prop_assert_eq!(stripped, suffix.as_str());
        }
    }
}
