//! Authentication, authorization and accounting for visiting users.
//!
//! The flow is:
//!
//! 1. a user copies the DN from their certificate into a well-known file in
//!    their home area ([`Registry::register_dn`]);
//! 2. a scan of the home registry keeps the DNs whose owners pass the
//!    experiment ACL and forwards them to the VO server ([`Registry::scan`],
//!    [`VoServer::receive`]);
//! 3. the VO server folds them into its published list ([`publish_vo`]);
//! 4. every site pulls that list and rewrites the VO-appended tail of its
//!    gridmap, leaving site-specific lines alone ([`sync_gridmap`]);
//! 5. at request time a DN without a specific account gets a pooled one,
//!    preferring the account it held last time ([`AccountPool::map_dn`]).
//!
//! With M users and N sites a round costs M registrations plus N syncs.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::transport::{Endpoint, MessageKind, Transport};

/// Well-known name of the file holding a user's DN inside their home area.
pub const REGISTRATION_FILENAME: &str = ".grid-dn";

/// Comment line separating site-specific gridmap lines from VO-appended ones.
pub const VO_APPENDED_MARKER: &str = "# --- vo-appended ---";

pub const DEFAULT_POOL_PREFIX: &str = "babar";
pub const DEFAULT_POOL_WIDTH: usize = 2;
pub const DEFAULT_POOL_SIZE: u32 = 99;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum AuthzError {
    #[error("malformed DN {dn:?}: component {component} ({reason})")]
    MalformedDn {
        dn: String,
        /// Zero-based index of the first bad `/`-separated component.
        component: usize,
        reason: &'static str,
    },
    #[error("invalid user id {0:?}")]
    InvalidUserId(String),
    #[error("cannot scan registry {path}: {message}")]
    Scan { path: PathBuf, message: String },
    #[error("registry write failed at {path}: {message}")]
    RegistryWrite { path: PathBuf, message: String },
    #[error("gridmap line {line}: {reason}")]
    GridmapSyntax { line: usize, reason: String },
    #[error("VO list line {line}: {reason}")]
    VoListSyntax { line: usize, reason: String },
    #[error("DN {0} is not in the site gridmap")]
    NotInGridmap(DistinguishedName),
    #[error("pool exhausted at site {site_id}: all {size} accounts are live")]
    PoolExhausted { site_id: String, size: u32 },
    #[error("specific account {account} for {dn} collides with the pool namespace")]
    SpecificInPoolNamespace {
        dn: DistinguishedName,
        account: String,
    },
    #[error("invalid pool configuration: {0}")]
    PoolConfig(String),
}

/// Certificate subject, e.g. `/O=uk/OU=manchester/CN=Alice`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct DistinguishedName(String);

impl DistinguishedName {
    pub fn parse(s: &str) -> Result<Self, AuthzError> {
        let bad = |component, reason| AuthzError::MalformedDn {
            dn: s.to_string(),
            component,
            reason,
        };
        let Some(body) = s.strip_prefix('/') else {
            return Err(bad(0, "must begin with '/'"));
        };
        for (i, comp) in body.split('/').enumerate() {
            if comp.is_empty() {
                return Err(bad(i, "empty component"));
            }
            if comp.matches('=').count() != 1 {
                return Err(bad(i, "component needs exactly one '='"));
            }
            if comp.starts_with('=') {
                return Err(bad(i, "empty attribute name"));
            }
            if comp.chars().any(|c| c == '"' || c.is_control()) {
                return Err(bad(i, "quote or control character"));
            }
        }
        Ok(Self(s.to_string()))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// Value of the last `CN=` component, if any.
    pub fn common_name(&self) -> Option<&str> {
        self.0
            .split('/')
            .filter_map(|c| c.strip_prefix("CN="))
            .next_back()
    }
}

impl FromStr for DistinguishedName {
    type Err = AuthzError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::parse(s)
    }
}

impl TryFrom<String> for DistinguishedName {
    type Error = AuthzError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        Self::parse(&s)
    }
}

impl From<DistinguishedName> for String {
    fn from(dn: DistinguishedName) -> Self {
        dn.0
    }
}

impl fmt::Display for DistinguishedName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

fn validate_user_id(user_id: &str) -> Result<(), AuthzError> {
    let ok = !user_id.is_empty()
        && !user_id.starts_with('.')
        && user_id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-' || c == '.');
    if ok {
        Ok(())
    } else {
        Err(AuthzError::InvalidUserId(user_id.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegistrationFile {
    pub user_id: String,
    pub dn: DistinguishedName,
    /// Path relative to the registry root: `<user_id>/<REGISTRATION_FILENAME>`.
    pub path: PathBuf,
}

/// Home areas of all experiment accounts, one directory per user.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Registry {
    root: PathBuf,
    filename: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ScanReport {
    /// Authorized registrations, in registry enumeration order (user ids sorted).
    pub candidates: Vec<RegistrationFile>,
    /// Users with a registration file who fail the ACL.
    pub skipped: Vec<String>,
    /// Registration files whose content is not a valid DN.
    pub rejected: Vec<(String, AuthzError)>,
}

impl ScanReport {
    pub fn dns(&self) -> Vec<DistinguishedName> {
        self.candidates.iter().map(|r| r.dn.clone()).collect()
    }
}

impl Registry {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self {
            root: root.into(),
            filename: REGISTRATION_FILENAME.to_string(),
        }
    }

    pub fn with_filename(root: impl Into<PathBuf>, filename: impl Into<String>) -> Self {
        Self {
            root: root.into(),
            filename: filename.into(),
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn register_dn(
        &self,
        user_id: &str,
        dn: &DistinguishedName,
    ) -> Result<RegistrationFile, AuthzError> {
        validate_user_id(user_id)?;
        let rel = Path::new(user_id).join(&self.filename);
        let abs = self.root.join(&rel);
        let write_err = |e: io::Error| AuthzError::RegistryWrite {
            path: abs.clone(),
            message: e.to_string(),
        };
        fs::create_dir_all(self.root.join(user_id)).map_err(write_err)?;
        fs::write(&abs, format!("{dn}\n")).map_err(write_err)?;
        Ok(RegistrationFile {
            user_id: user_id.to_string(),
            dn: dn.clone(),
            path: rel,
        })
    }

    /// Removes a user's registration file. Returns whether one existed.
    pub fn unregister(&self, user_id: &str) -> Result<bool, AuthzError> {
        validate_user_id(user_id)?;
        let abs = self.root.join(user_id).join(&self.filename);
        match fs::remove_file(&abs) {
            Ok(()) => Ok(true),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(false),
            Err(e) => Err(AuthzError::RegistryWrite {
                path: abs,
                message: e.to_string(),
            }),
        }
    }

    /// User ids that have a home directory, in enumeration order.
    pub fn users(&self) -> Result<Vec<String>, AuthzError> {
        let scan_err = |e: io::Error| AuthzError::Scan {
            path: self.root.clone(),
            message: e.to_string(),
        };
        let mut users = Vec::new();
        for entry in fs::read_dir(&self.root).map_err(scan_err)? {
            let entry = entry.map_err(scan_err)?;
            if entry.file_type().map_err(scan_err)?.is_dir() {
                users.push(entry.file_name().to_string_lossy().into_owned());
            }
        }
        users.sort();
        Ok(users)
    }

    pub fn scan(&self, acl: &AclList) -> Result<ScanReport, AuthzError> {
        let mut report = ScanReport::default();
        for user in self.users()? {
            let rel = Path::new(&user).join(&self.filename);
            let text = match fs::read_to_string(self.root.join(&rel)) {
                Ok(text) => text,
                Err(e) if e.kind() == io::ErrorKind::NotFound => continue,
                Err(e) => {
                    return Err(AuthzError::Scan {
                        path: self.root.clone(),
                        message: format!("{}: {e}", rel.display()),
                    })
                }
            };
            if !acl.is_authorized(&user) {
                report.skipped.push(user);
                continue;
            }
            match DistinguishedName::parse(text.trim()) {
                Ok(dn) => report.candidates.push(RegistrationFile {
                    user_id: user,
                    dn,
                    path: rel,
                }),
                Err(e) => {
                    log::warn!("registration for {user} rejected: {e}");
                    report.rejected.push((user, e));
                }
            }
        }
        Ok(report)
    }
}

/// Experiment authorization list keyed by home-registry user id.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AclList {
    entries: BTreeMap<String, bool>,
}

impl AclList {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, user_id: impl Into<String>, authorized: bool) {
        self.entries.insert(user_id.into(), authorized);
    }

    pub fn is_authorized(&self, user_id: &str) -> bool {
        self.entries.get(user_id).copied().unwrap_or(false)
    }

    /// Parses `<user_id> <0|1>` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self, AuthzError> {
        let mut acl = Self::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let (Some(user), Some(flag), None) = (parts.next(), parts.next(), parts.next()) else {
                return Err(AuthzError::InvalidUserId(format!("acl line {}: {line}", i + 1)));
            };
            let authorized = match flag {
                "1" => true,
                "0" => false,
                _ => return Err(AuthzError::InvalidUserId(format!("acl line {}: {line}", i + 1))),
            };
            acl.set(user, authorized);
        }
        Ok(acl)
    }

    pub fn to_text(&self) -> String {
        self.entries
            .iter()
            .map(|(u, a)| format!("{u} {}\n", u8::from(*a)))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VoEntry {
    pub dn: DistinguishedName,
    pub registered_at: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct VoList {
    pub entries: Vec<VoEntry>,
    pub version: u64,
}

impl VoList {
    pub fn contains(&self, dn: &DistinguishedName) -> bool {
        self.entries.iter().any(|e| &e.dn == dn)
    }

    pub fn dns(&self) -> impl Iterator<Item = &DistinguishedName> {
        self.entries.iter().map(|e| &e.dn)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// `<version>` header line, then one DN per line.
    pub fn export(&self) -> String {
        let mut out = format!("{}\n", self.version);
        for e in &self.entries {
            out.push_str(e.dn.as_str());
            out.push('\n');
        }
        out
    }

    /// Inverse of [`VoList::export`]. Registration times are not exported, so
    /// every parsed entry carries the list version as its timestamp.
    pub fn parse_export(text: &str) -> Result<Self, AuthzError> {
        let mut lines = text.lines();
        let version = lines
            .next()
            .and_then(|l| l.trim().parse::<u64>().ok())
            .ok_or(AuthzError::VoListSyntax {
                line: 1,
                reason: "missing version header".into(),
            })?;
        let mut list = VoList {
            entries: Vec::new(),
            version,
        };
        for (i, line) in lines.enumerate() {
            let dn = DistinguishedName::parse(line.trim()).map_err(|e| AuthzError::VoListSyntax {
                line: i + 2,
                reason: e.to_string(),
            })?;
            if list.contains(&dn) {
                return Err(AuthzError::VoListSyntax {
                    line: i + 2,
                    reason: format!("duplicate DN {dn}"),
                });
            }
            list.entries.push(VoEntry {
                dn,
                registered_at: version,
            });
        }
        Ok(list)
    }
}

/// Union of the current list and `candidates`. The version moves only when
/// the DN set actually grows.
pub fn publish_vo(candidates: &[DistinguishedName], current: &VoList, now: u64) -> VoList {
    let mut next = current.clone();
    let mut changed = false;
    for dn in candidates {
        if !next.contains(dn) {
            next.entries.push(VoEntry {
                dn: dn.clone(),
                registered_at: now,
            });
            changed = true;
        }
    }
    if changed {
        next.version += 1;
    }
    next
}

/// Drops DNs that are no longer backed by a registration.
pub fn retire_absent(current: &VoList, present: &[DistinguishedName]) -> VoList {
    let present: BTreeSet<_> = present.iter().collect();
    let mut next = current.clone();
    next.entries.retain(|e| present.contains(&e.dn));
    if next.entries.len() != current.entries.len() {
        next.version += 1;
    }
    next
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum GridmapOrigin {
    Specific,
    VoAppended,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridmapLine {
    pub dn: DistinguishedName,
    pub account: String,
    pub origin: GridmapOrigin,
}

/// Site DN-to-account map. Lookups take the first match, and specific lines
/// always come first, so a user's own account beats the generic one.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridmapFile {
    lines: Vec<GridmapLine>,
}

impl GridmapFile {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn lines(&self) -> &[GridmapLine] {
        &self.lines
    }

    pub fn specific(&self) -> impl Iterator<Item = &GridmapLine> {
        self.lines
            .iter()
            .filter(|l| l.origin == GridmapOrigin::Specific)
    }

    pub fn appended(&self) -> impl Iterator<Item = &GridmapLine> {
        self.lines
            .iter()
            .filter(|l| l.origin == GridmapOrigin::VoAppended)
    }

    /// Adds a site-specific line ahead of the VO-appended section.
    pub fn add_specific(&mut self, dn: DistinguishedName, account: impl Into<String>) {
        let at = self
            .lines
            .iter()
            .position(|l| l.origin == GridmapOrigin::VoAppended)
            .unwrap_or(self.lines.len());
        self.lines.insert(
            at,
            GridmapLine {
                dn,
                account: account.into(),
                origin: GridmapOrigin::Specific,
            },
        );
    }

    pub fn lookup(&self, dn: &DistinguishedName) -> Option<&GridmapLine> {
        self.lines.iter().find(|l| &l.dn == dn)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for l in self.specific() {
            out.push_str(&format!("\"{}\" {}\n", l.dn, l.account));
        }
        out.push_str(VO_APPENDED_MARKER);
        out.push('\n');
        for l in self.appended() {
            out.push_str(&format!("\"{}\" {}\n", l.dn, l.account));
        }
        out
    }

    /// Lines before the marker are specific, lines after it VO-appended.
    /// Other `#` comments and blank lines are ignored.
    pub fn parse(text: &str) -> Result<Self, AuthzError> {
        let mut lines = Vec::new();
        let mut origin = GridmapOrigin::Specific;
        let mut appended_dns = BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let syntax = |reason: &str| AuthzError::GridmapSyntax {
                line: line_no,
                reason: reason.to_string(),
            };
            if raw == VO_APPENDED_MARKER {
                if origin == GridmapOrigin::VoAppended {
                    return Err(syntax("repeated vo-appended marker"));
                }
                origin = GridmapOrigin::VoAppended;
                continue;
            }
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let rest = trimmed
                .strip_prefix('"')
                .ok_or_else(|| syntax("DN must be double-quoted"))?;
            let close = rest.find('"').ok_or_else(|| syntax("unterminated DN quote"))?;
            let dn = DistinguishedName::parse(&rest[..close])
                .map_err(|e| syntax(&e.to_string()))?;
            let account = rest[close + 1..].trim();
            if account.is_empty() || account.contains(char::is_whitespace) {
                return Err(syntax("expected exactly one account name"));
            }
            if origin == GridmapOrigin::VoAppended && !appended_dns.insert(dn.clone()) {
                return Err(syntax("duplicate vo-appended DN"));
            }
            lines.push(GridmapLine {
                dn,
                account: account.to_string(),
                origin,
            });
        }
        Ok(Self { lines })
    }
}

/// DNs a site manager refuses regardless of VO membership.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Blocklist {
    dns: BTreeSet<DistinguishedName>,
}

impl Blocklist {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, dn: DistinguishedName) {
        self.dns.insert(dn);
    }

    pub fn contains(&self, dn: &DistinguishedName) -> bool {
        self.dns.contains(dn)
    }

    /// One DN per line; blank lines and `#` comments ignored.
    pub fn parse(text: &str) -> Result<Self, AuthzError> {
        let mut list = Self::new();
        for line in text.lines().map(str::trim) {
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            list.insert(DistinguishedName::parse(line)?);
        }
        Ok(list)
    }
}

impl FromIterator<DistinguishedName> for Blocklist {
    fn from_iter<T: IntoIterator<Item = DistinguishedName>>(iter: T) -> Self {
        Self {
            dns: iter.into_iter().collect(),
        }
    }
}

/// Rebuilds the VO-appended section of a site gridmap from the VO list.
pub fn sync_gridmap(
    site_gridmap: &GridmapFile,
    vo_list: &VoList,
    blocklist: &Blocklist,
    pool_prefix: &str,
) -> GridmapFile {
    let specific: Vec<GridmapLine> = site_gridmap.specific().cloned().collect();
    let has_specific: BTreeSet<&DistinguishedName> = specific.iter().map(|l| &l.dn).collect();
    let appended: Vec<GridmapLine> = vo_list
        .dns()
        .filter(|dn| !blocklist.contains(dn) && !has_specific.contains(dn))
        .map(|dn| GridmapLine {
            dn: dn.clone(),
            account: pool_prefix.to_string(),
            origin: GridmapOrigin::VoAppended,
        })
        .collect();
    let mut lines = specific;
    lines.extend(appended);
    GridmapFile { lines }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolConfig {
    pub prefix: String,
    pub width: usize,
    pub size: u32,
}

impl Default for PoolConfig {
    fn default() -> Self {
        Self {
            prefix: DEFAULT_POOL_PREFIX.to_string(),
            width: DEFAULT_POOL_WIDTH,
            size: DEFAULT_POOL_SIZE,
        }
    }
}

impl PoolConfig {
    pub fn validate(&self) -> Result<(), AuthzError> {
        if self.prefix.is_empty() {
            return Err(AuthzError::PoolConfig("empty prefix".into()));
        }
        if self.size == 0 {
            return Err(AuthzError::PoolConfig("size must be at least 1".into()));
        }
        let capacity = 10u64.checked_pow(self.width as u32).map(|c| c - 1);
        if capacity.is_some_and(|c| u64::from(self.size) > c) {
            return Err(AuthzError::PoolConfig(format!(
                "size {} does not fit in {} digits",
                self.size, self.width
            )));
        }
        Ok(())
    }

    pub fn account_name(&self, n: u32) -> String {
        format!("{}{:0width$}", self.prefix, n, width = self.width)
    }

    /// Account number if `name` is one of this pool's generated accounts.
    pub fn account_number(&self, name: &str) -> Option<u32> {
        let digits = name.strip_prefix(&self.prefix)?;
        if digits.len() != self.width || !digits.bytes().all(|b| b.is_ascii_digit()) {
            return None;
        }
        let n: u32 = digits.parse().ok()?;
        (1..=self.size).contains(&n).then_some(n)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AccountKind {
    Specific,
    Pooled,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccountAssignment {
    pub dn: DistinguishedName,
    pub account_name: String,
    pub kind: AccountKind,
    /// True when this call moved a pooled account from free to live.
    pub fresh: bool,
}

/// Generic accounts `<prefix>01 … <prefix><size>` at one site.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccountPool {
    site_id: String,
    config: PoolConfig,
    live: BTreeMap<DistinguishedName, u32>,
    remembered: BTreeMap<DistinguishedName, u32>,
    free: BTreeSet<u32>,
}

impl AccountPool {
    pub fn new(site_id: impl Into<String>, config: PoolConfig) -> Result<Self, AuthzError> {
        config.validate()?;
        Ok(Self {
            site_id: site_id.into(),
            free: (1..=config.size).collect(),
            config,
            live: BTreeMap::new(),
            remembered: BTreeMap::new(),
        })
    }

    pub fn site_id(&self) -> &str {
        &self.site_id
    }

    pub fn config(&self) -> &PoolConfig {
        &self.config
    }

    pub fn live_account(&self, dn: &DistinguishedName) -> Option<String> {
        self.live.get(dn).map(|&n| self.config.account_name(n))
    }

    pub fn remembered_account(&self, dn: &DistinguishedName) -> Option<String> {
        self.remembered.get(dn).map(|&n| self.config.account_name(n))
    }

    pub fn live(&self) -> impl Iterator<Item = (&DistinguishedName, String)> {
        self.live.iter().map(|(dn, &n)| (dn, self.config.account_name(n)))
    }

    pub fn free_accounts(&self) -> impl Iterator<Item = String> + '_ {
        self.free.iter().map(|&n| self.config.account_name(n))
    }

    pub fn live_count(&self) -> usize {
        self.live.len()
    }

    pub fn free_count(&self) -> usize {
        self.free.len()
    }

    pub fn map_dn(
        &mut self,
        gridmap: &GridmapFile,
        dn: &DistinguishedName,
    ) -> Result<AccountAssignment, AuthzError> {
        let line = gridmap
            .lookup(dn)
            .ok_or_else(|| AuthzError::NotInGridmap(dn.clone()))?;
        if line.origin == GridmapOrigin::Specific {
            if self.config.account_number(&line.account).is_some() {
                return Err(AuthzError::SpecificInPoolNamespace {
                    dn: dn.clone(),
                    account: line.account.clone(),
                });
            }
            return Ok(AccountAssignment {
                dn: dn.clone(),
                account_name: line.account.clone(),
                kind: AccountKind::Specific,
                fresh: false,
            });
        }
        if let Some(&n) = self.live.get(dn) {
            return Ok(self.pooled(dn, n, false));
        }
        let n = match self.remembered.get(dn) {
            Some(&n) if self.free.contains(&n) => n,
            _ => *self.free.first().ok_or_else(|| AuthzError::PoolExhausted {
                site_id: self.site_id.clone(),
                size: self.config.size,
            })?,
        };
        self.free.remove(&n);
        self.live.insert(dn.clone(), n);
        self.remembered.insert(dn.clone(), n);
        Ok(self.pooled(dn, n, true))
    }

    fn pooled(&self, dn: &DistinguishedName, n: u32, fresh: bool) -> AccountAssignment {
        AccountAssignment {
            dn: dn.clone(),
            account_name: self.config.account_name(n),
            kind: AccountKind::Pooled,
            fresh,
        }
    }

    /// Returns the released account name, or `None` (with a warning) when
    /// `dn` held nothing.
    pub fn release_account(&mut self, dn: &DistinguishedName) -> Option<String> {
        match self.live.remove(dn) {
            Some(n) => {
                self.free.insert(n);
                Some(self.config.account_name(n))
            }
            None => {
                log::warn!("release at {}: {dn} holds no pooled account", self.site_id);
                None
            }
        }
    }

    /// Checks the structural invariants. Used by property tests.
    pub fn check_invariants(&self) -> Result<(), String> {
        let live: BTreeSet<u32> = self.live.values().copied().collect();
        if live.len() != self.live.len() {
            return Err("two DNs share a live account".into());
        }
        if !live.is_disjoint(&self.free) {
            return Err("an account is both live and free".into());
        }
        if live.len() + self.free.len() != self.config.size as usize {
            return Err("live and free do not cover the pool".into());
        }
        if live
            .iter()
            .chain(self.free.iter())
            .any(|n| !(1..=self.config.size).contains(n))
        {
            return Err("account outside the generated namespace".into());
        }
        for (dn, n) in &self.live {
            if self.remembered.get(dn) != Some(n) {
                return Err(format!("live {dn} not remembered"));
            }
        }
        Ok(())
    }
}

/// The VO server and the home-side scanning job feeding it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VoServer {
    list: VoList,
    inbox: Vec<DistinguishedName>,
    /// Whether every candidate of the last scan reached the server.
    last_scan_complete: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScanRound {
    pub forwarded: usize,
    pub undelivered: usize,
    pub skipped: Vec<String>,
}

impl Default for VoServer {
    fn default() -> Self {
        Self::new()
    }
}

impl VoServer {
    pub fn new() -> Self {
        Self {
            list: VoList::default(),
            inbox: Vec::new(),
            last_scan_complete: false,
        }
    }

    pub fn list(&self) -> &VoList {
        &self.list
    }

    pub fn pending(&self) -> &[DistinguishedName] {
        &self.inbox
    }

    /// Scans the registry and forwards each authorized DN to the server:
    /// one registration transaction per candidate.
    pub fn receive(
        &mut self,
        registry: &Registry,
        acl: &AclList,
        transport: &mut Transport,
    ) -> Result<ScanRound, AuthzError> {
        let report = registry.scan(acl)?;
        let mut round = ScanRound {
            forwarded: 0,
            undelivered: 0,
            skipped: report.skipped.clone(),
        };
        self.inbox.clear();
        for reg in &report.candidates {
            match transport.send(
                Endpoint::HomeRegistry,
                Endpoint::VoServer,
                MessageKind::VoRegistration,
            ) {
                Ok(()) => {
                    self.inbox.push(reg.dn.clone());
                    round.forwarded += 1;
                }
                Err(e) => {
                    log::warn!("registration of {} not forwarded: {e}", reg.user_id);
                    round.undelivered += 1;
                }
            }
        }
        self.last_scan_complete = round.undelivered == 0;
        Ok(round)
    }

    /// Folds the last scan into the published list. After a complete scan,
    /// DNs no longer registered are retired.
    pub fn publish(&mut self, now: u64) -> &VoList {
        let mut next = publish_vo(&self.inbox, &self.list, now);
        if self.last_scan_complete {
            next = retire_absent(&next, &self.inbox);
        }
        self.list = next;
        &self.list
    }

    /// One sync transaction: the site pulls the list and rewrites its gridmap.
    pub fn sync_site(
        &self,
        site_id: &str,
        gridmap: &GridmapFile,
        blocklist: &Blocklist,
        pool_prefix: &str,
        transport: &mut Transport,
    ) -> Result<GridmapFile, crate::transport::Undelivered> {
        transport.send(Endpoint::VoServer, Endpoint::site(site_id), MessageKind::VoSync)?;
        Ok(sync_gridmap(gridmap, &self.list, blocklist, pool_prefix))
    }
}
