//! Output collection: fetching per-site superjob tars, merging them into one
//! densely renumbered bundle, and listing shared-directory outputs.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::archive::{build_ustar, read_members};
use crate::catalog::{MetadataCatalog, NOMINAL_RUN_EVENTS};
use crate::orchestrator::{Grid, OrchestratorError};
use crate::query::SitePlan;
use crate::sitesim::{output_index, output_name, StubPayload};

pub const BUNDLE_MEDIA_TYPE: &str = "application/x-gridlet-bundle";
pub const MANIFEST_MEMBER: &str = "manifest.txt";

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CollectError {
    #[error("corrupt bundle from {site}: {reason}")]
    Corrupt { site: String, reason: String },
    #[error("output {nn} from {site} appears twice")]
    Duplicate { site: String, nn: usize },
    #[error("bundle from {0}, which is not in the plan")]
    UnplannedSite(String),
    #[error("merged bundle: {0}")]
    Malformed(String),
    #[error(transparent)]
    Grid(#[from] OrchestratorError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FetchedBundle {
    pub site_id: String,
    pub superjob_id: String,
    pub tar: Vec<u8>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FetchReport {
    pub bundles: Vec<FetchedBundle>,
    /// Sites that could not be reached this time.
    pub pending: Vec<String>,
}

/// Copies back every non-empty superjob tar of a hyperjob. Read-only at the
/// sites, so it can be repeated as more jobs finish.
pub fn fetch_bundles(grid: &mut Grid, hyperjob_id: &str) -> Result<FetchReport, CollectError> {
    let superjobs = grid.hyperjob(hyperjob_id)?.superjobs.clone();
    let mut report = FetchReport::default();
    for sj in superjobs {
        let site_id = grid.superjob(&sj)?.site_id.clone();
        match grid.fetch_outbox(&sj) {
            Ok(Some(tar)) => report.bundles.push(FetchedBundle {
                site_id,
                superjob_id: sj,
                tar,
            }),
            Ok(None) => {}
            Err(OrchestratorError::SiteUnreachable(_)) => {
                log::info!("{site_id} unreachable; bundle for {sj} pending");
                report.pending.push(site_id);
            }
            Err(e) => return Err(e.into()),
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MergedMember {
    pub final_index: usize,
    pub origin_site: String,
    pub origin_nn: usize,
    pub runs: Vec<u32>,
    pub events: u64,
    pub payload: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergedBundle {
    pub hyperjob_id: String,
    pub members: Vec<MergedMember>,
    pub planned: usize,
    pub completeness: f64,
}

/// Orders outputs by plan site order then origin index and renumbers them
/// `0..n` with no gaps.
pub fn merge(
    hyperjob_id: &str,
    bundles: &[FetchedBundle],
    plan: &SitePlan,
) -> Result<MergedBundle, CollectError> {
    let order = plan.site_order();
    let mut seen = BTreeSet::new();
    let mut collected = Vec::new();
    for b in bundles {
        let rank = order
            .iter()
            .position(|s| *s == b.site_id)
            .ok_or_else(|| CollectError::UnplannedSite(b.site_id.clone()))?;
        let corrupt = |reason: String| CollectError::Corrupt {
            site: b.site_id.clone(),
            reason,
        };
        for (name, payload) in read_members(&b.tar).map_err(|e| corrupt(e.to_string()))? {
            let nn = output_index(&name).ok_or_else(|| corrupt(format!("unexpected member {name:?}")))?;
            if !seen.insert((b.site_id.clone(), nn)) {
                return Err(CollectError::Duplicate {
                    site: b.site_id.clone(),
                    nn,
                });
            }
            let parsed =
                StubPayload::parse(&payload).ok_or_else(|| corrupt(format!("unreadable payload in {name}")))?;
            collected.push((rank, nn, b.site_id.clone(), parsed, payload));
        }
    }
    collected.sort_by_key(|(rank, nn, ..)| (*rank, *nn));
    let members: Vec<MergedMember> = collected
        .into_iter()
        .enumerate()
        .map(|(i, (_, nn, site, parsed, payload))| MergedMember {
            final_index: i,
            origin_site: site,
            origin_nn: nn,
            runs: parsed.runs,
            events: parsed.events,
            payload,
        })
        .collect();
    let planned = plan.total_tasks();
    let completeness = if planned == 0 {
        0.0
    } else {
        members.len() as f64 / planned as f64
    };
    Ok(MergedBundle {
        hyperjob_id: hyperjob_id.to_string(),
        members,
        planned,
        completeness,
    })
}

impl MergedBundle {
    pub fn runs(&self) -> BTreeSet<u32> {
        self.members.iter().flat_map(|m| m.runs.iter().copied()).collect()
    }

    pub fn total_events(&self) -> u64 {
        self.members.iter().map(|m| m.events).sum()
    }

    pub fn manifest_text(&self) -> String {
        let mut out = String::new();
        for m in &self.members {
            let runs: Vec<String> = m.runs.iter().map(u32::to_string).collect();
            let csv = if runs.is_empty() { "-".to_string() } else { runs.join(",") };
            out.push_str(&format!(
                "member {} {} {} {} {}\n",
                m.final_index, m.origin_site, m.origin_nn, csv, m.events
            ));
        }
        out.push_str(&format!("completeness {:?}\n", self.completeness));
        out
    }

    /// `manifest.txt` followed by `output-<final_index>` members.
    pub fn to_tar(&self) -> Vec<u8> {
        let manifest = self.manifest_text();
        let names: Vec<String> = self.members.iter().map(|m| output_name(m.final_index)).collect();
        let mut entries: Vec<(&str, &[u8])> = vec![(MANIFEST_MEMBER, manifest.as_bytes())];
        entries.extend(names.iter().zip(&self.members).map(|(n, m)| (n.as_str(), m.payload.as_slice())));
        build_ustar(entries)
    }

    /// Reads back a bundle written by [`MergedBundle::to_tar`]. The planned
    /// count is not stored, so it is recovered from completeness.
    pub fn from_tar(hyperjob_id: &str, bytes: &[u8]) -> Result<Self, CollectError> {
        let bad = |m: String| CollectError::Malformed(m);
        let members = read_members(bytes).map_err(|e| bad(e.to_string()))?;
        let files: BTreeMap<String, Vec<u8>> = members.into_iter().collect();
        let manifest = files
            .get(MANIFEST_MEMBER)
            .ok_or_else(|| bad("no manifest".into()))?;
        let text = String::from_utf8(manifest.clone()).map_err(|e| bad(e.to_string()))?;
        let mut out = Vec::new();
        let mut completeness = None;
        for line in text.lines() {
            let w: Vec<&str> = line.split_whitespace().collect();
            match w.as_slice() {
                ["member", i, site, nn, csv, events] => {
                    let num = |s: &str| s.parse::<u64>().map_err(|_| bad(format!("bad number in {line:?}")));
                    let final_index = num(i)? as usize;
                    let runs = if *csv == "-" {
                        Vec::new()
                    } else {
                        csv.split(',')
                            .map(|r| r.parse().map_err(|_| bad(format!("bad run in {line:?}"))))
                            .collect::<Result<_, _>>()?
                    };
                    let payload = files
                        .get(&output_name(final_index))
                        .ok_or_else(|| bad(format!("missing {}", output_name(final_index))))?
                        .clone();
                    out.push(MergedMember {
                        final_index,
                        origin_site: site.to_string(),
                        origin_nn: num(nn)? as usize,
                        runs,
                        events: num(events)?,
                        payload,
                    });
                }
                ["completeness", c] => {
                    completeness = Some(c.parse::<f64>().map_err(|_| bad(format!("bad fraction {c:?}")))?)
                }
                _ => return Err(bad(format!("unexpected manifest line {line:?}"))),
            }
        }
        let completeness = completeness.ok_or_else(|| bad("no completeness line".into()))?;
        let planned = if completeness > 0.0 {
            (out.len() as f64 / completeness).round() as usize
        } else {
            0
        };
        Ok(Self {
            hyperjob_id: hyperjob_id.to_string(),
            members: out,
            planned,
            completeness,
        })
    }

    /// `done/planned`, the progress badge form.
    pub fn progress(&self) -> String {
        format!("{}/{}", self.members.len(), self.planned)
    }
}

/// Events per run, from the catalog's run records.
pub fn events_per_run(bundle: &MergedBundle, meta: &MetadataCatalog) -> BTreeMap<u32, u64> {
    bundle
        .runs()
        .into_iter()
        .map(|r| (r, meta.run(r).map_or(NOMINAL_RUN_EVENTS, |rec| rec.event_count)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DownloadRecord {
    pub path: PathBuf,
    pub media_type: String,
}

impl DownloadRecord {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        Self {
            path: path.into(),
            media_type: BUNDLE_MEDIA_TYPE.to_string(),
        }
    }
}

/// Writes the merged tar under `dir` as `<hyperjob_id>.bundle`.
pub fn publish_bundle(bundle: &MergedBundle, dir: &Path) -> std::io::Result<DownloadRecord> {
    fs::create_dir_all(dir)?;
    let path = dir.join(format!("{}.bundle", bundle.hyperjob_id));
    fs::write(&path, bundle.to_tar())?;
    Ok(DownloadRecord::new(path))
}

/// `output-<nn>` files already sitting in a shared working directory, by nn.
/// Nothing is copied or renumbered.
pub fn collect_shared_fs(working_dir: &Path) -> Vec<PathBuf> {
    let Ok(entries) = fs::read_dir(working_dir) else {
        return Vec::new();
    };
    let mut found: Vec<(usize, PathBuf)> = entries
        .filter_map(|e| e.ok())
        .filter(|e| e.file_type().is_ok_and(|t| t.is_file()))
        .filter_map(|e| {
            let name = e.file_name().to_string_lossy().into_owned();
            let nn = output_index(&name)?;
            (output_name(nn) == name).then(|| (nn, e.path()))
        })
        .collect();
    found.sort();
    found.into_iter().map(|(_, p)| p).collect()
}
