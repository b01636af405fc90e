//! Input sandbox: script parsing, recursive `source` flattening and the
//! auxiliary-file inventory.
//!
//! Only three line forms are understood; everything else is opaque text.
//!
//! ```text
//! source <path>            include another script
//! sourceFoundFile <path>   same, via the release search path
//! useFile <path>           read a non-script file at run time
//! input add <path>         data file entry
//! ```

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::query::INPUT_LINE_PREFIX;

pub const DEFAULT_MAX_DEPTH: usize = 64;

const MANIFEST_SEPARATOR: &str = "--- script ---";

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SandboxError {
    #[error("script {missing:?} not found (included via {})", chain.join(" -> "))]
    Unresolved { missing: String, chain: Vec<String> },
    #[error("inclusion cycle {}", path.join(" -> "))]
    Cycle { path: Vec<String> },
    #[error("inclusion depth exceeds {limit} at {}", chain.join(" -> "))]
    DepthExceeded { limit: usize, chain: Vec<String> },
    #[error("manifest line {line}: {reason}")]
    ManifestSyntax { line: usize, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LineKind {
    SourceDirective,
    InputEntry,
    AuxReference,
    Plain,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptLine {
    pub kind: LineKind,
    /// Target path for directives and entries, the raw line for plain text.
    pub payload: String,
    /// Directive keyword as written (`source` or `sourceFoundFile`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    keyword: Option<String>,
}

impl ScriptLine {
    pub fn classify(raw: &str) -> Self {
        let trimmed = raw.trim();
        let mut words = trimmed.split_whitespace();
        let (first, second, rest) = (words.next(), words.next(), words.next());
        let directive = |kind, kw: &str, path: &str| ScriptLine {
            kind,
            payload: path.to_string(),
            keyword: Some(kw.to_string()),
        };
        match (first, second, rest) {
            (Some(kw @ ("source" | "sourceFoundFile")), Some(path), None) => {
                directive(LineKind::SourceDirective, kw, path)
            }
            (Some("useFile"), Some(path), None) => directive(LineKind::AuxReference, "useFile", path),
            (Some("input"), Some("add"), Some(path)) if words.next().is_none() => ScriptLine {
                kind: LineKind::InputEntry,
                payload: path.to_string(),
                keyword: None,
            },
            _ => ScriptLine {
                kind: LineKind::Plain,
                payload: raw.to_string(),
                keyword: None,
            },
        }
    }

    pub fn plain(text: impl Into<String>) -> Self {
        Self {
            kind: LineKind::Plain,
            payload: text.into(),
            keyword: None,
        }
    }

    pub fn is_directive(&self) -> bool {
        self.kind == LineKind::SourceDirective
    }
}

impl fmt::Display for ScriptLine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            LineKind::Plain => f.write_str(&self.payload),
            LineKind::InputEntry => write!(f, "{INPUT_LINE_PREFIX}{}", self.payload),
            LineKind::SourceDirective | LineKind::AuxReference => {
                let kw = self.keyword.as_deref().unwrap_or(match self.kind {
                    LineKind::AuxReference => "useFile",
                    _ => "source",
                });
                write!(f, "{kw} {}", self.payload)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Script {
    pub name: String,
    pub lines: Vec<ScriptLine>,
}

impl Script {
    pub fn parse(name: impl Into<String>, text: &str) -> Self {
        Self {
            name: name.into(),
            lines: text.lines().map(ScriptLine::classify).collect(),
        }
    }

    pub fn to_text(&self) -> String {
        self.lines.iter().map(|l| format!("{l}\n")).collect()
    }

    pub fn count(&self, kind: LineKind) -> usize {
        self.lines.iter().filter(|l| l.kind == kind).count()
    }

    pub fn input_entries(&self) -> impl Iterator<Item = &str> {
        self.lines
            .iter()
            .filter(|l| l.kind == LineKind::InputEntry)
            .map(|l| l.payload.as_str())
    }

    /// Every `useFile <path>` token anywhere in the text, including ones
    /// buried in conditional lines the classifier treats as opaque. This is
    /// what a running job actually demands.
    pub fn runtime_aux_demands(&self) -> Vec<String> {
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        for line in &self.lines {
            let text = line.to_string();
            let words: Vec<&str> = text
                .split(|c: char| c.is_whitespace() || c == '{' || c == '}' || c == ';')
                .filter(|w| !w.is_empty())
                .collect();
            for pair in words.windows(2) {
                if pair[0] == "useFile" && seen.insert(pair[1].to_string()) {
                    out.push(pair[1].to_string());
                }
            }
        }
        out
    }
}

/// Looks up scripts by the name used in a `source` directive.
pub trait ScriptResolver {
    fn resolve(&self, name: &str) -> Option<Script>;
}

impl ScriptResolver for HashMap<String, Script> {
    fn resolve(&self, name: &str) -> Option<Script> {
        self.get(name).cloned()
    }
}

impl ScriptResolver for BTreeMap<String, Script> {
    fn resolve(&self, name: &str) -> Option<Script> {
        self.get(name).cloned()
    }
}

impl<F> ScriptResolver for F
where
    F: Fn(&str) -> Option<Script>,
{
    fn resolve(&self, name: &str) -> Option<Script> {
        self(name)
    }
}

/// Resolves names relative to a directory on disk.
#[derive(Debug, Clone)]
pub struct DirResolver {
    root: PathBuf,
}

impl DirResolver {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }
}

impl ScriptResolver for DirResolver {
    fn resolve(&self, name: &str) -> Option<Script> {
        let text = fs::read_to_string(self.root.join(name)).ok()?;
        Some(Script::parse(name, &text))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Expander {
    pub max_depth: usize,
}

impl Default for Expander {
    fn default() -> Self {
        Self {
            max_depth: DEFAULT_MAX_DEPTH,
        }
    }
}

impl Expander {
    /// Replaces every `source` line, depth first, with the expanded body of
    /// its target. Repeated includes are expanded every time.
    pub fn expand(&self, script: &Script, resolver: &dyn ScriptResolver) -> Result<Script, SandboxError> {
        let mut out = Vec::new();
        let mut chain = vec![script.name.clone()];
        self.expand_into(script, resolver, &mut chain, &mut out)?;
        Ok(Script {
            name: script.name.clone(),
            lines: out,
        })
    }

    fn expand_into(
        &self,
        script: &Script,
        resolver: &dyn ScriptResolver,
        chain: &mut Vec<String>,
        out: &mut Vec<ScriptLine>,
    ) -> Result<(), SandboxError> {
        for line in &script.lines {
            if !line.is_directive() {
                out.push(line.clone());
                continue;
            }
            let target = &line.payload;
            if let Some(start) = chain.iter().position(|n| n == target) {
                let mut path = chain[start..].to_vec();
                path.push(target.clone());
                return Err(SandboxError::Cycle { path });
            }
            if chain.len() > self.max_depth {
                return Err(SandboxError::DepthExceeded {
                    limit: self.max_depth,
                    chain: chain.clone(),
                });
            }
            let body = resolver.resolve(target).ok_or_else(|| SandboxError::Unresolved {
                missing: target.clone(),
                chain: chain.clone(),
            })?;
            chain.push(target.clone());
            self.expand_into(&body, resolver, chain, out)?;
            chain.pop();
        }
        Ok(())
    }
}

pub fn expand(script: &Script, resolver: &dyn ScriptResolver) -> Result<Script, SandboxError> {
    Expander::default().expand(script, resolver)
}

/// `useFile` targets in first-occurrence order.
pub fn inventory_aux(flattened: &Script) -> Vec<String> {
    let mut seen = BTreeSet::new();
    flattened
        .lines
        .iter()
        .filter(|l| l.kind == LineKind::AuxReference)
        .filter(|l| seen.insert(l.payload.clone()))
        .map(|l| l.payload.clone())
        .collect()
}

/// Everything a job needs besides its event data.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SandboxManifest {
    pub binary: String,
    pub flattened_script: Script,
    pub aux_files: Vec<String>,
}

impl SandboxManifest {
    /// `binary <name>`, `script <name>`, `aux <path>` lines, the separator,
    /// then the script.
    pub fn to_text(&self) -> String {
        let mut out = format!("binary {}\nscript {}\n", self.binary, self.flattened_script.name);
        for a in &self.aux_files {
            out.push_str(&format!("aux {a}\n"));
        }
        out.push_str(MANIFEST_SEPARATOR);
        out.push('\n');
        out.push_str(&self.flattened_script.to_text());
        out
    }

    /// Parses [`SandboxManifest::to_text`]. Without a `script` line the
    /// script is named `script_name`.
    pub fn parse(script_name: &str, text: &str) -> Result<Self, SandboxError> {
        let syntax = |line: usize, reason: &str| SandboxError::ManifestSyntax {
            line,
            reason: reason.to_string(),
        };
        let mut binary = None;
        let mut name = script_name.to_string();
        let mut aux_files = Vec::new();
        let mut lines = text.lines().enumerate();
        let mut found_sep = false;
        for (i, line) in lines.by_ref() {
            if line == MANIFEST_SEPARATOR {
                found_sep = true;
                break;
            }
            if let Some(b) = line.strip_prefix("binary ") {
                if binary.replace(b.trim().to_string()).is_some() {
                    return Err(syntax(i + 1, "repeated binary line"));
                }
            } else if let Some(n) = line.strip_prefix("script ") {
                name = n.trim().to_string();
            } else if let Some(a) = line.strip_prefix("aux ") {
                aux_files.push(a.trim().to_string());
            } else {
                return Err(syntax(i + 1, "expected 'binary', 'script' or 'aux'"));
            }
        }
        if !found_sep {
            return Err(syntax(0, "missing script separator"));
        }
        let binary = binary.ok_or_else(|| syntax(1, "missing binary line"))?;
        let body: Vec<&str> = lines.map(|(_, l)| l).collect();
        let flattened_script = Script::parse(name, &body.join("\n"));
        if flattened_script.count(LineKind::SourceDirective) > 0 {
            return Err(syntax(0, "flattened script still has source directives"));
        }
        Ok(Self {
            binary,
            flattened_script,
            aux_files,
        })
    }

    pub fn script_file_name(&self) -> &str {
        &self.flattened_script.name
    }
}

pub fn build_manifest(
    user_script: &Script,
    resolver: &dyn ScriptResolver,
    binary_name: &str,
) -> Result<SandboxManifest, SandboxError> {
    let flattened = expand(user_script, resolver)?;
    let aux_files = inventory_aux(&flattened);
    Ok(SandboxManifest {
        binary: binary_name.to_string(),
        flattened_script: flattened,
        aux_files,
    })
}
