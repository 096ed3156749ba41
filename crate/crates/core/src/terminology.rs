//! Hierarchical code systems.
//!
//! Two hierarchy shapes are supported. Positional systems (ATC) encode the
//! ancestor at every level as a fixed-length prefix of the code. Parent-linked
//! systems (MedDRA-style SOC → HLGT → HLT → PT) carry an explicit parent code
//! one level up. Either way, every code resolves to exactly one ancestor per
//! coarser level.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum TerminologyError {
    #[error("row {row}: duplicate code `{code}`")]
    DuplicateCode { row: usize, code: String },
    #[error("row {row}: parent `{parent}` of `{code}` is not defined one level up")]
    DanglingParent {
        row: usize,
        code: String,
        parent: String,
    },
    #[error("row {row}: code `{code}` has length {len}, level {level} expects {expected}")]
    BadPrefixLength {
        row: usize,
        code: String,
        level: String,
        len: usize,
        expected: usize,
    },
    #[error("row {row}: parent `{parent}` is not the prefix of `{code}` one level up")]
    InconsistentParent {
        row: usize,
        code: String,
        parent: String,
    },
    #[error("terminology file has no entries")]
    EmptyFile,
    #[error("row {row}: unknown level `{level}`")]
    UnknownLevel { row: usize, level: String },
    #[error("row {row}: code `{code}` contains characters outside [A-Z0-9]")]
    InvalidCode { row: usize, code: String },
    #[error("row {row}: malformed CSV: {message}")]
    Csv { row: usize, message: String },
    #[error("invalid terminology spec: {0}")]
    InvalidSpec(String),
    #[error("unknown code `{0}`")]
    UnknownCode(String),
    #[error("unknown level `{0}`")]
    NoSuchLevel(String),
    #[error("level `{target}` is more specific than `{code}` (level {level})")]
    LevelBelowCode {
        code: String,
        level: String,
        target: String,
    },
    #[error("io error: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, TerminologyError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HierarchyKind {
    Prefix,
    ParentLinked,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelSpec {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prefix_length: Option<usize>,
}

impl LevelSpec {
    pub fn new(name: impl Into<String>, prefix_length: Option<usize>) -> Self {
        Self {
            name: name.into(),
            prefix_length,
        }
    }
}

/// Shape of a code system. Levels are ordered from most general to most
/// specific.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TerminologySpec {
    pub system_id: String,
    pub hierarchy_kind: HierarchyKind,
    pub levels: Vec<LevelSpec>,
}

impl TerminologySpec {
    /// ATC with its five positional levels (prefix lengths 1/3/4/5/7).
    pub fn atc() -> Self {
        Self {
            system_id: "ATC".into(),
            hierarchy_kind: HierarchyKind::Prefix,
            levels: [("L1", 1), ("L2", 3), ("L3", 4), ("L4", 5), ("L5", 7)]
                .into_iter()
                .map(|(n, l)| LevelSpec::new(n, Some(l)))
                .collect(),
        }
    }

    /// MedDRA-shaped parent-linked hierarchy SOC → HLGT → HLT → PT.
    pub fn meddra() -> Self {
        Self {
            system_id: "MEDDRA".into(),
            hierarchy_kind: HierarchyKind::ParentLinked,
            levels: ["SOC", "HLGT", "HLT", "PT"]
                .into_iter()
                .map(|n| LevelSpec::new(n, None))
                .collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.system_id.trim().is_empty() {
            return Err(TerminologyError::InvalidSpec("empty system_id".into()));
        }
        if self.levels.is_empty() {
            return Err(TerminologyError::InvalidSpec("no levels".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for level in &self.levels {
            if !seen.insert(level.name.as_str()) {
                return Err(TerminologyError::InvalidSpec(format!(
                    "duplicate level name `{}`",
                    level.name
                )));
            }
        }
        match self.hierarchy_kind {
            HierarchyKind::Prefix => {
                let mut prev = 0;
                for level in &self.levels {
                    match level.prefix_length {
                        Some(len) if len > prev => prev = len,
                        Some(_) => {
                            return Err(TerminologyError::InvalidSpec(format!(
                                "prefix lengths must strictly increase (level `{}`)",
                                level.name
                            )))
                        }
                        None => {
                            return Err(TerminologyError::InvalidSpec(format!(
                                "prefix level `{}` lacks prefix_length",
                                level.name
                            )))
                        }
                    }
                }
            }
            HierarchyKind::ParentLinked => {
                if let Some(level) = self.levels.iter().find(|l| l.prefix_length.is_some()) {
                    return Err(TerminologyError::InvalidSpec(format!(
                        "parent-linked level `{}` must not declare prefix_length",
                        level.name
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn level_index(&self, name: &str) -> Option<usize> {
        self.levels.iter().position(|l| l.name == name)
    }

    pub fn level_names(&self) -> impl Iterator<Item = &str> {
        self.levels.iter().map(|l| l.name.as_str())
    }

    /// Level implied by the length of a positional code.
    fn prefix_level_of(&self, code: &str) -> Option<usize> {
        self.levels
            .iter()
            .position(|l| l.prefix_length == Some(code.len()))
    }
}

/// Upper-cases and trims a raw code string.
pub fn normalize_code(raw: &str) -> String {
    raw.trim().to_uppercase()
}

pub fn is_valid_code_syntax(code: &str) -> bool {
    !code.is_empty() && code.bytes().all(|b| b.is_ascii_uppercase() || b.is_ascii_digit())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeEntry {
    pub code: String,
    pub level: String,
    pub name: String,
    pub description: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent_code: Option<String>,
}

#[derive(Debug, Deserialize)]
struct CsvRow {
    code: String,
    level: String,
    name: String,
    description: String,
    #[serde(default)]
    parent_code: Option<String>,
}

/// An immutable, validated code system.
#[derive(Debug, Clone, PartialEq)]
pub struct Terminology {
    spec: TerminologySpec,
    entries: BTreeMap<String, CodeEntry>,
}

impl Terminology {
    /// Loads and validates a terminology from CSV
    /// (`code,level,name,description,parent_code`).
    pub fn load<R: Read>(source: R, spec: TerminologySpec) -> Result<Self> {
        spec.validate()?;
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::None)
            .from_reader(source);
        let mut rows = Vec::new();
        for (i, result) in reader.deserialize::<CsvRow>().enumerate() {
            // Row numbers count the header as row 1.
            let row = i + 2;
            let raw = result.map_err(|e| TerminologyError::Csv {
                row,
                message: e.to_string(),
            })?;
            rows.push((row, raw));
        }
        if rows.is_empty() {
            return Err(TerminologyError::EmptyFile);
        }

        let mut entries: BTreeMap<String, CodeEntry> = BTreeMap::new();
        let mut row_of: BTreeMap<String, usize> = BTreeMap::new();
        for (row, raw) in rows {
            let code = normalize_code(&raw.code);
            if !is_valid_code_syntax(&code) {
                return Err(TerminologyError::InvalidCode { row, code });
            }
            let level = raw.level.trim().to_string();
            let level_idx = spec
                .level_index(&level)
                .ok_or_else(|| TerminologyError::UnknownLevel {
                    row,
                    level: level.clone(),
                })?;
            if let Some(expected) = spec.levels[level_idx].prefix_length {
                if code.len() != expected {
                    return Err(TerminologyError::BadPrefixLength {
                        row,
                        len: code.len(),
                        code,
                        level,
                        expected,
                    });
                }
            }
            if entries.contains_key(&code) {
                return Err(TerminologyError::DuplicateCode { row, code });
            }
            let parent_code = raw
                .parent_code
                .as_deref()
                .map(normalize_code)
                .filter(|p| !p.is_empty());
            row_of.insert(code.clone(), row);
            entries.insert(
                code.clone(),
                CodeEntry {
                    code,
                    level,
                    name: raw.name.trim().to_string(),
                    description: raw.description,
                    parent_code,
                },
            );
        }

        let term = Self { spec, entries };
        term.validate_parents(&row_of)?;
        Ok(term)
    }

    pub fn load_path(path: impl AsRef<Path>, spec: TerminologySpec) -> Result<Self> {
        let file = std::fs::File::open(path.as_ref())
            .map_err(|e| TerminologyError::Io(format!("{}: {e}", path.as_ref().display())))?;
        Self::load(std::io::BufReader::new(file), spec)
    }

    /// Builds a terminology from in-memory entries, applying the same
    /// validation as [`Terminology::load`].
    pub fn from_entries(spec: TerminologySpec, entries: Vec<CodeEntry>) -> Result<Self> {
        let mut buf = Vec::new();
        write_csv(&mut buf, entries.iter())?;
        Self::load(buf.as_slice(), spec)
    }

    fn validate_parents(&self, row_of: &BTreeMap<String, usize>) -> Result<()> {
        for entry in self.entries.values() {
            let row = row_of[&entry.code];
            let level_idx = self.level_idx_of(entry);
            match self.spec.hierarchy_kind {
                HierarchyKind::Prefix => {
                    if let Some(parent) = &entry.parent_code {
                        let expected = level_idx
                            .checked_sub(1)
                            .and_then(|i| self.spec.levels[i].prefix_length)
                            .map(|len| &entry.code[..len]);
                        if expected != Some(parent.as_str()) {
                            return Err(TerminologyError::InconsistentParent {
                                row,
                                code: entry.code.clone(),
                                parent: parent.clone(),
                            });
                        }
                    }
                }
                HierarchyKind::ParentLinked => {
                    if level_idx == 0 {
                        continue;
                    }
                    let parent_ok = entry
                        .parent_code
                        .as_ref()
                        .and_then(|p| self.entries.get(p))
                        .is_some_and(|p| self.level_idx_of(p) + 1 == level_idx);
                    if !parent_ok {
                        return Err(TerminologyError::DanglingParent {
                            row,
                            code: entry.code.clone(),
                            parent: entry.parent_code.clone().unwrap_or_default(),
                        });
                    }
                }
            }
        }
        Ok(())
    }

    fn level_idx_of(&self, entry: &CodeEntry) -> usize {
        self.spec
            .level_index(&entry.level)
            .expect("entry levels validated at load")
    }

    pub fn spec(&self) -> &TerminologySpec {
        &self.spec
    }

    pub fn system_id(&self) -> &str {
        &self.spec.system_id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, code: &str) -> Option<&CodeEntry> {
        self.entries.get(code)
    }

    pub fn contains(&self, code: &str) -> bool {
        self.entries.contains_key(code)
    }

    /// Entries in code order.
    pub fn entries(&self) -> impl Iterator<Item = &CodeEntry> {
        self.entries.values()
    }

    pub fn entries_at_level<'a>(&'a self, level: &'a str) -> impl Iterator<Item = &'a CodeEntry> {
        self.entries.values().filter(move |e| e.level == level)
    }

    pub fn description_of(&self, code: &str) -> Result<&str> {
        self.entries
            .get(code)
            .map(|e| e.description.as_str())
            .ok_or_else(|| TerminologyError::UnknownCode(code.to_string()))
    }

    /// Ancestor (or self) of a known code at `target_level`.
    pub fn truncate_to_level(&self, code: &str, target_level: &str) -> Result<String> {
        let entry = self
            .entries
            .get(code)
            .ok_or_else(|| TerminologyError::UnknownCode(code.to_string()))?;
        let target_idx = self
            .spec
            .level_index(target_level)
            .ok_or_else(|| TerminologyError::NoSuchLevel(target_level.to_string()))?;
        let code_idx = self.level_idx_of(entry);
        if target_idx > code_idx {
            return Err(TerminologyError::LevelBelowCode {
                code: code.to_string(),
                level: entry.level.clone(),
                target: target_level.to_string(),
            });
        }
        match self.spec.hierarchy_kind {
            HierarchyKind::Prefix => {
                let len = self.spec.levels[target_idx]
                    .prefix_length
                    .expect("prefix spec validated");
                Ok(code[..len].to_string())
            }
            HierarchyKind::ParentLinked => {
                let mut current = entry;
                for _ in target_idx..code_idx {
                    let parent = current
                        .parent_code
                        .as_ref()
                        .and_then(|p| self.entries.get(p))
                        .expect("parent chain validated at load");
                    current = parent;
                }
                Ok(current.code.clone())
            }
        }
    }

    /// Like [`Terminology::truncate_to_level`], but positional codes that are
    /// absent from the table (e.g. a level-5 ATC code when only levels 1-4
    /// are loaded) are truncated by length. The result must exist.
    pub fn resolve_at_level(&self, raw_code: &str, target_level: &str) -> Result<String> {
        let code = normalize_code(raw_code);
        if self.entries.contains_key(&code) {
            return self.truncate_to_level(&code, target_level);
        }
        if self.spec.hierarchy_kind != HierarchyKind::Prefix || !is_valid_code_syntax(&code) {
            return Err(TerminologyError::UnknownCode(code));
        }
        let target_idx = self
            .spec
            .level_index(target_level)
            .ok_or_else(|| TerminologyError::NoSuchLevel(target_level.to_string()))?;
        let code_idx = self
            .spec
            .prefix_level_of(&code)
            .ok_or_else(|| TerminologyError::UnknownCode(code.clone()))?;
        if target_idx > code_idx {
            return Err(TerminologyError::LevelBelowCode {
                code: code.clone(),
                level: self.spec.levels[code_idx].name.clone(),
                target: target_level.to_string(),
            });
        }
        let len = self.spec.levels[target_idx].prefix_length.unwrap_or(0);
        let truncated = code[..len].to_string();
        if self.entries.contains_key(&truncated) {
            Ok(truncated)
        } else {
            Err(TerminologyError::UnknownCode(code))
        }
    }

    /// Whether `code` could name an entry of this system: valid alphabet, and
    /// for positional systems a length that matches some level.
    pub fn is_plausible_code(&self, code: &str) -> bool {
        is_valid_code_syntax(code)
            && match self.spec.hierarchy_kind {
                HierarchyKind::Prefix => self.spec.prefix_level_of(code).is_some(),
                HierarchyKind::ParentLinked => true,
            }
    }

    /// Whether `code` sits at `level` or deeper.
    pub fn is_at_or_below(&self, code: &str, level: &str) -> bool {
        match (self.entries.get(code), self.spec.level_index(level)) {
            (Some(e), Some(target)) => self.level_idx_of(e) >= target,
            _ => false,
        }
    }

    pub fn save<W: Write>(&self, sink: W) -> Result<()> {
        write_csv(sink, self.entries.values())
    }
}

fn write_csv<'a, W: Write>(sink: W, entries: impl Iterator<Item = &'a CodeEntry>) -> Result<()> {
    let mut writer = csv::Writer::from_writer(sink);
    let io = |e: csv::Error| TerminologyError::Io(e.to_string());
    writer
        .write_record(["code", "level", "name", "description", "parent_code"])
        .map_err(io)?;
    for e in entries {
        writer
            .write_record([
                e.code.as_str(),
                e.level.as_str(),
                e.name.as_str(),
                e.description.as_str(),
                e.parent_code.as_deref().unwrap_or(""),
            ])
            .map_err(io)?;
    }
    writer
        .flush()
        .map_err(|e| TerminologyError::Io(e.to_string()))
}

impl fmt::Display for HierarchyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            HierarchyKind::Prefix => f.write_str("prefix"),
            HierarchyKind::ParentLinked => f.write_str("parent_linked"),
        }
    }
}
