//! Dataset metadata: which media file is real or counterfeit, and which split
//! it belongs to.
//!
//! The on-disk form is a header-bearing CSV with the columns
//! `name,label,split,original`. An absent `original` is written as `None`
//! and read back from either `None` (any case) or an empty field.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MANIFEST_COLUMNS: [&str; 4] = ["name", "label", "split", "original"];

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("cannot read manifest {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("empty manifest")]
    Empty,
    #[error("manifest header must be `name,label,split,original`, found `{0}`")]
    BadHeader(String),
    #[error("row {row}: {message}")]
    Row { row: u64, message: String },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

/// Ground-truth class of a media file. `Fake` is the positive class everywhere.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Label {
    #[serde(rename = "REAL")]
    Real,
    #[serde(rename = "FAKE")]
    Fake,
}

impl Label {
    pub const ALL: [Label; 2] = [Label::Real, Label::Fake];

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Real => "REAL",
            Label::Fake => "FAKE",
        }
    }

    /// Directory name used for segregated crops.
    pub fn dir_name(self) -> &'static str {
        match self {
            Label::Real => "real",
            Label::Fake => "fake",
        }
    }

    /// Training target: 0 for real, 1 for fake.
    pub fn target(self) -> f64 {
        match self {
            Label::Real => 0.0,
            Label::Fake => 1.0,
        }
    }

    pub fn is_fake(self) -> bool {
        self == Label::Fake
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "REAL" | "real" => Ok(Label::Real),
            "FAKE" | "fake" => Ok(Label::Fake),
            other => Err(format!("unknown label `{other}` (expected REAL or FAKE)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split `{other}` (expected train, val or test)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub label: Label,
    pub split: Split,
    /// Filename of the un-forged source video; only ever set for `Fake`.
    pub original: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
    pub source_path: String,
}

impl Manifest {
    /// Builds a manifest from in-memory entries, enforcing the same
    /// invariants as [`load_manifest`].
    pub fn from_entries(
        entries: Vec<ManifestEntry>,
        source_path: impl Into<String>,
    ) -> Result<Self, ManifestError> {
        if entries.is_empty() {
            return Err(ManifestError::Empty);
        }
        let mut seen = HashSet::new();
        for (i, e) in entries.iter().enumerate() {
            let row = i as u64 + 1;
            check_entry(e).map_err(|message| ManifestError::Row { row, message })?;
            if !seen.insert(e.name.as_str()) {
                return Err(ManifestError::Row {
                    row,
                    message: format!("duplicate name `{}`", e.name),
                });
            }
        }
        Ok(Self {
            entries,
            source_path: source_path.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Writes the manifest in the canonical CSV form.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), ManifestError> {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
        w.write_record(MANIFEST_COLUMNS)?;
        for e in &self.entries {
            w.write_record([
                e.name.as_str(),
                e.label.as_str(),
                e.split.as_str(),
                e.original.as_deref().unwrap_or("None"),
            ])?;
        }
        w.flush().map_err(|source| ManifestError::Io {
            path: PathBuf::from(&self.source_path),
            source,
        })?;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), ManifestError> {
        let file = std::fs::File::create(path).map_err(|source| ManifestError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        self.write_csv(file)
    }
}

fn check_entry(e: &ManifestEntry) -> Result<(), String> {
    if e.name.trim().is_empty() {
        return Err("empty name".into());
    }
    if e.label == Label::Real && e.original.is_some() {
        return Err(format!("REAL entry `{}` must not name an original", e.name));
    }
    Ok(())
}

fn parse_original(field: &str) -> Option<String> {
    let t = field.trim();
    if t.is_empty() || t.eq_ignore_ascii_case("none") {
        None
    } else {
        Some(t.to_string())
    }
}

/// Reads and validates a manifest file.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Manifest, ManifestError> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|source| ManifestError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_manifest(file, path.display().to_string())
}

/// Parses manifest CSV from any reader. Rows are numbered from 1 for the
/// first data row.
pub fn parse_manifest<R: Read>(reader: R, source: impl Into<String>) -> Result<Manifest, ManifestError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut records = rdr.records();

    let header = match records.next() {
        None => return Err(ManifestError::Empty),
        Some(h) => h?,
    };
    let header_fields: Vec<&str> = header.iter().map(|h| h.trim_start_matches('\u{feff}')).collect();
    if header_fields != MANIFEST_COLUMNS {
        if header_fields.iter().all(|f| f.is_empty()) {
            return Err(ManifestError::Empty);
        }
        return Err(ManifestError::BadHeader(header_fields.join(",")));
    }

    let mut entries = Vec::new();
    for (i, rec) in records.enumerate() {
        let row = i as u64 + 1;
        let rec = rec?;
        if rec.iter().all(|f| f.is_empty()) {
            continue;
        }
        if rec.len() != MANIFEST_COLUMNS.len() {
            return Err(ManifestError::Row {
                row,
                message: format!("expected 4 columns, found {}", rec.len()),
            });
        }
        let label = rec[1].parse::<Label>().map_err(|message| ManifestError::Row { row, message })?;
        let split = rec[2].parse::<Split>().map_err(|message| ManifestError::Row { row, message })?;
        entries.push(ManifestEntry {
            name: rec[0].to_string(),
            label,
            split,
            original: parse_original(&rec[3]),
        });
    }
    Manifest::from_entries(entries, source)
}

/// Entry counts keyed by (label, split). Missing cells read as zero.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ClassDistribution {
    counts: BTreeMap<(Label, Split), usize>,
}

impl ClassDistribution {
    pub fn get(&self, label: Label, split: Split) -> usize {
        self.counts.get(&(label, split)).copied().unwrap_or(0)
    }

    pub fn total(&self) -> usize {
        self.counts.values().sum()
    }

    pub fn label_total(&self, label: Label) -> usize {
        Split::ALL.iter().map(|&s| self.get(label, s)).sum()
    }

    /// All six cells in (label, split) order, zeros included.
    pub fn cells(&self) -> impl Iterator<Item = (Label, Split, usize)> + '_ {
        Label::ALL
            .into_iter()
            .flat_map(|l| Split::ALL.into_iter().map(move |s| (l, s)))
            .map(|(l, s)| (l, s, self.get(l, s)))
    }
}

pub fn class_distribution(manifest: &Manifest) -> ClassDistribution {
    let mut counts = BTreeMap::new();
    for e in &manifest.entries {
        *counts.entry((e.label, e.split)).or_insert(0) += 1;
    }
    ClassDistribution { counts }
}
