//! Pre-expansion lint: finds names in an archive, tree or listing that
//! would land on the same entry under a fold profile.
//!
//! Every explicit path also implies its ancestor directories. Paths are
//! keyed by their componentwise folded form; a key reached by two or more
//! distinct raw paths is a collision group. Two entries under colliding
//! parents collide too even when their own names are identical, because
//! the parents merge on expansion.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fold::{FoldError, FoldProfile};
use crate::tarfmt::{self, MemberKind, TarError};
use crate::vfs::{FsImage, NodeKind, VfsError};

/// Shown with every report.
pub const CAVEAT: &str = "Collisions are predicted with the selected fold profile. \
The destination file system may apply different folding rules, so a clean scan does not prove a clean copy.";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntryKind {
    Symlink,
    Pipe,
    Device,
    Hardlink,
    Dir,
    File,
    Unknown,
}

impl EntryKind {
    pub const ALL: [EntryKind; 7] = [
        EntryKind::Symlink,
        EntryKind::Pipe,
        EntryKind::Device,
        EntryKind::Hardlink,
        EntryKind::Dir,
        EntryKind::File,
        EntryKind::Unknown,
    ];

    pub fn token(self) -> &'static str {
        match self {
            EntryKind::Symlink => "symlink",
            EntryKind::Pipe => "pipe",
            EntryKind::Device => "device",
            EntryKind::Hardlink => "hardlink",
            EntryKind::Dir => "dir",
            EntryKind::File => "file",
            EntryKind::Unknown => "unknown",
        }
    }
}

impl fmt::Display for EntryKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

impl FromStr for EntryKind {
    type Err = ScanError;
    fn from_str(s: &str) -> Result<Self, ScanError> {
        let alias = match s {
            "f" | "regular" => "file",
            "d" | "directory" => "dir",
            "l" | "link" => "symlink",
            "h" => "hardlink",
            "p" | "fifo" => "pipe",
            "c" | "b" => "device",
            other => other,
        };
        EntryKind::ALL
            .into_iter()
            .find(|k| k.token() == alias)
            .ok_or_else(|| ScanError::MalformedEntry {
                entry: s.to_string(),
                reason: "unknown kind".into(),
            })
    }
}

impl From<NodeKind> for EntryKind {
    fn from(k: NodeKind) -> Self {
        match k {
            NodeKind::File => EntryKind::File,
            NodeKind::Dir => EntryKind::Dir,
            NodeKind::Symlink => EntryKind::Symlink,
            NodeKind::Pipe => EntryKind::Pipe,
            NodeKind::Device => EntryKind::Device,
        }
    }
}

#[derive(Debug, Error)]
pub enum ScanError {
    #[error("malformed entry {entry:?}: {reason}")]
    MalformedEntry { entry: String, reason: String },
    #[error(transparent)]
    Tar(#[from] TarError),
    #[error(transparent)]
    Vfs(#[from] VfsError),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

/// One path from an archive or listing. `ordinal` is its position; entries
/// already at the destination use -1.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PathEntry {
    /// Normalized, `/`-separated, never empty.
    pub path: String,
    pub kind: EntryKind,
    pub ordinal: i64,
}

impl PathEntry {
    /// Normalizes leading `/` and `./`, repeated and trailing separators.
    /// Rejects `..` and names that cannot be folded.
    pub fn new(raw: &str, kind: EntryKind, ordinal: i64) -> Result<PathEntry, ScanError> {
        let bad = |reason: &str| ScanError::MalformedEntry {
            entry: raw.to_string(),
            reason: reason.to_string(),
        };
        let mut comps = Vec::new();
        for c in raw.split('/') {
            match c {
                "" | "." => {}
                ".." => return Err(bad("parent reference")),
                name => {
                    crate::fold::validate_name(name).map_err(|e: FoldError| bad(&e.to_string()))?;
                    comps.push(name);
                }
            }
        }
        if comps.is_empty() {
            return Err(bad("empty path"));
        }
        Ok(PathEntry {
            path: comps.join("/"),
            kind,
            ordinal,
        })
    }

    pub fn components(&self) -> impl Iterator<Item = &str> {
        self.path.split('/')
    }

    pub fn name(&self) -> &str {
        self.path.rsplit('/').next().unwrap_or(&self.path)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CollisionGroup {
    /// Folded path of the shared parent; empty at the top level.
    pub parent: String,
    /// In ordinal order; at least two distinct raw paths.
    pub members: Vec<PathEntry>,
    pub kind_pair: String,
    /// Path of the member written last.
    pub predicted_survivor: String,
    pub predicted_effect: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScanReport {
    pub profile: String,
    pub unicode_version: String,
    pub caveat: String,
    pub groups: Vec<CollisionGroup>,
    pub warnings: Vec<String>,
}

impl ScanReport {
    pub fn new(profile: &FoldProfile, groups: Vec<CollisionGroup>, warnings: Vec<String>) -> Self {
        ScanReport {
            profile: profile.id().to_string(),
            unicode_version: profile.unicode_version().to_string(),
            caveat: CAVEAT.to_string(),
            groups,
            warnings,
        }
    }

    /// 0 when clean, 3 when any group was found.
    pub fn exit_code(&self) -> i32 {
        if self.groups.is_empty() {
            0
        } else {
            3
        }
    }

    pub fn render_text(&self) -> String {
        let mut out = format!("profile {} (Unicode {})\n{}\n", self.profile, self.unicode_version, self.caveat);
        for w in &self.warnings {
            out.push_str(&format!("warning: {w}\n"));
        }
        if self.groups.is_empty() {
            out.push_str("no collisions\n");
        }
        for g in &self.groups {
            out.push_str(&format!(
                "{} collision under /{}: {}\n  survivor: {}\n  effect: {}\n",
                g.kind_pair,
                g.parent,
                g.members
                    .iter()
                    .map(|m| format!("{} ({}, #{})", m.path, m.kind, m.ordinal))
                    .collect::<Vec<_>>()
                    .join(", "),
                g.predicted_survivor,
                g.predicted_effect
            ));
        }
        out
    }
}

fn fold_component(profile: &FoldProfile, name: &str) -> String {
    profile
        .fold_name(name)
        .map(|k| k.into_string())
        .unwrap_or_else(|_| name.to_string())
}

fn effect(kinds: (EntryKind, EntryKind)) -> &'static str {
    use EntryKind::*;
    match kinds {
        (Dir, Dir) => "directories merge; the survivor's attributes apply to the merged directory",
        (Symlink, Dir) => "entries below the directory may be written through the link",
        (Symlink, _) => "the later entry may be written through the link",
        (Pipe, _) | (Device, _) => "file data may be written into the special file",
        (Hardlink, _) => "data may reach every other name of the linked file",
        (Dir, _) | (_, Dir) => "the directory and the non-directory cannot coexist; one is lost or the copy fails",
        _ => "one entry's data replaces the other's",
    }
}

/// Groups `entries` that would share a destination entry under `profile`.
pub fn scan_paths(entries: &[PathEntry], profile: &FoldProfile) -> Vec<CollisionGroup> {
    // Raw path -> entry, with implied ancestors as directories. An
    // explicit entry overrides an implied one; the first explicit wins.
    let mut known: HashMap<&str, (PathEntry, bool)> = HashMap::new();
    let mut order: Vec<String> = Vec::new();
    for e in entries {
        let mut end = 0;
        while let Some(pos) = e.path[end..].find('/') {
            let prefix = &e.path[..end + pos];
            end += pos + 1;
            known
                .entry(prefix)
                .and_modify(|(p, explicit)| {
                    if !*explicit && e.ordinal < p.ordinal {
                        p.ordinal = e.ordinal;
                    }
                })
                .or_insert_with(|| {
                    order.push(prefix.to_string());
                    (
                        PathEntry {
                            path: prefix.to_string(),
                            kind: EntryKind::Dir,
                            ordinal: e.ordinal,
                        },
                        false,
                    )
                });
        }
        match known.get_mut(e.path.as_str()) {
            Some((p, explicit)) if !*explicit => {
                *p = e.clone();
                *explicit = true;
            }
            Some(_) => {}
            None => {
                order.push(e.path.clone());
                known.insert(&e.path, (e.clone(), true));
            }
        }
    }

    let mut buckets: BTreeMap<String, Vec<PathEntry>> = BTreeMap::new();
    for raw in &order {
        let key = raw
            .split('/')
            .map(|c| fold_component(profile, c))
            .collect::<Vec<_>>()
            .join("/");
        buckets.entry(key).or_default().push(known[raw.as_str()].0.clone());
    }

    buckets
        .into_iter()
        .filter(|(_, m)| m.len() > 1)
        .map(|(key, mut members)| {
            members.sort_by(|a, b| a.ordinal.cmp(&b.ordinal).then_with(|| a.path.cmp(&b.path)));
            let parent = key.rsplit_once('/').map_or_else(String::new, |(p, _)| p.to_string());
            let (lo, hi) = {
                let mut ks: Vec<EntryKind> = members.iter().map(|m| m.kind).collect();
                ks.sort();
                (ks[0], ks[ks.len() - 1])
            };
            let survivor = members
                .iter()
                .max_by(|a, b| a.ordinal.cmp(&b.ordinal).then_with(|| b.path.cmp(&a.path)))
                .map(|m| m.path.clone())
                .unwrap_or_default();
            CollisionGroup {
                parent,
                kind_pair: format!("{}-{}", lo.token(), hi.token()),
                predicted_survivor: survivor,
                predicted_effect: effect((lo, hi)).to_string(),
                members,
            }
        })
        .collect()
}

/// Merges destination entries (ordinal -1) ahead of the scanned ones.
pub fn with_baseline(entries: &[PathEntry], baseline: &[PathEntry]) -> Vec<PathEntry> {
    baseline
        .iter()
        .map(|b| PathEntry { ordinal: -1, ..b.clone() })
        .chain(entries.iter().cloned())
        .collect()
}

fn member_kind(kind: Option<MemberKind>) -> EntryKind {
    match kind {
        Some(MemberKind::File) => EntryKind::File,
        Some(MemberKind::Dir) => EntryKind::Dir,
        Some(MemberKind::Symlink) => EntryKind::Symlink,
        Some(MemberKind::Hardlink) => EntryKind::Hardlink,
        Some(MemberKind::Fifo) => EntryKind::Pipe,
        Some(MemberKind::CharDevice | MemberKind::BlockDevice) => EntryKind::Device,
        None => EntryKind::Unknown,
    }
}

/// Entries of a ustar/pax archive. Unreadable or malformed members become
/// warnings.
pub fn tar_entries(archive: &[u8]) -> Result<(Vec<PathEntry>, Vec<String>), ScanError> {
    let contents = tarfmt::read_archive(archive)?;
    let mut warnings: Vec<String> = contents
        .issues
        .iter()
        .map(|i| format!("byte {}: {}", i.offset, i.message))
        .collect();
    let mut entries = Vec::new();
    for (i, m) in contents.members.iter().enumerate() {
        match PathEntry::new(&m.path, member_kind(m.kind), i as i64) {
            Ok(e) => entries.push(e),
            Err(e) => warnings.push(e.to_string()),
        }
    }
    Ok((entries, warnings))
}

pub fn scan_tar(archive: &[u8], profile: &FoldProfile) -> Result<ScanReport, ScanError> {
    let (entries, warnings) = tar_entries(archive)?;
    Ok(ScanReport::new(profile, scan_paths(&entries, profile), warnings))
}

/// Parses a listing: one `path[TAB kind]` per line; blank lines and `#`
/// comments are skipped.
pub fn parse_listing(text: &str) -> Result<Vec<PathEntry>, ScanError> {
    let mut out = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let (path, kind) = match line.split_once('\t') {
            Some((p, k)) => (p, k.trim().parse()?),
            None => (line, EntryKind::Unknown),
        };
        let ordinal = out.len() as i64;
        out.push(PathEntry::new(path, kind, ordinal)?);
    }
    Ok(out)
}

pub fn scan_listing(text: &str, profile: &FoldProfile) -> Result<ScanReport, ScanError> {
    let entries = parse_listing(text)?;
    Ok(ScanReport::new(profile, scan_paths(&entries, profile), Vec::new()))
}

/// Entries below `root` of an image, in walk order.
pub fn image_entries(img: &FsImage, root: &str) -> Result<Vec<PathEntry>, ScanError> {
    let dir = img.dir_ino(root)?;
    let base = if dir == img.root() { String::new() } else { img.path_of_dir(dir)? };
    let mut out = Vec::new();
    let mut seen = HashMap::new();
    for (i, (p, ino)) in img.walk(dir).into_iter().enumerate() {
        let node = img.node(ino).ok_or(VfsError::NoSuchInode(ino))?;
        let mut kind = EntryKind::from(node.kind());
        if kind == EntryKind::File && node.nlink > 1 && seen.insert(ino, ()).is_some() {
            kind = EntryKind::Hardlink;
        }
        out.push(PathEntry::new(&p[base.len()..], kind, i as i64)?);
    }
    Ok(out)
}

pub fn scan_image(img: &FsImage, root: &str, profile: &FoldProfile) -> Result<ScanReport, ScanError> {
    let entries = image_entries(img, root)?;
    Ok(ScanReport::new(profile, scan_paths(&entries, profile), Vec::new()))
}

/// Entries below a host directory, sorted by name within each directory.
/// Non-UTF-8 names are reported as warnings and skipped.
pub fn host_entries(root: &Path) -> Result<(Vec<PathEntry>, Vec<String>), ScanError> {
    use std::os::unix::fs::{FileTypeExt, MetadataExt};
    let mut out = Vec::new();
    let mut warnings = Vec::new();
    let mut seen = HashMap::new();
    let walker = walkdir::WalkDir::new(root).min_depth(1).sort_by_file_name();
    for entry in walker {
        let entry = entry.map_err(|e| ScanError::Io {
            path: e.path().map_or_else(|| root.display().to_string(), |p| p.display().to_string()),
            source: e.into(),
        })?;
        let rel = entry.path().strip_prefix(root).expect("walk stays below root");
        let Some(rel) = rel.to_str() else {
            warnings.push(format!("{}: name is not UTF-8", entry.path().display()));
            continue;
        };
        let ft = entry.file_type();
        let meta = entry.metadata().map_err(|e| ScanError::Io {
            path: entry.path().display().to_string(),
            source: e.into(),
        })?;
        let kind = if ft.is_dir() {
            EntryKind::Dir
        } else if ft.is_symlink() {
            EntryKind::Symlink
        } else if ft.is_fifo() {
            EntryKind::Pipe
        } else if ft.is_char_device() || ft.is_block_device() {
            EntryKind::Device
        } else if ft.is_file() {
            if meta.nlink() > 1 && seen.insert((meta.dev(), meta.ino()), ()).is_some() {
                EntryKind::Hardlink
            } else {
                EntryKind::File
            }
        } else {
            EntryKind::Unknown
        };
        let ordinal = out.len() as i64;
        out.push(PathEntry::new(rel, kind, ordinal)?);
    }
    Ok((out, warnings))
}

pub fn scan_host(root: &Path, profile: &FoldProfile) -> Result<ScanReport, ScanError> {
    let (entries, warnings) = host_entries(root)?;
    Ok(ScanReport::new(profile, scan_paths(&entries, profile), warnings))
}
