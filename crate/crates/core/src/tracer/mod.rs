//! Create-use name consistency checking over normalized file-operation
//! traces.
//!
//! Every successful creation registers the spelling used for a
//! `device|inode` pair. A later access that reaches the same resource
//! through a spelling that folds equal but differs bytewise is reported,
//! as is a deleted entry whose name is immediately re-created under a
//! different spelling. Directory components are checked too (strict mode):
//! a path whose prefix folds equal to a tracked directory spelling without
//! matching it bytewise is a case-inconsistent use of that directory.

mod auditd;

pub use auditd::adapt_auditd;

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fold::FoldProfile;
use crate::vfs::escape_path;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OpClass {
    Create,
    Use,
    Delete,
    Rename,
    Opendir,
}

impl OpClass {
    pub fn as_str(self) -> &'static str {
        match self {
            OpClass::Create => "create",
            OpClass::Use => "use",
            OpClass::Delete => "delete",
            OpClass::Rename => "rename",
            OpClass::Opendir => "opendir",
        }
    }
}

impl FromStr for OpClass {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Ok(match s {
            "create" => OpClass::Create,
            "use" => OpClass::Use,
            "delete" => OpClass::Delete,
            "rename" => OpClass::Rename,
            "opendir" => OpClass::Opendir,
            other => return Err(format!("unknown op class {other:?}")),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    Success,
    Failure,
}

/// One normalized trace line.
///
/// For `opendir`, `dirfd` is the descriptor the call returned; for every
/// other class it is the descriptor a relative `path` is resolved against.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub seq: u64,
    pub op_class: OpClass,
    pub syscall: String,
    pub program: String,
    pub pid: u32,
    pub device: String,
    pub inode: u64,
    pub path: String,
    pub dirfd: Option<i64>,
    pub outcome: Outcome,
}

impl TraceRecord {
    /// Tab-separated form, paths escaped so the line stays one line.
    pub fn to_tsv(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            self.seq,
            self.op_class.as_str(),
            self.syscall,
            self.program,
            self.pid,
            self.device,
            self.inode,
            escape_path(&self.path),
            self.dirfd.map_or_else(|| "-".to_string(), |fd| fd.to_string()),
            match self.outcome {
                Outcome::Success => "success",
                Outcome::Failure => "failure",
            }
        )
    }

    pub fn parse_tsv(line: &str) -> Result<TraceRecord, String> {
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 10 {
            return Err(format!("expected 10 fields, found {}", fields.len()));
        }
        let num = |i: usize, what: &str| -> Result<u64, String> {
            fields[i]
                .parse::<u64>()
                .map_err(|_| format!("bad {what} {:?}", fields[i]))
        };
        let dirfd = match fields[8] {
            "-" | "" => None,
            s => Some(s.parse::<i64>().map_err(|_| format!("bad dirfd {s:?}"))?),
        };
        let outcome = match fields[9] {
            "success" => Outcome::Success,
            "failure" => Outcome::Failure,
            s => return Err(format!("bad outcome {s:?}")),
        };
        Ok(TraceRecord {
            seq: num(0, "seq")?,
            op_class: fields[1].parse()?,
            syscall: fields[2].to_string(),
            program: fields[3].to_string(),
            pid: u32::try_from(num(4, "pid")?).map_err(|_| "pid out of range".to_string())?,
            device: fields[5].to_string(),
            inode: num(6, "inode")?,
            path: unescape_path(fields[7])?,
            dirfd,
            outcome,
        })
    }
}

/// Inverse of `escape_path`.
pub fn unescape_path(s: &str) -> Result<String, String> {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('\\') => out.push('\\'),
            Some('t') => out.push('\t'),
            Some('n') => out.push('\n'),
            Some('x') => {
                let hex: String = chars.by_ref().take(2).collect();
                let v = u8::from_str_radix(&hex, 16).map_err(|_| format!("bad escape \\x{hex}"))?;
                out.push(char::from(v));
            }
            other => return Err(format!("bad escape {other:?}")),
        }
    }
    Ok(out)
}

#[derive(Debug, Error, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[error("line {line}: {message}")]
pub struct ParseError {
    pub line: usize,
    pub message: String,
}

/// Parsed records with `dirfd`-relative paths resolved.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TraceTable {
    pub records: Vec<TraceRecord>,
    pub parse_errors: Vec<ParseError>,
    pub unresolved_dirfd: usize,
    pub warnings: Vec<String>,
}

impl TraceTable {
    /// Records grouped per `(device, inode)`, each timeline in stream order.
    pub fn timelines(&self) -> BTreeMap<(String, u64), Vec<&TraceRecord>> {
        let mut out: BTreeMap<(String, u64), Vec<&TraceRecord>> = BTreeMap::new();
        for r in &self.records {
            out.entry((r.device.clone(), r.inode)).or_default().push(r);
        }
        out
    }

    /// Only the records touching one resource.
    pub fn filter_inode(&self, device: &str, inode: u64) -> TraceTable {
        TraceTable {
            records: self
                .records
                .iter()
                .filter(|r| r.device == device && r.inode == inode)
                .cloned()
                .collect(),
            ..TraceTable::default()
        }
    }
}

/// Parses a record stream. Blank lines and `#` comments are ignored;
/// malformed lines are counted and skipped.
pub fn ingest<'a>(lines: impl IntoIterator<Item = &'a str>) -> TraceTable {
    let mut table = TraceTable::default();
    let mut dirfds: HashMap<(u32, i64), String> = HashMap::new();
    for (idx, line) in lines.into_iter().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let mut rec = match TraceRecord::parse_tsv(line) {
            Ok(r) => r,
            Err(message) => {
                table.parse_errors.push(ParseError {
                    line: idx + 1,
                    message,
                });
                continue;
            }
        };
        if rec.op_class == OpClass::Opendir {
            if rec.outcome == Outcome::Success {
                if let Some(fd) = rec.dirfd {
                    dirfds.insert((rec.pid, fd), rec.path.clone());
                }
            }
        } else if !rec.path.starts_with('/') {
            if let Some(fd) = rec.dirfd {
                match dirfds.get(&(rec.pid, fd)) {
                    Some(base) => rec.path = join_path(base, &rec.path),
                    None => {
                        table.unresolved_dirfd += 1;
                        table.warnings.push(format!(
                            "seq {}: unknown dirfd {fd} for pid {}, record skipped",
                            rec.seq, rec.pid
                        ));
                        continue;
                    }
                }
            }
        }
        table.records.push(rec);
    }
    table
}

fn join_path(base: &str, rel: &str) -> String {
    if base.ends_with('/') {
        format!("{base}{rel}")
    } else {
        format!("{base}/{rel}")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ViolationKind {
    CaseInconsistentUse,
    DeleteAndReplace,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub kind: ViolationKind,
    pub device: String,
    pub inode: u64,
    pub created_as: String,
    pub used_as: String,
    pub create_ref: u64,
    pub use_ref: u64,
    pub create_program: String,
    pub create_syscall: String,
    pub use_program: String,
    pub use_syscall: String,
    /// Set when the inconsistent spelling was a directory prefix of the
    /// accessed path rather than the accessed resource itself.
    pub via_prefix: bool,
}

#[derive(Clone, Debug)]
struct Spelling {
    raw: String,
    seq: u64,
    program: String,
    syscall: String,
}

impl Spelling {
    fn of(r: &TraceRecord) -> Self {
        Spelling {
            raw: r.path.clone(),
            seq: r.seq,
            program: r.program.clone(),
            syscall: r.syscall.clone(),
        }
    }
}

fn components(path: &str) -> Vec<&str> {
    path.split('/').filter(|c| !c.is_empty()).collect()
}

fn fold_key(profile: &FoldProfile, comps: &[&str]) -> String {
    let mut out = String::new();
    for c in comps {
        out.push('/');
        match profile.fold_name(c) {
            Ok(k) => out.push_str(k.as_str()),
            Err(_) => out.push_str(c),
        }
    }
    out
}

fn raw_key(comps: &[&str]) -> String {
    let mut out = String::new();
    for c in comps {
        out.push('/');
        out.push_str(c);
    }
    out
}

#[derive(Default)]
struct Detector {
    spellings: HashMap<(String, u64), Vec<Spelling>>,
    /// Folded path to the live `(device, inode, spelling)` entries.
    index: HashMap<String, Vec<(String, u64, String)>>,
    /// Folded path of a deleted entry to the spelling it was created with.
    pending_replace: HashMap<String, (String, u64, Spelling)>,
    seen: std::collections::HashSet<(ViolationKind, String, u64, String)>,
    out: Vec<Violation>,
}

impl Detector {
    #[allow(clippy::too_many_arguments)]
    fn report(&mut self, kind: ViolationKind, dev: &str, ino: u64, created: &Spelling, r: &TraceRecord, used_as: String, via_prefix: bool) {
        if !self.seen.insert((kind, dev.to_string(), ino, used_as.clone())) {
            return;
        }
        self.out.push(Violation {
            kind,
            device: dev.to_string(),
            inode: ino,
            created_as: created.raw.clone(),
            used_as,
            create_ref: created.seq,
            use_ref: r.seq,
            create_program: created.program.clone(),
            create_syscall: created.syscall.clone(),
            use_program: r.program.clone(),
            use_syscall: r.syscall.clone(),
            via_prefix,
        });
    }

    fn register(&mut self, profile: &FoldProfile, r: &TraceRecord) {
        let key = (r.device.clone(), r.inode);
        let set = self.spellings.entry(key).or_default();
        if set.iter().any(|s| s.raw == r.path) {
            return;
        }
        set.push(Spelling::of(r));
        let folded = fold_key(profile, &components(&r.path));
        self.index
            .entry(folded)
            .or_default()
            .push((r.device.clone(), r.inode, r.path.clone()));
    }

    fn forget(&mut self, profile: &FoldProfile, dev: &str, ino: u64, raw: &str) {
        if let Some(set) = self.spellings.get_mut(&(dev.to_string(), ino)) {
            set.retain(|s| s.raw != raw);
            if set.is_empty() {
                self.spellings.remove(&(dev.to_string(), ino));
            }
        }
        let folded = fold_key(profile, &components(raw));
        if let Some(v) = self.index.get_mut(&folded) {
            v.retain(|(d, i, p)| !(d == dev && *i == ino && p == raw));
            if v.is_empty() {
                self.index.remove(&folded);
            }
        }
    }

    /// Strict mode: each proper directory prefix must match a tracked
    /// spelling bytewise when it matches one by fold.
    fn check_prefixes(&mut self, profile: &FoldProfile, r: &TraceRecord) {
        let comps = components(&r.path);
        for n in 1..comps.len() {
            let prefix = &comps[..n];
            let raw = raw_key(prefix);
            let Some(entries) = self.index.get(&fold_key(profile, prefix)) else {
                continue;
            };
            if entries.iter().any(|(_, _, p)| *p == raw) {
                continue;
            }
            let (dev, ino, _) = entries[0].clone();
            let created = self.spellings[&(dev.clone(), ino)]
                .iter()
                .find(|s| fold_key(profile, &components(&s.raw)) == fold_key(profile, prefix))
                .cloned()
                .expect("index and spellings agree");
            self.report(ViolationKind::CaseInconsistentUse, &dev, ino, &created, r, raw, true);
        }
    }

    /// The accessed resource itself reached through a fold-equal spelling.
    fn check_leaf(&mut self, profile: &FoldProfile, r: &TraceRecord) {
        let key = (r.device.clone(), r.inode);
        let Some(set) = self.spellings.get(&key) else {
            return;
        };
        if set.iter().any(|s| s.raw == r.path) {
            return;
        }
        let used = fold_key(profile, &components(&r.path));
        let Some(created) = set
            .iter()
            .find(|s| fold_key(profile, &components(&s.raw)) == used)
            .cloned()
        else {
            return;
        };
        let used_as = r.path.clone();
        self.report(ViolationKind::CaseInconsistentUse, &r.device, r.inode, &created, r, used_as, false);
    }

    fn step(&mut self, profile: &FoldProfile, r: &TraceRecord) {
        if r.outcome != Outcome::Success {
            return;
        }
        self.check_prefixes(profile, r);
        match r.op_class {
            OpClass::Create => {
                let folded = fold_key(profile, &components(&r.path));
                if let Some((dev, ino, deleted)) = self.pending_replace.remove(&folded) {
                    if deleted.raw != r.path {
                        let used_as = r.path.clone();
                        self.report(ViolationKind::DeleteAndReplace, &dev, ino, &deleted, r, used_as, false);
                    }
                }
                self.check_leaf(profile, r);
                self.register(profile, r);
            }
            OpClass::Use | OpClass::Opendir => self.check_leaf(profile, r),
            OpClass::Delete => {
                let key = (r.device.clone(), r.inode);
                let folded = fold_key(profile, &components(&r.path));
                let matched = self.spellings.get(&key).and_then(|set| {
                    set.iter()
                        .find(|s| s.raw == r.path)
                        .or_else(|| set.iter().find(|s| fold_key(profile, &components(&s.raw)) == folded))
                        .cloned()
                });
                if let Some(sp) = matched {
                    self.forget(profile, &r.device, r.inode, &sp.raw);
                    self.pending_replace.insert(folded, (r.device.clone(), r.inode, sp));
                }
            }
            OpClass::Rename => {
                let key = (r.device.clone(), r.inode);
                let old: Vec<String> = self
                    .spellings
                    .get(&key)
                    .map(|set| set.iter().map(|s| s.raw.clone()).collect())
                    .unwrap_or_default();
                for raw in old {
                    self.forget(profile, &r.device, r.inode, &raw);
                }
                self.register(profile, r);
            }
        }
    }
}

/// Runs detection over the whole table. `device_filter` restricts the scan
/// to one device (only fold-flagged mounts need monitoring).
pub fn detect(table: &TraceTable, profile: &FoldProfile, device_filter: Option<&str>) -> Vec<Violation> {
    let mut det = Detector::default();
    for r in &table.records {
        if device_filter.is_some_and(|d| d != r.device) {
            continue;
        }
        det.step(profile, r);
    }
    det.out
}

/// Two-line report block: the offending access, then the creation it
/// contradicts.
pub fn render_violation(v: &Violation) -> String {
    let head = match v.kind {
        ViolationKind::CaseInconsistentUse => "USE",
        ViolationKind::DeleteAndReplace => "REPLACE",
    };
    format!(
        "{head} [msg={},'{}'.{}] {}|{}| {}\nCREATE [msg={},'{}'.{}] {}|{}| {}\n",
        v.use_ref,
        v.use_program,
        v.use_syscall,
        v.device,
        v.inode,
        v.used_as,
        v.create_ref,
        v.create_program,
        v.create_syscall,
        v.device,
        v.inode,
        v.created_as
    )
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&render_violation(self))
    }
}
