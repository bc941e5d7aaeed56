//! Runs collision cases and turns the observed effects into response
//! codes.
//!
//! Classification compares three things: the source tree as it was, the
//! destination after the run, and the run's own event log. Within each
//! colliding group of source paths the first member (in source readdir
//! order) is the target and each later member is a source. The
//! destination entry both spellings resolve to is the slot.
//!
//! * `×` the slot carries the source under the source's spelling, after
//!   the target's entry was removed.
//! * `+` the slot keeps the target's spelling and source data landed in it
//!   or through it.
//! * `≠` the resource that now holds source data keeps some target
//!   attribute (spelling, mode, owner, xattrs), or the reverse.
//! * `T` a write left the destination through a symlink although the
//!   invocation asked for links not to be followed.
//! * `C` a non-colliding path lost its content or its hardlink set.
//! * `R` a new name that no source path folds to carries source data.
//! * `A`, `E`, `∞` come from prompts, errors and the step limit.
//! * `−` a colliding member was skipped or degraded; it overrides the rest.

mod live;

pub use live::{check_mount, load_host_tree, run_live, Discrepancy, LiveConfig, LiveError, LiveReport, DEFAULT_TIMEOUT, MOUNT_ENV};

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fold::FoldProfile;
use crate::refutils::{CopyOutcome, EventResult, Terminated};
use crate::tracer::{OpClass, Outcome};
use crate::vfs::{join, snapshot_diff, split_parent, FsImage, Ino, Node, NodeData, NodeKind, VfsError};

/// Declaration order is display order, so sets print as `C×`, `+≠`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ResponseCode {
    Corrupt,
    DeleteRecreate,
    Overwrite,
    MetadataMismatch,
    FollowSymlink,
    Rename,
    AskUser,
    Deny,
    Crash,
    Unsupported,
}

impl ResponseCode {
    pub const ALL: [ResponseCode; 10] = [
        ResponseCode::Corrupt,
        ResponseCode::DeleteRecreate,
        ResponseCode::Overwrite,
        ResponseCode::MetadataMismatch,
        ResponseCode::FollowSymlink,
        ResponseCode::Rename,
        ResponseCode::AskUser,
        ResponseCode::Deny,
        ResponseCode::Crash,
        ResponseCode::Unsupported,
    ];

    pub fn symbol(self) -> &'static str {
        match self {
            ResponseCode::DeleteRecreate => "×",
            ResponseCode::Overwrite => "+",
            ResponseCode::Corrupt => "C",
            ResponseCode::MetadataMismatch => "≠",
            ResponseCode::FollowSymlink => "T",
            ResponseCode::Rename => "R",
            ResponseCode::AskUser => "A",
            ResponseCode::Deny => "E",
            ResponseCode::Crash => "∞",
            ResponseCode::Unsupported => "−",
        }
    }

    pub fn from_symbol(c: char) -> Option<ResponseCode> {
        let code = match c {
            '×' | 'x' => ResponseCode::DeleteRecreate,
            '+' => ResponseCode::Overwrite,
            'C' => ResponseCode::Corrupt,
            '≠' => ResponseCode::MetadataMismatch,
            'T' => ResponseCode::FollowSymlink,
            'R' => ResponseCode::Rename,
            'A' => ResponseCode::AskUser,
            'E' => ResponseCode::Deny,
            '∞' => ResponseCode::Crash,
            '−' | '-' => ResponseCode::Unsupported,
            _ => return None,
        };
        Some(code)
    }
}

impl fmt::Display for ResponseCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.symbol())
    }
}

impl Serialize for ResponseCode {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.symbol())
    }
}

impl<'de> Deserialize<'de> for ResponseCode {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        let mut chars = s.chars();
        match (chars.next().and_then(ResponseCode::from_symbol), chars.next()) {
            (Some(c), None) => Ok(c),
            _ => Err(serde::de::Error::custom(format!("unknown response code {s:?}"))),
        }
    }
}

/// Parses a cell such as `C+≠`; the empty string is the empty set.
pub fn parse_codes(cell: &str) -> Result<BTreeSet<ResponseCode>, String> {
    cell.chars()
        .map(|c| ResponseCode::from_symbol(c).ok_or_else(|| format!("unknown response code {c:?}")))
        .collect()
}

pub fn format_codes(codes: &BTreeSet<ResponseCode>) -> String {
    codes.iter().map(|c| c.symbol()).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvidenceSource {
    Diff,
    Event,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Evidence {
    pub code: ResponseCode,
    pub source: EvidenceSource,
    pub path: String,
    pub detail: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Classification {
    pub codes: BTreeSet<ResponseCode>,
    pub evidence: Vec<Evidence>,
    pub notes: Vec<String>,
}

impl Classification {
    pub fn code_string(&self) -> String {
        format_codes(&self.codes)
    }

    fn add(&mut self, code: ResponseCode, source: EvidenceSource, path: &str, detail: String) {
        self.codes.insert(code);
        self.evidence.push(Evidence {
            code,
            source,
            path: path.to_string(),
            detail,
        });
    }

    /// Every code is backed by at least one evidence item.
    pub fn evidence_complete(&self) -> bool {
        self.codes
            .iter()
            .all(|c| self.evidence.iter().any(|e| e.code == *c))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassifyOptions {
    /// Count timestamp differences as attribute mismatches and as escapes.
    pub strict_times: bool,
}

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("collision at {path} produced effects that match no response rule: {detail}")]
    AmbiguousEvidence { path: String, detail: String },
    #[error(transparent)]
    Vfs(#[from] VfsError),
}

pub const NO_COLLISION_NOTE: &str = "no collision exercised";

struct SrcPath {
    rel: String,
    key: String,
    ino: Ino,
}

fn fold_rel(profile: &FoldProfile, rel: &str) -> String {
    rel.split('/')
        .map(|c| profile.fold_name(c).map(|k| k.into_string()).unwrap_or_else(|_| c.to_string()))
        .collect::<Vec<_>>()
        .join("/")
}

fn leaf(rel: &str) -> &str {
    rel.rsplit('/').next().unwrap_or(rel)
}

fn under(path: &str, root: &str) -> bool {
    let root = root.trim_end_matches('/');
    path == root || path.starts_with(&format!("{root}/"))
}

fn node(img: &FsImage, ino: Ino) -> Result<&Node, VfsError> {
    img.node(ino).ok_or(VfsError::NoSuchInode(ino))
}

/// Does `candidate` (in the after image) hold the data of `src` (in the
/// before image)?
fn carries(after: &FsImage, candidate: &Node, before: &FsImage, src: &Node, profile: &FoldProfile) -> bool {
    match (&src.data, &candidate.data) {
        (NodeData::File(want), NodeData::File(have)) => want == have,
        (NodeData::File(want), NodeData::Pipe { capture } | NodeData::Device { capture, .. }) => {
            !want.is_empty() && capture.windows(want.len()).any(|w| w == want.as_slice())
        }
        (NodeData::Symlink(a), NodeData::Symlink(b)) => a == b,
        (NodeData::Dir(want), NodeData::Dir(have)) => {
            !want.entries.is_empty()
                && want.entries.iter().all(|(name, &child)| {
                    let key = profile.fold_name(name).ok();
                    have.entries.iter().any(|(hname, &hchild)| {
                        let same_name = hname == name || (key.is_some() && profile.fold_name(hname).ok() == key);
                        same_name
                            && match (before.node(child), after.node(hchild)) {
                                (Some(c), Some(h)) => c.kind() == h.kind() && c.payload() == h.payload(),
                                _ => false,
                            }
                    })
                })
        }
        (NodeData::Pipe { .. }, NodeData::Pipe { .. }) | (NodeData::Device { .. }, NodeData::Device { .. }) => true,
        _ => false,
    }
}

/// Classifies one run: `before` is the image the model started from,
/// `after` its final image, `source` and `target` the copied directory and
/// the destination directory.
pub fn classify(
    before: &FsImage,
    after: &FsImage,
    source: &str,
    target: &str,
    outcome: &CopyOutcome,
) -> Result<Classification, HarnessError> {
    classify_with(before, after, source, target, outcome, ClassifyOptions::default())
}

pub fn classify_with(
    before: &FsImage,
    after: &FsImage,
    source: &str,
    target: &str,
    outcome: &CopyOutcome,
    opts: ClassifyOptions,
) -> Result<Classification, HarnessError> {
    let target_dir = after.dir_ino(target)?;
    let profile = after
        .node(target_dir)
        .and_then(Node::as_dir)
        .and_then(|d| d.fold)
        .unwrap_or_else(FoldProfile::sensitive);

    let src_dir = before.dir_ino(source)?;
    let src_base = before.path_of_dir(src_dir)?;
    let src_paths: Vec<SrcPath> = before
        .walk(src_dir)
        .into_iter()
        .map(|(p, ino)| {
            let rel = p[src_base.len()..].trim_start_matches('/').to_string();
            SrcPath {
                key: fold_rel(&profile, &rel),
                rel,
                ino,
            }
        })
        .collect();

    let mut buckets: BTreeMap<&str, Vec<&SrcPath>> = BTreeMap::new();
    for sp in &src_paths {
        buckets.entry(sp.key.as_str()).or_default().push(sp);
    }
    // Members are ordered by when the run first touched their destination
    // path, so the target is whichever one was in place first. Untouched
    // members keep source order.
    let first_touch = |sp: &SrcPath| {
        let dst = join(target, &sp.rel);
        outcome.events.iter().position(|e| e.path == dst).unwrap_or(usize::MAX)
    };
    let groups: Vec<Vec<&SrcPath>> = buckets
        .into_values()
        .filter(|v| v.len() > 1)
        .map(|mut v| {
            v.sort_by_key(|sp| first_touch(sp));
            v
        })
        .collect();
    let group_keys: BTreeSet<&str> = groups.iter().map(|g| g[0].key.as_str()).collect();
    let member_rels: BTreeSet<&str> = groups.iter().flatten().map(|sp| sp.rel.as_str()).collect();
    // Innermost groups decide; enclosing directory groups only merge.
    let primary: Vec<&Vec<&SrcPath>> = groups
        .iter()
        .filter(|g| {
            let k = format!("{}/", g[0].key);
            !group_keys.iter().any(|other| other.starts_with(&k))
        })
        .collect();

    let mut c = Classification::default();
    // Event paths below a renamed entry are mapped back to the name the
    // source intended.
    let renames: Vec<(&str, &str)> = outcome
        .events
        .iter()
        .filter_map(|e| match &e.result {
            EventResult::Renamed { to } => Some((e.path.as_str(), to.as_str())),
            _ => None,
        })
        .collect();
    let intended = |path: &str| -> String {
        for (from, to) in &renames {
            if path == *to {
                return from.to_string();
            }
            if let Some(rest) = path.strip_prefix(&format!("{to}/")) {
                return join(from, rest);
            }
        }
        path.to_string()
    };
    let degraded: BTreeSet<String> = outcome
        .events
        .iter()
        .filter(|e| matches!(e.result, EventResult::Skipped { .. } | EventResult::Degraded { .. }))
        .map(|e| intended(&e.path))
        .collect();
    let dst_of = |rel: &str| join(target, rel);

    // Outcome-level codes.
    for e in &outcome.events {
        match &e.result {
            EventResult::Prompted { answer } => c.add(
                ResponseCode::AskUser,
                EvidenceSource::Event,
                &e.path,
                format!("user asked before replacing; answer {answer:?}"),
            ),
            EventResult::Skipped { reason } | EventResult::Degraded { reason } => {
                let path = intended(&e.path);
                let rel = path.strip_prefix(target).unwrap_or(&path).trim_start_matches('/');
                if member_rels.contains(rel) {
                    c.add(ResponseCode::Unsupported, EvidenceSource::Event, &e.path, reason.clone());
                } else {
                    c.notes.push(format!("{}: {reason}", e.path));
                }
            }
            _ => {}
        }
    }
    match outcome.terminated {
        Terminated::ErrorReported => {
            for e in &outcome.events {
                if let EventResult::Error { message } = &e.result {
                    c.add(ResponseCode::Deny, EvidenceSource::Event, &e.path, message.clone());
                }
            }
        }
        Terminated::StepLimitHit => {
            let path = outcome
                .events
                .iter()
                .rev()
                .find(|e| matches!(e.result, EventResult::StepLimit { .. }))
                .map_or_else(|| target.to_string(), |e| e.path.clone());
            c.add(ResponseCode::Crash, EvidenceSource::Event, &path, "step limit reached without progress".into());
        }
        Terminated::Ok | Terminated::UserPrompt => {}
    }

    // Per-group slot analysis.
    for group in &primary {
        let t = group[0];
        let t_node = node(before, t.ino)?;
        let slot_path = dst_of(&t.rel);
        let Some(slot_ino) = after.lookup(&slot_path)? else {
            c.notes.push(format!("{slot_path}: no destination entry"));
            continue;
        };
        let slot = node(after, slot_ino)?;
        let (slot_parent, slot_leaf) = split_parent(&slot_path).expect("slot below target");
        let slot_name = after
            .find_entry(after.dir_ino(&slot_parent)?, &slot_leaf)?
            .map(|(raw, _)| raw)
            .unwrap_or(slot_leaf);
        let referent = if slot.kind() == NodeKind::Symlink {
            after.lookup_follow(&slot_path).ok().flatten().and_then(|i| after.node(i))
        } else {
            None
        };

        for s in &group[1..] {
            let s_node = node(before, s.ino)?;
            let in_slot = carries(after, slot, before, s_node, &profile);
            let through = !in_slot && referent.is_some_and(|r| carries(after, r, before, s_node, &profile));
            let (t_name, s_name) = (leaf(&t.rel), leaf(&s.rel));

            let recreated = if t_name != s_name {
                slot_name == s_name
            } else {
                // Same final spelling (collision in a parent): fall back to
                // whether the entry was removed during the run.
                removed_during_run(outcome, &profile, &slot_path)
            };
            if in_slot && recreated && slot_name == s_name {
                c.add(
                    ResponseCode::DeleteRecreate,
                    EvidenceSource::Diff,
                    &slot_path,
                    format!("target entry replaced by a new '{slot_name}' holding the source"),
                );
            } else if in_slot || through {
                c.add(
                    ResponseCode::Overwrite,
                    EvidenceSource::Diff,
                    &slot_path,
                    format!(
                        "'{slot_name}' kept the target's name and received source data{}",
                        if through { " through its symlink" } else { "" }
                    ),
                );
            }

            // Attribute mix on the resource holding source data.
            let holder_is_slot = in_slot && slot.kind() == s_node.kind();
            let target_data_kept = !in_slot && carries(after, slot, before, t_node, &profile) && slot.kind() == s_node.kind();
            if holder_is_slot || target_data_kept {
                let (from_target, from_source) = if holder_is_slot { (t_node, s_node) } else { (s_node, t_node) };
                let mut mixed = Vec::new();
                if t_name != s_name && holder_is_slot && slot_name == t_name {
                    mixed.push("name".to_string());
                }
                let (m, a, b) = (&slot.meta, &from_target.meta, &from_source.meta);
                if m.mode == a.mode && m.mode != b.mode {
                    mixed.push(format!("mode {:o}", m.mode));
                }
                if m.uid == a.uid && m.uid != b.uid {
                    mixed.push(format!("uid {}", m.uid));
                }
                if m.gid == a.gid && m.gid != b.gid {
                    mixed.push(format!("gid {}", m.gid));
                }
                if m.xattrs == a.xattrs && m.xattrs != b.xattrs {
                    mixed.push("xattrs".into());
                }
                if opts.strict_times && m.mtime == a.mtime && m.mtime != b.mtime {
                    mixed.push(format!("mtime {}", m.mtime));
                }
                if !mixed.is_empty() {
                    c.add(
                        ResponseCode::MetadataMismatch,
                        EvidenceSource::Diff,
                        &slot_path,
                        format!("data from one resource, {} from the other", mixed.join(", ")),
                    );
                }
            }
        }
    }

    // Writes that left both trees.
    let delta = snapshot_diff(before, after, "/")?;
    let outside = |p: &str| {
        let abs = format!("/{p}");
        !under(&abs, target) && !under(&abs, &src_base)
    };
    let mut escaped: Vec<String> = delta
        .added
        .iter()
        .map(|(p, _)| p.clone())
        .filter(|p| outside(p))
        .collect();
    escaped.extend(
        delta
            .changed
            .iter()
            .filter(|ch| outside(&ch.path))
            .filter(|ch| opts.strict_times || ch.fields.iter().any(|f| *f != "mtime"))
            .map(|ch| ch.path.clone()),
    );
    for p in escaped {
        if outcome.no_follow_directive {
            c.add(
                ResponseCode::FollowSymlink,
                EvidenceSource::Diff,
                &format!("/{p}"),
                "written outside the destination through a symlink".into(),
            );
        } else {
            c.notes.push(format!("/{p}: written through a symlink (links are followed by default)"));
        }
    }

    // Non-colliding paths: content and hardlink sets. Paths at or below a
    // colliding member belong to the slot analysis instead.
    let in_member = |rel: &str| {
        member_rels
            .iter()
            .any(|m| rel == *m || rel.starts_with(&format!("{m}/")))
    };
    let target_rels: BTreeSet<&str> = groups.iter().map(|g| g[0].rel.as_str()).collect();
    let dst_links = link_sets(after, target, &profile)?;
    for sp in &src_paths {
        if in_member(&sp.rel) || degraded.contains(dst_of(&sp.rel).as_str()) {
            continue;
        }
        let s_node = node(before, sp.ino)?;
        if s_node.is_dir() {
            continue;
        }
        let dst = dst_of(&sp.rel);
        let Some(d_ino) = after.lookup(&dst).ok().flatten() else {
            continue;
        };
        let d_node = node(after, d_ino)?;
        if d_node.kind() == s_node.kind() && d_node.payload() != s_node.payload() {
            c.add(
                ResponseCode::Corrupt,
                EvidenceSource::Diff,
                &dst,
                format!(
                    "content {:?} where the source has {:?}",
                    String::from_utf8_lossy(d_node.payload()),
                    String::from_utf8_lossy(s_node.payload())
                ),
            );
            continue;
        }
        if s_node.kind() != NodeKind::File {
            continue;
        }
        let partners: Vec<&SrcPath> = src_paths.iter().filter(|o| o.ino == sp.ino).collect();
        let want: BTreeSet<&str> = partners
            .iter()
            .filter(|o| !in_member(&o.rel))
            .map(|o| o.key.as_str())
            .collect();
        let have_all = dst_links.get(&d_ino).cloned().unwrap_or_default();
        let have: BTreeSet<&str> = have_all
            .iter()
            .map(String::as_str)
            .filter(|k| !group_keys.contains(k) && !group_keys.iter().any(|g| k.starts_with(&format!("{g}/"))))
            .collect();
        // A link to a colliding member counts only when that member is the
        // one the destination was meant to keep.
        let lost: Vec<&str> = partners
            .iter()
            .filter(|o| target_rels.contains(o.rel.as_str()) && !have_all.contains(&o.key))
            .map(|o| o.rel.as_str())
            .collect();
        if want != have || !lost.is_empty() {
            c.add(
                ResponseCode::Corrupt,
                EvidenceSource::Diff,
                &dst,
                format!(
                    "linked with {:?} where the source links {:?}",
                    have_all.iter().collect::<Vec<_>>(),
                    partners.iter().map(|o| o.rel.as_str()).collect::<Vec<_>>()
                ),
            );
        }
    }

    // New names carrying source data.
    let src_keys: BTreeSet<&str> = src_paths.iter().map(|sp| sp.key.as_str()).collect();
    let target_base = after.path_of_dir(target_dir)?;
    for (p, ino) in after.walk(target_dir) {
        let rel = p[target_base.len()..].trim_start_matches('/');
        let key = fold_rel(&profile, rel);
        if src_keys.contains(key.as_str()) {
            continue;
        }
        // Only the topmost new name counts.
        if let Some((parent, _)) = rel.rsplit_once('/') {
            if !src_keys.contains(fold_rel(&profile, parent).as_str()) {
                continue;
            }
        }
        let d_node = node(after, ino)?;
        if let Some(sp) = src_paths
            .iter()
            .find(|sp| before.node(sp.ino).is_some_and(|s| carries(after, d_node, before, s, &profile) && s.kind() == d_node.kind()))
        {
            c.add(
                ResponseCode::Rename,
                EvidenceSource::Diff,
                &p,
                format!("new name holds the data of source '{}'", sp.rel),
            );
        }
    }

    // Unsupported overrides everything else.
    if c.codes.contains(&ResponseCode::Unsupported) {
        let (keep, drop): (Vec<Evidence>, Vec<Evidence>) = c
            .evidence
            .into_iter()
            .partition(|e| e.code == ResponseCode::Unsupported);
        for e in drop {
            c.notes.push(format!("overridden {} at {}: {}", e.code, e.path, e.detail));
        }
        c.evidence = keep;
        c.codes = [ResponseCode::Unsupported].into_iter().collect();
    }

    if c.codes.is_empty() {
        if let Some(g) = primary.first() {
            return Err(HarnessError::AmbiguousEvidence {
                path: dst_of(&g[0].rel),
                detail: format!(
                    "members {:?}, run terminated {:?}",
                    g.iter().map(|sp| sp.rel.as_str()).collect::<Vec<_>>(),
                    outcome.terminated
                ),
            });
        }
        c.notes.push(NO_COLLISION_NOTE.into());
    }
    Ok(c)
}

/// Folded relative names of every destination path, per inode.
fn link_sets(after: &FsImage, target: &str, profile: &FoldProfile) -> Result<BTreeMap<Ino, BTreeSet<String>>, VfsError> {
    let dir = after.dir_ino(target)?;
    let base = after.path_of_dir(dir)?;
    let mut out: BTreeMap<Ino, BTreeSet<String>> = BTreeMap::new();
    for (p, ino) in after.walk(dir) {
        let rel = p[base.len()..].trim_start_matches('/');
        out.entry(ino).or_default().insert(fold_rel(profile, rel));
    }
    Ok(out)
}

/// Whether the run deleted the entry at `path` (any fold-equal spelling).
fn removed_during_run(outcome: &CopyOutcome, profile: &FoldProfile, path: &str) -> bool {
    let want = fold_rel(profile, path.trim_start_matches('/'));
    outcome.trace.iter().any(|r| {
        r.op_class == OpClass::Delete
            && r.outcome == Outcome::Success
            && fold_rel(profile, r.path.trim_start_matches('/')) == want
    })
}

impl FromStr for ResponseCode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        let mut chars = s.chars();
        match (chars.next().and_then(ResponseCode::from_symbol), chars.next()) {
            (Some(c), None) => Ok(c),
            _ => Err(format!("unknown response code {s:?}")),
        }
    }
}
