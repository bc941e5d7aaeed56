//! The six utility models. Each returns how the run terminated; effects are
//! left in the session.

use std::collections::{BTreeMap, HashMap};

use super::{EventResult, ModelError, PromptAnswer, Session, SrcEntry, Terminated};
use crate::tarfmt::{self, MemberKind, TarMember};
use crate::vfs::{join, split_parent, CreateOptions, Ino, Metadata, NewNode, NodeKind, VfsError};

fn flatten(src: &[SrcEntry]) -> Vec<&SrcEntry> {
    let mut out = Vec::new();
    for e in src {
        out.push(e);
        out.extend(e.descendants());
    }
    out
}

fn ok_or_error(s: &mut Session, op: &str, path: &str, res: Result<Ino, VfsError>) -> Option<Ino> {
    match res {
        Ok(ino) => {
            s.event(op, path, EventResult::Ok);
            Some(ino)
        }
        Err(e) => {
            s.event(op, path, EventResult::Error { message: e.to_string() });
            None
        }
    }
}

/// Order in which directory attributes are restored: as each directory is
/// completed, so children before parents and siblings in archive order.
fn finish_order(mut delayed: Vec<(String, Metadata)>) -> Vec<(String, Metadata)> {
    delayed.sort_by_key(|(p, _)| std::cmp::Reverse(p.matches('/').count()));
    delayed
}

fn finish(s: &Session) -> Terminated {
    if s.has_errors() {
        Terminated::ErrorReported
    } else {
        Terminated::Ok
    }
}

// ---------------------------------------------------------------- tar

/// Archive members in walk order. A second path to an already archived
/// inode becomes a hardlink member naming the first path.
fn tar_members(src: &[SrcEntry]) -> Vec<TarMember> {
    let mut first_path: HashMap<Ino, String> = HashMap::new();
    let mut out = Vec::new();
    for e in flatten(src) {
        let kind = match e.kind {
            NodeKind::File if first_path.contains_key(&e.ino) => MemberKind::Hardlink,
            NodeKind::File => MemberKind::File,
            NodeKind::Dir => MemberKind::Dir,
            NodeKind::Symlink => MemberKind::Symlink,
            NodeKind::Pipe => MemberKind::Fifo,
            NodeKind::Device => MemberKind::CharDevice,
        };
        let mut m = TarMember::new(&e.rel, kind);
        m.mode = e.meta.mode;
        m.uid = u64::from(e.meta.uid);
        m.gid = u64::from(e.meta.gid);
        m.mtime = e.meta.mtime;
        match kind {
            MemberKind::Hardlink => m.linkname = first_path[&e.ino].clone(),
            MemberKind::File => {
                m.data = e.content.clone();
                if e.nlink > 1 {
                    first_path.insert(e.ino, e.rel.clone());
                }
            }
            MemberKind::Symlink => m.linkname = e.link_target.clone().unwrap_or_default(),
            MemberKind::CharDevice => {
                let (maj, min) = e.device.unwrap_or((0, 0));
                m.devmajor = maj;
                m.devminor = min;
            }
            _ => {}
        }
        out.push(m);
    }
    out
}

fn member_meta(m: &TarMember) -> Metadata {
    Metadata::new(m.mode & 0o777)
        .with_owner(m.uid as u32, m.gid as u32)
        .with_mtime(m.mtime)
}

/// Creates one node, removing whatever holds the name on `Exists` and
/// retrying once.
fn tar_create(s: &mut Session, path: &str, mut attempt: impl FnMut(&mut Session) -> Result<Ino, VfsError>) -> Result<Ino, VfsError> {
    match attempt(s) {
        Err(VfsError::Exists(_)) => {
            s.unlink(path)?;
            attempt(s)
        }
        other => other,
    }
}

pub(super) fn tar(s: &mut Session, src: &[SrcEntry], target: &str) -> Result<Terminated, ModelError> {
    let bytes = tarfmt::write_archive(&tar_members(src));
    let archive = tarfmt::read_archive(&bytes)?;
    let mut delayed: Vec<(String, Metadata)> = Vec::new();
    for m in &archive.members {
        let path = join(target, &m.path);
        let meta = member_meta(m);
        let res = match m.kind {
            Some(MemberKind::Dir) => match s.make_node(&path, NewNode::Dir, &meta) {
                Err(VfsError::Exists(_)) => match s.stat(&path) {
                    Some(ino) if s.kind_of(ino) == Some(NodeKind::Dir) => Ok(ino),
                    _ => s.unlink(&path).and_then(|_| s.make_node(&path, NewNode::Dir, &meta)),
                },
                other => other,
            },
            Some(MemberKind::File) => {
                let data = m.data.clone();
                tar_create(s, &path, |s| s.write_file(&path, &data, &meta, CreateOptions::exclusive()))
            }
            Some(MemberKind::Hardlink) => {
                let to = join(target, &m.linkname);
                tar_create(s, &path, |s| s.link(&to, &path, CreateOptions::exclusive()))
            }
            Some(MemberKind::Symlink) => {
                let node = NewNode::Symlink(m.linkname.clone());
                tar_create(s, &path, |s| s.make_node(&path, node.clone(), &meta))
            }
            Some(MemberKind::Fifo) => tar_create(s, &path, |s| s.make_node(&path, NewNode::Pipe, &meta)),
            Some(MemberKind::CharDevice | MemberKind::BlockDevice) => {
                let node = NewNode::Device {
                    major: m.devmajor,
                    minor: m.devminor,
                };
                tar_create(s, &path, |s| s.make_node(&path, node.clone(), &meta))
            }
            None => Err(VfsError::InvalidName(crate::fold::FoldError::InvalidName {
                name: m.path.clone(),
                reason: crate::fold::InvalidReason::IllFormed,
            })),
        };
        let Some(ino) = ok_or_error(s, "extract", &path, res) else {
            continue;
        };
        match m.kind {
            Some(MemberKind::Dir) => delayed.push((path, meta)),
            Some(MemberKind::Symlink) | Some(MemberKind::Hardlink) => {}
            _ => {
                let _ = s.set_meta_fd(ino, &meta);
            }
        }
    }
    // Directory attributes are restored once the directory is complete.
    for (path, meta) in finish_order(delayed) {
        if let Err(e) = s.set_meta_path(&path, true, &meta) {
            s.event("set-attributes", &path, EventResult::Error { message: e.to_string() });
        }
    }
    Ok(finish(s))
}

// ---------------------------------------------------------------- zip

enum ZipKind {
    Dir,
    File(Vec<u8>),
    Symlink(String),
}

struct ZipMember {
    rel: String,
    kind: ZipKind,
    mode: u32,
    mtime: i64,
}

/// What `zip -r --symlinks` stores: specials are left out, hardlinks lose
/// their identity.
fn zip_members(s: &mut Session, src: &[SrcEntry], target: &str) -> Vec<ZipMember> {
    let mut out = Vec::new();
    for e in flatten(src) {
        let dst = join(target, &e.rel);
        let kind = match e.kind {
            NodeKind::Dir => ZipKind::Dir,
            NodeKind::File => {
                if e.nlink > 1 {
                    s.event(
                        "archive",
                        &dst,
                        EventResult::Degraded {
                            reason: "hardlink stored as a regular file".into(),
                        },
                    );
                }
                ZipKind::File(e.content.clone())
            }
            NodeKind::Symlink => ZipKind::Symlink(e.link_target.clone().unwrap_or_default()),
            NodeKind::Pipe | NodeKind::Device => {
                s.event(
                    "archive",
                    &dst,
                    EventResult::Skipped {
                        reason: format!("{} not archived", e.kind.as_str()),
                    },
                );
                continue;
            }
        };
        out.push(ZipMember {
            rel: e.rel.clone(),
            kind,
            mode: e.meta.mode,
            mtime: e.meta.mtime,
        });
    }
    out
}

pub(super) fn zip(
    s: &mut Session,
    src: &[SrcEntry],
    target: &str,
    script: Option<&[PromptAnswer]>,
) -> Result<Terminated, ModelError> {
    let members = zip_members(s, src, target);
    let mut answers = script.map(|a| a.iter().copied());
    let mut delayed: Vec<(String, Metadata)> = Vec::new();
    let mut skipped_prefixes: Vec<String> = Vec::new();
    for m in &members {
        if skipped_prefixes.iter().any(|p| m.rel.starts_with(&format!("{p}/"))) {
            continue;
        }
        let mut path = join(target, &m.rel);
        let meta = Metadata::new(m.mode).with_mtime(m.mtime);
        match &m.kind {
            ZipKind::Dir => match s.make_node(&path, NewNode::Dir, &meta) {
                Ok(_) => {
                    s.event("extract", &path, EventResult::Ok);
                    delayed.push((path, meta));
                }
                Err(VfsError::Exists(_)) => {
                    let existing = s.lstat(&path).and_then(|i| s.kind_of(i));
                    match existing {
                        Some(NodeKind::Dir) => delayed.push((path, meta)),
                        Some(NodeKind::Symlink) => {
                            // The name is taken by a link to a directory: the
                            // creation check never settles.
                            while s.step() {
                                let _ = s.stat(&path);
                                let _ = s.make_node(&path, NewNode::Dir, &meta);
                            }
                            let steps = s.steps();
                            s.event("extract", &path, EventResult::StepLimit { steps });
                            return Ok(Terminated::StepLimitHit);
                        }
                        _ => {
                            s.event(
                                "extract",
                                &path,
                                EventResult::Error {
                                    message: "exists but is not a directory".into(),
                                },
                            );
                            skipped_prefixes.push(m.rel.clone());
                        }
                    }
                }
                Err(e) => {
                    s.event("extract", &path, EventResult::Error { message: e.to_string() });
                    skipped_prefixes.push(m.rel.clone());
                }
            },
            ZipKind::File(_) | ZipKind::Symlink(_) => {
                if let Some(existing) = s.lstat(&path) {
                    let Some(answers) = answers.as_mut() else {
                        return Err(ModelError::PromptRequired { path });
                    };
                    let answer = answers.next();
                    s.event("prompt", &path, EventResult::Prompted { answer });
                    match answer {
                        None | Some(PromptAnswer::Abort) => return Ok(Terminated::UserPrompt),
                        Some(PromptAnswer::Skip) => {
                            s.event("extract", &path, EventResult::Declined);
                            continue;
                        }
                        Some(PromptAnswer::Rename) => {
                            let (parent, name) = split_parent(&path).expect("member paths have parents");
                            path = join(&parent, &format!("{name}~"));
                        }
                        Some(PromptAnswer::Overwrite) => {
                            if s.kind_of(existing) == Some(NodeKind::Dir) {
                                s.event(
                                    "extract",
                                    &path,
                                    EventResult::Error {
                                        message: "is a directory".into(),
                                    },
                                );
                                continue;
                            }
                            let _ = s.unlink(&path);
                        }
                    }
                }
                let res = match &m.kind {
                    ZipKind::File(data) => s.write_file(&path, data, &meta, CreateOptions::exclusive()),
                    ZipKind::Symlink(t) => s.make_node(&path, NewNode::Symlink(t.clone()), &Metadata::new(0o777)),
                    ZipKind::Dir => unreachable!("handled above"),
                };
                ok_or_error(s, "extract", &path, res);
            }
        }
    }
    for (path, meta) in finish_order(delayed) {
        let _ = s.set_meta_path(&path, true, &meta);
    }
    Ok(finish(s))
}

// ---------------------------------------------------------------- cp

/// `cp -a src/ dst`: the destination is treated as new, so every creation
/// is exclusive and any clash is an error that skips the subtree.
pub(super) fn cp(s: &mut Session, src: &[SrcEntry], target: &str) -> Terminated {
    let mut copied: HashMap<Ino, String> = HashMap::new();
    for e in src {
        cp_entry(s, e, &join(target, &e.name), &mut copied);
    }
    finish(s)
}

fn cp_entry(s: &mut Session, e: &SrcEntry, dst: &str, copied: &mut HashMap<Ino, String>) {
    let res = match e.kind {
        NodeKind::Dir => s.make_node(dst, NewNode::Dir, &e.meta),
        NodeKind::File => match copied.get(&e.ino) {
            Some(first) => {
                let first = first.clone();
                s.link(&first, dst, CreateOptions::exclusive())
            }
            None => s.write_file(dst, &e.content, &e.meta, CreateOptions::exclusive()),
        },
        _ => s.make_node(dst, e.new_node(), &e.meta),
    };
    if ok_or_error(s, "copy", dst, res).is_none() {
        return;
    }
    if e.kind == NodeKind::File && e.nlink > 1 {
        copied.entry(e.ino).or_insert_with(|| dst.to_string());
    }
    if e.kind == NodeKind::Dir {
        for c in &e.children {
            cp_entry(s, c, &join(dst, &c.name), copied);
        }
        let _ = s.set_meta_path(dst, false, &e.meta);
    }
}

// ---------------------------------------------------------------- cp*

/// `cp -a src/* dst/`: each top-level entry is copied into an existing
/// directory, so existing names are overwritten in place.
pub(super) fn cp_star(s: &mut Session, src: &[SrcEntry], target: &str) -> Terminated {
    let mut copied: HashMap<Ino, String> = HashMap::new();
    for e in src {
        cp_star_entry(s, e, &join(target, &e.name), &mut copied);
    }
    finish(s)
}

fn cp_star_entry(s: &mut Session, e: &SrcEntry, dst: &str, copied: &mut HashMap<Ino, String>) {
    let existing = s.lstat(dst);
    let existing_kind = existing.and_then(|i| s.kind_of(i));
    match e.kind {
        NodeKind::Dir => {
            match existing_kind {
                None => {
                    let res = s.make_node(dst, NewNode::Dir, &e.meta);
                    if ok_or_error(s, "copy", dst, res).is_none() {
                        return;
                    }
                }
                Some(NodeKind::Dir) => s.event("merge", dst, EventResult::Ok),
                Some(_) => {
                    s.event(
                        "copy",
                        dst,
                        EventResult::Error {
                            message: "cannot overwrite non-directory with directory".into(),
                        },
                    );
                    return;
                }
            }
            for c in &e.children {
                cp_star_entry(s, c, &join(dst, &c.name), copied);
            }
            let _ = s.set_meta_path(dst, false, &e.meta);
        }
        NodeKind::File => {
            if let Some(first) = copied.get(&e.ino).cloned() {
                if existing.is_some() {
                    if existing_kind == Some(NodeKind::Dir) {
                        s.event(
                            "copy",
                            dst,
                            EventResult::Error {
                                message: "cannot overwrite directory with non-directory".into(),
                            },
                        );
                        return;
                    }
                    let _ = s.unlink(dst);
                }
                let res = s.link(&first, dst, CreateOptions::exclusive());
                ok_or_error(s, "link", dst, res);
                return;
            }
            let res = match (existing, existing_kind) {
                (None, _) => s.write_file(dst, &e.content, &e.meta, CreateOptions::exclusive()),
                (Some(_), Some(NodeKind::Dir)) => Err(VfsError::IsADirectory(dst.to_string())),
                (Some(ino), _) if s.nlink_of(ino) > 1 => s
                    .unlink(dst)
                    .and_then(|_| s.write_file(dst, &e.content, &e.meta, CreateOptions::exclusive())),
                // Opened for writing without O_NOFOLLOW: a symlink is followed.
                (Some(_), _) => s.write_file(dst, &e.content, &e.meta, CreateOptions::default()),
            };
            if let Some(ino) = ok_or_error(s, "copy", dst, res) {
                let _ = s.set_meta_fd(ino, &e.meta);
                if e.nlink > 1 {
                    copied.insert(e.ino, dst.to_string());
                }
            }
        }
        _ => {
            let res = match existing_kind {
                Some(NodeKind::Dir) => Err(VfsError::IsADirectory(dst.to_string())),
                Some(_) => s.unlink(dst).and_then(|_| s.make_node(dst, e.new_node(), &e.meta)),
                None => s.make_node(dst, e.new_node(), &e.meta),
            };
            ok_or_error(s, "copy", dst, res);
        }
    }
}

// ---------------------------------------------------------------- rsync

fn temp_name(dst: &str) -> String {
    let (parent, name) = split_parent(dst).expect("destination paths have parents");
    join(&parent, &format!(".{name}.tmp"))
}

/// Transfers one regular file: written beside the destination and renamed
/// over it, except that special files receive the data in place.
fn rsync_file(s: &mut Session, e: &SrcEntry, dst: &str) {
    let existing = s.lstat(dst);
    let res = match existing.and_then(|i| s.kind_of(i)) {
        Some(NodeKind::Dir) => Err(VfsError::IsADirectory(dst.to_string())),
        Some(NodeKind::Pipe | NodeKind::Device) => s
            .write_file(dst, &e.content, &e.meta, CreateOptions::default())
            .inspect(|&ino| {
                let _ = s.set_meta_fd(ino, &e.meta);
            }),
        _ => {
            let tmp = temp_name(dst);
            s.write_file(&tmp, &e.content, &e.meta, CreateOptions::exclusive())
                .and_then(|ino| {
                    s.set_meta_fd(ino, &e.meta)?;
                    s.rename(&tmp, dst)
                })
        }
    };
    ok_or_error(s, "transfer", dst, res);
}

/// `rsync -aH src/ dst/`.
pub(super) fn rsync(s: &mut Session, src: &[SrcEntry], target: &str) -> Terminated {
    // Inodes reached by two or more paths inside the transfer.
    let mut by_ino: BTreeMap<Ino, Vec<&SrcEntry>> = BTreeMap::new();
    for e in flatten(src) {
        if e.kind == NodeKind::File && e.nlink > 1 {
            by_ino.entry(e.ino).or_default().push(e);
        }
    }
    by_ino.retain(|_, v| v.len() > 1);
    let grouped: HashMap<Ino, ()> = by_ino.keys().map(|&i| (i, ())).collect();

    let mut delayed: Vec<(String, Metadata)> = Vec::new();
    for e in src {
        rsync_entry(s, e, &join(target, &e.rel), &grouped, &mut delayed);
    }

    // Hardlink groups: the bytewise-greatest name carries the data, leaders
    // in sorted order, then every other name is linked in sorted order.
    let mut leaders: Vec<(&SrcEntry, Vec<&SrcEntry>)> = by_ino
        .into_values()
        .map(|mut members| {
            members.sort_by(|a, b| a.rel.as_bytes().cmp(b.rel.as_bytes()));
            let leader = members.pop().expect("groups have members");
            (leader, members)
        })
        .collect();
    leaders.sort_by(|a, b| a.0.rel.as_bytes().cmp(b.0.rel.as_bytes()));
    let mut followers: Vec<(&SrcEntry, &SrcEntry)> = Vec::new();
    for (leader, rest) in &leaders {
        rsync_file(s, leader, &join(target, &leader.rel));
        followers.extend(rest.iter().map(|f| (*f, *leader)));
    }
    followers.sort_by(|a, b| a.0.rel.as_bytes().cmp(b.0.rel.as_bytes()));
    for (f, leader) in followers {
        let dst = join(target, &f.rel);
        let res = s.link(&join(target, &leader.rel), &dst, CreateOptions::default());
        ok_or_error(s, "link", &dst, res);
    }

    for (path, meta) in finish_order(delayed) {
        let _ = s.set_meta_path(&path, true, &meta);
    }
    finish(s)
}

fn rsync_entry(
    s: &mut Session,
    e: &SrcEntry,
    dst: &str,
    grouped: &HashMap<Ino, ()>,
    delayed: &mut Vec<(String, Metadata)>,
) {
    match e.kind {
        NodeKind::Dir => {
            // Checked with stat, so a link to a directory counts as one.
            let existing = s.stat(dst);
            match existing.and_then(|i| s.kind_of(i)) {
                Some(NodeKind::Dir) => s.event("merge", dst, EventResult::Ok),
                Some(_) => {
                    let res = s.unlink(dst).and_then(|_| s.make_node(dst, NewNode::Dir, &e.meta));
                    if ok_or_error(s, "mkdir", dst, res).is_none() {
                        return;
                    }
                }
                None => {
                    let res = s.make_node(dst, NewNode::Dir, &e.meta);
                    if ok_or_error(s, "mkdir", dst, res).is_none() {
                        return;
                    }
                }
            }
            delayed.push((dst.to_string(), e.meta.clone()));
            for c in &e.children {
                rsync_entry(s, c, &join(dst, &c.name), grouped, delayed);
            }
        }
        NodeKind::File if grouped.contains_key(&e.ino) => {}
        NodeKind::File => rsync_file(s, e, dst),
        NodeKind::Symlink => {
            let existing = s.lstat(dst);
            let target = e.link_target.clone().unwrap_or_default();
            let res = match existing {
                Some(ino) if s.img.node(ino).and_then(|n| n.symlink_target()) == Some(target.as_str()) => {
                    Ok(ino)
                }
                Some(ino) if s.kind_of(ino) == Some(NodeKind::Dir) => Err(VfsError::IsADirectory(dst.to_string())),
                Some(_) => s.unlink(dst).and_then(|_| s.make_node(dst, e.new_node(), &e.meta)),
                None => s.make_node(dst, e.new_node(), &e.meta),
            };
            ok_or_error(s, "symlink", dst, res);
        }
        NodeKind::Pipe | NodeKind::Device => {
            let existing = s.lstat(dst);
            let res = match existing.and_then(|i| s.kind_of(i)) {
                Some(NodeKind::Dir) => Err(VfsError::IsADirectory(dst.to_string())),
                Some(_) => s.unlink(dst).and_then(|_| s.make_node(dst, e.new_node(), &e.meta)),
                None => s.make_node(dst, e.new_node(), &e.meta),
            };
            ok_or_error(s, "mknod", dst, res);
        }
    }
}

// ---------------------------------------------------------------- dropbox

const CONFLICT_SUFFIX: &str = " (Case Conflicts)";

fn conflict_name(name: &str, is_dir: bool, n: usize) -> String {
    let suffix = if n == 0 {
        CONFLICT_SUFFIX.to_string()
    } else {
        format!(" (Case Conflicts {n})")
    };
    match name.rfind('.') {
        Some(dot) if !is_dir && dot > 0 => format!("{}{suffix}{}", &name[..dot], &name[dot..]),
        _ => format!("{name}{suffix}"),
    }
}

/// A sync engine that keeps its own index of names: a case clash is
/// renamed before anything touches the disk.
pub(super) fn dropbox(s: &mut Session, src: &[SrcEntry], target: &str) -> Terminated {
    for e in src {
        dropbox_entry(s, e, target);
    }
    finish(s)
}

fn dropbox_entry(s: &mut Session, e: &SrcEntry, parent: &str) {
    let wanted = join(parent, &e.name);
    if matches!(e.kind, NodeKind::Pipe | NodeKind::Device) {
        s.event(
            "sync",
            &wanted,
            EventResult::Skipped {
                reason: format!("{} not synced", e.kind.as_str()),
            },
        );
        return;
    }
    let mut name = e.name.clone();
    let parent_ino = s.img.dir_ino(parent).ok();
    let taken = |s: &Session, n: &str| parent_ino.is_some_and(|d| matches!(s.img.find_entry(d, n), Ok(Some(_))));
    if taken(s, &name) {
        let mut n = 0;
        name = conflict_name(&e.name, e.kind == NodeKind::Dir, n);
        while taken(s, &name) {
            n += 1;
            name = conflict_name(&e.name, e.kind == NodeKind::Dir, n);
        }
        s.event("sync", &wanted, EventResult::Renamed { to: join(parent, &name) });
    }
    let dst = join(parent, &name);
    let res = match e.kind {
        NodeKind::Dir => s.make_node(&dst, NewNode::Dir, &e.meta),
        NodeKind::File => {
            if e.nlink > 1 {
                s.event(
                    "sync",
                    &wanted,
                    EventResult::Degraded {
                        reason: "hardlink synced as a regular file".into(),
                    },
                );
            }
            s.write_file(&dst, &e.content, &e.meta, CreateOptions::exclusive())
        }
        _ => s.make_node(&dst, e.new_node(), &e.meta),
    };
    if ok_or_error(s, "sync", &dst, res).is_some() && e.kind == NodeKind::Dir {
        for c in &e.children {
            dropbox_entry(s, c, &dst);
        }
    }
}
