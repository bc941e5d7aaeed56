//! Path-level comparison of two images.

use std::collections::BTreeMap;

use super::{FsImage, Ino, Metadata, NodeData, NodeKind, Result, VfsError};
use crate::fold::ProfileId;

/// Observable state of one path.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EntryState {
    pub ino: Ino,
    pub kind: NodeKind,
    /// File content, symlink target, or pipe/device capture.
    pub payload: Vec<u8>,
    pub device_numbers: Option<(u32, u32)>,
    pub fold: Option<ProfileId>,
    pub meta: Metadata,
    pub nlink: u32,
}

impl EntryState {
    /// Names of the attributes that differ between two states.
    pub fn differing_fields(&self, other: &EntryState) -> Vec<&'static str> {
        let mut out = Vec::new();
        let checks: [(&'static str, bool); 10] = [
            ("inode", self.ino != other.ino),
            ("kind", self.kind != other.kind),
            ("content", self.payload != other.payload),
            ("device", self.device_numbers != other.device_numbers),
            ("fold", self.fold != other.fold),
            ("mode", self.meta.mode != other.meta.mode),
            ("owner", (self.meta.uid, self.meta.gid) != (other.meta.uid, other.meta.gid)),
            ("mtime", self.meta.mtime != other.meta.mtime),
            ("xattrs", self.meta.xattrs != other.meta.xattrs),
            ("nlink", self.nlink != other.nlink),
        ];
        for (name, differs) in checks {
            if differs {
                out.push(name);
            }
        }
        out
    }
}

/// Every path below a comparison root, keyed relative to that root.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Listing {
    pub entries: BTreeMap<String, EntryState>,
}

impl Listing {
    /// Lists the subtree at `root` (resolved following symlinks).
    pub fn capture(image: &FsImage, root: &str) -> Result<Listing> {
        let start = image.dir_ino(root)?;
        let base_len = if start == image.root() {
            0
        } else {
            image.path_of_dir(start)?.len()
        };
        let mut entries = BTreeMap::new();
        for (path, ino) in image.walk(start) {
            let node = image.node(ino).ok_or(VfsError::NoSuchInode(ino))?;
            let rel = path[base_len..].trim_start_matches('/').to_string();
            let (device_numbers, fold) = match &node.data {
                NodeData::Device { major, minor, .. } => (Some((*major, *minor)), None),
                NodeData::Dir(d) => (None, d.fold.map(|p| p.id())),
                _ => (None, None),
            };
            entries.insert(
                rel,
                EntryState {
                    ino,
                    kind: node.kind(),
                    payload: node.payload().to_vec(),
                    device_numbers,
                    fold,
                    meta: node.meta.clone(),
                    nlink: node.nlink,
                },
            );
        }
        Ok(Listing { entries })
    }

    pub fn get(&self, path: &str) -> Option<&EntryState> {
        self.entries.get(path)
    }

    pub fn apply(&mut self, delta: &Delta) {
        for (path, _) in &delta.removed {
            self.entries.remove(path);
        }
        for (path, state) in &delta.added {
            self.entries.insert(path.clone(), state.clone());
        }
        for change in &delta.changed {
            self.entries.insert(change.path.clone(), change.after.clone());
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Change {
    pub path: String,
    pub before: EntryState,
    pub after: EntryState,
    pub fields: Vec<&'static str>,
}

impl Change {
    /// The path now names a different node.
    pub fn retargeted(&self) -> bool {
        self.before.ino != self.after.ino
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Delta {
    pub added: Vec<(String, EntryState)>,
    pub removed: Vec<(String, EntryState)>,
    pub changed: Vec<Change>,
}

impl Delta {
    pub fn is_empty(&self) -> bool {
        self.added.is_empty() && self.removed.is_empty() && self.changed.is_empty()
    }

    pub fn change(&self, path: &str) -> Option<&Change> {
        self.changed.iter().find(|c| c.path == path)
    }
}

/// Differences between the subtrees at `root` in two images.
pub fn snapshot_diff(before: &FsImage, after: &FsImage, root: &str) -> Result<Delta> {
    let a = Listing::capture(before, root)?;
    let b = Listing::capture(after, root)?;
    Ok(diff_listings(&a, &b))
}

pub fn diff_listings(a: &Listing, b: &Listing) -> Delta {
    let mut delta = Delta::default();
    for (path, old) in &a.entries {
        match b.entries.get(path) {
            None => delta.removed.push((path.clone(), old.clone())),
            Some(new) => {
                let fields = old.differing_fields(new);
                if !fields.is_empty() {
                    delta.changed.push(Change {
                        path: path.clone(),
                        before: old.clone(),
                        after: new.clone(),
                        fields,
                    });
                }
            }
        }
    }
    for (path, new) in &b.entries {
        if !a.entries.contains_key(path) {
            delta.added.push((path.clone(), new.clone()));
        }
    }
    delta
}
