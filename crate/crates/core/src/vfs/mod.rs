//! In-memory file-system image with per-directory case folding.
//!
//! Directories may carry a [`FoldProfile`]; lookups in such a directory match
//! names by canonical key while entries keep the spelling they were created
//! with. Everything else (hardlinks, symlinks, pipes, devices, metadata)
//! follows POSIX semantics closely enough to replay what copy utilities do.

mod diff;
mod dump;

pub use diff::{diff_listings, snapshot_diff, Change, Delta, EntryState, Listing};
pub use dump::escape_path;

use std::collections::{BTreeMap, VecDeque};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fold::{validate_name, CanonicalKey, FoldError, FoldProfile};

pub type Ino = u64;

/// Maximum number of symlinks followed while resolving one path.
pub const SYMLINK_LIMIT: usize = 40;

pub const ROOT_INO: Ino = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum NodeKind {
    File,
    Dir,
    Symlink,
    Pipe,
    Device,
}

impl NodeKind {
    pub fn as_str(self) -> &'static str {
        match self {
            NodeKind::File => "file",
            NodeKind::Dir => "dir",
            NodeKind::Symlink => "symlink",
            NodeKind::Pipe => "pipe",
            NodeKind::Device => "device",
        }
    }

    pub fn parse(s: &str) -> Option<NodeKind> {
        Some(match s {
            "file" => NodeKind::File,
            "dir" => NodeKind::Dir,
            "symlink" => NodeKind::Symlink,
            "pipe" => NodeKind::Pipe,
            "device" => NodeKind::Device,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Metadata {
    /// Permission bits only, `0..=0o777`.
    pub mode: u32,
    pub uid: u32,
    pub gid: u32,
    pub mtime: i64,
    pub xattrs: BTreeMap<String, Vec<u8>>,
}

impl Default for Metadata {
    fn default() -> Self {
        Metadata::new(0o644)
    }
}

impl Metadata {
    pub fn new(mode: u32) -> Self {
        Metadata {
            mode,
            uid: 1000,
            gid: 1000,
            mtime: 0,
            xattrs: BTreeMap::new(),
        }
    }

    pub fn with_owner(mut self, uid: u32, gid: u32) -> Self {
        self.uid = uid;
        self.gid = gid;
        self
    }

    pub fn with_mtime(mut self, mtime: i64) -> Self {
        self.mtime = mtime;
        self
    }

    pub fn with_xattr(mut self, name: &str, value: &[u8]) -> Self {
        self.xattrs.insert(name.to_string(), value.to_vec());
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DirData {
    /// Raw names in insertion order.
    pub entries: IndexMap<String, Ino>,
    pub fold: Option<FoldProfile>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum NodeData {
    File(Vec<u8>),
    Dir(DirData),
    Symlink(String),
    /// Bytes written through the pipe are kept for inspection.
    Pipe { capture: Vec<u8> },
    Device { major: u32, minor: u32, capture: Vec<u8> },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Node {
    pub data: NodeData,
    pub meta: Metadata,
    /// Directory entries referencing this node; always 1 for directories.
    pub nlink: u32,
}

impl Node {
    pub fn kind(&self) -> NodeKind {
        match self.data {
            NodeData::File(_) => NodeKind::File,
            NodeData::Dir(_) => NodeKind::Dir,
            NodeData::Symlink(_) => NodeKind::Symlink,
            NodeData::Pipe { .. } => NodeKind::Pipe,
            NodeData::Device { .. } => NodeKind::Device,
        }
    }

    pub fn is_dir(&self) -> bool {
        matches!(self.data, NodeData::Dir(_))
    }

    pub fn as_dir(&self) -> Option<&DirData> {
        match &self.data {
            NodeData::Dir(d) => Some(d),
            _ => None,
        }
    }

    /// File content, symlink target, or the capture buffer of a pipe or device.
    pub fn payload(&self) -> &[u8] {
        match &self.data {
            NodeData::File(b) => b,
            NodeData::Symlink(t) => t.as_bytes(),
            NodeData::Pipe { capture } | NodeData::Device { capture, .. } => capture,
            NodeData::Dir(_) => &[],
        }
    }

    pub fn symlink_target(&self) -> Option<&str> {
        match &self.data {
            NodeData::Symlink(t) => Some(t),
            _ => None,
        }
    }
}

/// Node to create.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum NewNode {
    File(Vec<u8>),
    Dir,
    Symlink(String),
    Pipe,
    Device { major: u32, minor: u32 },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CreateOptions {
    /// Fail if any fold-equal entry exists.
    pub exclusive: bool,
    /// Fail if a fold-equal entry exists under a different spelling.
    pub exclusive_name: bool,
    /// Do not follow a symlink occupying the final component.
    pub nofollow: bool,
}

impl CreateOptions {
    pub fn exclusive() -> Self {
        CreateOptions {
            exclusive: true,
            ..Default::default()
        }
    }

    pub fn exclusive_name() -> Self {
        CreateOptions {
            exclusive_name: true,
            ..Default::default()
        }
    }

    pub fn nofollow() -> Self {
        CreateOptions {
            nofollow: true,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum VfsError {
    #[error("{0}: no such file or directory")]
    NotFound(String),
    #[error("{0}: parent directory missing")]
    ParentMissing(String),
    #[error("{0}: not a directory")]
    NotADirectory(String),
    #[error("{0}: is a directory")]
    IsADirectory(String),
    #[error("{0}: already exists")]
    Exists(String),
    #[error("{requested:?} collides with existing entry {existing:?}")]
    CollidesDifferingName { existing: String, requested: String },
    #[error("{0}: too many levels of symbolic links")]
    LoopLimitExceeded(String),
    #[error("{0}: directory not empty")]
    NotEmpty(String),
    #[error("{0}: final component is a symbolic link")]
    SymlinkNotFollowed(String),
    #[error("invalid entry name: {0}")]
    InvalidName(#[from] FoldError),
    #[error("{0:?}: reserved entry name")]
    ReservedName(String),
    #[error("invalid mode {0:o}")]
    InvalidMode(u32),
    #[error("cannot move {0} into itself")]
    InvalidRename(String),
    #[error("inode {0} does not exist")]
    NoSuchInode(Ino),
}

pub type Result<T> = std::result::Result<T, VfsError>;

/// A whole file-system namespace rooted at inode [`ROOT_INO`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FsImage {
    nodes: BTreeMap<Ino, Node>,
    root: Ino,
    next_ino: Ino,
    device: String,
}

impl Default for FsImage {
    fn default() -> Self {
        FsImage::new()
    }
}

/// Joins an absolute parent path and a name.
pub fn join(parent: &str, name: &str) -> String {
    if parent.ends_with('/') {
        format!("{parent}{name}")
    } else {
        format!("{parent}/{name}")
    }
}

/// Splits `path` into parent and final component. `None` for the root.
pub fn split_parent(path: &str) -> Option<(String, String)> {
    let trimmed = path.trim_end_matches('/');
    let (parent, name) = trimmed.rsplit_once('/')?;
    if name.is_empty() {
        return None;
    }
    let parent = if parent.is_empty() { "/" } else { parent };
    Some((parent.to_string(), name.to_string()))
}

fn components(path: &str) -> impl Iterator<Item = &str> {
    path.split('/').filter(|c| !c.is_empty())
}

fn check_entry_name(name: &str) -> Result<()> {
    validate_name(name)?;
    if name == "." || name == ".." {
        return Err(VfsError::ReservedName(name.to_string()));
    }
    Ok(())
}

impl FsImage {
    pub fn new() -> Self {
        FsImage::with_device("00:01")
    }

    pub fn with_device(device: &str) -> Self {
        let mut nodes = BTreeMap::new();
        nodes.insert(
            ROOT_INO,
            Node {
                data: NodeData::Dir(DirData {
                    entries: IndexMap::new(),
                    fold: None,
                }),
                meta: Metadata::new(0o755),
                nlink: 1,
            },
        );
        FsImage {
            nodes,
            root: ROOT_INO,
            next_ino: ROOT_INO + 1,
            device: device.to_string(),
        }
    }

    pub fn root(&self) -> Ino {
        self.root
    }

    pub fn device(&self) -> &str {
        &self.device
    }

    pub fn next_ino(&self) -> Ino {
        self.next_ino
    }

    pub fn node(&self, ino: Ino) -> Option<&Node> {
        self.nodes.get(&ino)
    }

    pub fn nodes(&self) -> impl Iterator<Item = (Ino, &Node)> {
        self.nodes.iter().map(|(i, n)| (*i, n))
    }

    fn node_ref(&self, ino: Ino) -> Result<&Node> {
        self.nodes.get(&ino).ok_or(VfsError::NoSuchInode(ino))
    }

    fn node_mut(&mut self, ino: Ino) -> Result<&mut Node> {
        self.nodes.get_mut(&ino).ok_or(VfsError::NoSuchInode(ino))
    }

    fn dir(&self, ino: Ino) -> Result<&DirData> {
        self.node_ref(ino)?
            .as_dir()
            .ok_or_else(|| VfsError::NotADirectory(format!("inode {ino}")))
    }

    fn dir_mut(&mut self, ino: Ino) -> Result<&mut DirData> {
        match &mut self.node_mut(ino)?.data {
            NodeData::Dir(d) => Ok(d),
            _ => Err(VfsError::NotADirectory(format!("inode {ino}"))),
        }
    }

    fn alloc(&mut self, data: NodeData, meta: Metadata) -> Result<Ino> {
        if meta.mode > 0o777 {
            return Err(VfsError::InvalidMode(meta.mode));
        }
        let ino = self.next_ino;
        self.next_ino += 1;
        self.nodes.insert(
            ino,
            Node {
                data,
                meta,
                nlink: 0,
            },
        );
        Ok(ino)
    }

    /// Finds the entry of `dir` matching `name`: bytewise in plain
    /// directories, by canonical key in fold-flagged ones. Returns the stored
    /// raw name and inode.
    pub fn find_entry(&self, dir: Ino, name: &str) -> Result<Option<(String, Ino)>> {
        let d = self.dir(dir)?;
        if let Some(&ino) = d.entries.get(name) {
            return Ok(Some((name.to_string(), ino)));
        }
        let Some(profile) = d.fold else {
            return Ok(None);
        };
        let Ok(key) = profile.fold_name(name) else {
            return Ok(None);
        };
        Ok(d
            .entries
            .iter()
            .find(|(raw, _)| profile.fold_name(raw).as_ref() == Ok(&key))
            .map(|(raw, &ino)| (raw.clone(), ino)))
    }

    /// Canonical key of `name` in `dir`, if the directory folds.
    pub fn key_in(&self, dir: Ino, name: &str) -> Result<Option<CanonicalKey>> {
        match self.dir(dir)?.fold {
            Some(p) => Ok(Some(p.fold_name(name)?)),
            None => Ok(None),
        }
    }

    /// Resolves `path` from the root. Intermediate symlinks are always
    /// followed; the final one only when `follow_final` is set. `Ok(None)`
    /// when some component is missing.
    pub fn resolve(&self, path: &str, follow_final: bool) -> Result<Option<Ino>> {
        let mut queue: VecDeque<String> = components(path).map(str::to_string).collect();
        let mut stack: Vec<Ino> = vec![self.root];
        let mut followed = 0usize;
        while let Some(comp) = queue.pop_front() {
            let cur = *stack.last().expect("stack holds the root");
            match comp.as_str() {
                "." => continue,
                ".." => {
                    if stack.len() > 1 {
                        stack.pop();
                    }
                    continue;
                }
                _ => {}
            }
            let node = self.node_ref(cur)?;
            if !node.is_dir() {
                return Err(VfsError::NotADirectory(path.to_string()));
            }
            let Some((_, child)) = self.find_entry(cur, &comp)? else {
                return Ok(None);
            };
            let child_node = self.node_ref(child)?;
            let last = queue.is_empty();
            if let NodeData::Symlink(target) = &child_node.data {
                if !last || follow_final {
                    followed += 1;
                    if followed > SYMLINK_LIMIT {
                        return Err(VfsError::LoopLimitExceeded(path.to_string()));
                    }
                    if target.starts_with('/') {
                        stack.truncate(1);
                    }
                    for c in components(target).collect::<Vec<_>>().into_iter().rev() {
                        queue.push_front(c.to_string());
                    }
                    continue;
                }
            } else if !last && !child_node.is_dir() {
                return Err(VfsError::NotADirectory(path.to_string()));
            }
            stack.push(child);
        }
        Ok(Some(*stack.last().expect("stack holds the root")))
    }

    /// Resolves without following a final symlink.
    pub fn lookup(&self, path: &str) -> Result<Option<Ino>> {
        self.resolve(path, false)
    }

    /// Resolves following every symlink.
    pub fn lookup_follow(&self, path: &str) -> Result<Option<Ino>> {
        self.resolve(path, true)
    }

    pub fn exists(&self, path: &str) -> bool {
        matches!(self.lookup(path), Ok(Some(_)))
    }

    /// Resolves `path` to a directory inode, following symlinks.
    pub fn dir_ino(&self, path: &str) -> Result<Ino> {
        match self.resolve(path, true)? {
            None => Err(VfsError::ParentMissing(path.to_string())),
            Some(ino) if self.node_ref(ino)?.is_dir() => Ok(ino),
            Some(_) => Err(VfsError::NotADirectory(path.to_string())),
        }
    }

    fn insert_entry(&mut self, dir: Ino, name: &str, ino: Ino) -> Result<()> {
        self.dir_mut(dir)?.entries.insert(name.to_string(), ino);
        self.node_mut(ino)?.nlink += 1;
        Ok(())
    }

    /// Drops one reference to `ino`, freeing it (and, for directories, its
    /// subtree) when unreferenced.
    fn release(&mut self, ino: Ino) {
        let Some(node) = self.nodes.get_mut(&ino) else {
            return;
        };
        node.nlink = node.nlink.saturating_sub(1);
        if node.nlink == 0 {
            if let Some(Node {
                data: NodeData::Dir(d),
                ..
            }) = self.nodes.remove(&ino)
            {
                for (_, child) in d.entries {
                    self.release(child);
                }
            }
        }
    }

    fn new_node_data(spec: NewNode) -> NodeData {
        match spec {
            NewNode::File(b) => NodeData::File(b),
            NewNode::Dir => NodeData::Dir(DirData {
                entries: IndexMap::new(),
                fold: None,
            }),
            NewNode::Symlink(t) => NodeData::Symlink(t),
            NewNode::Pipe => NodeData::Pipe {
                capture: Vec::new(),
            },
            NewNode::Device { major, minor } => NodeData::Device {
                major,
                minor,
                capture: Vec::new(),
            },
        }
    }

    /// Creates `name` in `dir`.
    ///
    /// Regular files use open-with-create semantics: without options an
    /// existing fold-equal entry is opened (following a final symlink unless
    /// `nofollow`) and its content replaced. All other kinds fail with
    /// `Exists` when a fold-equal entry is present.
    pub fn create_at(
        &mut self,
        dir: Ino,
        name: &str,
        spec: NewNode,
        meta: Metadata,
        opts: CreateOptions,
    ) -> Result<Ino> {
        check_entry_name(name)?;
        if meta.mode > 0o777 {
            return Err(VfsError::InvalidMode(meta.mode));
        }
        self.dir(dir)?;
        if let Some((existing, ino)) = self.find_entry(dir, name)? {
            if opts.exclusive {
                return Err(VfsError::Exists(existing));
            }
            if opts.exclusive_name && existing != name {
                return Err(VfsError::CollidesDifferingName {
                    existing,
                    requested: name.to_string(),
                });
            }
            let NewNode::File(content) = spec else {
                return Err(VfsError::Exists(existing));
            };
            return self.open_existing(dir, &existing, ino, content, meta, opts);
        }
        let mut data = Self::new_node_data(spec);
        if let NodeData::Dir(d) = &mut data {
            // New subdirectories inherit the parent's folding.
            d.fold = self.dir(dir)?.fold;
        }
        let ino = self.alloc(data, meta)?;
        self.insert_entry(dir, name, ino)?;
        Ok(ino)
    }

    fn open_existing(
        &mut self,
        dir: Ino,
        name: &str,
        ino: Ino,
        content: Vec<u8>,
        meta: Metadata,
        opts: CreateOptions,
    ) -> Result<Ino> {
        match &self.node_ref(ino)?.data {
            NodeData::Dir(_) => Err(VfsError::IsADirectory(name.to_string())),
            NodeData::Symlink(target) => {
                if opts.nofollow {
                    return Err(VfsError::SymlinkNotFollowed(name.to_string()));
                }
                let base = self.path_of_dir(dir)?;
                let target_path = if target.starts_with('/') {
                    target.clone()
                } else {
                    join(&base, target)
                };
                match self.resolve(&target_path, true)? {
                    Some(t) if self.node_ref(t)?.is_dir() => Err(VfsError::IsADirectory(target_path)),
                    Some(t) => {
                        self.write(t, &content)?;
                        Ok(t)
                    }
                    None => {
                        let (parent, leaf) = split_parent(&target_path)
                            .ok_or_else(|| VfsError::NotFound(target_path.clone()))?;
                        let pdir = self.dir_ino(&parent)?;
                        self.create_at(pdir, &leaf, NewNode::File(content), meta, opts)
                    }
                }
            }
            _ => {
                self.write(ino, &content)?;
                Ok(ino)
            }
        }
    }

    /// Absolute path of a directory inode (directories have one parent).
    pub fn path_of_dir(&self, dir: Ino) -> Result<String> {
        if dir == self.root {
            return Ok("/".to_string());
        }
        self.paths_of(dir)
            .into_iter()
            .next()
            .ok_or(VfsError::NoSuchInode(dir))
    }

    pub fn create(
        &mut self,
        parent: &str,
        name: &str,
        spec: NewNode,
        meta: Metadata,
        opts: CreateOptions,
    ) -> Result<Ino> {
        let dir = self.dir_ino(parent)?;
        self.create_at(dir, name, spec, meta, opts)
    }

    /// Writes a regular file at `path` (open-with-create, no options).
    pub fn write_file(&mut self, path: &str, content: &[u8], meta: Metadata) -> Result<Ino> {
        let (parent, name) = split_parent(path).ok_or_else(|| VfsError::IsADirectory(path.into()))?;
        self.create(&parent, &name, NewNode::File(content.to_vec()), meta, CreateOptions::default())
    }

    pub fn mkdir_at(&mut self, dir: Ino, name: &str, meta: Metadata) -> Result<Ino> {
        self.create_at(dir, name, NewNode::Dir, meta, CreateOptions::exclusive())
    }

    pub fn mkdir(&mut self, path: &str, meta: Metadata) -> Result<Ino> {
        let (parent, name) = split_parent(path).ok_or_else(|| VfsError::Exists("/".into()))?;
        let dir = self.dir_ino(&parent)?;
        self.mkdir_at(dir, &name, meta)
    }

    /// Creates every missing directory along `path`.
    pub fn mkdir_p(&mut self, path: &str, meta: Metadata) -> Result<Ino> {
        let mut cur = self.root;
        let mut so_far = String::from("/");
        for comp in components(path) {
            so_far = join(&so_far, comp);
            cur = match self.resolve(&so_far, true)? {
                Some(ino) if self.node_ref(ino)?.is_dir() => ino,
                Some(_) => return Err(VfsError::NotADirectory(so_far)),
                None => self.mkdir_at(cur, comp, meta.clone())?,
            };
        }
        Ok(cur)
    }

    pub fn symlink_at(&mut self, dir: Ino, name: &str, target: &str, meta: Metadata) -> Result<Ino> {
        self.create_at(
            dir,
            name,
            NewNode::Symlink(target.to_string()),
            meta,
            CreateOptions::exclusive(),
        )
    }

    pub fn symlink(&mut self, path: &str, target: &str, meta: Metadata) -> Result<Ino> {
        let (parent, name) = split_parent(path).ok_or_else(|| VfsError::Exists("/".into()))?;
        let dir = self.dir_ino(&parent)?;
        self.symlink_at(dir, &name, target, meta)
    }

    pub fn mkfifo_at(&mut self, dir: Ino, name: &str, meta: Metadata) -> Result<Ino> {
        self.create_at(dir, name, NewNode::Pipe, meta, CreateOptions::exclusive())
    }

    pub fn mknod_at(&mut self, dir: Ino, name: &str, major: u32, minor: u32, meta: Metadata) -> Result<Ino> {
        self.create_at(
            dir,
            name,
            NewNode::Device { major, minor },
            meta,
            CreateOptions::exclusive(),
        )
    }

    /// Adds `name` in `dir` as another link to `ino`.
    ///
    /// Without `exclusive`, a fold-equal entry of a different inode is
    /// re-pointed to `ino` and keeps its stored spelling.
    pub fn link_at(&mut self, ino: Ino, dir: Ino, name: &str, opts: CreateOptions) -> Result<Ino> {
        check_entry_name(name)?;
        if self.node_ref(ino)?.is_dir() {
            return Err(VfsError::IsADirectory(format!("inode {ino}")));
        }
        self.dir(dir)?;
        match self.find_entry(dir, name)? {
            None => {
                self.insert_entry(dir, name, ino)?;
            }
            Some((existing, old)) => {
                if opts.exclusive || old == ino || self.node_ref(old)?.is_dir() {
                    return Err(VfsError::Exists(existing));
                }
                if opts.exclusive_name && existing != name {
                    return Err(VfsError::CollidesDifferingName {
                        existing,
                        requested: name.to_string(),
                    });
                }
                self.dir_mut(dir)?.entries.insert(existing, ino);
                self.node_mut(ino)?.nlink += 1;
                self.release(old);
            }
        }
        Ok(ino)
    }

    pub fn link(&mut self, existing: &str, new_path: &str, opts: CreateOptions) -> Result<Ino> {
        let ino = self
            .lookup(existing)?
            .ok_or_else(|| VfsError::NotFound(existing.to_string()))?;
        let (parent, name) = split_parent(new_path).ok_or_else(|| VfsError::Exists("/".into()))?;
        let dir = self.dir_ino(&parent)?;
        self.link_at(ino, dir, &name, opts)
    }

    /// Removes a non-directory entry.
    pub fn unlink_at(&mut self, dir: Ino, name: &str) -> Result<Ino> {
        let (raw, ino) = self
            .find_entry(dir, name)?
            .ok_or_else(|| VfsError::NotFound(name.to_string()))?;
        if self.node_ref(ino)?.is_dir() {
            return Err(VfsError::IsADirectory(raw));
        }
        self.dir_mut(dir)?.entries.shift_remove(&raw);
        self.release(ino);
        Ok(ino)
    }

    pub fn unlink(&mut self, path: &str) -> Result<Ino> {
        let (parent, name) = split_parent(path).ok_or_else(|| VfsError::IsADirectory("/".into()))?;
        let dir = self.dir_ino(&parent)?;
        self.unlink_at(dir, &name)
    }

    /// Removes an empty directory.
    pub fn rmdir_at(&mut self, dir: Ino, name: &str) -> Result<Ino> {
        let (raw, ino) = self
            .find_entry(dir, name)?
            .ok_or_else(|| VfsError::NotFound(name.to_string()))?;
        let d = self
            .node_ref(ino)?
            .as_dir()
            .ok_or_else(|| VfsError::NotADirectory(raw.clone()))?;
        if !d.entries.is_empty() {
            return Err(VfsError::NotEmpty(raw));
        }
        self.dir_mut(dir)?.entries.shift_remove(&raw);
        self.release(ino);
        Ok(ino)
    }

    /// Removes the entry at `path` and, for directories, everything below it.
    /// A final symlink is removed, not followed.
    pub fn remove_tree(&mut self, path: &str) -> Result<()> {
        let (parent, name) = split_parent(path).ok_or_else(|| VfsError::IsADirectory("/".into()))?;
        let dir = self.dir_ino(&parent)?;
        let (raw, ino) = self
            .find_entry(dir, &name)?
            .ok_or_else(|| VfsError::NotFound(path.to_string()))?;
        self.dir_mut(dir)?.entries.shift_remove(&raw);
        self.release(ino);
        Ok(())
    }

    fn is_ancestor(&self, ancestor: Ino, mut dir: Ino) -> Result<bool> {
        loop {
            if dir == ancestor {
                return Ok(true);
            }
            if dir == self.root {
                return Ok(false);
            }
            let path = self.path_of_dir(dir)?;
            let (parent, _) = split_parent(&path).expect("non-root has a parent");
            dir = self.dir_ino(&parent)?;
        }
    }

    /// Moves an entry. A fold-equal destination entry is replaced and keeps
    /// its stored spelling; renaming an entry onto itself rewrites its
    /// spelling in place.
    pub fn rename_at(&mut self, sdir: Ino, sname: &str, ddir: Ino, dname: &str) -> Result<Ino> {
        check_entry_name(dname)?;
        let (sraw, ino) = self
            .find_entry(sdir, sname)?
            .ok_or_else(|| VfsError::NotFound(sname.to_string()))?;
        self.dir(ddir)?;
        let src_is_dir = self.node_ref(ino)?.is_dir();
        if src_is_dir && self.is_ancestor(ino, ddir)? {
            return Err(VfsError::InvalidRename(sraw));
        }
        match self.find_entry(ddir, dname)? {
            Some((draw, dino)) if dino == ino && ddir == sdir => {
                if draw != dname {
                    let d = self.dir_mut(sdir)?;
                    let idx = d.entries.get_index_of(&draw).expect("entry present");
                    d.entries.shift_remove(&draw);
                    d.entries.shift_insert(idx, dname.to_string(), ino);
                }
            }
            Some((draw, dino)) if dino == ino => {
                // Two names of one hardlinked inode: drop the source name.
                let _ = draw;
                self.dir_mut(sdir)?.entries.shift_remove(&sraw);
                self.release(ino);
            }
            Some((draw, dino)) => {
                let dnode = self.node_ref(dino)?;
                match (src_is_dir, dnode.as_dir()) {
                    (false, Some(_)) => return Err(VfsError::IsADirectory(draw)),
                    (true, None) => return Err(VfsError::NotADirectory(draw)),
                    (true, Some(d)) if !d.entries.is_empty() => return Err(VfsError::NotEmpty(draw)),
                    _ => {}
                }
                self.dir_mut(sdir)?.entries.shift_remove(&sraw);
                self.dir_mut(ddir)?.entries.insert(draw, ino);
                self.release(dino);
            }
            None => {
                self.dir_mut(sdir)?.entries.shift_remove(&sraw);
                self.dir_mut(ddir)?.entries.insert(dname.to_string(), ino);
            }
        }
        Ok(ino)
    }

    pub fn rename(&mut self, from: &str, to: &str) -> Result<Ino> {
        let (sp, sn) = split_parent(from).ok_or_else(|| VfsError::InvalidRename("/".into()))?;
        let (dp, dn) = split_parent(to).ok_or_else(|| VfsError::InvalidRename("/".into()))?;
        let sdir = self.dir_ino(&sp)?;
        let ddir = self.dir_ino(&dp)?;
        self.rename_at(sdir, &sn, ddir, &dn)
    }

    /// Replaces file content, or appends to a pipe or device capture.
    pub fn write(&mut self, ino: Ino, bytes: &[u8]) -> Result<()> {
        match &mut self.node_mut(ino)?.data {
            NodeData::File(c) => *c = bytes.to_vec(),
            NodeData::Pipe { capture } | NodeData::Device { capture, .. } => {
                capture.extend_from_slice(bytes)
            }
            NodeData::Dir(_) => return Err(VfsError::IsADirectory(format!("inode {ino}"))),
            NodeData::Symlink(_) => return Err(VfsError::SymlinkNotFollowed(format!("inode {ino}"))),
        }
        Ok(())
    }

    pub fn read(&self, ino: Ino) -> Option<&[u8]> {
        self.nodes.get(&ino).map(Node::payload)
    }

    pub fn meta(&self, ino: Ino) -> Result<&Metadata> {
        Ok(&self.node_ref(ino)?.meta)
    }

    pub fn set_meta(&mut self, ino: Ino, meta: Metadata) -> Result<()> {
        if meta.mode > 0o777 {
            return Err(VfsError::InvalidMode(meta.mode));
        }
        self.node_mut(ino)?.meta = meta;
        Ok(())
    }

    /// Sets or clears case folding on an empty directory.
    pub fn set_fold(&mut self, dir: Ino, fold: Option<FoldProfile>) -> Result<()> {
        let d = self.dir_mut(dir)?;
        if !d.entries.is_empty() {
            return Err(VfsError::NotEmpty(format!("inode {dir}")));
        }
        d.fold = fold;
        Ok(())
    }

    /// Creates a directory with folding enabled.
    pub fn mkdir_folded(&mut self, path: &str, meta: Metadata, profile: FoldProfile) -> Result<Ino> {
        let ino = self.mkdir(path, meta)?;
        self.set_fold(ino, Some(profile))?;
        Ok(ino)
    }

    /// Raw entry names in insertion order.
    pub fn readdir(&self, dir: Ino) -> Result<Vec<String>> {
        Ok(self.dir(dir)?.entries.keys().cloned().collect())
    }

    pub fn entries(&self, dir: Ino) -> Result<Vec<(String, Ino)>> {
        Ok(self
            .dir(dir)?
            .entries
            .iter()
            .map(|(n, i)| (n.clone(), *i))
            .collect())
    }

    /// Every `(path, inode)` below `start` (exclusive) in pre-order, visiting
    /// children in insertion order. Symlinks are not followed.
    pub fn walk(&self, start: Ino) -> Vec<(String, Ino)> {
        let mut out = Vec::new();
        let base = if start == self.root {
            String::new()
        } else {
            self.path_of_dir(start).unwrap_or_default()
        };
        self.walk_into(start, &base, &mut out);
        out
    }

    fn walk_into(&self, dir: Ino, prefix: &str, out: &mut Vec<(String, Ino)>) {
        let Some(d) = self.nodes.get(&dir).and_then(Node::as_dir) else {
            return;
        };
        for (name, &ino) in &d.entries {
            let path = format!("{prefix}/{name}");
            out.push((path.clone(), ino));
            self.walk_into(ino, &path, out);
        }
    }

    /// Every absolute path naming `ino`, sorted bytewise.
    pub fn paths_of(&self, ino: Ino) -> Vec<String> {
        if ino == self.root {
            return vec!["/".to_string()];
        }
        let mut paths: Vec<String> = self
            .walk(self.root)
            .into_iter()
            .filter(|(_, i)| *i == ino)
            .map(|(p, _)| p)
            .collect();
        paths.sort();
        paths
    }

    /// Verifies fold-uniqueness, reference counts, and reachability.
    pub fn check_invariants(&self) -> std::result::Result<(), String> {
        let mut refs: BTreeMap<Ino, u32> = BTreeMap::new();
        for (&ino, node) in &self.nodes {
            if node.meta.mode > 0o777 {
                return Err(format!("inode {ino}: mode {:o} out of range", node.meta.mode));
            }
            let Some(d) = node.as_dir() else { continue };
            if let Some(p) = d.fold {
                let mut seen: BTreeMap<CanonicalKey, &str> = BTreeMap::new();
                for name in d.entries.keys() {
                    let key = p.fold_name(name).map_err(|e| e.to_string())?;
                    if let Some(other) = seen.insert(key, name) {
                        return Err(format!("inode {ino}: {other:?} and {name:?} fold equal"));
                    }
                }
            }
            for &child in d.entries.values() {
                if !self.nodes.contains_key(&child) {
                    return Err(format!("inode {ino}: dangling entry to {child}"));
                }
                *refs.entry(child).or_default() += 1;
            }
        }
        for (&ino, node) in &self.nodes {
            let want = if ino == self.root { 0 } else { refs.get(&ino).copied().unwrap_or(0) };
            let expected_nlink = if node.is_dir() { 1 } else { want };
            if node.is_dir() && ino != self.root && want != 1 {
                return Err(format!("directory {ino} referenced {want} times"));
            }
            if ino != self.root && want == 0 {
                return Err(format!("inode {ino} unreachable"));
            }
            if node.nlink != expected_nlink {
                return Err(format!("inode {ino}: nlink {} but {} references", node.nlink, want));
            }
        }
        let reachable = self.walk(self.root).len() + 1;
        let unique: std::collections::BTreeSet<Ino> =
            self.walk(self.root).into_iter().map(|(_, i)| i).collect();
        if unique.len() + 1 != self.nodes.len() {
            return Err(format!(
                "{} nodes but {} reachable ({} paths)",
                self.nodes.len(),
                unique.len() + 1,
                reachable
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests;
