//! Deterministic behavior models of copy and extraction utilities.
//!
//! Each model replays, on an in-memory image, the file-system calls its
//! utility issues when relocating a source tree into an existing target
//! directory. Every call goes through a [`Session`] that applies it to the
//! image and appends a normalized trace record, so a run yields both the
//! final image and a trace the tracer can check.

mod models;
mod scenarios;

pub use scenarios::{run_scenario, Assertion, ScenarioId, ScenarioOutcome};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tarfmt::TarError;
use crate::tracer::{OpClass, Outcome, TraceRecord};
use crate::vfs::{
    join, split_parent, CreateOptions, FsImage, Ino, Metadata, NewNode, NodeData, NodeKind, VfsError,
};

/// Bound on the directory-resolution loop that stands in for a hang.
pub const DEFAULT_STEP_LIMIT: usize = 10_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UtilityId {
    Tar,
    Zip,
    Cp,
    CpStar,
    Rsync,
    Dropbox,
}

impl UtilityId {
    pub const ALL: [UtilityId; 6] = [
        UtilityId::Tar,
        UtilityId::Zip,
        UtilityId::Cp,
        UtilityId::CpStar,
        UtilityId::Rsync,
        UtilityId::Dropbox,
    ];

    pub fn token(self) -> &'static str {
        match self {
            UtilityId::Tar => "tar",
            UtilityId::Zip => "zip",
            UtilityId::Cp => "cp",
            UtilityId::CpStar => "cp_star",
            UtilityId::Rsync => "rsync",
            UtilityId::Dropbox => "dropbox",
        }
    }

    /// Name of the process that performs the writes.
    pub fn program(self) -> &'static str {
        match self {
            UtilityId::Tar => "tar",
            UtilityId::Zip => "unzip",
            UtilityId::Cp | UtilityId::CpStar => "cp",
            UtilityId::Rsync => "rsync",
            UtilityId::Dropbox => "dropbox",
        }
    }
}

impl fmt::Display for UtilityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

impl FromStr for UtilityId {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self, ModelError> {
        match s {
            "cp*" | "cpstar" | "cp-star" => Ok(UtilityId::CpStar),
            _ => UtilityId::ALL
                .into_iter()
                .find(|u| u.token() == s)
                .ok_or_else(|| ModelError::UnknownUtility(s.to_string())),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UtilityModel {
    pub id: UtilityId,
    pub flags: Vec<String>,
    pub step_limit: usize,
}

impl UtilityModel {
    /// The model with the fixed flag set of its reference invocation.
    pub fn new(id: UtilityId) -> Self {
        let flags: &[&str] = match id {
            UtilityId::Tar => &["-cf", "-xf"],
            UtilityId::Zip => &["-r", "--symlinks"],
            UtilityId::Cp | UtilityId::CpStar => &["-a"],
            UtilityId::Rsync => &["-a", "-H"],
            UtilityId::Dropbox => &[],
        };
        UtilityModel {
            id,
            flags: flags.iter().map(|s| s.to_string()).collect(),
            step_limit: DEFAULT_STEP_LIMIT,
        }
    }

    /// True when the invocation explicitly asks for symlinks to be copied as
    /// links rather than followed.
    pub fn no_follow_directive(&self) -> bool {
        self.flags.iter().any(|f| f == "-a" || f == "--symlinks")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptAnswer {
    Overwrite,
    Skip,
    Rename,
    Abort,
}

impl FromStr for PromptAnswer {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self, ModelError> {
        Ok(match s {
            "overwrite" | "y" => PromptAnswer::Overwrite,
            "skip" | "n" => PromptAnswer::Skip,
            "rename" | "r" => PromptAnswer::Rename,
            "abort" => PromptAnswer::Abort,
            other => return Err(ModelError::BadPromptAnswer(other.to_string())),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Terminated {
    Ok,
    ErrorReported,
    UserPrompt,
    StepLimitHit,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "result", rename_all = "snake_case")]
pub enum EventResult {
    Ok,
    Error { message: String },
    /// The utility cannot represent this resource and left it out.
    Skipped { reason: String },
    /// The resource was transferred in a reduced form.
    Degraded { reason: String },
    /// The user was asked; `answer` is `None` when the script ran out.
    Prompted { answer: Option<PromptAnswer> },
    /// Placed under a different name to avoid the collision.
    Renamed { to: String },
    /// The user declined to overwrite.
    Declined,
    StepLimit { steps: usize },
}

/// One high-level operation. `path` is the destination path.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    pub op: String,
    pub path: String,
    #[serde(flatten)]
    pub result: EventResult,
}

#[derive(Clone, Debug)]
pub struct CopyOutcome {
    /// `None` for scripted scenarios that are not a single utility run.
    pub utility: Option<UtilityId>,
    pub final_image: FsImage,
    pub events: Vec<Event>,
    pub terminated: Terminated,
    pub trace: Vec<TraceRecord>,
    pub no_follow_directive: bool,
}

impl CopyOutcome {
    pub fn trace_tsv(&self) -> String {
        let mut out = String::new();
        for r in &self.trace {
            out.push_str(&r.to_tsv());
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("prompt required at {path} and no answers were scripted")]
    PromptRequired { path: String },
    #[error("source directory {0} does not exist")]
    SourceMissing(String),
    #[error("target directory {0} does not exist")]
    TargetMissing(String),
    #[error("unknown utility {0:?}")]
    UnknownUtility(String),
    #[error("unknown scenario {0:?}")]
    UnknownScenario(String),
    #[error("unknown prompt answer {0:?}")]
    BadPromptAnswer(String),
    #[error(transparent)]
    Vfs(#[from] VfsError),
    #[error(transparent)]
    Tar(#[from] TarError),
}

/// Snapshot of one source resource, children in readdir order.
#[derive(Clone, Debug)]
pub(crate) struct SrcEntry {
    /// Relative to the copied root, `/`-separated.
    pub rel: String,
    pub name: String,
    pub ino: Ino,
    pub kind: NodeKind,
    pub meta: Metadata,
    pub content: Vec<u8>,
    pub link_target: Option<String>,
    pub device: Option<(u32, u32)>,
    pub nlink: u32,
    pub children: Vec<SrcEntry>,
}

impl SrcEntry {
    pub fn new_node(&self) -> NewNode {
        match self.kind {
            NodeKind::File => NewNode::File(self.content.clone()),
            NodeKind::Dir => NewNode::Dir,
            NodeKind::Symlink => NewNode::Symlink(self.link_target.clone().unwrap_or_default()),
            NodeKind::Pipe => NewNode::Pipe,
            NodeKind::Device => {
                let (major, minor) = self.device.unwrap_or((0, 0));
                NewNode::Device { major, minor }
            }
        }
    }

    /// Pre-order over the subtree, excluding `self`.
    pub fn descendants(&self) -> Vec<&SrcEntry> {
        let mut out = Vec::new();
        fn go<'a>(e: &'a SrcEntry, out: &mut Vec<&'a SrcEntry>) {
            for c in &e.children {
                out.push(c);
                go(c, out);
            }
        }
        go(self, &mut out);
        out
    }
}

pub(crate) fn read_source(img: &FsImage, root: &str) -> Result<Vec<SrcEntry>, ModelError> {
    let dir = img
        .lookup_follow(root)?
        .filter(|&i| img.node(i).is_some_and(|n| n.is_dir()))
        .ok_or_else(|| ModelError::SourceMissing(root.to_string()))?;
    read_children(img, dir, "")
}

fn read_children(img: &FsImage, dir: Ino, prefix: &str) -> Result<Vec<SrcEntry>, ModelError> {
    let mut out = Vec::new();
    for (name, ino) in img.entries(dir)? {
        let node = img.node(ino).ok_or(VfsError::NoSuchInode(ino))?;
        let rel = if prefix.is_empty() {
            name.clone()
        } else {
            format!("{prefix}/{name}")
        };
        let children = if node.is_dir() {
            read_children(img, ino, &rel)?
        } else {
            Vec::new()
        };
        out.push(SrcEntry {
            name,
            ino,
            kind: node.kind(),
            meta: node.meta.clone(),
            content: match &node.data {
                NodeData::File(c) => c.clone(),
                _ => Vec::new(),
            },
            link_target: node.symlink_target().map(str::to_string),
            device: match node.data {
                NodeData::Device { major, minor, .. } => Some((major, minor)),
                _ => None,
            },
            nlink: node.nlink,
            children,
            rel,
        });
    }
    Ok(out)
}

/// Applies calls to the image and records them as trace lines and events.
pub(crate) struct Session {
    pub img: FsImage,
    pub events: Vec<Event>,
    pub trace: Vec<TraceRecord>,
    program: String,
    pid: u32,
    seq: u64,
    steps: usize,
    step_limit: usize,
}

type VResult<T> = Result<T, VfsError>;

impl Session {
    pub fn new(img: FsImage, program: &str, step_limit: usize) -> Self {
        Session {
            img,
            events: Vec::new(),
            trace: Vec::new(),
            program: program.to_string(),
            pid: 4242,
            seq: 10_000,
            steps: 0,
            step_limit,
        }
    }

    pub fn event(&mut self, op: &str, path: &str, result: EventResult) {
        self.events.push(Event {
            op: op.to_string(),
            path: path.to_string(),
            result,
        });
    }

    pub fn has_errors(&self) -> bool {
        self.events
            .iter()
            .any(|e| matches!(e.result, EventResult::Error { .. }))
    }

    fn record(&mut self, op: OpClass, syscall: &str, path: &str, ino: Option<Ino>) {
        self.seq += 1;
        self.trace.push(TraceRecord {
            seq: self.seq,
            op_class: op,
            syscall: syscall.to_string(),
            program: self.program.clone(),
            pid: self.pid,
            device: self.img.device().to_string(),
            inode: ino.unwrap_or(0),
            path: path.to_string(),
            dirfd: None,
            outcome: if ino.is_some() {
                Outcome::Success
            } else {
                Outcome::Failure
            },
        });
    }

    /// Counts one loop iteration; false once the bound is exhausted.
    pub fn step(&mut self) -> bool {
        self.steps += 1;
        self.steps <= self.step_limit
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn kind_of(&self, ino: Ino) -> Option<NodeKind> {
        self.img.node(ino).map(|n| n.kind())
    }

    pub fn nlink_of(&self, ino: Ino) -> u32 {
        self.img.node(ino).map_or(0, |n| n.nlink)
    }

    /// `lstat`: the entry itself, symlinks not followed.
    pub fn lstat(&mut self, path: &str) -> Option<Ino> {
        let ino = self.img.lookup(path).ok().flatten();
        self.record(OpClass::Use, "newfstatat", path, ino);
        ino
    }

    /// `stat`: follows symlinks.
    pub fn stat(&mut self, path: &str) -> Option<Ino> {
        let ino = self.img.lookup_follow(path).ok().flatten();
        self.record(OpClass::Use, "newfstatat", path, ino);
        ino
    }

    /// `openat(O_CREAT|O_WRONLY|O_TRUNC)` plus the write. Reports a use
    /// when an existing node was opened, a creation otherwise.
    pub fn write_file(&mut self, path: &str, content: &[u8], meta: &Metadata, opts: CreateOptions) -> VResult<Ino> {
        let fresh = self.img.next_ino();
        let res = split_parent(path)
            .ok_or_else(|| VfsError::IsADirectory(path.to_string()))
            .and_then(|(parent, name)| {
                self.img
                    .create(&parent, &name, NewNode::File(content.to_vec()), meta.clone(), opts)
            });
        match &res {
            Ok(ino) if *ino >= fresh => self.record(OpClass::Create, "openat", path, Some(*ino)),
            Ok(ino) => self.record(OpClass::Use, "openat", path, Some(*ino)),
            Err(_) => self.record(OpClass::Create, "openat", path, None),
        }
        res
    }

    /// Creates a non-regular node, failing on any existing entry.
    pub fn make_node(&mut self, path: &str, node: NewNode, meta: &Metadata) -> VResult<Ino> {
        let syscall = match node {
            NewNode::Dir => "mkdirat",
            NewNode::Symlink(_) => "symlinkat",
            NewNode::File(_) => "openat",
            NewNode::Pipe | NewNode::Device { .. } => "mknodat",
        };
        let res = split_parent(path)
            .ok_or_else(|| VfsError::Exists(path.to_string()))
            .and_then(|(parent, name)| {
                self.img
                    .create(&parent, &name, node, meta.clone(), CreateOptions::exclusive())
            });
        self.record(OpClass::Create, syscall, path, res.as_ref().ok().copied());
        res
    }

    pub fn link(&mut self, existing: &str, new_path: &str, opts: CreateOptions) -> VResult<Ino> {
        let res = self.img.link(existing, new_path, opts);
        self.record(OpClass::Create, "linkat", new_path, res.as_ref().ok().copied());
        res
    }

    pub fn unlink(&mut self, path: &str) -> VResult<Ino> {
        let res = self.img.unlink(path);
        self.record(OpClass::Delete, "unlinkat", path, res.as_ref().ok().copied());
        res
    }

    pub fn rmdir(&mut self, path: &str) -> VResult<Ino> {
        let res = split_parent(path)
            .ok_or_else(|| VfsError::InvalidRename(path.to_string()))
            .and_then(|(parent, name)| {
                let dir = self.img.dir_ino(&parent)?;
                self.img.rmdir_at(dir, &name)
            });
        self.record(OpClass::Delete, "unlinkat", path, res.as_ref().ok().copied());
        res
    }

    /// Removes a directory tree bottom-up, one traced call per entry.
    pub fn remove_tree(&mut self, path: &str) -> VResult<()> {
        let ino = self
            .img
            .lookup(path)?
            .ok_or_else(|| VfsError::NotFound(path.to_string()))?;
        if self.kind_of(ino) != Some(NodeKind::Dir) {
            self.unlink(path)?;
            return Ok(());
        }
        for name in self.img.readdir(ino)? {
            self.remove_tree(&join(path, &name))?;
        }
        self.rmdir(path)?;
        Ok(())
    }

    pub fn rename(&mut self, from: &str, to: &str) -> VResult<Ino> {
        let res = self.img.rename(from, to);
        self.record(OpClass::Rename, "renameat", to, res.as_ref().ok().copied());
        res
    }

    /// `chmod`/`chown`/`utimes`/xattrs on a path.
    pub fn set_meta_path(&mut self, path: &str, follow: bool, meta: &Metadata) -> VResult<Ino> {
        let ino = if follow {
            self.img.lookup_follow(path)
        } else {
            self.img.lookup(path)
        }?;
        self.record(OpClass::Use, "fchmodat", path, ino);
        let ino = ino.ok_or_else(|| VfsError::NotFound(path.to_string()))?;
        self.img.set_meta(ino, meta.clone())?;
        Ok(ino)
    }

    /// The same through an already open descriptor: no path resolution.
    pub fn set_meta_fd(&mut self, ino: Ino, meta: &Metadata) -> VResult<()> {
        self.img.set_meta(ino, meta.clone())
    }
}

/// Runs `model` copying the contents of directory `source` into the
/// existing directory `target`.
///
/// `prompt_script` feeds interactive utilities: `None` means no input
/// channel at all, so a question is an error; an exhausted script stops the
/// run at the question.
pub fn run_model(
    model: &UtilityModel,
    image: &FsImage,
    source: &str,
    target: &str,
    prompt_script: Option<&[PromptAnswer]>,
) -> Result<CopyOutcome, ModelError> {
    let src = read_source(image, source)?;
    match image.lookup_follow(target)? {
        Some(i) if image.node(i).is_some_and(|n| n.is_dir()) => {}
        _ => return Err(ModelError::TargetMissing(target.to_string())),
    }
    let mut s = Session::new(image.clone(), model.id.program(), model.step_limit);
    let terminated = match model.id {
        UtilityId::Tar => models::tar(&mut s, &src, target)?,
        UtilityId::Zip => models::zip(&mut s, &src, target, prompt_script)?,
        UtilityId::Cp => models::cp(&mut s, &src, target),
        UtilityId::CpStar => models::cp_star(&mut s, &src, target),
        UtilityId::Rsync => models::rsync(&mut s, &src, target),
        UtilityId::Dropbox => models::dropbox(&mut s, &src, target),
    };
    Ok(CopyOutcome {
        utility: Some(model.id),
        final_image: s.img,
        events: s.events,
        terminated,
        trace: s.trace,
        no_follow_directive: model.no_follow_directive(),
    })
}
