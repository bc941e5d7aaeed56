//! Collision test cases and fixture trees.
//!
//! The matrix crosses seven (target kind, source kind) rows with two build
//! orders and two depths. Whichever member is created first gets the
//! lowercase spelling (`foo`, `dir`); the later one gets the uppercase
//! spelling (`FOO`, `DIR`). In target-first cases the first member has the
//! target kind; in source-first cases it has the source kind.

use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fold::FoldProfile;
use crate::vfs::{self, CreateOptions, FsImage, Metadata, NewNode, VfsError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResourceKind {
    File,
    Dir,
    SymFile,
    SymDir,
    Hardlink,
    Pipe,
    Device,
}

impl ResourceKind {
    pub const ALL: [ResourceKind; 7] = [
        ResourceKind::File,
        ResourceKind::Dir,
        ResourceKind::SymFile,
        ResourceKind::SymDir,
        ResourceKind::Hardlink,
        ResourceKind::Pipe,
        ResourceKind::Device,
    ];

    pub fn token(self) -> &'static str {
        match self {
            ResourceKind::File => "file",
            ResourceKind::Dir => "dir",
            ResourceKind::SymFile => "symfile",
            ResourceKind::SymDir => "symdir",
            ResourceKind::Hardlink => "hardlink",
            ResourceKind::Pipe => "pipe",
            ResourceKind::Device => "device",
        }
    }

    /// Symlinks, pipes and devices only matter on the target side.
    pub fn valid_as_source(self) -> bool {
        matches!(self, ResourceKind::File | ResourceKind::Dir | ResourceKind::Hardlink)
    }
}

impl fmt::Display for ResourceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

impl FromStr for ResourceKind {
    type Err = CasegenError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ResourceKind::ALL
            .into_iter()
            .find(|k| k.token() == s)
            .ok_or_else(|| CasegenError::UnknownCase(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Order {
    TargetFirst,
    SourceFirst,
}

impl Order {
    pub fn token(self) -> &'static str {
        match self {
            Order::TargetFirst => "tf",
            Order::SourceFirst => "sf",
        }
    }
}

/// The (target, source) pairs of the response table, in row order.
pub const TABLE_ROWS: [(ResourceKind, ResourceKind); 7] = [
    (ResourceKind::File, ResourceKind::File),
    (ResourceKind::SymFile, ResourceKind::File),
    (ResourceKind::Pipe, ResourceKind::File),
    (ResourceKind::Hardlink, ResourceKind::File),
    (ResourceKind::Hardlink, ResourceKind::Hardlink),
    (ResourceKind::Dir, ResourceKind::Dir),
    (ResourceKind::SymDir, ResourceKind::Dir),
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum StepNode {
    File { content: String },
    Dir,
    Symlink { target: String },
    /// Another name for the node at `to` (relative to the build root).
    Hardlink { to: String },
    Pipe,
    Device { major: u32, minor: u32 },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BuildStep {
    /// Relative to the build root.
    pub path: String,
    pub node: StepNode,
    pub meta: Metadata,
}

/// Ordered build steps; parents always precede children.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tree {
    pub steps: Vec<BuildStep>,
}

impl Tree {
    fn dir(&mut self, path: &str, mode: u32) {
        self.push(path, StepNode::Dir, Metadata::new(mode));
    }

    fn file(&mut self, path: &str, content: &str, mode: u32) {
        self.push(
            path,
            StepNode::File {
                content: content.to_string(),
            },
            Metadata::new(mode),
        );
    }

    fn symlink(&mut self, path: &str, target: &str) {
        self.push(
            path,
            StepNode::Symlink {
                target: target.to_string(),
            },
            Metadata::new(0o777),
        );
    }

    fn hardlink(&mut self, path: &str, to: &str) {
        self.push(path, StepNode::Hardlink { to: to.to_string() }, Metadata::new(0o644));
    }

    fn push(&mut self, path: &str, node: StepNode, meta: Metadata) {
        self.steps.push(BuildStep {
            path: path.to_string(),
            node,
            meta,
        });
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestCase {
    pub id: String,
    pub target_kind: ResourceKind,
    pub source_kind: ResourceKind,
    pub order: Order,
    pub depth: u8,
    /// Controls use non-colliding spellings and must copy cleanly.
    pub control: bool,
    pub tree: Tree,
}

impl TestCase {
    /// Root of the copied tree inside the build root.
    pub const SOURCE_DIR: &'static str = "src";
    pub const SUPPORT_DIR: &'static str = "outside";

    pub fn new(
        target_kind: ResourceKind,
        source_kind: ResourceKind,
        order: Order,
        depth: u8,
    ) -> Result<TestCase, CasegenError> {
        build_case(target_kind, source_kind, order, depth, false)
    }

    /// Same layout with the later member renamed so nothing collides.
    pub fn control_of(&self) -> TestCase {
        build_case(self.target_kind, self.source_kind, self.order, self.depth, true)
            .expect("parameters were already validated")
    }

    /// An image holding the case tree at `/` and an empty fold-flagged `/dst`.
    pub fn image(&self, profile: FoldProfile) -> FsImage {
        let mut img = FsImage::with_device("00:39");
        materialize(&self.tree, Destination::Image { image: &mut img, root: "/" })
            .expect("generated trees build on a fresh image");
        img.mkdir_folded("/dst", Metadata::new(0o755), profile)
            .expect("fresh image has no /dst");
        img
    }
}

fn case_id(t: ResourceKind, s: ResourceKind, order: Order, depth: u8, control: bool) -> String {
    let base = format!("{}-{}-d{}-{}", t.token(), s.token(), depth, order.token());
    if control {
        format!("{base}-ctl")
    } else {
        base
    }
}

/// Parses `<target>-<source>-d<depth>-<tf|sf>[-ctl]` and builds that case.
pub fn case_by_id(id: &str) -> Result<TestCase, CasegenError> {
    let bad = || CasegenError::UnknownCase(id.to_string());
    let parts: Vec<&str> = id.split('-').collect();
    let (core, control) = match parts.as_slice() {
        [t, s, d, o] => ([*t, *s, *d, *o], false),
        [t, s, d, o, "ctl"] => ([*t, *s, *d, *o], true),
        _ => return Err(bad()),
    };
    let t: ResourceKind = core[0].parse().map_err(|_| bad())?;
    let s: ResourceKind = core[1].parse().map_err(|_| bad())?;
    let depth = match core[2] {
        "d1" => 1,
        "d2" => 2,
        _ => return Err(bad()),
    };
    let order = match core[3] {
        "tf" => Order::TargetFirst,
        "sf" => Order::SourceFirst,
        _ => return Err(bad()),
    };
    build_case(t, s, order, depth, control)
}

/// Every row in both orders and at both depths.
pub fn generate_matrix() -> Vec<TestCase> {
    let mut out = Vec::with_capacity(28);
    for (t, s) in TABLE_ROWS {
        for depth in [1, 2] {
            for order in [Order::TargetFirst, Order::SourceFirst] {
                out.push(TestCase::new(t, s, order, depth).expect("table rows are valid"));
            }
        }
    }
    out
}

const TARGET_CONTENT: &str = "target";
const SOURCE_CONTENT: &str = "source";

#[derive(Clone, Copy)]
enum Role {
    Target,
    Source,
}

fn build_case(
    target_kind: ResourceKind,
    source_kind: ResourceKind,
    order: Order,
    depth: u8,
    control: bool,
) -> Result<TestCase, CasegenError> {
    let id = case_id(target_kind, source_kind, order, depth, control);
    if !(1..=2).contains(&depth) || !source_kind.valid_as_source() {
        return Err(CasegenError::UnknownCase(id));
    }
    let mut tree = Tree::default();
    tree.dir(TestCase::SUPPORT_DIR, 0o755);
    tree.file("outside/ref", "referent", 0o644);
    tree.dir("outside/refdir", 0o755);
    tree.file("outside/companion", TARGET_CONTENT, 0o640);
    tree.dir(TestCase::SOURCE_DIR, 0o755);

    let (first, second) = match order {
        Order::TargetFirst => ((target_kind, Role::Target), (source_kind, Role::Source)),
        Order::SourceFirst => ((source_kind, Role::Source), (target_kind, Role::Target)),
    };
    let up = if control { "bar" } else { "FOO" };
    let up_dir = if control { "dir2" } else { "DIR" };
    let (first_parent, second_parent, first_leaf, second_leaf) = if depth == 1 {
        ("src".to_string(), "src".to_string(), "foo", up)
    } else {
        tree.dir("src/dir", 0o755);
        let second_parent = format!("src/{up_dir}");
        (String::from("src/dir"), second_parent, "foo", "foo")
    };

    let both_hardlinks = target_kind == ResourceKind::Hardlink && source_kind == ResourceKind::Hardlink;
    if both_hardlinks {
        // Two link pairs whose second names collide.
        let zzz_up = if control { "yyy" } else { "ZZZ" };
        let (pair_a, pair_b) = (
            [("hfoo", "foo"), ("zzz", "foo")],
            [("hbar", "bar"), (zzz_up, "bar")],
        );
        let (first_pair, second_pair) = match order {
            Order::TargetFirst => (pair_a, pair_b),
            Order::SourceFirst => (pair_b, pair_a),
        };
        emit_pair(&mut tree, &first_parent, first_pair, first.1);
        if depth == 2 {
            tree.dir(&second_parent, 0o755);
        }
        emit_pair(&mut tree, &second_parent, second_pair, second.1);
    } else {
        emit_member(&mut tree, &format!("{first_parent}/{first_leaf}"), first.0, first.1, depth);
        if depth == 2 {
            tree.dir(&second_parent, 0o755);
        }
        emit_member(&mut tree, &format!("{second_parent}/{second_leaf}"), second.0, second.1, depth);
    }

    Ok(TestCase {
        id,
        target_kind,
        source_kind,
        order,
        depth,
        control,
        tree,
    })
}

fn emit_pair(tree: &mut Tree, parent: &str, pair: [(&str, &str); 2], role: Role) {
    let mode = role_mode(role);
    let leader = format!("{parent}/{}", pair[0].0);
    tree.file(&leader, pair[0].1, mode);
    tree.hardlink(&format!("{parent}/{}", pair[1].0), &leader);
}

fn role_mode(role: Role) -> u32 {
    match role {
        Role::Target => 0o640,
        Role::Source => 0o600,
    }
}

fn role_content(role: Role) -> &'static str {
    match role {
        Role::Target => TARGET_CONTENT,
        Role::Source => SOURCE_CONTENT,
    }
}

fn emit_member(tree: &mut Tree, path: &str, kind: ResourceKind, role: Role, depth: u8) {
    let up = if depth == 1 { "../" } else { "../../" };
    match kind {
        ResourceKind::File => tree.file(path, role_content(role), role_mode(role)),
        ResourceKind::Dir => {
            let (mode, child) = match role {
                Role::Target => (0o700, "t_child"),
                Role::Source => (0o755, "s_child"),
            };
            tree.dir(path, mode);
            tree.file(&format!("{path}/{child}"), role_content(role), 0o644);
        }
        ResourceKind::SymFile => tree.symlink(path, &format!("{up}outside/ref")),
        ResourceKind::SymDir => tree.symlink(path, &format!("{up}outside/refdir")),
        ResourceKind::Hardlink => tree.hardlink(path, "outside/companion"),
        ResourceKind::Pipe => tree.push(path, StepNode::Pipe, Metadata::new(0o666)),
        ResourceKind::Device => tree.push(path, StepNode::Device { major: 1, minor: 3 }, Metadata::new(0o666)),
    }
}

/// Source tree of a repository whose directory `A` collides with a symlink
/// `a` into the hooks directory.
pub fn git_repo_fixture() -> Tree {
    let mut t = Tree::default();
    t.dir("repo", 0o755);
    t.dir("repo/.git", 0o755);
    t.dir("repo/.git/hooks", 0o755);
    t.dir("repo/.git/objects", 0o755);
    t.dir("repo/A", 0o755);
    t.file("repo/A/file1", "one", 0o644);
    t.file("repo/A/file2", "two", 0o644);
    t.file("repo/A/post-checkout", "#!/bin/sh\necho pwned\n", 0o755);
    t.symlink("repo/a", ".git/hooks");
    t
}

/// Source tree where a directory collision hides a symlink under the
/// other directory's subdirectory name.
pub fn rsync_traversal_fixture() -> Tree {
    let mut t = Tree::default();
    t.dir("tmp", 0o777);
    t.dir("src", 0o755);
    t.dir("src/topdir", 0o755);
    t.symlink("src/topdir/secret", "/tmp");
    t.dir("src/TOPDIR", 0o755);
    t.dir("src/TOPDIR/secret", 0o700);
    t.file("src/TOPDIR/secret/confidential", "confidential", 0o600);
    t
}

/// Web root before tampering.
pub fn httpd_fixture() -> Tree {
    let mut t = Tree::default();
    t.dir("www", 0o755);
    t.dir("www/hidden", 0o700);
    t.file("www/hidden/secret.txt", "secret", 0o600);
    let mut protected = Metadata::new(0o750);
    protected.gid = 33;
    t.push("www/protected", StepNode::Dir, protected);
    t.file("www/protected/.htaccess", "Require valid-user\n", 0o644);
    t.file("www/protected/user-file1.txt", "user data", 0o644);
    t.file("www/index.html", "<html></html>\n", 0o644);
    t
}

/// Web root after the adversary added colliding directories.
pub fn httpd_adversary_fixture() -> Tree {
    let mut t = Tree::default();
    t.dir("www", 0o755);
    t.dir("www/hidden", 0o700);
    t.file("www/hidden/secret.txt", "secret", 0o600);
    t.dir("www/HIDDEN", 0o755);
    let mut protected = Metadata::new(0o750);
    protected.gid = 33;
    t.push("www/protected", StepNode::Dir, protected);
    t.file("www/protected/.htaccess", "Require valid-user\n", 0o644);
    t.file("www/protected/user-file1.txt", "user data", 0o644);
    t.dir("www/PROTECTED", 0o755);
    t.file("www/PROTECTED/.htaccess", "", 0o644);
    t.file("www/index.html", "<html></html>\n", 0o644);
    t
}

#[derive(Debug, Error)]
pub enum CasegenError {
    #[error("unknown test case {0:?}")]
    UnknownCase(String),
    #[error("destination {0} is not empty")]
    DestNotEmpty(String),
    #[error("destination {0} does not exist")]
    DestMissing(String),
    #[error("destination {0} is case-insensitive; a case-sensitive directory is required")]
    HostIsCaseInsensitive(String),
    #[error("building {path}: {source}")]
    Vfs { path: String, source: VfsError },
    #[error("building {path}: {source}")]
    Io { path: String, source: io::Error },
}

pub enum Destination<'a> {
    /// An existing empty directory inside an image.
    Image { image: &'a mut FsImage, root: &'a str },
    /// An existing empty directory on the host.
    Host(&'a Path),
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct BuildReport {
    pub created: Vec<String>,
    pub skipped: Vec<String>,
    pub warnings: Vec<String>,
}

/// Builds `tree` under `dest`. On failure `dest` is left empty.
pub fn materialize(tree: &Tree, dest: Destination<'_>) -> Result<BuildReport, CasegenError> {
    match dest {
        Destination::Image { image, root } => materialize_image(tree, image, root),
        Destination::Host(path) => materialize_host(tree, path),
    }
}

fn materialize_image(tree: &Tree, image: &mut FsImage, root: &str) -> Result<BuildReport, CasegenError> {
    let vfs_err = |path: &str| {
        let path = path.to_string();
        move |source| CasegenError::Vfs { path, source }
    };
    let root_ino = image
        .dir_ino(root)
        .map_err(|_| CasegenError::DestMissing(root.to_string()))?;
    if !image.readdir(root_ino).map_err(vfs_err(root))?.is_empty() {
        return Err(CasegenError::DestNotEmpty(root.to_string()));
    }
    // Work on a copy so a failure leaves the caller's image untouched.
    let mut work = image.clone();
    let mut report = BuildReport::default();
    for step in &tree.steps {
        let full = vfs::join(root, &step.path);
        let (parent, name) = vfs::split_parent(&full).ok_or_else(|| CasegenError::UnknownCase(full.clone()))?;
        let spec = match &step.node {
            StepNode::File { content } => NewNode::File(content.as_bytes().to_vec()),
            StepNode::Dir => NewNode::Dir,
            StepNode::Symlink { target } => NewNode::Symlink(target.clone()),
            StepNode::Pipe => NewNode::Pipe,
            StepNode::Device { major, minor } => NewNode::Device {
                major: *major,
                minor: *minor,
            },
            StepNode::Hardlink { to } => {
                work.link(&vfs::join(root, to), &full, CreateOptions::exclusive())
                    .map_err(vfs_err(&full))?;
                report.created.push(step.path.clone());
                continue;
            }
        };
        work.create(&parent, &name, spec, step.meta.clone(), CreateOptions::exclusive())
            .map_err(vfs_err(&full))?;
        report.created.push(step.path.clone());
    }
    *image = work;
    Ok(report)
}

fn is_empty_dir(path: &Path) -> Result<bool, CasegenError> {
    let io_err = |source| CasegenError::Io {
        path: path.display().to_string(),
        source,
    };
    Ok(fs::read_dir(path).map_err(io_err)?.next().is_none())
}

/// Refuses destinations where differently-cased names resolve to one entry.
pub fn probe_case_sensitive(dir: &Path) -> Result<bool, CasegenError> {
    let io_err = |source| CasegenError::Io {
        path: dir.display().to_string(),
        source,
    };
    let probe = dir.join("cOLLIDE.probe");
    fs::write(&probe, b"").map_err(io_err)?;
    let folded = fs::symlink_metadata(dir.join("Collide.probe")).is_ok();
    fs::remove_file(&probe).map_err(io_err)?;
    Ok(!folded)
}

fn materialize_host(tree: &Tree, dest: &Path) -> Result<BuildReport, CasegenError> {
    if !dest.is_dir() {
        return Err(CasegenError::DestMissing(dest.display().to_string()));
    }
    if !is_empty_dir(dest)? {
        return Err(CasegenError::DestNotEmpty(dest.display().to_string()));
    }
    if !probe_case_sensitive(dest)? {
        return Err(CasegenError::HostIsCaseInsensitive(dest.display().to_string()));
    }
    let staging = dest.join(".collide-build");
    let result = build_host(tree, &staging).and_then(|report| {
        promote(&staging, dest)?;
        Ok(report)
    });
    if result.is_err() {
        // Leave the destination as empty as it was.
        if let Ok(entries) = fs::read_dir(dest) {
            for entry in entries.flatten() {
                let p = entry.path();
                let _ = if p.is_dir() && !p.is_symlink() {
                    fs::remove_dir_all(&p)
                } else {
                    fs::remove_file(&p)
                };
            }
        }
    }
    result
}

fn promote(staging: &Path, dest: &Path) -> Result<(), CasegenError> {
    let io_err = |path: &Path| {
        let path = path.display().to_string();
        move |source| CasegenError::Io { path, source }
    };
    for entry in fs::read_dir(staging).map_err(io_err(staging))? {
        let entry = entry.map_err(io_err(staging))?;
        let to = dest.join(entry.file_name());
        fs::rename(entry.path(), &to).map_err(io_err(&to))?;
    }
    fs::remove_dir(staging).map_err(io_err(staging))
}

fn build_host(tree: &Tree, root: &Path) -> Result<BuildReport, CasegenError> {
    use std::os::unix::fs::{chown, symlink, PermissionsExt};

    let io_err = |path: &PathBuf| {
        let path = path.display().to_string();
        move |source| CasegenError::Io { path, source }
    };
    fs::create_dir(root).map_err(io_err(&root.to_path_buf()))?;
    let mut report = BuildReport::default();
    let mut dirs: Vec<(PathBuf, u32)> = Vec::new();
    for step in &tree.steps {
        let path = root.join(&step.path);
        let mode = step.meta.mode;
        let mut set_mode = true;
        match &step.node {
            StepNode::File { content } => fs::write(&path, content).map_err(io_err(&path))?,
            StepNode::Dir => {
                fs::create_dir(&path).map_err(io_err(&path))?;
                // Applied at the end so restrictive modes do not block children.
                dirs.push((path.clone(), mode));
                set_mode = false;
            }
            StepNode::Symlink { target } => {
                symlink(target, &path).map_err(io_err(&path))?;
                set_mode = false;
            }
            StepNode::Hardlink { to } => {
                fs::hard_link(root.join(to), &path).map_err(io_err(&path))?;
                set_mode = false;
            }
            StepNode::Pipe => {
                rustix::fs::mknodat(
                    rustix::fs::CWD,
                    &path,
                    rustix::fs::FileType::Fifo,
                    rustix::fs::Mode::from_raw_mode(mode),
                    0,
                )
                .map_err(|e| io::Error::from_raw_os_error(e.raw_os_error()))
                .map_err(io_err(&path))?;
            }
            StepNode::Device { major, minor } => {
                let made = rustix::fs::mknodat(
                    rustix::fs::CWD,
                    &path,
                    rustix::fs::FileType::CharacterDevice,
                    rustix::fs::Mode::from_raw_mode(mode),
                    rustix::fs::makedev(*major, *minor),
                );
                match made {
                    Ok(()) => {}
                    Err(e) if e == rustix::io::Errno::PERM || e == rustix::io::Errno::ACCESS => {
                        report.skipped.push(step.path.clone());
                        report.warnings.push(format!(
                            "{}: device node needs privileges; skipped",
                            step.path
                        ));
                        continue;
                    }
                    Err(e) => {
                        return Err(CasegenError::Io {
                            path: path.display().to_string(),
                            source: io::Error::from_raw_os_error(e.raw_os_error()),
                        })
                    }
                }
            }
        }
        if set_mode {
            fs::set_permissions(&path, fs::Permissions::from_mode(mode)).map_err(io_err(&path))?;
        }
        if !matches!(step.node, StepNode::Symlink { .. } | StepNode::Hardlink { .. }) {
            if let Err(e) = chown(&path, Some(step.meta.uid), Some(step.meta.gid)) {
                report
                    .warnings
                    .push(format!("{}: ownership not applied ({e})", step.path));
            }
        }
        report.created.push(step.path.clone());
    }
    for (path, mode) in dirs.into_iter().rev() {
        fs::set_permissions(&path, fs::Permissions::from_mode(mode)).map_err(io_err(&path))?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vfs::NodeKind;

    fn paths(tc: &TestCase) -> Vec<&str> {
        tc.tree
            .steps
            .iter()
            .map(|s| s.path.as_str())
            .filter(|p| p.starts_with("src/"))
            .collect()
    }

    #[test]
    fn matrix_has_28_unique_ids() {
        let m = generate_matrix();
        assert_eq!(m.len(), 28);
        let mut ids: Vec<_> = m.iter().map(|c| c.id.clone()).collect();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 28);
        assert!(ids.contains(&"file-file-d1-tf".to_string()));
    }

    #[test]
    fn ids_round_trip() {
        for tc in generate_matrix() {
            assert_eq!(case_by_id(&tc.id).unwrap(), tc);
            let ctl = tc.control_of();
            assert_eq!(case_by_id(&ctl.id).unwrap(), ctl);
        }
        assert!(case_by_id("file-pipe-d1-tf").is_err());
        assert!(case_by_id("file-file-d3-tf").is_err());
        assert!(case_by_id("nonsense").is_err());
    }

    #[test]
    fn pipe_case_at_depth_two_matches_example_layout() {
        let tc = case_by_id("pipe-file-d2-sf").unwrap();
        assert_eq!(paths(&tc), vec!["src/dir", "src/dir/foo", "src/DIR", "src/DIR/foo"]);
        let img = tc.image(FoldProfile::ascii());
        let kind = |p: &str| img.node(img.lookup(p).unwrap().unwrap()).unwrap().kind();
        assert_eq!(kind("/src/dir/foo"), NodeKind::File);
        assert_eq!(kind("/src/DIR/foo"), NodeKind::Pipe);
    }

    #[test]
    fn hardlink_pairs_follow_the_example() {
        let tc = case_by_id("hardlink-hardlink-d1-tf").unwrap();
        assert_eq!(paths(&tc), vec!["src/hfoo", "src/zzz", "src/hbar", "src/ZZZ"]);
        let img = tc.image(FoldProfile::ascii());
        let ino = |p: &str| img.lookup(p).unwrap().unwrap();
        assert_eq!(ino("/src/hfoo"), ino("/src/zzz"));
        assert_eq!(ino("/src/hbar"), ino("/src/ZZZ"));
        assert_eq!(img.read(ino("/src/zzz")).unwrap(), b"foo");
        assert_eq!(img.read(ino("/src/ZZZ")).unwrap(), b"bar");

        let d2 = case_by_id("hardlink-hardlink-d2-tf").unwrap();
        assert_eq!(
            paths(&d2),
            vec!["src/dir", "src/dir/hfoo", "src/dir/zzz", "src/DIR", "src/DIR/hbar", "src/DIR/ZZZ"]
        );
    }

    #[test]
    fn orders_swap_kinds_not_spellings() {
        let tf = case_by_id("symdir-dir-d1-tf").unwrap();
        let sf = case_by_id("symdir-dir-d1-sf").unwrap();
        let kind_of = |tc: &TestCase, p: &str| {
            let img = tc.image(FoldProfile::ascii());
            img.node(img.lookup(p).unwrap().unwrap()).unwrap().kind()
        };
        assert_eq!(kind_of(&tf, "/src/foo"), NodeKind::Symlink);
        assert_eq!(kind_of(&tf, "/src/FOO"), NodeKind::Dir);
        assert_eq!(kind_of(&sf, "/src/foo"), NodeKind::Dir);
        assert_eq!(kind_of(&sf, "/src/FOO"), NodeKind::Symlink);
    }

    #[test]
    fn symlinks_point_outside_the_copied_tree_at_any_depth() {
        for (id, path, target) in [
            ("symfile-file-d1-tf", "/src/foo", "../outside/ref"),
            ("symfile-file-d2-tf", "/src/dir/foo", "../../outside/ref"),
            ("symdir-dir-d2-tf", "/src/dir/foo", "../../outside/refdir"),
        ] {
            let img = case_by_id(id).unwrap().image(FoldProfile::ascii());
            let node = img.node(img.lookup(path).unwrap().unwrap()).unwrap();
            assert_eq!(node.symlink_target(), Some(target));
            assert!(img.lookup_follow(path).unwrap().is_some());
        }
    }

    #[test]
    fn every_case_collides_and_controls_do_not() {
        let ascii = FoldProfile::ascii();
        for tc in generate_matrix() {
            let img = tc.image(ascii);
            let src = img.dir_ino("/src").unwrap();
            let names = img.walk(src);
            let colliding = |list: &[(String, u64)]| {
                list.iter().enumerate().any(|(i, (a, _))| {
                    list[i + 1..].iter().any(|(b, _)| {
                        a != b && ascii.fold_str(a) == ascii.fold_str(b)
                    })
                })
            };
            assert!(colliding(&names), "{}", tc.id);
            let ctl = tc.control_of();
            let img = ctl.image(ascii);
            let src = img.dir_ino("/src").unwrap();
            assert!(!colliding(&img.walk(src)), "{}", ctl.id);
        }
    }

    #[test]
    fn image_destination_must_be_empty_and_is_untouched_on_failure() {
        let mut img = FsImage::new();
        img.mkdir("/d", Metadata::new(0o755)).unwrap();
        img.write_file("/d/x", b"", Metadata::default()).unwrap();
        let tree = git_repo_fixture();
        assert!(matches!(
            materialize(&tree, Destination::Image { image: &mut img, root: "/d" }),
            Err(CasegenError::DestNotEmpty(_))
        ));
        // A fold-flagged destination rejects a colliding tree midway.
        img.mkdir_folded("/icase", Metadata::new(0o755), FoldProfile::ascii()).unwrap();
        let before = img.clone();
        let mut colliding = Tree::default();
        colliding.file("foo", "a", 0o644);
        colliding.dir("FOO", 0o755);
        assert!(matches!(
            materialize(&colliding, Destination::Image { image: &mut img, root: "/icase" }),
            Err(CasegenError::Vfs { .. })
        ));
        assert_eq!(img, before);
    }

    #[test]
    fn empty_tree_builds_nothing() {
        let mut img = FsImage::new();
        let before = img.clone();
        let report = materialize(&Tree::default(), Destination::Image { image: &mut img, root: "/" }).unwrap();
        assert!(report.created.is_empty());
        assert_eq!(img, before);
    }

    #[test]
    fn fixtures_build() {
        for tree in [git_repo_fixture(), rsync_traversal_fixture(), httpd_fixture(), httpd_adversary_fixture()] {
            let mut img = FsImage::new();
            materialize(&tree, Destination::Image { image: &mut img, root: "/" }).unwrap();
            img.check_invariants().unwrap();
        }
        let mut img = FsImage::new();
        materialize(&httpd_fixture(), Destination::Image { image: &mut img, root: "/" }).unwrap();
        let hidden = img.lookup("/www/hidden").unwrap().unwrap();
        assert_eq!(img.meta(hidden).unwrap().mode, 0o700);
        let protected = img.lookup("/www/protected").unwrap().unwrap();
        assert_eq!(img.meta(protected).unwrap().mode, 0o750);
    }

    #[test]
    fn host_materialize_builds_and_refuses_non_empty() {
        let dir = tempfile::tempdir().unwrap();
        let tc = case_by_id("hardlink-hardlink-d1-tf").unwrap();
        let report = materialize(&tc.tree, Destination::Host(dir.path())).unwrap();
        assert!(report.created.contains(&"src/ZZZ".to_string()));
        use std::os::unix::fs::MetadataExt;
        let a = fs::metadata(dir.path().join("src/hbar")).unwrap();
        let b = fs::metadata(dir.path().join("src/ZZZ")).unwrap();
        assert_eq!(a.ino(), b.ino());
        assert!(!dir.path().join(".collide-build").exists());
        assert!(matches!(
            materialize(&tc.tree, Destination::Host(dir.path())),
            Err(CasegenError::DestNotEmpty(_))
        ));
    }

    #[test]
    fn host_materialize_handles_special_files() {
        use std::os::unix::fs::FileTypeExt;
        let dir = tempfile::tempdir().unwrap();
        let tc = case_by_id("device-file-d1-tf").unwrap();
        let report = materialize(&tc.tree, Destination::Host(dir.path())).unwrap();
        let dev = dir.path().join("src/foo");
        if report.skipped.is_empty() {
            assert!(fs::symlink_metadata(&dev).unwrap().file_type().is_char_device());
        } else {
            assert_eq!(report.skipped, vec!["src/foo"]);
            assert!(!report.warnings.is_empty());
        }
        let dir = tempfile::tempdir().unwrap();
        materialize(&case_by_id("pipe-file-d2-tf").unwrap().tree, Destination::Host(dir.path())).unwrap();
        assert!(fs::symlink_metadata(dir.path().join("src/dir/foo")).unwrap().file_type().is_fifo());
        let mode = fs::metadata(dir.path().join("src/dir/foo")).unwrap();
        use std::os::unix::fs::PermissionsExt;
        assert_eq!(mode.permissions().mode() & 0o777, 0o666);
    }

    #[test]
    fn probe_detects_sensitive_host() {
        let dir = tempfile::tempdir().unwrap();
        assert!(probe_case_sensitive(dir.path()).unwrap());
        assert!(is_empty_dir(dir.path()).unwrap());
    }
}
