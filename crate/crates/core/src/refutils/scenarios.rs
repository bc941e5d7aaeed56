//! End-to-end incidents replayed on images: a repository checkout that
//! plants a hook, a sync that writes through a planted link, a web-root
//! migration that loosens permissions, and a package install that
//! silently replaces another package's file.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{run_model, CopyOutcome, ModelError, Session, Terminated, UtilityId, UtilityModel, DEFAULT_STEP_LIMIT};
use crate::casegen::{self, Destination, Tree};
use crate::fold::FoldProfile;
use crate::vfs::{CreateOptions, FsImage, Metadata, NodeKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioId {
    GitCve,
    RsyncTraversal,
    HttpdMigration,
    DpkgDb,
}

impl ScenarioId {
    pub const ALL: [ScenarioId; 4] = [
        ScenarioId::GitCve,
        ScenarioId::RsyncTraversal,
        ScenarioId::HttpdMigration,
        ScenarioId::DpkgDb,
    ];

    pub fn token(self) -> &'static str {
        match self {
            ScenarioId::GitCve => "git_cve",
            ScenarioId::RsyncTraversal => "rsync_traversal",
            ScenarioId::HttpdMigration => "httpd_migration",
            ScenarioId::DpkgDb => "dpkg_db",
        }
    }
}

impl fmt::Display for ScenarioId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

impl FromStr for ScenarioId {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self, ModelError> {
        ScenarioId::ALL
            .into_iter()
            .find(|id| id.token() == s)
            .ok_or_else(|| ModelError::UnknownScenario(s.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assertion {
    pub description: String,
    pub passed: bool,
}

#[derive(Clone, Debug)]
pub struct ScenarioOutcome {
    pub id: ScenarioId,
    pub before: FsImage,
    pub outcome: CopyOutcome,
    pub assertions: Vec<Assertion>,
}

impl ScenarioOutcome {
    pub fn all_passed(&self) -> bool {
        self.assertions.iter().all(|a| a.passed)
    }
}

fn check(out: &mut Vec<Assertion>, description: &str, passed: bool) {
    out.push(Assertion {
        description: description.to_string(),
        passed,
    });
}

fn file_at(img: &FsImage, path: &str) -> Option<(Vec<u8>, Metadata)> {
    let ino = img.lookup_follow(path).ok().flatten()?;
    let node = img.node(ino)?;
    (node.kind() == NodeKind::File).then(|| (node.payload().to_vec(), node.meta.clone()))
}

fn mode_at(img: &FsImage, path: &str) -> Option<u32> {
    let ino = img.lookup(path).ok().flatten()?;
    img.node(ino).map(|n| n.meta.mode)
}

fn build(tree: &Tree, device: &str) -> Result<FsImage, ModelError> {
    let mut img = FsImage::with_device(device);
    casegen::materialize(tree, Destination::Image { image: &mut img, root: "/" })
        .map_err(|e| match e {
            casegen::CasegenError::Vfs { source, .. } => ModelError::Vfs(source),
            other => ModelError::SourceMissing(other.to_string()),
        })?;
    Ok(img)
}

pub fn run_scenario(id: ScenarioId) -> Result<ScenarioOutcome, ModelError> {
    match id {
        ScenarioId::GitCve => git_cve(),
        ScenarioId::RsyncTraversal => rsync_traversal(),
        ScenarioId::HttpdMigration => httpd_migration(),
        ScenarioId::DpkgDb => dpkg_db(),
    }
}

fn session_outcome(s: Session) -> CopyOutcome {
    let terminated = if s.has_errors() {
        Terminated::ErrorReported
    } else {
        Terminated::Ok
    };
    CopyOutcome {
        utility: None,
        final_image: s.img,
        events: s.events,
        terminated,
        trace: s.trace,
        no_follow_directive: false,
    }
}

/// Checkout of the repository into a folding work tree, in index order
/// (`A/...` before `a`), with the hook-named file's write delayed until
/// after the symlink is in place.
fn git_cve() -> Result<ScenarioOutcome, ModelError> {
    let mut img = build(&casegen::git_repo_fixture(), "00:39")?;
    img.mkdir_folded("/work", Metadata::new(0o755), FoldProfile::simple_fold())?;
    let before = img.clone();
    let payload = file_at(&img, "/repo/A/post-checkout")
        .map(|(c, _)| c)
        .ok_or_else(|| ModelError::SourceMissing("/repo/A/post-checkout".into()))?;

    let mut s = Session::new(img, "git", DEFAULT_STEP_LIMIT);
    let dir = Metadata::new(0o755);
    s.make_node("/work/.git", crate::vfs::NewNode::Dir, &dir)?;
    s.make_node("/work/.git/hooks", crate::vfs::NewNode::Dir, &dir)?;
    s.make_node("/work/A", crate::vfs::NewNode::Dir, &dir)?;
    for (name, body) in [("file1", "one"), ("file2", "two")] {
        s.write_file(
            &format!("/work/A/{name}"),
            body.as_bytes(),
            &Metadata::new(0o644),
            CreateOptions::exclusive(),
        )?;
    }
    // Index entry `a`: the name is occupied (by `A`), so the old entry is
    // removed before the link is created.
    if s.lstat("/work/a").is_some() {
        s.remove_tree("/work/a")?;
    }
    s.make_node("/work/a", crate::vfs::NewNode::Symlink(".git/hooks".into()), &Metadata::new(0o777))?;
    // Delayed entry, written by path: `A` now resolves to the link.
    let ino = s.write_file(
        "/work/A/post-checkout",
        &payload,
        &Metadata::new(0o755),
        CreateOptions::default(),
    )?;
    s.set_meta_fd(ino, &Metadata::new(0o755))?;
    let outcome = session_outcome(s);

    let img = &outcome.final_image;
    let mut a = Vec::new();
    let hook = file_at(img, "/work/.git/hooks/post-checkout");
    check(
        &mut a,
        ".git/hooks/post-checkout holds the adversary script",
        hook.as_ref().is_some_and(|(c, _)| *c == payload),
    );
    check(
        &mut a,
        ".git/hooks/post-checkout is executable",
        hook.as_ref().is_some_and(|(_, m)| m.mode & 0o111 != 0),
    );
    check(
        &mut a,
        "work tree entry a is a symlink to .git/hooks",
        img.lookup("/work/a")
            .ok()
            .flatten()
            .and_then(|i| img.node(i))
            .and_then(|n| n.symlink_target())
            == Some(".git/hooks"),
    );
    Ok(ScenarioOutcome {
        id: ScenarioId::GitCve,
        before,
        outcome,
        assertions: a,
    })
}

fn rsync_traversal() -> Result<ScenarioOutcome, ModelError> {
    let mut img = build(&casegen::rsync_traversal_fixture(), "00:39")?;
    img.mkdir_folded("/dst", Metadata::new(0o755), FoldProfile::full_fold())?;
    let before = img.clone();
    let outcome = run_model(&UtilityModel::new(UtilityId::Rsync), &img, "/src", "/dst", None)?;
    let out = &outcome.final_image;
    let mut a = Vec::new();
    check(
        &mut a,
        "/tmp/confidential was created through the planted link",
        file_at(out, "/tmp/confidential").is_some_and(|(c, _)| c == b"confidential"),
    );
    check(
        &mut a,
        "/tmp/confidential is a real file outside the destination",
        out.lookup("/tmp/confidential")
            .ok()
            .flatten()
            .and_then(|i| out.node(i))
            .is_some_and(|n| n.kind() == NodeKind::File),
    );
    check(
        &mut a,
        "/tmp did not exist as a destination of the copy beforehand",
        !before.exists("/tmp/confidential"),
    );
    Ok(ScenarioOutcome {
        id: ScenarioId::RsyncTraversal,
        before,
        outcome,
        assertions: a,
    })
}

fn httpd_migration() -> Result<ScenarioOutcome, ModelError> {
    let mut img = build(&casegen::httpd_adversary_fixture(), "00:39")?;
    img.mkdir("/new", Metadata::new(0o755))?;
    img.mkdir_folded("/new/www", Metadata::new(0o755), FoldProfile::full_fold())?;
    let before = img.clone();
    let outcome = run_model(&UtilityModel::new(UtilityId::Tar), &img, "/www", "/new/www", None)?;
    let out = &outcome.final_image;
    let mut a = Vec::new();
    check(
        &mut a,
        "hidden/ mode went from 700 to 755",
        mode_at(&before, "/www/hidden") == Some(0o700) && mode_at(out, "/new/www/hidden") == Some(0o755),
    );
    check(
        &mut a,
        "protected/.htaccess is empty",
        file_at(out, "/new/www/protected/.htaccess").is_some_and(|(c, _)| c.is_empty()),
    );
    check(
        &mut a,
        "hidden/secret.txt is now world-traversable",
        file_at(out, "/new/www/hidden/secret.txt").is_some(),
    );
    Ok(ScenarioOutcome {
        id: ScenarioId::HttpdMigration,
        before,
        outcome,
        assertions: a,
    })
}

/// Two packages installed into a folding tree. The ownership database is
/// keyed by exact path, so the second package's `Makefile` passes the
/// conflict check and replaces the first package's `makefile`.
fn dpkg_db() -> Result<ScenarioOutcome, ModelError> {
    let mut img = FsImage::with_device("00:39");
    img.mkdir_folded("/opt", Metadata::new(0o755), FoldProfile::full_fold())?;
    img.mkdir("/opt/app", Metadata::new(0o755))?;
    let before = img.clone();
    let mut s = Session::new(img, "dpkg", DEFAULT_STEP_LIMIT);
    let mut db: BTreeMap<String, String> = BTreeMap::new();
    let mut bytewise_conflicts = Vec::new();
    let mut folded_conflicts = Vec::new();
    let fold = FoldProfile::full_fold();

    let packages = [
        ("pkg-a", "/opt/app/makefile", "all:\n\techo a\n"),
        ("pkg-b", "/opt/app/Makefile", "all:\n\techo b\n"),
    ];
    for (pkg, path, body) in packages {
        if db.get(path).is_some_and(|owner| owner != pkg) {
            bytewise_conflicts.push(path.to_string());
            continue;
        }
        if db
            .keys()
            .any(|p| p != path && fold.fold_str(p) == fold.fold_str(path))
        {
            folded_conflicts.push(path.to_string());
        }
        let tmp = format!("{path}.dpkg-new");
        let ino = s.write_file(&tmp, body.as_bytes(), &Metadata::new(0o644), CreateOptions::exclusive())?;
        s.set_meta_fd(ino, &Metadata::new(0o644))?;
        s.rename(&tmp, path)?;
        db.insert(path.to_string(), pkg.to_string());
    }
    let outcome = session_outcome(s);
    let out = &outcome.final_image;
    let mut a = Vec::new();
    check(&mut a, "exact-path ownership check found no conflict", bytewise_conflicts.is_empty());
    check(
        &mut a,
        "a fold-aware ownership check would have flagged Makefile",
        folded_conflicts == ["/opt/app/Makefile"],
    );
    check(
        &mut a,
        "the installed makefile now holds pkg-b's content",
        file_at(out, "/opt/app/makefile").is_some_and(|(c, _)| c == b"all:\n\techo b\n"),
    );
    check(
        &mut a,
        "the directory still lists the original spelling only",
        out.dir_ino("/opt/app")
            .and_then(|d| out.readdir(d))
            .is_ok_and(|names| names == ["makefile"]),
    );
    check(
        &mut a,
        "the database claims two files that are one",
        db.len() == 2,
    );
    Ok(ScenarioOutcome {
        id: ScenarioId::DpkgDb,
        before,
        outcome,
        assertions: a,
    })
}
