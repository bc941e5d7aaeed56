//! Runs a real utility against a case-insensitive host mount and compares
//! its classification with the model's.
//!
//! The source tree is built in a case-sensitive scratch directory. The
//! destination and a copy of the support tree live on the mount, so
//! relative symlinks in the copied tree resolve next to the destination
//! exactly as they do in the model image.

use std::fs;
use std::io::{self, Write};
use std::os::unix::fs::{FileTypeExt, MetadataExt};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use wait_timeout::ChildExt;

use super::{classify_with, format_codes, Classification, ClassifyOptions, HarnessError};
use crate::casegen::{self, CasegenError, Destination, TestCase};
use crate::fold::FoldProfile;
use crate::refutils::{run_model, CopyOutcome, Event, EventResult, PromptAnswer, Terminated, UtilityId, UtilityModel};
use crate::vfs::{self, FsImage, Metadata, NewNode, VfsError};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);
pub const MOUNT_ENV: &str = "COLLIDE_MOUNT";
const LOCK_NAME: &str = ".collide-live.lock";

#[derive(Clone, Debug)]
pub struct LiveConfig {
    pub mount: PathBuf,
    pub timeout: Duration,
    /// Answer typed at an overwrite prompt.
    pub prompt_answer: PromptAnswer,
    pub classify: ClassifyOptions,
}

impl LiveConfig {
    pub fn new(mount: impl Into<PathBuf>) -> Self {
        LiveConfig {
            mount: mount.into(),
            timeout: DEFAULT_TIMEOUT,
            prompt_answer: PromptAnswer::Skip,
            classify: ClassifyOptions::default(),
        }
    }

    /// Reads the mount from `COLLIDE_MOUNT`; `None` when unset or empty.
    pub fn from_env() -> Option<Self> {
        std::env::var_os(MOUNT_ENV)
            .filter(|v| !v.is_empty())
            .map(LiveConfig::new)
    }
}

#[derive(Debug, Error)]
pub enum LiveError {
    #[error("{0} is not a case-insensitive directory")]
    MountNotCaseInsensitive(String),
    #[error("utility {0} is not installed")]
    UtilityMissing(String),
    #[error("another live run holds {0}")]
    Locked(String),
    #[error("{context}: {source}")]
    Io { context: String, source: io::Error },
    #[error(transparent)]
    Casegen(#[from] CasegenError),
    #[error(transparent)]
    Vfs(#[from] VfsError),
    #[error(transparent)]
    Harness(#[from] HarnessError),
}

impl LiveError {
    /// Environment problems mark a run as skipped rather than failed.
    pub fn is_environmental(&self) -> bool {
        matches!(
            self,
            LiveError::MountNotCaseInsensitive(_) | LiveError::UtilityMissing(_) | LiveError::Locked(_)
        )
    }
}

fn io_ctx(context: impl Into<String>) -> impl FnOnce(io::Error) -> LiveError {
    let context = context.into();
    move |source| LiveError::Io { context, source }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Discrepancy {
    pub field: String,
    pub model: String,
    pub live: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct LiveReport {
    pub case: String,
    pub utility: UtilityId,
    pub live: Classification,
    pub model: Option<Classification>,
    pub discrepancies: Vec<Discrepancy>,
    pub exit_status: Option<i32>,
    pub stderr: String,
}

/// Removes the lock file when the run ends.
struct MountLock(PathBuf);

impl MountLock {
    fn acquire(mount: &Path) -> Result<Self, LiveError> {
        let path = mount.join(LOCK_NAME);
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(MountLock(path))
            }
            Err(e) if e.kind() == io::ErrorKind::AlreadyExists => Err(LiveError::Locked(path.display().to_string())),
            Err(e) => Err(io_ctx(path.display().to_string())(e)),
        }
    }
}

impl Drop for MountLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

/// Deletes a scratch directory when the run ends.
struct Scratch(PathBuf);

impl Drop for Scratch {
    fn drop(&mut self) {
        let _ = fs::remove_dir_all(&self.0);
    }
}

fn find_program(name: &str) -> Option<PathBuf> {
    let path = std::env::var_os("PATH")?;
    std::env::split_paths(&path)
        .map(|d| d.join(name))
        .find(|p| p.metadata().is_ok_and(|m| m.is_file() && m.mode() & 0o111 != 0))
}

fn programs(utility: UtilityId) -> &'static [&'static str] {
    match utility {
        UtilityId::Tar => &["tar"],
        UtilityId::Zip => &["zip", "unzip"],
        UtilityId::Cp | UtilityId::CpStar => &["cp"],
        UtilityId::Rsync => &["rsync"],
        UtilityId::Dropbox => &["dropbox"],
    }
}

/// Fails unless `mount` exists and folds case.
pub fn check_mount(mount: &Path) -> Result<(), LiveError> {
    let not_icase = || LiveError::MountNotCaseInsensitive(mount.display().to_string());
    if !mount.is_dir() {
        return Err(not_icase());
    }
    match casegen::probe_case_sensitive(mount) {
        Ok(false) => Ok(()),
        _ => Err(not_icase()),
    }
}

struct Run {
    status: Option<i32>,
    stderr: String,
    stdout: String,
    timed_out: bool,
}

fn run_cmd(cmd: &mut Command, stdin: &[u8], timeout: Duration) -> Result<Run, LiveError> {
    let desc = format!("{cmd:?}");
    let mut child = cmd
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .map_err(io_ctx(desc.clone()))?;
    if let Some(mut input) = child.stdin.take() {
        // The utility may exit without reading; a broken pipe is fine.
        let _ = input.write_all(stdin);
    }
    let status = child.wait_timeout(timeout).map_err(io_ctx(desc.clone()))?;
    let timed_out = status.is_none();
    if timed_out {
        let _ = child.kill();
    }
    let output = child.wait_with_output().map_err(io_ctx(desc))?;
    Ok(Run {
        status: if timed_out { None } else { output.status.code() },
        stderr: String::from_utf8_lossy(&output.stderr).into_owned(),
        stdout: String::from_utf8_lossy(&output.stdout).into_owned(),
        timed_out,
    })
}

fn answer_text(answer: PromptAnswer) -> &'static [u8] {
    match answer {
        PromptAnswer::Overwrite => b"y\n",
        PromptAnswer::Skip => b"n\n",
        PromptAnswer::Rename => b"r\nrenamed\n",
        PromptAnswer::Abort => b"N\n",
    }
}

/// Executes the utility; returns the runs in order (archive tools run twice).
fn invoke(utility: UtilityId, tc: &TestCase, src: &Path, dst: &Path, scratch: &Path, cfg: &LiveConfig) -> Result<Vec<Run>, LiveError> {
    let t = cfg.timeout;
    let mut runs = Vec::new();
    match utility {
        UtilityId::Tar => {
            let archive = scratch.join("case.tar");
            fs::create_dir(dst).map_err(io_ctx(dst.display().to_string()))?;
            runs.push(run_cmd(Command::new("tar").arg("-cf").arg(&archive).arg("-C").arg(src).arg("."), b"", t)?);
            runs.push(run_cmd(Command::new("tar").arg("-xf").arg(&archive).arg("-C").arg(dst), b"", t)?);
        }
        UtilityId::Zip => {
            let archive = scratch.join("case.zip");
            fs::create_dir(dst).map_err(io_ctx(dst.display().to_string()))?;
            runs.push(run_cmd(
                Command::new("zip").current_dir(src).arg("-r").arg("--symlinks").arg(&archive).arg("."),
                b"",
                t,
            )?);
            runs.push(run_cmd(
                Command::new("unzip").arg(&archive).arg("-d").arg(dst),
                answer_text(cfg.prompt_answer),
                t,
            )?);
        }
        UtilityId::Cp => {
            runs.push(run_cmd(Command::new("cp").arg("-a").arg(src).arg(dst), b"", t)?);
        }
        UtilityId::CpStar => {
            fs::create_dir(dst).map_err(io_ctx(dst.display().to_string()))?;
            // Shell expansion of `src/*`, in build order.
            let top: Vec<PathBuf> = tc
                .tree
                .steps
                .iter()
                .filter_map(|s| s.path.strip_prefix("src/"))
                .filter(|rel| !rel.contains('/'))
                .map(|rel| src.join(rel))
                .collect();
            runs.push(run_cmd(Command::new("cp").arg("-a").args(&top).arg(dst), b"", t)?);
        }
        UtilityId::Rsync => {
            let mut s = src.as_os_str().to_owned();
            s.push("/");
            let mut d = dst.as_os_str().to_owned();
            d.push("/");
            runs.push(run_cmd(Command::new("rsync").arg("-aH").arg(s).arg(d), b"", t)?);
        }
        UtilityId::Dropbox => return Err(LiveError::UtilityMissing("dropbox".into())),
    }
    Ok(runs)
}

fn host_meta(m: &fs::Metadata) -> Metadata {
    Metadata::new(m.mode() & 0o777)
        .with_owner(m.uid(), m.gid())
        .with_mtime(m.mtime())
}

/// Copies the host tree at `host` into the existing image directory `at`.
/// Entries are read in name order; hardlinks are preserved within the load.
pub fn load_host_tree(img: &mut FsImage, host: &Path, at: &str) -> Result<(), LiveError> {
    let mut seen = std::collections::HashMap::new();
    load_dir(img, host, at, &mut seen)
}

fn load_dir(
    img: &mut FsImage,
    host: &Path,
    at: &str,
    seen: &mut std::collections::HashMap<(u64, u64), String>,
) -> Result<(), LiveError> {
    let ctx = || host.display().to_string();
    let mut names: Vec<_> = fs::read_dir(host)
        .map_err(io_ctx(ctx()))?
        .map(|e| e.map(|e| e.file_name()))
        .collect::<Result<_, _>>()
        .map_err(io_ctx(ctx()))?;
    names.sort();
    for name in names {
        let Some(name_str) = name.to_str() else { continue };
        if name_str == LOCK_NAME {
            continue;
        }
        let path = host.join(&name);
        let m = fs::symlink_metadata(&path).map_err(io_ctx(path.display().to_string()))?;
        let target = vfs::join(at, name_str);
        let ft = m.file_type();
        if !ft.is_dir() && m.nlink() > 1 {
            if let Some(first) = seen.get(&(m.dev(), m.ino())) {
                img.link(first, &target, vfs::CreateOptions::exclusive())?;
                continue;
            }
            seen.insert((m.dev(), m.ino()), target.clone());
        }
        let spec = if ft.is_dir() {
            NewNode::Dir
        } else if ft.is_symlink() {
            let t = fs::read_link(&path).map_err(io_ctx(path.display().to_string()))?;
            NewNode::Symlink(t.to_string_lossy().into_owned())
        } else if ft.is_fifo() {
            NewNode::Pipe
        } else if ft.is_char_device() || ft.is_block_device() {
            let rdev = m.rdev();
            NewNode::Device {
                major: rustix::fs::major(rdev),
                minor: rustix::fs::minor(rdev),
            }
        } else {
            NewNode::File(fs::read(&path).map_err(io_ctx(path.display().to_string()))?)
        };
        img.create(at, name_str, spec, host_meta(&m), vfs::CreateOptions::exclusive())?;
        if ft.is_dir() {
            load_dir(img, &path, &target, seen)?;
        }
    }
    Ok(())
}

/// The case image with `/outside` and `/dst` replaced by host snapshots.
fn snapshot(tc: &TestCase, outside: &Path, dst: &Path, device: &str) -> Result<FsImage, LiveError> {
    let mut img = FsImage::with_device(device);
    casegen::materialize(&tc.tree, Destination::Image { image: &mut img, root: "/" })?;
    img.remove_tree("/outside")?;
    img.mkdir("/outside", Metadata::new(0o755))?;
    load_host_tree(&mut img, outside, "/outside")?;
    img.mkdir_folded("/dst", Metadata::new(0o755), FoldProfile::full_fold())?;
    if dst.is_dir() {
        load_host_tree(&mut img, dst, "/dst")?;
    }
    Ok(img)
}

fn copy_plain(from: &Path, to: &Path) -> Result<(), LiveError> {
    fs::create_dir(to).map_err(io_ctx(to.display().to_string()))?;
    for entry in fs::read_dir(from).map_err(io_ctx(from.display().to_string()))? {
        let entry = entry.map_err(io_ctx(from.display().to_string()))?;
        let (src, dst) = (entry.path(), to.join(entry.file_name()));
        let ft = entry.file_type().map_err(io_ctx(src.display().to_string()))?;
        if ft.is_dir() {
            copy_plain(&src, &dst)?;
        } else if ft.is_file() {
            fs::copy(&src, &dst).map_err(io_ctx(src.display().to_string()))?;
        }
    }
    Ok(())
}

/// Runs `utility` on `tc` against `cfg.mount` and classifies the effects.
pub fn run_live(utility: UtilityId, tc: &TestCase, cfg: &LiveConfig) -> Result<LiveReport, LiveError> {
    check_mount(&cfg.mount)?;
    run_unchecked(utility, tc, cfg)
}

/// [`run_live`] without the folding check; on a sensitive directory the
/// run doubles as a no-collision baseline.
pub(super) fn run_unchecked(utility: UtilityId, tc: &TestCase, cfg: &LiveConfig) -> Result<LiveReport, LiveError> {
    for p in programs(utility) {
        if find_program(p).is_none() {
            return Err(LiveError::UtilityMissing((*p).to_string()));
        }
    }
    let _lock = MountLock::acquire(&cfg.mount)?;

    let tag = format!("collide-{}-{}", std::process::id(), tc.id);
    let scratch = Scratch(std::env::temp_dir().join(&tag));
    let _ = fs::remove_dir_all(&scratch.0);
    fs::create_dir_all(&scratch.0).map_err(io_ctx(scratch.0.display().to_string()))?;
    let build = scratch.0.join("build");
    fs::create_dir(&build).map_err(io_ctx(build.display().to_string()))?;
    casegen::materialize(&tc.tree, Destination::Host(&build))?;

    let run_dir = Scratch(cfg.mount.join(&tag));
    let _ = fs::remove_dir_all(&run_dir.0);
    fs::create_dir(&run_dir.0).map_err(io_ctx(run_dir.0.display().to_string()))?;
    let outside = run_dir.0.join("outside");
    copy_plain(&build.join("outside"), &outside)?;
    let dst = run_dir.0.join("dst");

    let device = fs::metadata(&cfg.mount)
        .map(|m| format!("{:02x}:{:02x}", rustix::fs::major(m.dev()), rustix::fs::minor(m.dev())))
        .map_err(io_ctx(cfg.mount.display().to_string()))?;
    let before = snapshot(tc, &outside, &dst, &device)?;
    let runs = invoke(utility, tc, &build.join("src"), &dst, &scratch.0, cfg)?;
    let after = snapshot(tc, &outside, &dst, &device)?;

    let mut events = Vec::new();
    let mut terminated = Terminated::Ok;
    let last = runs.last().expect("every utility runs at least once");
    if runs.iter().any(|r| r.timed_out) {
        terminated = Terminated::StepLimitHit;
        events.push(Event {
            op: utility.program().into(),
            path: "/dst".into(),
            result: EventResult::StepLimit { steps: 0 },
        });
    } else if utility == UtilityId::Zip && last.stdout.contains("replace ") {
        terminated = Terminated::UserPrompt;
        events.push(Event {
            op: "prompt".into(),
            path: "/dst".into(),
            result: EventResult::Prompted {
                answer: Some(cfg.prompt_answer),
            },
        });
    } else if runs.iter().any(|r| r.status != Some(0)) {
        terminated = Terminated::ErrorReported;
        for r in runs.iter().filter(|r| r.status != Some(0)) {
            events.push(Event {
                op: utility.program().into(),
                path: "/dst".into(),
                result: EventResult::Error {
                    message: r.stderr.lines().next().unwrap_or("nonzero exit").to_string(),
                },
            });
        }
    }
    let model = UtilityModel::new(utility);
    let outcome = CopyOutcome {
        utility: Some(utility),
        final_image: after.clone(),
        events,
        terminated,
        trace: Vec::new(),
        no_follow_directive: model.no_follow_directive(),
    };
    let live = classify_with(&before, &after, "/src", "/dst", &outcome, cfg.classify)?;

    let model_cls = run_model(&model, &tc.image(FoldProfile::full_fold()), "/src", "/dst", Some(&[cfg.prompt_answer]))
        .ok()
        .and_then(|o| {
            classify_with(&tc.image(FoldProfile::full_fold()), &o.final_image, "/src", "/dst", &o, cfg.classify).ok()
        });
    let mut discrepancies = Vec::new();
    match &model_cls {
        Some(m) if m.codes != live.codes => discrepancies.push(Discrepancy {
            field: "codes".into(),
            model: format_codes(&m.codes),
            live: format_codes(&live.codes),
        }),
        Some(_) => {}
        None => discrepancies.push(Discrepancy {
            field: "codes".into(),
            model: "unclassifiable".into(),
            live: format_codes(&live.codes),
        }),
    }
    Ok(LiveReport {
        case: tc.id.clone(),
        utility,
        live,
        model: model_cls,
        discrepancies,
        exit_status: last.status,
        stderr: runs.iter().map(|r| r.stderr.as_str()).collect::<Vec<_>>().join(""),
    })
}
