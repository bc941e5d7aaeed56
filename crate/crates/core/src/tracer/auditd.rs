//! Best-effort rewrite of raw auditd `SYSCALL`/`PATH` records into the
//! normalized trace format. Unknown syscalls and unparseable events are
//! dropped; nothing downstream depends on this converter.

use std::collections::BTreeMap;

use super::{OpClass, Outcome, TraceRecord};

#[derive(Default)]
struct Event {
    syscall: Option<String>,
    success: Option<bool>,
    pid: Option<u32>,
    comm: Option<String>,
    paths: Vec<(u32, BTreeMap<String, String>)>,
}

/// x86-64 syscall numbers for the calls the detector cares about.
fn syscall_name(raw: &str) -> Option<&'static str> {
    let name = match raw {
        "2" | "open" => "open",
        "257" | "openat" => "openat",
        "4" | "stat" => "stat",
        "6" | "lstat" => "lstat",
        "262" | "newfstatat" => "newfstatat",
        "83" | "mkdir" => "mkdir",
        "258" | "mkdirat" => "mkdirat",
        "87" | "unlink" => "unlink",
        "263" | "unlinkat" => "unlinkat",
        "84" | "rmdir" => "rmdir",
        "82" | "rename" => "rename",
        "264" | "renameat" => "renameat",
        "316" | "renameat2" => "renameat2",
        "88" | "symlink" => "symlink",
        "266" | "symlinkat" => "symlinkat",
        "86" | "link" => "link",
        "265" | "linkat" => "linkat",
        "133" | "mknod" => "mknod",
        "259" | "mknodat" => "mknodat",
        "90" | "chmod" => "chmod",
        "268" | "fchmodat" => "fchmodat",
        "92" | "chown" => "chown",
        "94" | "lchown" => "lchown",
        "260" | "fchownat" => "fchownat",
        "188" | "setxattr" => "setxattr",
        "189" | "lsetxattr" => "lsetxattr",
        _ => return None,
    };
    Some(name)
}

/// Splits `key=value` tokens, honoring double quotes. Unquoted `name`
/// values are hex-encoded by auditd and are decoded here.
fn fields(line: &str) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    let mut rest = line;
    while let Some(eq) = rest.find('=') {
        let key = rest[..eq].rsplit(' ').next().unwrap_or("");
        let after = &rest[eq + 1..];
        let (value, tail) = if let Some(stripped) = after.strip_prefix('"') {
            match stripped.find('"') {
                Some(end) => (stripped[..end].to_string(), &stripped[end + 1..]),
                None => (stripped.to_string(), ""),
            }
        } else {
            let end = after.find(' ').unwrap_or(after.len());
            let token = &after[..end];
            let value = if key == "name" { decode_hex(token) } else { token.to_string() };
            (value, &after[end..])
        };
        if !key.is_empty() {
            out.insert(key.to_string(), value);
        }
        rest = tail;
    }
    out
}

fn decode_hex(token: &str) -> String {
    if token.len().is_multiple_of(2) && token.bytes().all(|b| b.is_ascii_hexdigit()) {
        let bytes: Option<Vec<u8>> = (0..token.len())
            .step_by(2)
            .map(|i| u8::from_str_radix(&token[i..i + 2], 16).ok())
            .collect();
        if let Some(b) = bytes {
            if let Ok(s) = String::from_utf8(b) {
                return s;
            }
        }
    }
    token.to_string()
}

fn msg_id(line: &str) -> Option<u64> {
    let start = line.find("msg=audit(")? + "msg=audit(".len();
    let end = start + line[start..].find(')')?;
    line[start..end].rsplit(':').next()?.parse().ok()
}

/// Converts an auditd log into normalized records, ordered by event id.
pub fn adapt_auditd(text: &str) -> Vec<TraceRecord> {
    let mut events: BTreeMap<u64, Event> = BTreeMap::new();
    for line in text.lines() {
        let Some(id) = msg_id(line) else { continue };
        let f = fields(line);
        let ev = events.entry(id).or_default();
        match f.get("type").map(String::as_str) {
            Some("SYSCALL") => {
                ev.syscall = f.get("syscall").cloned();
                ev.success = f.get("success").map(|s| s == "yes");
                ev.pid = f.get("pid").and_then(|s| s.parse().ok());
                ev.comm = f.get("comm").cloned();
            }
            Some("PATH") => {
                let item = f.get("item").and_then(|s| s.parse().ok()).unwrap_or(0);
                ev.paths.push((item, f));
            }
            _ => {}
        }
    }

    let mut out = Vec::new();
    for (id, ev) in events {
        let Some(syscall) = ev.syscall.as_deref().and_then(syscall_name) else {
            continue;
        };
        let outcome = if ev.success.unwrap_or(false) {
            Outcome::Success
        } else {
            Outcome::Failure
        };
        for (_, p) in &ev.paths {
            let nametype = p.get("nametype").map(String::as_str).unwrap_or("NORMAL");
            let op_class = match (nametype, syscall) {
                ("PARENT", _) => continue,
                ("CREATE", s) if s.starts_with("rename") => OpClass::Rename,
                ("CREATE", _) => OpClass::Create,
                ("DELETE", _) => OpClass::Delete,
                _ => OpClass::Use,
            };
            let Some(path) = p.get("name") else { continue };
            let inode = p.get("inode").and_then(|s| s.parse().ok()).unwrap_or(0);
            out.push(TraceRecord {
                seq: id,
                op_class,
                syscall: syscall.to_string(),
                program: ev.comm.clone().unwrap_or_else(|| "?".into()),
                pid: ev.pid.unwrap_or(0),
                device: p.get("dev").cloned().unwrap_or_else(|| "00:00".into()),
                inode,
                path: path.clone(),
                dirfd: None,
                outcome,
            });
        }
    }
    out
}
