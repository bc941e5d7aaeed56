//! Deterministic text serialization of an image.
//!
//! Header line, then one tab-separated line per inode in inode order:
//! `ino kind mode uid gid mtime nlink sha256 extra paths...`. Paths are
//! sorted and escaped so that every line stays on one line.

use std::fmt::Write as _;

use sha2::{Digest, Sha256};

use super::{FsImage, NodeData};

/// Escapes backslash, tab, newline and other control characters.
pub fn escape_path(path: &str) -> String {
    let mut out = String::with_capacity(path.len());
    for c in path.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\t' => out.push_str("\\t"),
            '\n' => out.push_str("\\n"),
            c if (c as u32) < 0x20 || c == '\u{7f}' => {
                let _ = write!(out, "\\x{:02x}", c as u32);
            }
            c => out.push(c),
        }
    }
    out
}

impl FsImage {
    pub fn dump(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "# collide-image device={} root={} next={}",
            self.device, self.root, self.next_ino
        );
        let mut paths: std::collections::BTreeMap<u64, Vec<String>> = Default::default();
        paths.entry(self.root).or_default().push("/".into());
        for (path, ino) in self.walk(self.root) {
            paths.entry(ino).or_default().push(path);
        }
        for (ino, node) in &self.nodes {
            let digest = hex::encode(Sha256::digest(node.payload()));
            let mut extra: Vec<String> = Vec::new();
            match &node.data {
                NodeData::Dir(d) => extra.push(format!(
                    "fold={}",
                    d.fold.map(|p| p.id().as_str()).unwrap_or("-")
                )),
                NodeData::Device { major, minor, .. } => extra.push(format!("dev={major},{minor}")),
                _ => {}
            }
            for (name, value) in &node.meta.xattrs {
                extra.push(format!(
                    "xattr={}:{}",
                    escape_path(name),
                    hex::encode(Sha256::digest(value))
                ));
            }
            let extra = if extra.is_empty() { "-".to_string() } else { extra.join(";") };
            let mut names = paths.remove(ino).unwrap_or_default();
            names.sort();
            let names: Vec<String> = names.iter().map(|p| escape_path(p)).collect();
            let _ = writeln!(
                out,
                "{ino}\t{}\t{:04o}\t{}\t{}\t{}\t{}\t{digest}\t{extra}\t{}",
                node.kind().as_str(),
                node.meta.mode,
                node.meta.uid,
                node.meta.gid,
                node.meta.mtime,
                node.nlink,
                names.join("\t")
            );
        }
        out
    }
}
