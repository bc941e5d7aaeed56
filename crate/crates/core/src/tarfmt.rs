//! Minimal tar reader (ustar, pax, GNU long names) and ustar/pax writer.

use std::collections::BTreeMap;

use thiserror::Error;

const BLOCK: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MemberKind {
    File,
    Hardlink,
    Symlink,
    CharDevice,
    BlockDevice,
    Dir,
    Fifo,
}

impl MemberKind {
    pub fn from_typeflag(flag: u8) -> Option<MemberKind> {
        Some(match flag {
            b'0' | b'\0' | b'7' => MemberKind::File,
            b'1' => MemberKind::Hardlink,
            b'2' => MemberKind::Symlink,
            b'3' => MemberKind::CharDevice,
            b'4' => MemberKind::BlockDevice,
            b'5' => MemberKind::Dir,
            b'6' => MemberKind::Fifo,
            _ => return None,
        })
    }

    pub fn typeflag(self) -> u8 {
        match self {
            MemberKind::File => b'0',
            MemberKind::Hardlink => b'1',
            MemberKind::Symlink => b'2',
            MemberKind::CharDevice => b'3',
            MemberKind::BlockDevice => b'4',
            MemberKind::Dir => b'5',
            MemberKind::Fifo => b'6',
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TarMember {
    /// Member path with any trailing `/` removed.
    pub path: String,
    pub typeflag: u8,
    /// `None` for typeflags this reader does not understand.
    pub kind: Option<MemberKind>,
    pub mode: u32,
    pub uid: u64,
    pub gid: u64,
    pub mtime: i64,
    pub linkname: String,
    pub devmajor: u32,
    pub devminor: u32,
    pub data: Vec<u8>,
    /// Byte offset of the member's header.
    pub offset: usize,
}

impl TarMember {
    pub fn new(path: &str, kind: MemberKind) -> TarMember {
        TarMember {
            path: path.to_string(),
            typeflag: kind.typeflag(),
            kind: Some(kind),
            mode: if kind == MemberKind::Dir { 0o755 } else { 0o644 },
            uid: 1000,
            gid: 1000,
            mtime: 0,
            linkname: String::new(),
            devmajor: 0,
            devminor: 0,
            data: Vec::new(),
            offset: 0,
        }
    }
}

/// A problem with one member that did not stop parsing (unless noted).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TarIssue {
    pub offset: usize,
    pub message: String,
}

#[derive(Debug, Default, Clone, PartialEq, Eq)]
pub struct TarContents {
    pub members: Vec<TarMember>,
    pub issues: Vec<TarIssue>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TarError {
    #[error("truncated archive at byte {offset}")]
    TruncatedArchive { offset: usize },
}

fn parse_numeric(field: &[u8]) -> Option<u64> {
    if let Some(&first) = field.first() {
        if first & 0x80 != 0 {
            // Base-256, big endian, sign bit in the first byte.
            let mut v: u64 = u64::from(first & 0x3f);
            for &b in &field[1..] {
                v = v.checked_mul(256)? | u64::from(b);
            }
            return Some(v);
        }
    }
    let text: Vec<u8> = field
        .iter()
        .copied()
        .take_while(|&b| b != 0)
        .filter(|b| !b.is_ascii_whitespace())
        .collect();
    if text.is_empty() {
        return Some(0);
    }
    u64::from_str_radix(std::str::from_utf8(&text).ok()?, 8).ok()
}

fn cstr(field: &[u8]) -> &[u8] {
    let end = field.iter().position(|&b| b == 0).unwrap_or(field.len());
    &field[..end]
}

fn checksum_ok(header: &[u8]) -> bool {
    let Some(stored) = parse_numeric(&header[148..156]) else {
        return false;
    };
    let sum: u64 = header
        .iter()
        .enumerate()
        .map(|(i, &b)| if (148..156).contains(&i) { 32 } else { u64::from(b) })
        .sum();
    sum == stored
}

/// Parses `key=value` records of a pax extended header.
fn parse_pax(data: &[u8]) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut rest = data;
    while !rest.is_empty() {
        let Some(sp) = rest.iter().position(|&b| b == b' ') else { break };
        let Some(len) = std::str::from_utf8(&rest[..sp]).ok().and_then(|s| s.parse::<usize>().ok()) else {
            break;
        };
        if len <= sp || len > rest.len() {
            break;
        }
        let record = &rest[sp + 1..len];
        let record = record.strip_suffix(b"\n").unwrap_or(record);
        if let Some(eq) = record.iter().position(|&b| b == b'=') {
            let key = String::from_utf8_lossy(&record[..eq]).into_owned();
            out.insert(key, record[eq + 1..].to_vec());
        }
        rest = &rest[len..];
    }
    out
}

fn text(bytes: &[u8], offset: usize, what: &str, issues: &mut Vec<TarIssue>) -> String {
    match std::str::from_utf8(bytes) {
        Ok(s) => s.to_string(),
        Err(_) => {
            issues.push(TarIssue {
                offset,
                message: format!("{what} is not UTF-8; invalid bytes replaced"),
            });
            String::from_utf8_lossy(bytes).into_owned()
        }
    }
}

/// Reads every member. Unknown typeflags become issues and parsing goes on;
/// a checksum mismatch is recorded and ends parsing.
pub fn read_archive(bytes: &[u8]) -> Result<TarContents, TarError> {
    let mut out = TarContents::default();
    let mut pos = 0usize;
    let mut global: BTreeMap<String, Vec<u8>> = BTreeMap::new();
    let mut local: BTreeMap<String, Vec<u8>> = BTreeMap::new();
    let mut long_name: Option<Vec<u8>> = None;
    let mut long_link: Option<Vec<u8>> = None;
    let mut saw_end = false;

    while pos < bytes.len() {
        if bytes.len() - pos < BLOCK {
            return Err(TarError::TruncatedArchive { offset: pos });
        }
        let header = &bytes[pos..pos + BLOCK];
        if header.iter().all(|&b| b == 0) {
            saw_end = true;
            break;
        }
        if !checksum_ok(header) {
            out.issues.push(TarIssue {
                offset: pos,
                message: "header checksum mismatch; parsing stopped".into(),
            });
            return Ok(out);
        }
        let typeflag = header[156];
        let mut size = parse_numeric(&header[124..136]).unwrap_or(0) as usize;
        if let Some(s) = local.get("size").or_else(|| global.get("size")) {
            if let Some(v) = std::str::from_utf8(s).ok().and_then(|s| s.parse().ok()) {
                size = v;
            }
        }
        let data_start = pos + BLOCK;
        let padded = size.div_ceil(BLOCK) * BLOCK;
        if data_start + size > bytes.len() {
            return Err(TarError::TruncatedArchive { offset: pos });
        }
        let data = &bytes[data_start..data_start + size];
        let header_pos = pos;
        pos = (data_start + padded).min(bytes.len());

        match typeflag {
            b'x' => {
                local.extend(parse_pax(data));
                continue;
            }
            b'g' => {
                global.extend(parse_pax(data));
                continue;
            }
            b'L' => {
                long_name = Some(cstr(data).to_vec());
                continue;
            }
            b'K' => {
                long_link = Some(cstr(data).to_vec());
                continue;
            }
            _ => {}
        }

        let magic = &header[257..265];
        let raw_name = if let Some(n) = local.remove("path").or_else(|| global.get("path").cloned()) {
            n
        } else if let Some(n) = long_name.take() {
            n
        } else {
            let name = cstr(&header[0..100]);
            let prefix = if &magic[..6] == b"ustar\0" { cstr(&header[345..500]) } else { &[][..] };
            if prefix.is_empty() {
                name.to_vec()
            } else {
                [prefix, b"/", name].concat()
            }
        };
        let raw_link = local
            .remove("linkpath")
            .or_else(|| global.get("linkpath").cloned())
            .or_else(|| long_link.take())
            .unwrap_or_else(|| cstr(&header[157..257]).to_vec());
        let pax_num = |key: &str, local: &BTreeMap<String, Vec<u8>>| {
            local
                .get(key)
                .or_else(|| global.get(key))
                .and_then(|v| std::str::from_utf8(v).ok())
                .and_then(|s| s.split('.').next().and_then(|i| i.parse::<i64>().ok()))
        };
        let uid = pax_num("uid", &local).map(|v| v as u64).unwrap_or_else(|| parse_numeric(&header[108..116]).unwrap_or(0));
        let gid = pax_num("gid", &local).map(|v| v as u64).unwrap_or_else(|| parse_numeric(&header[116..124]).unwrap_or(0));
        let mtime = pax_num("mtime", &local).unwrap_or_else(|| parse_numeric(&header[136..148]).unwrap_or(0) as i64);
        local.clear();

        let mut path = text(&raw_name, header_pos, "member name", &mut out.issues);
        while path.len() > 1 && path.ends_with('/') {
            path.pop();
        }
        let linkname = text(&raw_link, header_pos, "link name", &mut out.issues);
        let kind = MemberKind::from_typeflag(typeflag);
        if kind.is_none() {
            out.issues.push(TarIssue {
                offset: header_pos,
                message: format!(
                    "unsupported header typeflag {:?} for {path:?}",
                    typeflag as char
                ),
            });
        }
        out.members.push(TarMember {
            path,
            typeflag,
            kind,
            mode: (parse_numeric(&header[100..108]).unwrap_or(0) & 0o7777) as u32,
            uid,
            gid,
            mtime,
            linkname,
            devmajor: parse_numeric(&header[329..337]).unwrap_or(0) as u32,
            devminor: parse_numeric(&header[337..345]).unwrap_or(0) as u32,
            data: if matches!(kind, Some(MemberKind::File)) { data.to_vec() } else { Vec::new() },
            offset: header_pos,
        });
    }
    if !saw_end && !out.members.is_empty() {
        out.issues.push(TarIssue {
            offset: pos,
            message: "missing end-of-archive marker".into(),
        });
    }
    Ok(out)
}

fn put_octal(field: &mut [u8], value: u64) {
    let width = field.len() - 1;
    let s = format!("{value:0width$o}");
    field[..width].copy_from_slice(&s.as_bytes()[s.len() - width..]);
    field[width] = 0;
}

fn header_block(name: &[u8], link: &[u8], m: &TarMember, typeflag: u8, size: u64) -> [u8; BLOCK] {
    let mut h = [0u8; BLOCK];
    h[..name.len()].copy_from_slice(name);
    put_octal(&mut h[100..108], u64::from(m.mode & 0o7777));
    put_octal(&mut h[108..116], m.uid);
    put_octal(&mut h[116..124], m.gid);
    put_octal(&mut h[124..136], size);
    put_octal(&mut h[136..148], m.mtime.max(0) as u64);
    h[156] = typeflag;
    h[157..157 + link.len()].copy_from_slice(link);
    h[257..263].copy_from_slice(b"ustar\0");
    h[263..265].copy_from_slice(b"00");
    put_octal(&mut h[329..337], u64::from(m.devmajor));
    put_octal(&mut h[337..345], u64::from(m.devminor));
    h[148..156].fill(b' ');
    let sum: u64 = h.iter().map(|&b| u64::from(b)).sum();
    let s = format!("{sum:06o}\0 ");
    h[148..156].copy_from_slice(s.as_bytes());
    h
}

fn pax_record(key: &str, value: &str) -> Vec<u8> {
    let body = format!(" {key}={value}\n");
    let mut len = body.len() + 1;
    loop {
        let candidate = format!("{len}{body}");
        if candidate.len() == len {
            return candidate.into_bytes();
        }
        len = candidate.len();
    }
}

fn pad(out: &mut Vec<u8>) {
    let rem = out.len() % BLOCK;
    if rem != 0 {
        out.resize(out.len() + BLOCK - rem, 0);
    }
}

/// Serializes members as a ustar archive, adding pax headers for names or
/// link targets longer than 100 bytes.
pub fn write_archive(members: &[TarMember]) -> Vec<u8> {
    let mut out = Vec::new();
    for m in members {
        let mut name = m.path.clone();
        if m.kind == Some(MemberKind::Dir) && !name.ends_with('/') {
            name.push('/');
        }
        let mut pax = Vec::new();
        let short_name: &[u8] = if name.len() > 100 {
            pax.extend(pax_record("path", &name));
            b"././@PaxHeader"
        } else {
            name.as_bytes()
        };
        let short_link: &[u8] = if m.linkname.len() > 100 {
            pax.extend(pax_record("linkpath", &m.linkname));
            b""
        } else {
            m.linkname.as_bytes()
        };
        if !pax.is_empty() {
            let h = header_block(b"././@PaxHeader", b"", m, b'x', pax.len() as u64);
            out.extend_from_slice(&h);
            out.extend_from_slice(&pax);
            pad(&mut out);
        }
        let data: &[u8] = if m.kind == Some(MemberKind::File) { &m.data } else { &[] };
        let h = header_block(short_name, short_link, m, m.typeflag, data.len() as u64);
        out.extend_from_slice(&h);
        out.extend_from_slice(data);
        pad(&mut out);
    }
    out.resize(out.len() + 2 * BLOCK, 0);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn member(path: &str, kind: MemberKind) -> TarMember {
        TarMember::new(path, kind)
    }

    #[test]
    fn round_trips_every_kind() {
        let mut f = member("src/foo", MemberKind::File);
        f.data = b"hello".to_vec();
        f.mode = 0o640;
        let mut l = member("src/FOO", MemberKind::Hardlink);
        l.linkname = "src/foo".into();
        let mut s = member("src/s", MemberKind::Symlink);
        s.linkname = "../outside".into();
        let mut dev = member("src/d", MemberKind::CharDevice);
        dev.devmajor = 1;
        dev.devminor = 3;
        let list = vec![member("src", MemberKind::Dir), f, l, s, member("src/p", MemberKind::Fifo), dev];
        let bytes = write_archive(&list);
        let back = read_archive(&bytes).unwrap();
        assert!(back.issues.is_empty(), "{:?}", back.issues);
        let strip = |m: &TarMember| TarMember { offset: 0, ..m.clone() };
        assert_eq!(back.members.iter().map(strip).collect::<Vec<_>>(), list);
    }

    #[test]
    fn long_names_use_pax() {
        let long = format!("d/{}", "x".repeat(150));
        let mut s = member(&long, MemberKind::Symlink);
        s.linkname = "y".repeat(120);
        let back = read_archive(&write_archive(&[s.clone()])).unwrap();
        assert_eq!(back.members[0].path, long);
        assert_eq!(back.members[0].linkname, s.linkname);
    }

    #[test]
    fn truncation_and_checksum() {
        let mut f = member("a", MemberKind::File);
        f.data = vec![7; 600];
        let bytes = write_archive(&[f]);
        assert!(matches!(read_archive(&bytes[..700]), Err(TarError::TruncatedArchive { .. })));
        assert!(matches!(read_archive(&bytes[..100]), Err(TarError::TruncatedArchive { .. })));
        let mut bad = bytes.clone();
        bad[0] = b'b';
        let got = read_archive(&bad).unwrap();
        assert!(got.members.is_empty());
        assert!(got.issues[0].message.contains("checksum"));
    }

    #[test]
    fn unknown_typeflag_is_an_issue_not_an_error() {
        let mut odd = member("weird", MemberKind::File);
        odd.typeflag = b'V';
        odd.kind = None;
        let bytes = write_archive(&[odd, member("ok", MemberKind::File)]);
        let got = read_archive(&bytes).unwrap();
        assert_eq!(got.members.len(), 2);
        assert_eq!(got.members[0].kind, None);
        assert_eq!(got.issues.len(), 1);
    }

    #[test]
    fn reads_archives_from_the_tar_crate() {
        let mut b = tar::Builder::new(Vec::new());
        let long = format!("top/{}/leaf", "n".repeat(120));
        let mut h = tar::Header::new_gnu();
        h.set_size(3);
        h.set_mode(0o600);
        h.set_entry_type(tar::EntryType::Regular);
        b.append_data(&mut h, &long, &b"abc"[..]).unwrap();
        let mut h = tar::Header::new_ustar();
        h.set_size(0);
        h.set_mode(0o777);
        h.set_entry_type(tar::EntryType::Symlink);
        b.append_link(&mut h, "top/L", "../x").unwrap();
        let bytes = b.into_inner().unwrap();
        let got = read_archive(&bytes).unwrap();
        assert!(got.issues.is_empty(), "{:?}", got.issues);
        assert_eq!(got.members[0].path, long);
        assert_eq!(got.members[0].data, b"abc");
        assert_eq!(got.members[0].mode, 0o600);
        assert_eq!(got.members[1].kind, Some(MemberKind::Symlink));
        assert_eq!(got.members[1].linkname, "../x");
    }

    #[test]
    fn tar_crate_reads_our_archives() {
        let mut f = member(&format!("{}/f", "p".repeat(110)), MemberKind::File);
        f.data = b"xyz".to_vec();
        let bytes = write_archive(&[f.clone()]);
        let mut ar = tar::Archive::new(&bytes[..]);
        let mut entries = ar.entries().unwrap();
        let mut e = entries.next().unwrap().unwrap();
        assert_eq!(e.path().unwrap().to_str().unwrap(), f.path);
        let mut s = String::new();
        std::io::Read::read_to_string(&mut e, &mut s).unwrap();
        assert_eq!(s, "xyz");
    }

    #[test]
    fn prefix_field_is_joined() {
        let mut h = tar::Header::new_ustar();
        h.set_size(0);
        h.set_entry_type(tar::EntryType::Regular);
        let path = format!("{}/{}", "a".repeat(90), "b".repeat(90));
        h.set_path(&path).unwrap();
        h.set_cksum();
        let mut bytes = h.as_bytes().to_vec();
        bytes.resize(bytes.len() + 1024, 0);
        assert_eq!(read_archive(&bytes).unwrap().members[0].path, path);
    }
}
