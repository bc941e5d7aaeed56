//! End-to-end acceptance gate. Prints one PASS/FAIL/SKIP line per criterion
//! and exits non-zero if any criterion fails. Tolerances are the constants
//! below; none of them is adjusted at run time.

use std::collections::{BTreeSet, HashMap};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use collide_core::casegen::{self, case_by_id, generate_matrix, Destination};
use collide_core::fold::{FoldProfile, ProfileId};
use collide_core::harness::{self, parse_codes, LiveConfig, ResponseCode};
use collide_core::refutils::{run_model, run_scenario, ScenarioId, UtilityId, UtilityModel};
use collide_core::scanner::{scan_paths, EntryKind, PathEntry};
use collide_core::tracer::{self, OpClass, Outcome, TraceRecord};
use collide_core::vfs::{FsImage, Metadata, NodeKind};

const GOLDEN_BUDGET: Duration = Duration::from_secs(10);
const SCANNER_BUDGET: Duration = Duration::from_secs(30);
const SCANNER_LISTS: usize = 1_000;
const SCANNER_MAX_ENTRIES: usize = 50;
const SCANNER_MAX_NAME: usize = 6;
const TRACE_RECORDS: usize = 10_000;
const SEED: u64 = 0xc011_1de5;

/// Expected codes per table row, columns in `UtilityId::ALL` order.
const GOLDEN: [(&str, [&str; 6]); 7] = [
    ("file-file", ["×", "A", "E", "+≠", "+≠", "R"]),
    ("symfile-file", ["×", "A", "E", "+T", "+≠", "R"]),
    ("pipe-file", ["×", "−", "E", "+", "+", "−"]),
    ("hardlink-file", ["×", "−", "E", "+≠", "+≠", "−"]),
    ("hardlink-hardlink", ["C×", "−", "E", "C×", "C+≠", "−"]),
    ("dir-dir", ["+≠", "+≠", "E", "+≠", "+≠", "R"]),
    ("symdir-dir", ["+", "∞", "E", "E", "+T", "R"]),
];

type Verdict = Result<String, String>;
type Check = (&'static str, fn() -> Verdict);

enum Status {
    Pass(String),
    Fail(String),
    Skip(String),
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn node_at(img: &FsImage, path: &str) -> Option<(NodeKind, Vec<u8>, u32, u64, u32)> {
    let ino = img.lookup(path).ok().flatten()?;
    let n = img.node(ino)?;
    Some((n.kind(), n.payload().to_vec(), n.nlink, ino, n.meta.mode))
}

fn golden_cells() -> Verdict {
    let start = Instant::now();
    let mut checked = 0;
    for (row, cells) in GOLDEN {
        let id = format!("{row}-d1-tf");
        let tc = case_by_id(&id).map_err(|e| e.to_string())?;
        let img = tc.image(FoldProfile::full_fold());
        for (u, want) in UtilityId::ALL.into_iter().zip(cells) {
            let out = run_model(&UtilityModel::new(u), &img, "/src", "/dst", Some(&[])).map_err(|e| e.to_string())?;
            let got = harness::classify(&img, &out.final_image, "/src", "/dst", &out).map_err(|e| e.to_string())?;
            let want = parse_codes(want).map_err(|e| e.to_string())?;
            ensure(got.codes == want, || format!("{id} {u}: got {} want {want:?}", got.code_string()))?;
            checked += 1;
        }
    }
    let took = start.elapsed();
    ensure(took < GOLDEN_BUDGET, || format!("took {took:?}"))?;
    Ok(format!("{checked} cells in {:.2}s", took.as_secs_f64()))
}

fn hardlink_corruption() -> Verdict {
    let img = case_by_id("hardlink-hardlink-d1-tf").map_err(|e| e.to_string())?.image(FoldProfile::full_fold());
    let out = run_model(&UtilityModel::new(UtilityId::Rsync), &img, "/src", "/dst", None).map_err(|e| e.to_string())?;
    let nodes: Vec<_> = ["/dst/hfoo", "/dst/zzz", "/dst/hbar"]
        .iter()
        .map(|p| node_at(&out.final_image, p).ok_or(format!("{p} missing")))
        .collect::<Result<_, _>>()?;
    for (kind, data, nlink, ino, _) in &nodes {
        ensure(*kind == NodeKind::File && data == b"bar" && *nlink == 3 && *ino == nodes[0].3, || {
            format!("got {kind:?} {:?} nlink {nlink} ino {ino}", String::from_utf8_lossy(data))
        })?;
    }
    let c = harness::classify(&img, &out.final_image, "/src", "/dst", &out).map_err(|e| e.to_string())?;
    ensure(
        c.evidence.iter().any(|e| e.code == ResponseCode::Corrupt && e.path == "/dst/hfoo"),
        || format!("no C evidence at /dst/hfoo: {:?}", c.evidence),
    )?;
    Ok("hfoo, zzz, hbar share one inode, content \"bar\", nlink 3; C at /dst/hfoo".into())
}

fn rsync_traversal() -> Verdict {
    let mut img = FsImage::new();
    casegen::materialize(&casegen::rsync_traversal_fixture(), Destination::Image { image: &mut img, root: "/" })
        .map_err(|e| e.to_string())?;
    img.mkdir_folded("/dst", Metadata::new(0o755), FoldProfile::full_fold()).map_err(|e| e.to_string())?;
    ensure(!img.exists("/tmp/confidential"), || "referent existed beforehand".into())?;
    let out = run_model(&UtilityModel::new(UtilityId::Rsync), &img, "/src", "/dst", None).map_err(|e| e.to_string())?;
    let got = node_at(&out.final_image, "/tmp/confidential").ok_or("no node at /tmp/confidential")?;
    ensure(got.0 == NodeKind::File && got.1 == b"confidential", || format!("got {got:?}"))?;
    Ok("/tmp/confidential created through the planted link".into())
}

fn httpd_migration() -> Verdict {
    let mut img = FsImage::new();
    casegen::materialize(&casegen::httpd_adversary_fixture(), Destination::Image { image: &mut img, root: "/" })
        .map_err(|e| e.to_string())?;
    img.mkdir("/new", Metadata::new(0o755)).map_err(|e| e.to_string())?;
    img.mkdir_folded("/new/www", Metadata::new(0o755), FoldProfile::full_fold()).map_err(|e| e.to_string())?;
    let before = node_at(&img, "/www/hidden").ok_or("no /www/hidden")?.4;
    let out = run_model(&UtilityModel::new(UtilityId::Tar), &img, "/www", "/new/www", None).map_err(|e| e.to_string())?;
    let hidden = node_at(&out.final_image, "/new/www/hidden").ok_or("no hidden/")?;
    let htaccess = node_at(&out.final_image, "/new/www/protected/.htaccess").ok_or("no .htaccess")?;
    ensure(before == 0o700 && hidden.4 == 0o755, || format!("hidden mode {:o} -> {:o}", before, hidden.4))?;
    ensure(htaccess.0 == NodeKind::File && htaccess.1.is_empty(), || {
        format!(".htaccess has {} bytes", htaccess.1.len())
    })?;
    Ok("hidden/ 700 -> 755; protected/.htaccess is empty".into())
}

fn git_checkout() -> Verdict {
    let s = run_scenario(ScenarioId::GitCve).map_err(|e| e.to_string())?;
    let failed: Vec<_> = s.assertions.iter().filter(|a| !a.passed).map(|a| a.description.as_str()).collect();
    ensure(failed.is_empty(), || format!("scenario: {failed:?}"))?;
    let hook = node_at(&s.outcome.final_image, "/work/.git/hooks/post-checkout").ok_or("no hook")?;
    ensure(hook.1 == b"#!/bin/sh\necho pwned\n", || "hook content differs".into())?;

    let index = [
        ("A/file1", EntryKind::File),
        ("A/file2", EntryKind::File),
        ("A/post-checkout", EntryKind::File),
        ("a", EntryKind::Symlink),
    ];
    let entries: Vec<PathEntry> = index
        .iter()
        .enumerate()
        .map(|(i, (p, k))| PathEntry::new(p, *k, i as i64))
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    let groups = scan_paths(&entries, &FoldProfile::full_fold());
    let sets: Vec<BTreeSet<&str>> = groups.iter().map(|g| g.members.iter().map(|m| m.path.as_str()).collect()).collect();
    ensure(
        groups.len() == 1 && sets[0] == BTreeSet::from(["A", "a"]) && groups[0].kind_pair == "symlink-dir",
        || format!("groups {sets:?}"),
    )?;
    Ok("hook planted; scanner reports {A, a} symlink-dir".into())
}

/// Reads the pinned data file directly and returns (simple, full) mappings.
fn parse_case_folding() -> (HashMap<char, char>, HashMap<char, String>) {
    let data = include_str!("../data/CaseFolding-13.0.0.txt");
    let mut simple = HashMap::new();
    let mut full = HashMap::new();
    for line in data.lines() {
        let body = line.split('#').next().unwrap_or("");
        let f: Vec<&str> = body.split(';').map(str::trim).collect();
        if f.len() < 3 || f[0].is_empty() {
            continue;
        }
        let from = char::from_u32(u32::from_str_radix(f[0], 16).unwrap()).unwrap();
        let to: String = f[2].split(' ').map(|h| char::from_u32(u32::from_str_radix(h, 16).unwrap()).unwrap()).collect();
        if matches!(f[1], "C" | "S") {
            simple.insert(from, to.chars().next().unwrap());
        }
        if matches!(f[1], "C" | "F") {
            full.insert(from, to);
        }
    }
    (simple, full)
}

fn folding_facts() -> Verdict {
    let (simple, full) = parse_case_folding();
    ensure(simple.get(&'\u{212A}') == Some(&'k'), || "data: Kelvin sign simple fold".into())?;
    ensure(full.get(&'ß').map(String::as_str) == Some("ss"), || "data: ß full fold".into())?;
    ensure(!simple.contains_key(&'ß'), || "data: ß has a simple fold".into())?;

    let collide = |id, a: &str, b: &str| FoldProfile::builtin(id).names_collide(a, b).unwrap();
    let kelvin = ("\u{212A}elvin", "kelvin");
    let floss = ("floß", "FLOSS");
    let expect = [
        (ProfileId::Ascii, false, false),
        (ProfileId::SimpleFold, true, false),
        (ProfileId::FullFold, true, true),
    ];
    for (id, k, f) in expect {
        ensure(collide(id, kelvin.0, kelvin.1) == k, || format!("{id:?} Kelvin"))?;
        ensure(collide(id, floss.0, floss.1) == f, || format!("{id:?} floß"))?;
    }
    Ok(format!("Kelvin: simple+full; floß: full only (Unicode {})", collide_core::fold::unicode_version()))
}

fn random_entries(rng: &mut ChaCha8Rng) -> Vec<PathEntry> {
    const SMALL: &[u8] = b"abAB";
    const ANY: &[u8] = b"abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789._-";
    let n = rng.random_range(0..=SCANNER_MAX_ENTRIES);
    (0..n)
        .map(|i| {
            let depth = rng.random_range(1..=3);
            let comps: Vec<String> = (0..depth)
                .map(|_| {
                    // Mostly a tiny alphabet so collisions are common.
                    let (alpha, max) = if rng.random_bool(0.7) { (SMALL, 2) } else { (ANY, SCANNER_MAX_NAME) };
                    let len = rng.random_range(1..=max);
                    let mut s: String = (0..len).map(|_| alpha[rng.random_range(0..alpha.len())] as char).collect();
                    if s == "." || s == ".." {
                        s = "x".into();
                    }
                    s
                })
                .collect();
            PathEntry::new(&comps.join("/"), EntryKind::File, i as i64).unwrap()
        })
        .collect()
}

fn expanded_paths(entries: &[PathEntry]) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for e in entries {
        let comps: Vec<&str> = e.path.split('/').collect();
        for i in 1..=comps.len() {
            let p = comps[..i].join("/");
            if !out.contains(&p) {
                out.push(p);
            }
        }
    }
    out
}

/// Classes of size >= 2 under componentwise fold equality.
fn pairwise_groups(entries: &[PathEntry], profile: &FoldProfile) -> usize {
    let paths = expanded_paths(entries);
    let mut class: Vec<usize> = (0..paths.len()).collect();
    for i in 0..paths.len() {
        for j in 0..i {
            let a: Vec<&str> = paths[i].split('/').collect();
            let b: Vec<&str> = paths[j].split('/').collect();
            if a.len() == b.len() && a.iter().zip(&b).all(|(x, y)| profile.fold_str(x) == profile.fold_str(y)) {
                let (from, to) = (class[i], class[j]);
                for c in class.iter_mut() {
                    if *c == from {
                        *c = to;
                    }
                }
            }
        }
    }
    let mut sizes: HashMap<usize, usize> = HashMap::new();
    for c in class {
        *sizes.entry(c).or_default() += 1;
    }
    sizes.values().filter(|&&n| n > 1).count()
}

/// Materializes the paths under a sensitive and a folding root and reports
/// whether the folding copy lost a node or misplaced content.
fn expansion_loses(entries: &[PathEntry], profile: FoldProfile) -> bool {
    let paths = expanded_paths(entries);
    let is_dir = |p: &str| paths.iter().any(|q| q.len() > p.len() && q.starts_with(p) && q.as_bytes()[p.len()] == b'/');
    let mut img = FsImage::new();
    img.mkdir("/cs", Metadata::new(0o755)).unwrap();
    img.mkdir_folded("/ci", Metadata::new(0o755), profile).unwrap();
    for root in ["/cs", "/ci"] {
        for p in &paths {
            let full = format!("{root}/{p}");
            let ok = if is_dir(p) {
                img.mkdir_p(&full, Metadata::new(0o755)).is_ok()
            } else {
                img.write_file(&full, p.as_bytes(), Metadata::new(0o644)).is_ok()
            };
            if !ok {
                return true;
            }
        }
    }
    let count = |root: &str| img.walk(img.lookup(root).unwrap().unwrap()).len();
    count("/ci") < count("/cs")
        || paths.iter().filter(|p| !is_dir(p)).any(|p| {
            let ino = img.lookup(&format!("/ci/{p}")).unwrap().unwrap();
            img.node(ino).unwrap().payload() != p.as_bytes()
        })
}

fn scanner_oracles() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let profiles = [FoldProfile::ascii(), FoldProfile::simple_fold(), FoldProfile::full_fold()];
    let mut with_groups = 0;
    let mut disagreements = Vec::new();
    for n in 0..SCANNER_LISTS {
        let entries = random_entries(&mut rng);
        for p in &profiles {
            let got = scan_paths(&entries, p).len();
            let want = pairwise_groups(&entries, p);
            if got != want {
                disagreements.push(format!("list {n} {:?}: scanner {got} pairwise {want}", p.id()));
            }
        }
        let full = FoldProfile::full_fold();
        let found = !scan_paths(&entries, &full).is_empty();
        with_groups += usize::from(found);
        if found != expansion_loses(&entries, full) {
            disagreements.push(format!("list {n}: scanner {found} expansion disagrees"));
        }
    }
    let took = start.elapsed();
    ensure(disagreements.is_empty(), || disagreements[..disagreements.len().min(5)].join("; "))?;
    ensure(took < SCANNER_BUDGET, || format!("took {took:?}"))?;
    ensure(with_groups > 0 && with_groups < SCANNER_LISTS, || format!("degenerate sample: {with_groups} lists collide"))?;
    Ok(format!(
        "{SCANNER_LISTS} lists, {with_groups} with collisions, 0 disagreements in {:.2}s",
        took.as_secs_f64()
    ))
}

fn record(seq: u64, op: OpClass, syscall: &str, inode: u64, path: &str) -> TraceRecord {
    TraceRecord {
        seq,
        op_class: op,
        syscall: syscall.into(),
        program: "cp".into(),
        pid: 100,
        device: "00:39".into(),
        inode,
        path: path.into(),
        dirfd: None,
        outcome: Outcome::Success,
    }
}

/// Random trace in which every resource is always named the way it was
/// created, possibly with a mixed-case spelling.
fn consistent_trace(rng: &mut ChaCha8Rng, len: usize) -> Vec<TraceRecord> {
    let names = ["foo", "Bar", "ROOT", "x", "Kelvin", "q1", "zz", "MiXed"];
    let mut out = vec![record(1, OpClass::Create, "mkdirat", 2, "/m/Dst")];
    let mut live: Vec<(String, u64)> = Vec::new();
    let mut next_ino = 100;
    while out.len() < len {
        let seq = out.len() as u64 + 1;
        let roll = rng.random_range(0..10);
        if live.is_empty() || roll < 3 {
            let path = format!("/m/Dst/{}{}", names[rng.random_range(0..names.len())], rng.random_range(0..50));
            if live.iter().any(|(p, _)| *p == path) {
                continue;
            }
            next_ino += 1;
            out.push(record(seq, OpClass::Create, "openat", next_ino, &path));
            live.push((path, next_ino));
        } else if roll < 9 {
            let (p, ino) = live[rng.random_range(0..live.len())].clone();
            out.push(record(seq, OpClass::Use, "openat", ino, &p));
        } else {
            let (p, ino) = live.swap_remove(rng.random_range(0..live.len()));
            out.push(record(seq, OpClass::Delete, "unlinkat", ino, &p));
        }
    }
    out
}

const CREATE_USE_GOLDEN: &str = "\
USE [msg=10960,'cp'.openat] 00:39|2389| /mnt/folding/dst/ROOT
CREATE [msg=10957,'cp'.openat] 00:39|2389| /mnt/folding/dst/root
";

fn detect_tsv(tsv: &str) -> Vec<tracer::Violation> {
    tracer::detect(&tracer::ingest(tsv.lines()), &FoldProfile::full_fold(), None)
}

fn tracer_checks() -> Verdict {
    let golden_trace: String = [
        record(10957, OpClass::Create, "openat", 2389, "/mnt/folding/dst/root"),
        record(10960, OpClass::Use, "openat", 2389, "/mnt/folding/dst/ROOT"),
    ]
    .iter()
    .map(|r| r.to_tsv() + "\n")
    .collect();
    let v = detect_tsv(&golden_trace);
    ensure(v.len() == 1 && tracer::render_violation(&v[0]) == CREATE_USE_GOLDEN, || format!("golden output {v:?}"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let trace = consistent_trace(&mut rng, TRACE_RECORDS);
    let tsv: String = trace.iter().map(|r| r.to_tsv() + "\n").collect();
    let v = detect_tsv(&tsv);
    ensure(v.is_empty(), || format!("{} violations on a consistent trace", v.len()))?;

    let model = UtilityModel::new(UtilityId::CpStar);
    let (mut flagged, mut clean) = (0, 0);
    let matrix = generate_matrix();
    for tc in &matrix {
        for (control, case) in [(false, tc.clone()), (true, tc.control_of())] {
            let img = case.image(FoldProfile::full_fold());
            let out = run_model(&model, &img, "/src", "/dst", None).map_err(|e| e.to_string())?;
            let found = !detect_tsv(&out.trace_tsv()).is_empty();
            match (control, found) {
                (false, true) => flagged += 1,
                (true, false) => clean += 1,
                (false, false) => return Err(format!("{} not flagged", tc.id)),
                (true, true) => return Err(format!("control of {} flagged", tc.id)),
            }
        }
    }
    Ok(format!(
        "create-then-use golden byte-stable; {TRACE_RECORDS} consistent records clean; {flagged}/{} cp* case traces flagged, {clean} controls clean",
        matrix.len()
    ))
}

fn package_database() -> Verdict {
    let s = run_scenario(ScenarioId::DpkgDb).map_err(|e| e.to_string())?;
    let failed: Vec<_> = s.assertions.iter().filter(|a| !a.passed).map(|a| a.description.as_str()).collect();
    ensure(failed.is_empty(), || format!("scenario: {failed:?}"))?;
    Ok(format!("{} assertions hold", s.assertions.len()))
}

fn live_harness() -> Status {
    let Some(cfg) = LiveConfig::from_env() else {
        return Status::Skip(format!("{} not set", harness::MOUNT_ENV));
    };
    let mut lines = Vec::new();
    let mut reports = 0;
    for u in [UtilityId::Tar, UtilityId::Cp, UtilityId::Rsync] {
        let tc = match case_by_id("file-file-d1-tf") {
            Ok(tc) => tc,
            Err(e) => return Status::Fail(e.to_string()),
        };
        match harness::run_live(u, &tc, &cfg) {
            Ok(r) => {
                reports += 1;
                lines.push(format!("{u}: {} discrepancies", r.discrepancies.len()));
            }
            Err(e) if e.is_environmental() => lines.push(format!("{u}: {e}")),
            Err(e) => return Status::Fail(format!("{u}: {e}")),
        }
    }
    // Environment problems alone mean nothing ran.
    if reports == 0 {
        return Status::Skip(lines.join("; "));
    }
    Status::Pass(lines.join("; "))
}

fn main() -> ExitCode {
    let checks: [Check; 8] = [
        ("1 table cells under emulation", golden_cells),
        ("2 hardlink corruption", hardlink_corruption),
        ("3 rsync traversal", rsync_traversal),
        ("4 web root migration", httpd_migration),
        ("5 git checkout hook", git_checkout),
        ("6 folding facts", folding_facts),
        ("7 scanner oracle equivalence", scanner_oracles),
        ("8 tracer", tracer_checks),
    ];
    let mut results: Vec<(&str, Status)> = checks
        .iter()
        .map(|(name, f)| {
            let status = match std::panic::catch_unwind(f) {
                Ok(Ok(s)) => Status::Pass(s),
                Ok(Err(s)) => Status::Fail(s),
                Err(_) => Status::Fail("panicked".into()),
            };
            (*name, status)
        })
        .collect();
    results.push((
        "9 substitutes: package scenario",
        match package_database() {
            Ok(s) => Status::Pass(s),
            Err(s) => Status::Fail(s),
        },
    ));
    results.push(("9 live harness", live_harness()));

    let mut failed = 0;
    for (name, status) in &results {
        let line = match status {
            Status::Pass(s) => format!("PASS  {name}: {s}"),
            Status::Skip(s) => format!("SKIP  {name}: {s}"),
            Status::Fail(s) => {
                failed += 1;
                format!("FAIL  {name}: {s}")
            }
        };
        println!("{line}");
    }
    println!("acceptance: {} checked, {failed} failed", results.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
