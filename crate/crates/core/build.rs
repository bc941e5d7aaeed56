//! Generates the case-folding tables from the pinned data file under `data/`.

use std::env;
use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;

const DATA_FILE: &str = "data/CaseFolding-13.0.0.txt";
const UNICODE_VERSION: &str = "13.0.0";

fn main() {
    println!("cargo:rerun-if-changed={DATA_FILE}");
    println!("cargo:rerun-if-changed=build.rs");

    let text = fs::read_to_string(DATA_FILE).expect("read case folding data");
    let mut simple: Vec<(u32, u32)> = Vec::new();
    let mut full: Vec<(u32, Vec<u32>)> = Vec::new();

    for (lineno, line) in text.lines().enumerate() {
        let body = line.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let fields: Vec<&str> = body.split(';').map(str::trim).collect();
        assert!(
            fields.len() >= 3,
            "{DATA_FILE}:{}: expected at least three fields",
            lineno + 1
        );
        let code = u32::from_str_radix(fields[0], 16).expect("code point");
        let mapping: Vec<u32> = fields[2]
            .split_whitespace()
            .map(|cp| u32::from_str_radix(cp, 16).expect("mapping code point"))
            .collect();
        match fields[1] {
            "C" => {
                assert_eq!(mapping.len(), 1);
                simple.push((code, mapping[0]));
                full.push((code, mapping));
            }
            "S" => {
                assert_eq!(mapping.len(), 1);
                simple.push((code, mapping[0]));
            }
            "F" => full.push((code, mapping)),
            // Turkic mappings are locale-specific and never used.
            "T" => {}
            other => panic!("{DATA_FILE}:{}: unknown status {other}", lineno + 1),
        }
    }

    simple.sort_unstable();
    full.sort_unstable();
    for pair in simple.windows(2) {
        assert_ne!(pair[0].0, pair[1].0, "duplicate simple mapping");
    }
    for pair in full.windows(2) {
        assert_ne!(pair[0].0, pair[1].0, "duplicate full mapping");
    }

    let mut out = String::new();
    writeln!(out, "pub(crate) const UNICODE_VERSION: &str = {UNICODE_VERSION:?};").unwrap();
    writeln!(out, "pub(crate) static SIMPLE_FOLD: &[(u32, u32)] = &[").unwrap();
    for (code, to) in &simple {
        writeln!(out, "    (0x{code:04X}, 0x{to:04X}),").unwrap();
    }
    writeln!(out, "];").unwrap();
    writeln!(out, "pub(crate) static FULL_FOLD: &[(u32, &[u32])] = &[").unwrap();
    for (code, to) in &full {
        let seq: Vec<String> = to.iter().map(|c| format!("0x{c:04X}")).collect();
        writeln!(out, "    (0x{code:04X}, &[{}]),", seq.join(", ")).unwrap();
    }
    writeln!(out, "];").unwrap();

    let dest = PathBuf::from(env::var("OUT_DIR").unwrap()).join("fold_tables.rs");
    fs::write(dest, out).expect("write generated tables");
}
