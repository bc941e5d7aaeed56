//! Command-line front end. [`run`] parses arguments, dispatches to the
//! core library and writes a text or JSON report.
//!
//! Exit status: 0 clean, 3 findings, 2 usage or input error, 4 live
//! environment unavailable, 1 a scenario missed its expected end state.
//!
//! ```
//! let mut out = Vec::new();
//! let mut err = Vec::new();
//! let args = ["collide", "fold", "--profile", "full-fold", "floß", "FLOSS"];
//! let code = collide_cli::run(args.iter().map(|s| s.to_string()), &mut out, &mut err, false);
//! assert_eq!(String::from_utf8(out).unwrap(), "collide\n");
//! assert_eq!(code, collide_cli::EXIT_FINDINGS);
//! ```

pub mod config;

use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{ArgGroup, Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use collide_core::casegen::{self, Destination, TestCase};
use collide_core::fold::{FoldProfile, ProfileId};
use collide_core::harness::{self, Classification, ClassifyOptions, Discrepancy, Evidence, LiveConfig, ResponseCode};
use collide_core::refutils::{self, Assertion, Event, PromptAnswer, ScenarioId, Terminated, UtilityId, UtilityModel};
use collide_core::scanner::{self, ScanReport};
use collide_core::tracer::{self, ParseError, TraceRecord, Violation};

pub use config::{Format, RunConfig};

pub const EXIT_CLEAN: i32 = 0;
pub const EXIT_SCENARIO_MISSED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_FINDINGS: i32 = 3;
pub const EXIT_ENVIRONMENT: i32 = 4;

const EXAMPLES: &str = "Examples:
  collide fold --profile full-fold floß FLOSS
  collide scan --list names.txt --profile ascii
  collide gen --list
  collide model --utility rsync --case hardlink-hardlink-d1-tf --dump
  collide classify --utility tar --case file-file-d1-tf --json
  collide trace trace.tsv";

#[derive(Parser, Debug)]
#[command(name = "collide", version, about = "Find, reproduce and classify case-folding name collisions", after_help = EXAMPLES)]
pub struct Cli {
    /// key = value settings file; flags override it
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Fold profile: sensitive, ascii, simple-fold or full-fold
    #[arg(long, global = true)]
    profile: Option<ProfileId>,
    /// Output format
    #[arg(long, global = true, value_enum)]
    format: Option<Format>,
    /// Shorthand for --format json
    #[arg(long, global = true)]
    json: bool,
    /// Disable colored text output
    #[arg(long, global = true)]
    no_color: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fold names; with two or more names, report whether they collide
    Fold {
        #[arg(required = true)]
        names: Vec<String>,
    },
    /// Lint an archive, directory or listing for colliding names
    Scan(ScanArgs),
    /// Print or build collision test cases
    Gen(GenArgs),
    /// Run a utility model on a test case, or replay a scenario
    Model(ModelArgs),
    /// Classify a utility's response to a test case
    Classify(ClassifyArgs),
    /// Check a normalized trace for inconsistent name use
    Trace(TraceArgs),
    /// Convert auditd log lines into normalized trace records
    AdaptAuditd {
        /// Log file, or - for standard input
        file: PathBuf,
    },
}

#[derive(Args, Debug)]
#[command(group(ArgGroup::new("input").required(true).multiple(false)))]
struct ScanArgs {
    /// ustar/pax archive
    #[arg(long, group = "input")]
    tar: Option<PathBuf>,
    /// Host directory to walk
    #[arg(long, group = "input")]
    dir: Option<PathBuf>,
    /// Listing with one `path[TAB kind]` per line
    #[arg(long, group = "input")]
    list: Option<PathBuf>,
    /// Listing of entries already at the destination
    #[arg(long)]
    baseline: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GenArgs {
    /// Case id such as file-file-d1-tf (repeatable)
    #[arg(long = "case")]
    cases: Vec<String>,
    /// Every matrix case
    #[arg(long)]
    all: bool,
    /// Use the non-colliding control of each case
    #[arg(long)]
    control: bool,
    /// Only print the case ids
    #[arg(long)]
    list: bool,
    /// Build each case under DIR/<case id> on the host
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ModelArgs {
    #[arg(long, required_unless_present = "scenario")]
    utility: Option<UtilityId>,
    #[arg(long = "case", required_unless_present = "scenario")]
    case: Option<String>,
    /// git_cve, rsync_traversal, httpd_migration or dpkg_db
    #[arg(long, conflicts_with_all = ["utility", "case"])]
    scenario: Option<ScenarioId>,
    /// Include the final image
    #[arg(long)]
    dump: bool,
    /// Include the emitted trace
    #[arg(long)]
    trace: bool,
    /// Answers for interactive prompts, comma separated
    #[arg(long, value_delimiter = ',')]
    answers: Vec<PromptAnswer>,
}

#[derive(Args, Debug)]
struct ClassifyArgs {
    #[arg(long)]
    utility: UtilityId,
    #[arg(long = "case")]
    case: String,
    /// Run the real utility on a case-insensitive mount
    #[arg(long)]
    live: bool,
    /// Case-insensitive mount for --live (default: COLLIDE_MOUNT)
    #[arg(long)]
    mount: Option<String>,
    /// Seconds before a live run counts as hung
    #[arg(long)]
    timeout: Option<u64>,
    /// Count timestamp differences
    #[arg(long)]
    strict_times: bool,
    /// Answers for interactive prompts, comma separated
    #[arg(long, value_delimiter = ',')]
    answers: Vec<PromptAnswer>,
}

#[derive(Args, Debug)]
struct TraceArgs {
    /// Trace file, or - for standard input
    file: PathBuf,
    /// Input is raw auditd log lines
    #[arg(long)]
    auditd: bool,
    /// Only consider records on this device (major:minor)
    #[arg(long)]
    device: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldReport {
    pub config: RunConfig,
    pub names: Vec<String>,
    pub keys: Vec<String>,
    /// All names fold to one key and are not all identical.
    pub collide: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScanOutput {
    pub config: RunConfig,
    #[serde(flatten)]
    pub report: ScanReport,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenReport {
    pub config: RunConfig,
    pub cases: Vec<TestCase>,
    pub built: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelReport {
    pub config: RunConfig,
    pub case: String,
    pub utility: UtilityId,
    pub terminated: Terminated,
    pub events: Vec<Event>,
    pub dump: Option<String>,
    pub trace: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScenarioReport {
    pub config: RunConfig,
    pub scenario: ScenarioId,
    pub passed: bool,
    pub assertions: Vec<Assertion>,
    pub events: Vec<Event>,
    pub dump: Option<String>,
    pub trace: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassifyReport {
    pub config: RunConfig,
    pub case: String,
    pub utility: UtilityId,
    /// `emulation` or `live`.
    pub mode: String,
    pub codes: Vec<ResponseCode>,
    pub evidence: Vec<Evidence>,
    pub notes: Vec<String>,
    pub discrepancies: Vec<Discrepancy>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceReport {
    pub config: RunConfig,
    pub records: usize,
    pub violations: Vec<Violation>,
    pub parse_errors: Vec<ParseError>,
    pub unresolved_dirfd: usize,
    pub warnings: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdaptReport {
    pub config: RunConfig,
    pub records: Vec<TraceRecord>,
}

/// A failure with its exit status; rendered as `error: <message>`.
#[derive(Debug)]
struct Failure {
    code: i32,
    message: String,
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: EXIT_USAGE,
        message: message.into(),
    }
}

struct Ctx<'a> {
    cfg: RunConfig,
    out: &'a mut dyn Write,
    color: bool,
}

impl Ctx<'_> {
    fn profile(&self) -> FoldProfile {
        FoldProfile::builtin(self.cfg.profile)
    }

    fn json(&self) -> bool {
        self.cfg.format == Format::Json
    }

    fn emit<T: Serialize>(&mut self, value: &T) -> Result<(), Failure> {
        let text = serde_json::to_string_pretty(value).map_err(|e| usage(e.to_string()))?;
        writeln!(self.out, "{text}").map_err(|e| usage(e.to_string()))
    }

    fn text(&mut self, s: &str) -> Result<(), Failure> {
        self.out.write_all(s.as_bytes()).map_err(|e| usage(e.to_string()))
    }

    /// Bold red when color is on.
    fn alert(&self, s: &str) -> String {
        if self.color {
            format!("\x1b[1;31m{s}\x1b[0m")
        } else {
            s.to_string()
        }
    }
}

fn read_input(path: &Path) -> Result<Vec<u8>, Failure> {
    if path == Path::new("-") {
        let mut buf = Vec::new();
        std::io::stdin()
            .read_to_end(&mut buf)
            .map_err(|e| usage(format!("stdin: {e}")))?;
        return Ok(buf);
    }
    std::fs::read(path).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn read_text(path: &Path) -> Result<String, Failure> {
    String::from_utf8(read_input(path)?).map_err(|_| usage(format!("{}: not UTF-8 text", path.display())))
}

/// Runs the CLI. `tty` says whether `out` is a terminal (for color).
pub fn run<I>(args: I, out: &mut dyn Write, err: &mut dyn Write, tty: bool) -> i32
where
    I: IntoIterator<Item = String>,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_CLEAN };
            let rendered = e.render().to_string();
            let _ = if e.use_stderr() {
                err.write_all(rendered.as_bytes())
            } else {
                out.write_all(rendered.as_bytes())
            };
            return code;
        }
    };
    let mut cfg = RunConfig::from_env();
    if let Some(path) = &cli.config {
        if let Err(e) = cfg.apply_file(path) {
            let _ = writeln!(err, "error: config: {e}");
            return EXIT_USAGE;
        }
    }
    if let Some(p) = cli.profile {
        cfg.profile = p;
    }
    if let Some(f) = cli.format {
        cfg.format = f;
    }
    if cli.json {
        cfg.format = Format::Json;
    }
    let color = tty && !cli.no_color && std::env::var_os("NO_COLOR").is_none_or(|v| v.is_empty());
    let mut ctx = Ctx { cfg, out, color };
    let result = match cli.command {
        Command::Fold { names } => cmd_fold(&mut ctx, names),
        Command::Scan(a) => cmd_scan(&mut ctx, a),
        Command::Gen(a) => cmd_gen(&mut ctx, a),
        Command::Model(a) => cmd_model(&mut ctx, a),
        Command::Classify(a) => cmd_classify(&mut ctx, a),
        Command::Trace(a) => cmd_trace(&mut ctx, a),
        Command::AdaptAuditd { file } => cmd_adapt(&mut ctx, &file),
    };
    match result {
        Ok(code) => code,
        Err(f) => {
            let _ = writeln!(err, "error: {}", f.message);
            f.code
        }
    }
}

fn cmd_fold(ctx: &mut Ctx, names: Vec<String>) -> Result<i32, Failure> {
    let profile = ctx.profile();
    let keys = names
        .iter()
        .map(|n| profile.fold_name(n).map(|k| k.into_string()))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| usage(e.to_string()))?;
    let collide = names.len() > 1 && keys.iter().all(|k| *k == keys[0]) && names.iter().any(|n| *n != names[0]);
    let report = FoldReport {
        config: ctx.cfg.clone(),
        names,
        keys,
        collide,
    };
    if ctx.json() {
        ctx.emit(&report)?;
    } else if report.names.len() == 1 {
        let line = format!("{}\n", report.keys[0]);
        ctx.text(&line)?;
    } else {
        let word = if collide { ctx.alert("collide") } else { "distinct".to_string() };
        ctx.text(&format!("{word}\n"))?;
    }
    Ok(if collide { EXIT_FINDINGS } else { EXIT_CLEAN })
}

fn cmd_scan(ctx: &mut Ctx, a: ScanArgs) -> Result<i32, Failure> {
    let profile = ctx.profile();
    let scan_err = |e: scanner::ScanError| usage(e.to_string());
    let (entries, warnings) = if let Some(p) = &a.tar {
        scanner::tar_entries(&read_input(p)?).map_err(scan_err)?
    } else if let Some(p) = &a.dir {
        scanner::host_entries(p).map_err(scan_err)?
    } else if let Some(p) = &a.list {
        (scanner::parse_listing(&read_text(p)?).map_err(scan_err)?, Vec::new())
    } else {
        return Err(usage("one of --tar, --dir or --list is required"));
    };
    let entries = match &a.baseline {
        Some(p) => {
            let base = scanner::parse_listing(&read_text(p)?).map_err(scan_err)?;
            scanner::with_baseline(&entries, &base)
        }
        None => entries,
    };
    let report = ScanReport::new(&profile, scanner::scan_paths(&entries, &profile), warnings);
    let code = report.exit_code();
    if ctx.json() {
        let out = ScanOutput {
            config: ctx.cfg.clone(),
            report,
        };
        ctx.emit(&out)?;
    } else {
        let mut text = report.render_text();
        if !report.groups.is_empty() {
            let n = report.groups.len();
            text.push_str(&ctx.alert(&format!("{n} collision group{}\n", if n == 1 { "" } else { "s" })));
        }
        ctx.text(&text)?;
    }
    Ok(code)
}

fn lookup_case(id: &str, control: bool) -> Result<TestCase, Failure> {
    let tc = casegen::case_by_id(id).map_err(|e| usage(e.to_string()))?;
    Ok(if control && !tc.control { tc.control_of() } else { tc })
}

fn cmd_gen(ctx: &mut Ctx, a: GenArgs) -> Result<i32, Failure> {
    let mut cases: Vec<TestCase> = if a.all || a.list && a.cases.is_empty() {
        casegen::generate_matrix()
    } else {
        a.cases.iter().map(|id| lookup_case(id, false)).collect::<Result<_, _>>()?
    };
    if cases.is_empty() {
        return Err(usage("give --case <id>, --all or --list"));
    }
    if a.control {
        cases = cases.iter().map(TestCase::control_of).collect();
    }
    let mut built = Vec::new();
    if let Some(dir) = &a.out {
        for tc in &cases {
            let dest = dir.join(&tc.id);
            std::fs::create_dir_all(&dest).map_err(|e| usage(format!("{}: {e}", dest.display())))?;
            casegen::materialize(&tc.tree, Destination::Host(&dest)).map_err(|e| match e {
                casegen::CasegenError::HostIsCaseInsensitive(_) => Failure {
                    code: EXIT_ENVIRONMENT,
                    message: e.to_string(),
                },
                other => usage(other.to_string()),
            })?;
            built.push(dest.display().to_string());
        }
    }
    if ctx.json() {
        let report = GenReport {
            config: ctx.cfg.clone(),
            cases,
            built,
        };
        ctx.emit(&report)?;
        return Ok(EXIT_CLEAN);
    }
    let mut text = String::new();
    for tc in &cases {
        text.push_str(&format!("{}\n", tc.id));
        if a.list {
            continue;
        }
        for step in &tc.tree.steps {
            let kind = serde_json::to_value(&step.node)
                .ok()
                .and_then(|v| v.get("type").and_then(|t| t.as_str().map(str::to_string)))
                .unwrap_or_default();
            text.push_str(&format!("  {:<40} {:<8} {:o}\n", step.path, kind, step.meta.mode));
        }
    }
    for b in &built {
        text.push_str(&format!("built {b}\n"));
    }
    ctx.text(&text)?;
    Ok(EXIT_CLEAN)
}

fn render_events(events: &[Event]) -> String {
    let mut s = String::new();
    for e in events {
        let result = serde_json::to_value(&e.result)
            .map(|v| v.to_string())
            .unwrap_or_default();
        s.push_str(&format!("  {:<10} {} {}\n", e.op, e.path, result));
    }
    s
}

fn cmd_model(ctx: &mut Ctx, a: ModelArgs) -> Result<i32, Failure> {
    if let Some(id) = a.scenario {
        let out = refutils::run_scenario(id).map_err(|e| usage(e.to_string()))?;
        let passed = out.all_passed();
        let report = ScenarioReport {
            config: ctx.cfg.clone(),
            scenario: id,
            passed,
            assertions: out.assertions.clone(),
            events: out.outcome.events.clone(),
            dump: a.dump.then(|| out.outcome.final_image.dump()),
            trace: a.trace.then(|| out.outcome.trace_tsv()),
        };
        if ctx.json() {
            ctx.emit(&report)?;
        } else {
            let mut t = format!("scenario {id}\n");
            for x in &report.assertions {
                let mark = if x.passed { "ok  " } else { "FAIL" };
                t.push_str(&format!("  {mark} {}\n", x.description));
            }
            if let Some(d) = &report.dump {
                t.push_str(d);
            }
            if let Some(tr) = &report.trace {
                t.push_str(tr);
            }
            ctx.text(&t)?;
        }
        return Ok(if passed { EXIT_CLEAN } else { EXIT_SCENARIO_MISSED });
    }
    let utility = a.utility.ok_or_else(|| usage("--utility is required"))?;
    let case = a.case.ok_or_else(|| usage("--case is required"))?;
    let tc = lookup_case(&case, false)?;
    let img = tc.image(ctx.profile());
    let out = refutils::run_model(&UtilityModel::new(utility), &img, "/src", "/dst", Some(&a.answers))
        .map_err(|e| usage(e.to_string()))?;
    let report = ModelReport {
        config: ctx.cfg.clone(),
        case: tc.id.clone(),
        utility,
        terminated: out.terminated,
        events: out.events.clone(),
        dump: a.dump.then(|| out.final_image.dump()),
        trace: a.trace.then(|| out.trace_tsv()),
    };
    if ctx.json() {
        ctx.emit(&report)?;
    } else {
        let mut t = format!("{} on {}: {:?}\n", utility, tc.id, report.terminated);
        t.push_str(&render_events(&report.events));
        if let Some(d) = &report.dump {
            t.push_str(d);
        }
        if let Some(tr) = &report.trace {
            t.push_str(tr);
        }
        ctx.text(&t)?;
    }
    Ok(EXIT_CLEAN)
}

fn cmd_classify(ctx: &mut Ctx, a: ClassifyArgs) -> Result<i32, Failure> {
    if a.strict_times {
        ctx.cfg.strict_times = true;
    }
    if let Some(t) = a.timeout {
        ctx.cfg.timeout_secs = t;
    }
    if let Some(m) = &a.mount {
        ctx.cfg.mount = Some(m.clone());
    }
    let opts = ClassifyOptions {
        strict_times: ctx.cfg.strict_times,
    };
    let tc = lookup_case(&a.case, false)?;
    let (mode, cls, discrepancies): (&str, Classification, Vec<Discrepancy>) = if a.live {
        let mount = ctx.cfg.mount.clone().ok_or_else(|| Failure {
            code: EXIT_ENVIRONMENT,
            message: format!("live mode needs --mount or {}", harness::MOUNT_ENV),
        })?;
        let mut live = LiveConfig::new(mount);
        live.timeout = Duration::from_secs(ctx.cfg.timeout_secs);
        live.classify = opts;
        if let Some(first) = a.answers.first() {
            live.prompt_answer = *first;
        }
        let report = harness::run_live(a.utility, &tc, &live).map_err(|e| Failure {
            code: if e.is_environmental() { EXIT_ENVIRONMENT } else { EXIT_USAGE },
            message: e.to_string(),
        })?;
        ("live", report.live, report.discrepancies)
    } else {
        let img = tc.image(ctx.profile());
        let out = refutils::run_model(&UtilityModel::new(a.utility), &img, "/src", "/dst", Some(&a.answers))
            .map_err(|e| usage(e.to_string()))?;
        let cls = harness::classify_with(&img, &out.final_image, "/src", "/dst", &out, opts)
            .map_err(|e| usage(e.to_string()))?;
        ("emulation", cls, Vec::new())
    };
    let report = ClassifyReport {
        config: ctx.cfg.clone(),
        case: tc.id.clone(),
        utility: a.utility,
        mode: mode.to_string(),
        codes: cls.codes.iter().copied().collect(),
        evidence: cls.evidence,
        notes: cls.notes,
        discrepancies,
    };
    if ctx.json() {
        ctx.emit(&report)?;
    } else {
        let codes: String = report.codes.iter().map(|c| c.symbol()).collect();
        let shown = if codes.is_empty() { "(none)".to_string() } else { ctx.alert(&codes) };
        let mut t = format!("{} {} [{}]: {}\n", report.utility, report.case, report.mode, shown);
        for e in &report.evidence {
            t.push_str(&format!("  {} {}: {}\n", e.code, e.path, e.detail));
        }
        for n in &report.notes {
            t.push_str(&format!("  note: {n}\n"));
        }
        for d in &report.discrepancies {
            t.push_str(&format!("  discrepancy {}: model {} live {}\n", d.field, d.model, d.live));
        }
        ctx.text(&t)?;
    }
    Ok(if report.codes.is_empty() { EXIT_CLEAN } else { EXIT_FINDINGS })
}

fn cmd_trace(ctx: &mut Ctx, a: TraceArgs) -> Result<i32, Failure> {
    let text = read_text(&a.file)?;
    let table = if a.auditd {
        let tsv: Vec<String> = tracer::adapt_auditd(&text).iter().map(TraceRecord::to_tsv).collect();
        tracer::ingest(tsv.iter().map(String::as_str))
    } else {
        tracer::ingest(text.lines())
    };
    let violations = tracer::detect(&table, &ctx.profile(), a.device.as_deref());
    let report = TraceReport {
        config: ctx.cfg.clone(),
        records: table.records.len(),
        violations,
        parse_errors: table.parse_errors.clone(),
        unresolved_dirfd: table.unresolved_dirfd,
        warnings: table.warnings.clone(),
    };
    if ctx.json() {
        ctx.emit(&report)?;
    } else {
        let mut t = String::new();
        for e in &report.parse_errors {
            t.push_str(&format!("warning: {e}\n"));
        }
        for w in &report.warnings {
            t.push_str(&format!("warning: {w}\n"));
        }
        for v in &report.violations {
            t.push_str(&tracer::render_violation(v));
        }
        let n = report.violations.len();
        let summary = format!("{} records, {n} violation{}\n", report.records, if n == 1 { "" } else { "s" });
        t.push_str(&if n > 0 { ctx.alert(&summary) } else { summary });
        ctx.text(&t)?;
    }
    Ok(if report.violations.is_empty() { EXIT_CLEAN } else { EXIT_FINDINGS })
}

fn cmd_adapt(ctx: &mut Ctx, file: &Path) -> Result<i32, Failure> {
    let records = tracer::adapt_auditd(&read_text(file)?);
    if ctx.json() {
        let report = AdaptReport {
            config: ctx.cfg.clone(),
            records,
        };
        ctx.emit(&report)?;
    } else {
        let t: String = records.iter().map(|r| format!("{}\n", r.to_tsv())).collect();
        ctx.text(&t)?;
    }
    Ok(EXIT_CLEAN)
}
