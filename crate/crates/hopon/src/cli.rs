//! `hopon` subcommands. Exit codes: 0 ok, 1 scenario invalid or not
//! composable, 2 runtime or IO failure, 3 usage error.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::thread;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use hopon_core::sim::{
    prepare, run_baseline, run_scenario, validate_scenario, MetricsReport, Mode, Scenario, SimError,
};
use serde::Serialize;

use crate::artifacts::write_compose_outputs;
use crate::canonical::to_canonical_json;
use crate::dot::to_dot;
use crate::scenario::{load_scenario, ScenarioError};
use crate::trace::write_trace;

pub const EXIT_OK: u8 = 0;
pub const EXIT_SCENARIO: u8 = 1;
pub const EXIT_RUNTIME: u8 = 2;
pub const EXIT_USAGE: u8 = 3;

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CommandOutcome {
    pub code: u8,
    /// Files written by the command.
    pub artifacts: Vec<PathBuf>,
}

#[derive(Debug, Parser)]
#[command(name = "hopon", version, about = "Compose hop-on network slices and simulate traffic over them")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Check a scenario and compose its slices without writing anything.
    Validate { scenario: PathBuf },
    /// Compose every slice and write router, routing, mapping and SDRA-Op configs.
    Compose {
        scenario: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the simulation in the scenario's mode.
    Run {
        scenario: PathBuf,
        #[arg(long)]
        metrics: PathBuf,
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Run hop-on and the session baseline and report them side by side.
    Compare {
        scenario: PathBuf,
        #[arg(long)]
        metrics: PathBuf,
    },
    /// Write the infrastructure and slice graphs in Graphviz format.
    ExportDot {
        scenario: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// A failed command: exit code plus the diagnostic for the error stream.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn scenario(message: impl ToString) -> Self {
        Self { code: EXIT_SCENARIO, message: message.to_string() }
    }

    fn runtime(message: impl ToString) -> Self {
        Self { code: EXIT_RUNTIME, message: message.to_string() }
    }

    fn io(path: &Path, e: impl ToString) -> Self {
        Self::runtime(format!("{}: {}", path.display(), e.to_string()))
    }
}

impl From<ScenarioError> for Failure {
    fn from(e: ScenarioError) -> Self {
        match e {
            ScenarioError::Io { .. } => Failure::runtime(e),
            ScenarioError::Parse { .. } => Failure::scenario(e),
        }
    }
}

impl From<SimError> for Failure {
    fn from(e: SimError) -> Self {
        if e.is_scenario_error() {
            Failure::scenario(e)
        } else {
            Failure::runtime(e)
        }
    }
}

type CmdResult = Result<Vec<PathBuf>, Failure>;

pub fn execute<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> CommandOutcome
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let text = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{text}");
                    CommandOutcome { code: EXIT_OK, artifacts: vec![] }
                }
                _ => {
                    let _ = write!(err, "{text}");
                    CommandOutcome { code: EXIT_USAGE, artifacts: vec![] }
                }
            };
        }
    };
    let result = match cli.command {
        Command::Validate { scenario } => validate(&scenario, out),
        Command::Compose { scenario, out: dir } => compose(&scenario, &dir, out),
        Command::Run { scenario, metrics, trace } => run(&scenario, &metrics, trace.as_deref(), out),
        Command::Compare { scenario, metrics } => compare(&scenario, &metrics, out),
        Command::ExportDot { scenario, out: path } => export_dot(&scenario, &path, out),
    };
    match result {
        Ok(artifacts) => CommandOutcome { code: EXIT_OK, artifacts },
        Err(f) => {
            let _ = writeln!(err, "error: {}", f.message);
            CommandOutcome { code: f.code, artifacts: vec![] }
        }
    }
}

fn write_file(path: &Path, body: &str) -> Result<(), Failure> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Failure::io(dir, e))?;
    }
    fs::write(path, body).map_err(|e| Failure::io(path, e))
}

fn validate(path: &Path, out: &mut dyn Write) -> CmdResult {
    let s = load_scenario(path)?;
    let (_, _, report) = validate_scenario(&s);
    if report.has_errors() {
        return Err(Failure::scenario(report));
    }
    let (_, deployed) = prepare(&s)?;
    for f in report.findings.iter() {
        let _ = writeln!(out, "{f}");
    }
    let _ =
        writeln!(out, "ok: {} slices composed, {} devices, {} flows", deployed.len(), s.devices.len(), s.traffic.len());
    Ok(vec![])
}

fn compose(path: &Path, dir: &Path, out: &mut dyn Write) -> CmdResult {
    let s = load_scenario(path)?;
    let (_, deployed) = prepare(&s)?;
    let written = write_compose_outputs(dir, &deployed).map_err(|e| Failure::io(dir, e))?;
    for p in &written {
        let _ = writeln!(out, "{}", p.display());
    }
    Ok(written)
}

fn metrics_json<T: Serialize>(value: &T) -> Result<String, Failure> {
    to_canonical_json(value).map_err(Failure::runtime)
}

fn run(path: &Path, metrics: &Path, trace: Option<&Path>, out: &mut dyn Write) -> CmdResult {
    let s = load_scenario(path)?;
    let (report, rows) = run_scenario(&s, trace.is_some())?;
    write_file(metrics, &metrics_json(&report)?)?;
    let mut written = vec![metrics.to_path_buf()];
    if let Some(t) = trace {
        let mut buf = Vec::new();
        write_trace(&mut buf, &rows).map_err(|e| Failure::io(t, e))?;
        write_file(t, &String::from_utf8_lossy(&buf))?;
        written.push(t.to_path_buf());
    }
    for (vn, m) in &report.vns {
        let _ = writeln!(
            out,
            "vn {vn}: sent {} delivered {} dropped {} in flight {} delivery ratio {:.3}",
            m.sent, m.delivered, m.dropped_total, m.in_flight_at_end, m.delivery_ratio
        );
    }
    let _ = writeln!(out, "signaling total {}", report.signaling.total());
    Ok(written)
}

#[derive(Debug, Clone, Copy, Serialize)]
struct Pair<T> {
    hop_on: T,
    session_baseline: T,
}

#[derive(Debug, Serialize)]
struct VnLatency {
    mean_s: Pair<f64>,
    p99_s: Pair<f64>,
    max_s: Pair<f64>,
    delivery_ratio: Pair<f64>,
}

#[derive(Debug, Serialize)]
struct Comparison {
    signaling: BTreeMap<&'static str, Pair<u64>>,
    latency: BTreeMap<u32, VnLatency>,
    hop_on: MetricsReport,
    session_baseline: MetricsReport,
}

impl Comparison {
    fn new(hop_on: MetricsReport, session_baseline: MetricsReport) -> Self {
        let (a, b) = (&hop_on.signaling, &session_baseline.signaling);
        let signaling = BTreeMap::from([
            ("registration", Pair { hop_on: a.registration, session_baseline: b.registration }),
            ("cm", Pair { hop_on: a.cm, session_baseline: b.cm }),
            ("al", Pair { hop_on: a.al, session_baseline: b.al }),
            ("session_baseline", Pair { hop_on: a.session_baseline, session_baseline: b.session_baseline }),
            ("total", Pair { hop_on: a.total(), session_baseline: b.total() }),
        ]);
        let latency = hop_on
            .vns
            .iter()
            .filter_map(|(vn, h)| {
                let b = session_baseline.vns.get(vn)?;
                let pair = |x: f64, y: f64| Pair { hop_on: x, session_baseline: y };
                Some((
                    *vn,
                    VnLatency {
                        mean_s: pair(h.latency.mean_s, b.latency.mean_s),
                        p99_s: pair(h.latency.p99_s, b.latency.p99_s),
                        max_s: pair(h.latency.max_s, b.latency.max_s),
                        delivery_ratio: pair(h.delivery_ratio, b.delivery_ratio),
                    },
                ))
            })
            .collect();
        Self { signaling, latency, hop_on, session_baseline }
    }

    fn table(&self) -> String {
        let mut t = format!("{:<28}{:>14}{:>18}\n", "metric", "hop_on", "session_baseline");
        for (k, p) in &self.signaling {
            t += &format!("{:<28}{:>14}{:>18}\n", format!("signaling.{k}"), p.hop_on, p.session_baseline);
        }
        for (vn, l) in &self.latency {
            for (name, p) in
                [("mean_s", l.mean_s), ("p99_s", l.p99_s), ("max_s", l.max_s), ("delivery_ratio", l.delivery_ratio)]
            {
                t += &format!("{:<28}{:>14.6}{:>18.6}\n", format!("vn {vn} {name}"), p.hop_on, p.session_baseline);
            }
        }
        t
    }
}

fn compare(path: &Path, metrics: &Path, out: &mut dyn Write) -> CmdResult {
    let s = load_scenario(path)?;
    let hop = Scenario { sim: hopon_core::sim::SimConfig { mode: Mode::HopOn, ..s.sim.clone() }, ..s.clone() };
    let (a, b) = thread::scope(|scope| {
        let h = scope.spawn(|| run_scenario(&hop, false).map(|(r, _)| r));
        let base = run_baseline(&s);
        (h.join().unwrap_or_else(|_| Err(SimError::Runtime("hop-on run panicked".into()))), base)
    });
    let cmp = Comparison::new(a?, b?);
    write_file(metrics, &metrics_json(&cmp)?)?;
    let _ = write!(out, "{}", cmp.table());
    Ok(vec![metrics.to_path_buf()])
}

fn export_dot(path: &Path, dest: &Path, out: &mut dyn Write) -> CmdResult {
    let s = load_scenario(path)?;
    let (infra, slices, report) = validate_scenario(&s);
    let infra = match infra {
        Some(i) if !report.has_errors() => i,
        _ => return Err(Failure::scenario(report)),
    };
    write_file(dest, &to_dot(&infra, &slices))?;
    let _ = writeln!(out, "{}", dest.display());
    Ok(vec![dest.to_path_buf()])
}
