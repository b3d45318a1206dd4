//! Report rendering for the command-line driver: one verification run
//! or one benchmark sweep, as stable text or versioned JSON.

use serde::Serialize;

use crate::bench::BenchRow;
use crate::verify::{Judgment, Verification};

pub const SCHEMA: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Text,
    Json,
}

#[derive(Serialize)]
struct JudgmentEntry {
    proved: bool,
    reason: Option<String>,
}

impl From<&Judgment> for JudgmentEntry {
    fn from(j: &Judgment) -> Self {
        match j {
            Judgment::Proved => JudgmentEntry {
                proved: true,
                reason: None,
            },
            Judgment::NotProved { reason } => JudgmentEntry {
                proved: false,
                reason: Some(reason.clone()),
            },
        }
    }
}

#[derive(Serialize)]
struct AlarmEntry {
    kind: &'static str,
    addr: String,
    message: String,
}

#[derive(Serialize)]
struct VerifyReport<'a> {
    schema: u32,
    mode: &'a str,
    kernel: &'a str,
    user: &'a str,
    arte: JudgmentEntry,
    ape: JudgmentEntry,
    alarm_count: usize,
    alarms: Vec<AlarmEntry>,
    complete: bool,
    inductive: bool,
    worklist_pops: u64,
    millis: f64,
    invariant_path: Option<&'a str>,
}

/// Render one verification run.
pub fn verification(
    format: Format,
    mode: &str,
    kernel: &str,
    user: &str,
    v: &Verification,
    millis: f64,
    invariant_path: Option<&str>,
) -> String {
    let alarms: Vec<AlarmEntry> = v
        .result
        .alarms
        .iter()
        .map(|a| AlarmEntry {
            kind: a.kind.name(),
            addr: format!("{:#04x}", a.addr),
            message: a.message.clone(),
        })
        .collect();
    match format {
        Format::Json => {
            let rep = VerifyReport {
                schema: SCHEMA,
                mode,
                kernel,
                user,
                arte: (&v.arte).into(),
                ape: (&v.ape).into(),
                alarm_count: alarms.len(),
                alarms,
                complete: v.result.complete,
                inductive: v.result.inductive,
                worklist_pops: v.result.pops,
                millis,
                invariant_path,
            };
            let mut s = serde_json::to_string_pretty(&rep).expect("report serializes");
            s.push('\n');
            s
        }
        Format::Text => {
            let mut out = String::new();
            out.push_str(&format!("mode: {mode}\n"));
            out.push_str(&format!("kernel: {kernel}\n"));
            out.push_str(&format!("user: {user}\n"));
            out.push_str(&format!("arte: {}\n", v.arte));
            out.push_str(&format!("ape: {}\n", v.ape));
            out.push_str(&format!("alarms: {}\n", alarms.len()));
            for a in &v.result.alarms {
                out.push_str(&format!("  {a}\n"));
            }
            out.push_str(&format!(
                "fixpoint: {}, {}, {} worklist pops\n",
                if v.result.complete { "complete" } else { "budget exceeded" },
                if v.result.inductive { "inductive" } else { "not re-checked" },
                v.result.pops,
            ));
            if let Some(p) = invariant_path {
                out.push_str(&format!("invariant: {p}\n"));
            }
            out.push_str(&format!("time: {millis:.1} ms\n"));
            out
        }
    }
}

#[derive(Serialize)]
struct BenchEntry<'a> {
    n: usize,
    millis: f64,
    peak_bytes: Option<u64>,
    verdict: &'a str,
}

#[derive(Serialize)]
struct BenchReport<'a> {
    schema: u32,
    mode: &'a str,
    rows: Vec<BenchEntry<'a>>,
}

/// Render one benchmark sweep.
pub fn bench(format: Format, mode: &str, rows: &[BenchRow]) -> String {
    match format {
        Format::Json => {
            let rep = BenchReport {
                schema: SCHEMA,
                mode,
                rows: rows
                    .iter()
                    .map(|r| BenchEntry {
                        n: r.n,
                        millis: r.millis,
                        peak_bytes: r.peak_bytes,
                        verdict: &r.verdict,
                    })
                    .collect(),
            };
            let mut s = serde_json::to_string_pretty(&rep).expect("report serializes");
            s.push('\n');
            s
        }
        Format::Text => {
            let mut out = format!("benchmark mode: {mode}\n");
            out.push_str(&format!(
                "{:>5}  {:>10}  {:>12}  verdict\n",
                "N", "time ms", "peak bytes"
            ));
            for r in rows {
                let peak = r
                    .peak_bytes
                    .map_or_else(|| "-".to_string(), |b| b.to_string());
                out.push_str(&format!(
                    "{:>5}  {:>10.1}  {:>12}  {}\n",
                    r.n, r.millis, peak, r.verdict
                ));
            }
            out
        }
    }
}
