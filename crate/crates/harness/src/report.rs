//! Output files of a run.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;

use crate::experiment::{Record, RunOutput};

pub const EVENTS_FILE: &str = "events.csv";
pub const COUNTS_FILE: &str = "counts.csv";
pub const TAILS_FILE: &str = "tails.csv";
pub const RESULTS_FILE: &str = "results.jsonl";
pub const SUMMARY_FILE: &str = "summary.md";
pub const REPORT_FILE: &str = "report.json";

fn write_csv<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

/// Contents of `results.jsonl`: one JSON object per record and line.
pub fn results_bytes(records: &[Record]) -> Vec<u8> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r).expect("records serialize");
        out.push(b'\n');
    }
    out
}

pub fn write_records(path: &Path, records: &[Record]) -> Result<()> {
    fs::write(path, results_bytes(records)).with_context(|| format!("writing {}", path.display()))
}

/// Writes every output of `out` into `dir` and returns the written paths.
pub fn write_all(dir: &Path, out: &RunOutput) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut written = Vec::new();
    let p = dir.join(EVENTS_FILE);
    write_csv(&p, &out.events)?;
    written.push(p);
    let p = dir.join(COUNTS_FILE);
    write_csv(&p, &out.counts)?;
    written.push(p);
    let p = dir.join(TAILS_FILE);
    match &out.tail {
        Some(tail) => write_csv(&p, &tail.points)?,
        None => fs::write(&p, "n,survival,stderr\n")?,
    }
    written.push(p);
    let p = dir.join(RESULTS_FILE);
    write_records(&p, &out.report.records)?;
    written.push(p);
    let p = dir.join(REPORT_FILE);
    fs::write(&p, serde_json::to_string_pretty(&out.report)?)?;
    written.push(p);
    let p = dir.join(SUMMARY_FILE);
    fs::write(&p, summary(out))?;
    written.push(p);
    Ok(written)
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or_else(|| "-".into(), |v| format!("{v:.4}"))
}

/// Markdown summary of a run.
pub fn summary(out: &RunOutput) -> String {
    let r = &out.report;
    let mut s = String::new();
    let _ = writeln!(s, "# Run summary\n");
    let _ = writeln!(s, "- version: {}", r.version);
    let _ = writeln!(s, "- seed: {}", r.seed);
    let _ = writeln!(s, "- mode: {:?}", r.mode);
    if let Some(m) = r.inducing_mass {
        let _ = writeln!(s, "- inducing set mass: {m:.6}");
    }
    if !r.targets.is_empty() {
        let _ = writeln!(s, "\n## Targets\n");
        let _ = writeln!(s, "| # | component | r | theta | separation | redraws |");
        let _ = writeln!(s, "|---|---|---|---|---|---|");
        for t in &r.targets {
            let _ = writeln!(
                s,
                "| {} | {} | {:.6} | {:.6} | {} | {} |",
                t.index,
                t.zeta.component,
                t.zeta.r,
                t.zeta.theta,
                fmt_opt(t.separation),
                t.redraws
            );
        }
    }
    if !r.cells.is_empty() {
        let _ = writeln!(s, "\n## Cells\n");
        let _ = writeln!(s, "| cell | target | n | tau | radius | t | TV | chi2 p | full vs induced | KS p | flagged | pass |");
        let _ = writeln!(s, "|---|---|---|---|---|---|---|---|---|---|---|---|");
        for c in &r.cells {
            let radius = c.schedule.map_or("-".into(), |ts| format!("{:.3e}", ts.radius_n));
            let ks = fmt_opt(c.ks.as_ref().map(|k| k.p_value));
            if c.windows.is_empty() {
                let _ = writeln!(
                    s,
                    "| {} | {} | {} | {} | {radius} | - | - | - | - | {ks} | {} | {} |",
                    c.cell, c.target, c.n, c.tau, c.near_periodic, c.passed
                );
            }
            for w in &c.windows {
                let _ = writeln!(
                    s,
                    "| {} | {} | {} | {} | {radius} | {} | {:.4} | {:.4} | {} | {ks} | {} | {} |",
                    c.cell,
                    c.target,
                    c.n,
                    c.tau,
                    w.t,
                    w.tv,
                    w.chi_square_p,
                    fmt_opt(w.full_vs_induced_tv),
                    c.near_periodic,
                    c.passed
                );
            }
            if let Some(e) = &c.error {
                let _ = writeln!(s, "\ncell {} error: {e}\n", c.cell);
            }
        }
    }
    if let Some(a) = &r.aggregate {
        let _ = writeln!(s, "\n## Verdict\n");
        let _ = writeln!(
            s,
            "{} of {} considered cells passed ({:.1}%), {} flagged near-periodic, {} errored: {}",
            a.passed,
            a.considered,
            100.0 * a.pass_rate,
            a.near_periodic,
            a.errored,
            if a.verdict { "PASS" } else { "FAIL" }
        );
    }
    if let Some(k) = &r.kac {
        let _ = writeln!(s, "\n## Kac check\n");
        let _ = writeln!(
            s,
            "mean return {:.4} +- {:.4}, 1/mu(M) {:.4} +- {:.4}, z = {:.3} ({} samples)",
            k.mean_return, k.mean_stderr, k.inv_mass, k.inv_mass_stderr, k.z_score, k.n_samples
        );
    }
    if let Some(t) = &r.tail {
        let _ = writeln!(s, "\n## Return-time tail\n");
        let _ = writeln!(s, "log-log slope {}, semilog |r| {}", fmt_opt(t.loglog_slope), fmt_opt(t.semilog_r));
    }
    let diagnostics: Vec<&Record> = r
        .records
        .iter()
        .filter(|x| {
            !matches!(
                x.op.as_str(),
                "poisson_count_test" | "ks_exponential" | "compare_full_vs_induced" | "kac_check" | "return_tail"
            )
        })
        .collect();
    if !diagnostics.is_empty() {
        let _ = writeln!(s, "\n## Other records\n");
        let _ = writeln!(s, "| op | estimate | stderr | n |");
        let _ = writeln!(s, "|---|---|---|---|");
        for d in diagnostics {
            let _ = writeln!(s, "| {} | {:.4e} | {:.2e} | {} |", d.op, d.estimate, d.stderr, d.n_samples);
        }
    }
    s
}
