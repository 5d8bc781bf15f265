//! Side-by-side comparison of `simulate` outputs.

use std::io::Write;
use std::path::Path;

use anyhow::{bail, Context, Result};
use cloudindex::simulator::{AggregateReport, SimReport};
use serde::{Deserialize, Serialize};

use crate::commands::open_output;
use crate::config::{Echo, TOOL};
use crate::ReportArgs;

/// The parts of a `simulate` output the table needs.
#[derive(Deserialize)]
struct ReportFile {
    tool: String,
    command: String,
    result: AggregateReport,
}

#[derive(Debug, Serialize)]
pub struct TrialRow {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub file: Option<String>,
    pub trial: usize,
    pub job: String,
    pub policy: String,
    pub seed: u64,
    pub total_cost: f64,
    pub baseline_on_demand_cost: f64,
    pub index_cost: f64,
    pub cost_vs_on_demand: f64,
    pub cost_vs_index: f64,
    pub availability: f64,
    pub downtime: i64,
    pub wallclock: i64,
    pub migrations: usize,
    pub revocations: usize,
    pub sufficiency_violations: usize,
    pub ledger_net: f64,
}

impl TrialRow {
    pub fn new(file: Option<String>, trial: usize, r: &SimReport) -> TrialRow {
        TrialRow {
            file,
            trial,
            job: r.job.clone(),
            policy: r.policy.name().to_string(),
            seed: r.seed,
            total_cost: r.total_cost,
            baseline_on_demand_cost: r.baseline_on_demand_cost,
            index_cost: r.index_cost,
            cost_vs_on_demand: r.cost_vs_on_demand,
            cost_vs_index: r.cost_vs_index,
            availability: r.availability,
            downtime: r.downtime,
            wallclock: r.wallclock,
            migrations: r.migrations,
            revocations: r.revocations,
            sufficiency_violations: r.sufficiency_violations,
            ledger_net: r.ledger_net,
        }
    }
}

pub fn write_trial_rows(w: &mut dyn Write, rows: &[TrialRow]) -> Result<()> {
    let mut csv = csv::Writer::from_writer(w);
    for row in rows {
        csv.serialize(row)?;
    }
    csv.flush()?;
    Ok(())
}

/// One table row: means over a report's trials.
#[derive(Debug, Serialize)]
struct TableRow {
    policy: String,
    job: String,
    trials: usize,
    cost_vs_on_demand: f64,
    cost_vs_index: f64,
    availability: f64,
    migrations: f64,
    revocations: f64,
}

fn load(path: &Path) -> Result<AggregateReport> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let file: ReportFile =
        serde_json::from_str(&text).with_context(|| format!("{}: not a simulation report", path.display()))?;
    if file.tool != TOOL || file.command != "simulate" {
        bail!(
            "{}: not a simulation report (written by `{} {}`)",
            path.display(),
            file.tool,
            file.command
        );
    }
    if file.result.trials.is_empty() {
        bail!("{}: report has no trials", path.display());
    }
    Ok(file.result)
}

fn render_text(rows: &[TableRow]) -> String {
    let header = [
        "policy",
        "job",
        "trials",
        "cost/on-demand",
        "cost/index",
        "availability",
        "migrations",
        "revocations",
    ];
    let cells: Vec<[String; 8]> = rows
        .iter()
        .map(|r| {
            [
                r.policy.clone(),
                r.job.clone(),
                r.trials.to_string(),
                format!("{:.4}", r.cost_vs_on_demand),
                format!("{:.4}", r.cost_vs_index),
                format!("{:.2}%", 100.0 * r.availability),
                format!("{:.2}", r.migrations),
                format!("{:.2}", r.revocations),
            ]
        })
        .collect();
    let mut widths = header.map(str::len);
    for row in &cells {
        for (w, c) in widths.iter_mut().zip(row) {
            *w = (*w).max(c.len());
        }
    }
    let line = |row: &[String]| {
        row.iter()
            .zip(widths)
            .enumerate()
            .map(|(i, (c, w))| if i < 2 { format!("{c:<w$}") } else { format!("{c:>w$}") })
            .collect::<Vec<_>>()
            .join("  ")
            .trim_end()
            .to_string()
    };
    let mut out = line(&header.map(String::from));
    out.push('\n');
    for row in &cells {
        out.push_str(&line(row));
        out.push('\n');
    }
    out
}

pub fn run(a: &ReportArgs) -> Result<()> {
    let reports = a.reports.iter().map(|p| load(p)).collect::<Result<Vec<_>>>()?;

    let first_job = &reports[0].trials[0].job;
    for (path, report) in a.reports.iter().zip(&reports) {
        if let Some(other) = report.trials.iter().find(|t| &t.job != first_job) {
            if !a.force {
                bail!(
                    "{}: job `{}` is not comparable with `{first_job}` (use --force to compare anyway)",
                    path.display(),
                    other.job
                );
            }
            log::warn!("{}: comparing job `{}` with `{first_job}`", path.display(), other.job);
        }
    }

    let rows: Vec<TableRow> = reports
        .iter()
        .map(|r| TableRow {
            policy: r.trials[0].policy.name().to_string(),
            job: r.trials[0].job.clone(),
            trials: r.trials.len(),
            cost_vs_on_demand: r.cost_vs_on_demand.mean,
            cost_vs_index: r.cost_vs_index.mean,
            availability: r.availability.mean,
            migrations: r.migrations.mean,
            revocations: r.revocations.mean,
        })
        .collect();

    let echo = Echo::new("report", a.seed, a);
    let mut w = open_output(a.out.as_deref())?;
    writeln!(w, "{}", echo.comment())?;
    if a.format == "csv" {
        let mut csv = csv::Writer::from_writer(&mut w);
        for row in &rows {
            csv.serialize(row)?;
        }
        csv.flush()?;
    } else {
        w.write_all(render_text(&rows).as_bytes())?;
    }
    w.flush()?;

    if let Some(path) = &a.samples {
        let samples: Vec<TrialRow> = a
            .reports
            .iter()
            .zip(&reports)
            .flat_map(|(p, r)| {
                r.trials
                    .iter()
                    .enumerate()
                    .map(move |(i, t)| TrialRow::new(Some(p.display().to_string()), i, t))
            })
            .collect();
        let mut w = open_output(Some(path))?;
        writeln!(w, "{}", echo.comment())?;
        write_trial_rows(&mut w, &samples)?;
        w.flush()?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_table_aligns_columns() {
        let row = |policy: &str, avail: f64| TableRow {
            policy: policy.into(),
            job: "j".into(),
            trials: 3,
            cost_vs_on_demand: 0.25,
            cost_vs_index: 0.9,
            availability: avail,
            migrations: 1.5,
            revocations: 0.0,
        };
        let text = render_text(&[row("cost", 0.97), row("balanced", 1.0)]);
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("cost    "));
        assert!(lines[2].ends_with("1.50         0.00"));
        assert!(lines[2].contains("100.00%"));
        assert_eq!(lines[1].len(), lines[2].len());
    }
}
