//! CSV reports.

use std::path::Path;

use gas_core::eval::{AblationRow, Metric, MetricReport, PairedStats};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{LabError, Result};

fn writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    csv::Writer::from_path(path).map_err(|e| LabError::format(path, e))
}

fn finish(mut w: csv::Writer<std::fs::File>, path: &Path) -> Result<()> {
    w.flush().map_err(|e| LabError::io(path, e))
}

fn row<I, S>(w: &mut csv::Writer<std::fs::File>, path: &Path, fields: I) -> Result<()>
where
    I: IntoIterator<Item = S>,
    S: AsRef<[u8]>,
{
    w.write_record(fields).map_err(|e| LabError::format(path, e))
}

fn joined<T>(xs: &[T], f: impl Fn(&T) -> String) -> String {
    xs.iter().map(f).collect::<Vec<_>>().join(";")
}

/// One line per episode. Multi-constraint fields are `;`-separated; an
/// undefined ratio (no conversions) is written as `na`.
pub fn write_episodes(report: &MetricReport, path: &Path) -> Result<()> {
    let mut w = writer(path)?;
    row(&mut w, path, ["agent", "budget_frac", "seed", "period", "value", "score", "er_flags", "constraint_ratios", "status"])?;
    for r in &report.rows {
        row(
            &mut w,
            path,
            [
                r.agent.clone(),
                r.budget_frac.to_string(),
                r.seed.to_string(),
                r.period.to_string(),
                r.value.to_string(),
                r.score.to_string(),
                joined(&r.er_flags, |f| u8::from(*f).to_string()),
                joined(&r.constraint_ratios, |x| x.map_or("na".to_string(), |v| v.to_string())),
                if r.failed { "failed" } else { "ok" }.to_string(),
            ],
        )?;
    }
    finish(w, path)
}

/// Means per `(agent, budget_frac)` over the successful episodes.
pub fn write_aggregate(report: &MetricReport, path: &Path) -> Result<()> {
    let mut w = writer(path)?;
    row(&mut w, path, ["agent", "budget_frac", "n", "failed", "mean_value", "mean_score", "er"])?;
    for a in report.aggregate() {
        row(
            &mut w,
            path,
            [
                a.agent,
                a.budget_frac.to_string(),
                a.n.to_string(),
                a.failed.to_string(),
                a.mean_value.to_string(),
                a.mean_score.to_string(),
                a.er.to_string(),
            ],
        )?;
    }
    finish(w, path)
}

/// Two-sided p-value of a paired t statistic.
pub fn p_value(s: &PairedStats) -> f64 {
    if s.n < 2 {
        return 1.0;
    }
    if !s.t.is_finite() {
        return if s.mean == 0.0 { 1.0 } else { 0.0 };
    }
    let dist = StudentsT::new(0.0, 1.0, (s.n - 1) as f64).expect("valid degrees of freedom");
    2.0 * (1.0 - dist.cdf(s.t.abs()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairedRow {
    pub agent: String,
    pub baseline: String,
    pub metric: Metric,
    pub stats: PairedStats,
    pub p_value: f64,
}

/// Paired differences of every agent against `baseline` on both metrics.
pub fn paired_rows(report: &MetricReport, baseline: &str) -> Result<Vec<PairedRow>> {
    let mut out = Vec::new();
    for agent in report.agents().into_iter().filter(|a| a != baseline) {
        for metric in [Metric::Score, Metric::Value] {
            let stats = report.paired(&agent, baseline, metric);
            out.push(PairedRow { agent: agent.clone(), baseline: baseline.into(), metric, p_value: p_value(&stats), stats });
        }
    }
    Ok(out)
}

pub fn write_paired(rows: &[PairedRow], path: &Path) -> Result<()> {
    let mut w = writer(path)?;
    row(&mut w, path, ["agent", "baseline", "metric", "n", "mean_diff", "std_diff", "t", "p_value"])?;
    for r in rows {
        let metric = match r.metric {
            Metric::Score => "score",
            Metric::Value => "value",
        };
        row(
            &mut w,
            path,
            [
                r.agent.clone(),
                r.baseline.clone(),
                metric.to_string(),
                r.stats.n.to_string(),
                r.stats.mean.to_string(),
                r.stats.std.to_string(),
                r.stats.t.to_string(),
                r.p_value.to_string(),
            ],
        )?;
    }
    finish(w, path)
}

/// Score-versus-parameter table of an ablation sweep.
pub fn write_ablation(rows: &[AblationRow], path: &Path) -> Result<()> {
    let mut w = writer(path)?;
    row(&mut w, path, ["kind", "param", "mean_value", "mean_score", "er"])?;
    for r in rows {
        row(
            &mut w,
            path,
            [r.kind.as_str().to_string(), r.param.to_string(), r.mean_value.to_string(), r.mean_score.to_string(), r.er.to_string()],
        )?;
    }
    finish(w, path)
}

/// Generic table writer for training curves and small summaries.
pub fn write_table(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = writer(path)?;
    row(&mut w, path, header)?;
    for r in rows {
        row(&mut w, path, r)?;
    }
    finish(w, path)
}
