//! Posterior summaries, run artifacts on disk, and report comparison.
//!
//! A run directory holds `report.json` (a [`RunDocument`]),
//! `pooled_draws.csv` (columns `target`, then one per parameter) and
//! `summary.csv` (columns `method, scope, parameter, mean, sd, q05, q95`).
//! Floats are written in shortest round-trip form, so re-reading a run
//! reproduces its summaries bit for bit.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{usage, Error, Result};
use crate::orchestrator::PropagationReport;
use crate::sampling::DrawMatrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSummary {
    pub parameter: String,
    pub mean: f64,
    pub sd: f64,
    pub q05: f64,
    pub q95: f64,
}

/// Quantile with linear interpolation between order statistics
/// (`h = (n - 1) q`).
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Mean, sample sd, and 5% / 95% quantiles of every column.
pub fn summarize(draws: &DrawMatrix, names: &[String]) -> Result<Vec<ParamSummary>> {
    if names.len() != draws.dim() {
        return usage("one name per column required");
    }
    if draws.n_draws() < 2 {
        return usage("summaries need at least two draws");
    }
    let n = draws.n_draws() as f64;
    Ok(names
        .iter()
        .enumerate()
        .map(|(j, name)| {
            let mut col = draws.column(j);
            let mean = col.iter().sum::<f64>() / n;
            let var = col.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
            col.sort_by(f64::total_cmp);
            ParamSummary {
                parameter: name.clone(),
                mean,
                sd: var.sqrt(),
                q05: quantile(&col, 0.05),
                q95: quantile(&col, 0.95),
            }
        })
        .collect())
}

/// Everything stored in `report.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunDocument {
    /// Study configuration as given, for comparability checks.
    pub config: serde_json::Value,
    pub report: PropagationReport,
    pub elapsed_secs: f64,
}

pub fn write_pooled_csv(report: &PropagationReport, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["target".to_string()];
    header.extend(report.param_names.iter().cloned());
    w.write_record(&header)?;
    for (i, d) in &report.draws {
        for row in d.rows() {
            let mut rec = vec![i.to_string()];
            rec.extend(row.iter().map(|v| format!("{v}")));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Per-target draws and parameter names from a pooled-draws CSV.
pub fn read_pooled_csv(path: &Path) -> Result<(Vec<String>, BTreeMap<usize, DrawMatrix>)> {
    let mut rdr = csv::Reader::from_path(path)?;
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header.first().map(String::as_str) != Some("target") {
        return usage("pooled draws CSV must start with a target column");
    }
    let names = header[1..].to_vec();
    let mut rows: BTreeMap<usize, Vec<Vec<f64>>> = BTreeMap::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let parse = |s: &str| -> Result<f64> {
            s.parse()
                .map_err(|_| Error::Usage(format!("pooled draws row {}: cannot parse {s:?}", line + 1)))
        };
        let target: usize = rec[0]
            .parse()
            .map_err(|_| Error::Usage(format!("pooled draws row {}: bad target", line + 1)))?;
        let vals = rec.iter().skip(1).map(parse).collect::<Result<Vec<_>>>()?;
        if vals.len() != names.len() {
            return usage(format!("pooled draws row {} has the wrong width", line + 1));
        }
        rows.entry(target).or_default().push(vals);
    }
    let draws = rows
        .into_iter()
        .map(|(i, r)| Ok((i, DrawMatrix::from_rows(&r)?)))
        .collect::<Result<_>>()?;
    Ok((names, draws))
}

pub fn write_summary_csv(report: &PropagationReport, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["method", "scope", "parameter", "mean", "sd", "q05", "q95"])?;
    let method = report.method.as_str();
    let mut emit = |scope: &str, rows: Vec<ParamSummary>| -> Result<()> {
        for r in rows {
            w.write_record([
                method.to_string(),
                scope.to_string(),
                r.parameter,
                format!("{}", r.mean),
                format!("{}", r.sd),
                format!("{}", r.q05),
                format!("{}", r.q95),
            ])?;
        }
        Ok(())
    };
    if report.is_complete() {
        emit("pooled", summarize(&crate::orchestrator::pool_posterior(report)?, &report.param_names)?)?;
    }
    for (i, d) in &report.draws {
        emit(&format!("target_{i}"), summarize(d, &report.param_names)?)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `report.json`, `pooled_draws.csv` and `summary.csv` into `dir`.
pub fn write_run(dir: &Path, doc: &RunDocument) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("report.json"), serde_json::to_string_pretty(doc)?)?;
    write_pooled_csv(&doc.report, &dir.join("pooled_draws.csv"))?;
    write_summary_csv(&doc.report, &dir.join("summary.csv"))?;
    Ok(())
}

/// Reads a run directory, restoring the per-target draws into the report.
pub fn read_run(dir: &Path) -> Result<RunDocument> {
    let mut doc: RunDocument = serde_json::from_str(&std::fs::read_to_string(dir.join("report.json"))?)?;
    let (names, draws) = read_pooled_csv(&dir.join("pooled_draws.csv"))?;
    if names != doc.report.param_names {
        return usage("pooled draws columns do not match the report");
    }
    doc.report.draws = draws;
    Ok(doc)
}

/// Absolute summary differences averaged over parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub scope: String,
    pub d_mean: f64,
    pub d_sd: f64,
    pub d_q05: f64,
    pub d_q95: f64,
}

fn diff_row(scope: String, a: &[ParamSummary], b: &[ParamSummary]) -> ComparisonRow {
    let k = a.len() as f64;
    let avg = |f: fn(&ParamSummary) -> f64| a.iter().zip(b).map(|(x, y)| (f(x) - f(y)).abs()).sum::<f64>() / k;
    ComparisonRow {
        scope,
        d_mean: avg(|s| s.mean),
        d_sd: avg(|s| s.sd),
        d_q05: avg(|s| s.q05),
        d_q95: avg(|s| s.q95),
    }
}

/// Rows for the pooled posterior, the average over targets
/// (`target_mean`), and every target.
pub fn compare_reports(a: &PropagationReport, b: &PropagationReport) -> Result<Vec<ComparisonRow>> {
    if a.family != b.family || a.m != b.m || a.param_names != b.param_names {
        return usage(format!(
            "reports are not comparable ({} with m = {} vs {} with m = {})",
            a.family, a.m, b.family, b.m
        ));
    }
    if !a.is_complete() || !b.is_complete() {
        return usage("both reports must resolve every target");
    }
    let names = &a.param_names;
    let pooled = diff_row(
        "pooled".into(),
        &summarize(&crate::orchestrator::pool_posterior(a)?, names)?,
        &summarize(&crate::orchestrator::pool_posterior(b)?, names)?,
    );
    let per_target: Vec<ComparisonRow> = a
        .draws
        .iter()
        .map(|(i, da)| {
            let db = &b.draws[i];
            Ok(diff_row(format!("target_{i}"), &summarize(da, names)?, &summarize(db, names)?))
        })
        .collect::<Result<_>>()?;
    let n = per_target.len() as f64;
    let mean_row = ComparisonRow {
        scope: "target_mean".into(),
        d_mean: per_target.iter().map(|r| r.d_mean).sum::<f64>() / n,
        d_sd: per_target.iter().map(|r| r.d_sd).sum::<f64>() / n,
        d_q05: per_target.iter().map(|r| r.d_q05).sum::<f64>() / n,
        d_q95: per_target.iter().map(|r| r.d_q95).sum::<f64>() / n,
    };
    let mut rows = vec![pooled, mean_row];
    rows.extend(per_target);
    Ok(rows)
}

pub fn write_comparison_csv(rows: &[ComparisonRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["scope", "d_mean", "d_sd", "d_q05", "d_q95"])?;
    for r in rows {
        w.write_record([
            r.scope.clone(),
            format!("{}", r.d_mean),
            format!("{}", r.d_sd),
            format!("{}", r.d_q05),
            format!("{}", r.d_q95),
        ])?;
    }
    w.flush()?;
    Ok(())
}
