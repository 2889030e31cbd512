//! CSV/table output for pruning runs.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::Deserialize;

use subprune::pipeline::{RunReport, RunRow};

use crate::CliResult;

pub const ROW_COLUMNS: [&str; 9] = [
    "variant", "c", "seed", "acc1", "params", "flops", "speedup", "out_err", "time_ms",
];

/// The CSV columns of one run row.
#[derive(Debug, Clone, Deserialize)]
pub struct Row {
    pub variant: String,
    pub c: f64,
    pub seed: u64,
    pub acc1: f64,
    pub params: u64,
    pub flops: u64,
    pub speedup: f64,
    pub out_err: f64,
    pub time_ms: u64,
}

impl From<&RunRow> for Row {
    fn from(r: &RunRow) -> Self {
        Row {
            variant: r.variant.as_str().to_string(),
            c: r.c,
            seed: r.seed,
            acc1: r.acc1,
            params: r.params,
            flops: r.flops,
            speedup: r.speedup,
            out_err: r.out_err,
            time_ms: r.time_ms,
        }
    }
}

pub fn rows_of(report: &RunReport) -> Vec<Row> {
    report.rows.iter().map(Row::from).collect()
}

pub fn write_rows_csv(path: &Path, rows: &[RunRow]) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(ROW_COLUMNS)?;
    for r in rows.iter().map(Row::from) {
        w.write_record([
            r.variant,
            r.c.to_string(),
            r.seed.to_string(),
            r.acc1.to_string(),
            r.params.to_string(),
            r.flops.to_string(),
            r.speedup.to_string(),
            r.out_err.to_string(),
            r.time_ms.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn print_rows(rows: &[RunRow]) {
    println!(
        "{:<10} {:>6} {:>5} {:>8} {:>8} {:>9} {:>8} {:>10} {:>8}",
        "variant", "c", "seed", "acc1", "params", "flops", "speedup", "out_err", "time_ms"
    );
    for r in rows {
        println!(
            "{:<10} {:>6} {:>5} {:>8.4} {:>8} {:>9} {:>8.3} {:>10.4e} {:>8}",
            r.variant.as_str(),
            r.c,
            r.seed,
            r.acc1,
            r.params,
            r.flops,
            r.speedup,
            r.out_err,
            r.time_ms
        );
    }
}

#[derive(Deserialize)]
struct ReportFile {
    rows: Vec<Row>,
}

pub fn read_rows(path: &Path) -> CliResult<Vec<Row>> {
    let text = fs::read_to_string(path)?;
    Ok(serde_json::from_str::<ReportFile>(&text)?.rows)
}

/// Mean and sample standard deviation per (variant, c).
#[derive(Debug, Clone)]
pub struct Summary {
    pub variant: String,
    pub c: f64,
    pub n: usize,
    pub acc1: (f64, f64),
    pub out_err: (f64, f64),
    pub params: f64,
    pub speedup: f64,
}

fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (m, 0.0);
    }
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, v.sqrt())
}

pub fn aggregate(rows: Vec<Row>) -> Vec<Summary> {
    // Compression ratios are ≥ 1, so their bit patterns sort numerically.
    let mut groups: BTreeMap<(String, u64), Vec<Row>> = BTreeMap::new();
    for r in rows {
        groups.entry((r.variant.clone(), r.c.to_bits())).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|((variant, c), rs)| {
            let col = |f: fn(&Row) -> f64| rs.iter().map(f).collect::<Vec<f64>>();
            Summary {
                variant,
                c: f64::from_bits(c),
                n: rs.len(),
                acc1: mean_sd(&col(|r| r.acc1)),
                out_err: mean_sd(&col(|r| r.out_err)),
                params: mean_sd(&col(|r| r.params as f64)).0,
                speedup: mean_sd(&col(|r| r.speedup)).0,
            }
        })
        .collect()
}

pub fn write_plot_csv(path: &Path, summary: &[Summary]) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "variant",
        "c",
        "n",
        "acc1_mean",
        "acc1_sd",
        "out_err_mean",
        "out_err_sd",
        "params_mean",
        "speedup_mean",
    ])?;
    for s in summary {
        w.write_record([
            s.variant.clone(),
            s.c.to_string(),
            s.n.to_string(),
            s.acc1.0.to_string(),
            s.acc1.1.to_string(),
            s.out_err.0.to_string(),
            s.out_err.1.to_string(),
            s.params.to_string(),
            s.speedup.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn print_summary(summary: &[Summary]) {
    println!(
        "{:<10} {:>6} {:>4} {:>16} {:>20} {:>10} {:>8}",
        "variant", "c", "n", "acc1 (sd)", "out_err (sd)", "params", "speedup"
    );
    for s in summary {
        println!(
            "{:<10} {:>6} {:>4} {:>8.4} ({:.4}) {:>10.4e} ({:.1e}) {:>10.1} {:>8.3}",
            s.variant, s.c, s.n, s.acc1.0, s.acc1.1, s.out_err.0, s.out_err.1, s.params, s.speedup
        );
    }
}
