use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::Variant;
use crate::error::{Error, Result};
use crate::metrics::{parse_csv, MetricsReport};

pub struct Report {
    /// `MEAN` rows, variants in table order, then input order.
    pub rows: Vec<MetricsReport>,
    pub table: String,
    /// Two-column `step value` files written.
    pub plots: Vec<PathBuf>,
}

const COLUMNS: [&str; 6] = ["psnr_db", "ssim", "mse", "chamfer", "fidelity_mae", "fidelity_sim"];

fn values(r: &MetricsReport) -> [f64; 6] {
    [r.psnr_db, r.ssim, r.mse, r.chamfer, r.fidelity_mae, r.fidelity_sim]
}

fn read(path: &Path) -> Result<String> {
    if !path.exists() {
        return Err(Error::Missing(path.to_path_buf()));
    }
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Columns of `losses.csv` as `(name, [(step, value)])`, skipping blanks.
type Series = (String, Vec<(usize, f64)>);

fn loss_series(text: &str, path: &Path) -> Result<Vec<Series>> {
    let mut lines = text.lines();
    let header: Vec<String> = lines.next().unwrap_or_default().split(',').map(String::from).collect();
    let mut series: Vec<Series> = header.iter().skip(1).map(|h| (h.clone(), Vec::new())).collect();
    for (i, line) in lines.enumerate() {
        let cols: Vec<&str> = line.split(',').collect();
        let bad = |field: &str| Error::Parse {
            line: i + 2,
            field: field.into(),
            msg: format!("malformed row in {}", path.display()),
        };
        if cols.len() != header.len() {
            return Err(bad("row"));
        }
        let step: usize = cols[0].parse().map_err(|_| bad("step"))?;
        for (k, c) in cols.iter().enumerate().skip(1) {
            if !c.is_empty() {
                let v: f64 = c.parse().map_err(|_| bad(&header[k]))?;
                series[k - 1].1.push((step, v));
            }
        }
    }
    Ok(series)
}

/// Variant × metric table from each run directory's `MEAN` row, plus
/// `<run>_<loss>.dat` plot files in `out` for every `losses.csv` found.
pub fn report(dirs: &[PathBuf], out: &Path) -> Result<Report> {
    if dirs.is_empty() {
        return Err(Error::invalid("report needs at least one run directory"));
    }
    let mut rows = Vec::new();
    let mut plots = Vec::new();
    for dir in dirs {
        let csv_path = dir.join("metrics.csv");
        let parsed = parse_csv(&read(&csv_path)?)?;
        let mean = parsed
            .into_iter()
            .find(|r| r.view == "MEAN")
            .ok_or_else(|| Error::invalid(format!("no MEAN row in {}", csv_path.display())))?;
        let losses = dir.join("losses.csv");
        if losses.exists() {
            std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
            for (name, points) in loss_series(&read(&losses)?, &losses)? {
                if points.is_empty() {
                    continue;
                }
                let mut text = String::new();
                for (s, v) in points {
                    writeln!(text, "{s} {v}").expect("write to string");
                }
                let p = out.join(format!("{}_{name}.dat", mean.run));
                std::fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
                plots.push(p);
            }
        }
        rows.push(mean);
    }
    let rank = |r: &MetricsReport| {
        r.variant.parse::<Variant>().map_or(Variant::ALL.len(), |v| {
            Variant::ALL.iter().position(|w| *w == v).unwrap()
        })
    };
    rows.sort_by_key(rank);

    let width = rows.iter().map(|r| r.run.len()).max().unwrap_or(0).max(3);
    let mut table = format!("{:<15} {:<width$}", "variant", "run");
    for c in COLUMNS {
        write!(table, " {c:>22}").expect("write to string");
    }
    table.push('\n');
    for r in &rows {
        write!(table, "{:<15} {:<width$}", r.variant, r.run).expect("write to string");
        for v in values(r) {
            write!(table, " {:>22}", v.to_string()).expect("write to string");
        }
        table.push('\n');
    }
    let path = out.join("table.txt");
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    std::fs::write(&path, &table).map_err(|e| Error::io(&path, e))?;
    Ok(Report { rows, table, plots })
}

/// Re-reads the numbers printed in a [`Report::table`].
pub fn parse_table(table: &str) -> Vec<(String, String, [f64; 6])> {
    table
        .lines()
        .skip(1)
        .filter_map(|l| {
            let cols: Vec<&str> = l.split_whitespace().collect();
            if cols.len() != 8 {
                return None;
            }
            let mut v = [0.0; 6];
            for (k, slot) in v.iter_mut().enumerate() {
                *slot = cols[2 + k].parse().ok()?;
            }
            Some((cols[0].to_string(), cols[1].to_string(), v))
        })
        .collect()
}
