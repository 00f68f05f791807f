//! CSV and JSON reports.
//!
//! The CSV has one row per (query format, key format, seed), with the
//! unsorted and sorted metrics side by side. The JSON holds the resolved
//! config, every cell and a per-format summary. Neither contains timestamps
//! or paths of the output, so identical runs give identical bytes.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::experiment::{ErrorReport, ExperimentConfig};
use crate::sim::{serialize_extended_f64, CacheFormat};
use crate::tensorio::write_atomic;

pub const CSV_FILE: &str = "report.csv";
pub const JSON_FILE: &str = "report.json";

pub const CSV_HEADER: [&str; 13] = [
    "format_q",
    "format_k",
    "block_size",
    "seed",
    "bits_per_element",
    "mse_original",
    "mse_sorted",
    "sqnr_db_original",
    "sqnr_db_sorted",
    "max_abs_err_original",
    "max_abs_err_sorted",
    "logits_max_abs_err_original",
    "logits_max_abs_err_sorted",
];

/// Shortest round-trip decimal; `inf`, `-inf` and `NaN` for the rest.
fn fmt_f64(v: f64) -> String {
    if v.is_finite() {
        serde_json::to_string(&v).expect("finite float")
    } else {
        v.to_string()
    }
}

struct Row<'a> {
    original: Option<&'a ErrorReport>,
    sorted: Option<&'a ErrorReport>,
}

impl Row<'_> {
    fn any(&self) -> &ErrorReport {
        self.original.or(self.sorted).expect("row has a cell")
    }
}

/// Pairs unsorted and sorted cells, keeping first-appearance order.
fn pivot(cells: &[ErrorReport]) -> Vec<Row<'_>> {
    let mut rows: Vec<Row<'_>> = Vec::new();
    for c in cells {
        let key = (c.format_q, c.format_k, c.seed);
        let pos = rows.iter().position(|r| {
            let a = r.any();
            (a.format_q, a.format_k, a.seed) == key
        });
        let row = match pos {
            Some(i) => &mut rows[i],
            None => {
                rows.push(Row {
                    original: None,
                    sorted: None,
                });
                rows.last_mut().expect("just pushed")
            }
        };
        if c.sorted {
            row.sorted = Some(c);
        } else {
            row.original = Some(c);
        }
    }
    rows
}

pub fn render_csv(cells: &[ErrorReport]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CSV_HEADER)?;
    for row in pivot(cells) {
        let a = row.any();
        let both = |f: fn(&ErrorReport) -> f64| {
            [row.original, row.sorted].map(|c| c.map(|c| fmt_f64(f(c))).unwrap_or_default())
        };
        let [mse_o, mse_s] = both(|c| c.mse);
        let [sqnr_o, sqnr_s] = both(|c| c.sqnr_db);
        let [max_o, max_s] = both(|c| c.max_abs_err);
        let [log_o, log_s] = both(|c| c.logits_max_abs_err);
        w.write_record([
            a.format_q.to_string(),
            a.format_k.to_string(),
            a.block_size.map(|n| n.to_string()).unwrap_or_default(),
            a.seed.to_string(),
            fmt_f64(a.bits_per_element),
            mse_o,
            mse_s,
            sqnr_o,
            sqnr_s,
            max_o,
            max_s,
            log_o,
            log_s,
        ])?;
    }
    w.into_inner()
        .map_err(|e| Error::InvalidConfig(format!("csv buffer: {e}")))
}

/// Aggregate over seeds for one format pair.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub format_q: CacheFormat,
    pub format_k: CacheFormat,
    /// Seeds with both an unsorted and a sorted cell.
    pub seeds: usize,
    /// Seeds where sorting strictly lowered the cache MSE.
    pub sorted_wins: usize,
    pub median_mse_original: Option<f64>,
    pub median_mse_sorted: Option<f64>,
    /// Median over seeds of `1 − mse_sorted / mse_original`, seeds with zero
    /// original MSE left out.
    pub median_mse_reduction: Option<f64>,
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    Some(if v.len() % 2 == 1 {
        v[mid]
    } else {
        (v[mid - 1] + v[mid]) / 2.0
    })
}

pub fn summarize(cells: &[ErrorReport]) -> Vec<Summary> {
    let rows = pivot(cells);
    let mut pairs: Vec<(CacheFormat, CacheFormat)> = Vec::new();
    for r in &rows {
        let key = (r.any().format_q, r.any().format_k);
        if !pairs.contains(&key) {
            pairs.push(key);
        }
    }
    pairs
        .into_iter()
        .map(|(format_q, format_k)| {
            let matched: Vec<(f64, f64)> = rows
                .iter()
                .filter(|r| (r.any().format_q, r.any().format_k) == (format_q, format_k))
                .filter_map(|r| Some((r.original?.mse, r.sorted?.mse)))
                .collect();
            let originals: Vec<f64> = matched.iter().map(|m| m.0).collect();
            let sorted: Vec<f64> = matched.iter().map(|m| m.1).collect();
            let reductions: Vec<f64> = matched
                .iter()
                .filter(|m| m.0 > 0.0)
                .map(|(o, s)| 1.0 - s / o)
                .collect();
            Summary {
                format_q,
                format_k,
                seeds: matched.len(),
                sorted_wins: matched.iter().filter(|(o, s)| s < o).count(),
                median_mse_original: median(&originals),
                median_mse_sorted: median(&sorted),
                median_mse_reduction: median(&reductions),
            }
        })
        .collect()
}

#[derive(Serialize)]
struct ReportJson<'a> {
    config: serde_json::Value,
    cells: &'a [ErrorReport],
    summary: Vec<SummaryJson>,
}

#[derive(Serialize)]
struct SummaryJson {
    #[serde(flatten)]
    summary: Summary,
    #[serde(serialize_with = "serialize_extended_f64")]
    win_rate: f64,
}

/// The config as echoed in reports; the output directory is left out.
pub fn config_echo(cfg: &ExperimentConfig) -> Result<serde_json::Value> {
    let mut v = serde_json::to_value(cfg)?;
    if let Some(obj) = v.as_object_mut() {
        obj.remove("out_dir");
    }
    Ok(v)
}

pub fn render_json(cfg: &ExperimentConfig, cells: &[ErrorReport]) -> Result<Vec<u8>> {
    let doc = ReportJson {
        config: config_echo(cfg)?,
        cells,
        summary: summarize(cells)
            .into_iter()
            .map(|summary| SummaryJson {
                win_rate: summary.sorted_wins as f64 / summary.seeds as f64,
                summary,
            })
            .collect(),
    };
    let mut out = serde_json::to_vec_pretty(&doc)?;
    out.push(b'\n');
    Ok(out)
}

/// Writes `report.csv` and `report.json` into `dir`, creating it if needed.
pub fn emit_report(
    dir: &Path,
    cfg: &ExperimentConfig,
    cells: &[ErrorReport],
) -> Result<[PathBuf; 2]> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let csv_path = dir.join(CSV_FILE);
    let json_path = dir.join(JSON_FILE);
    write_atomic(&csv_path, &render_csv(cells)?)?;
    write_atomic(&json_path, &render_json(cfg, cells)?)?;
    Ok([csv_path, json_path])
}
