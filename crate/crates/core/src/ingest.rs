//! Reading externally supplied forecast panels.
//!
//! Each row carries sales and forecast levels for one firm-year:
//!
//! ```text
//! firm_id,fiscal_year,sales_actual,f1_level,f2_level,f2_base
//! ```
//!
//! `sales_actual` is `R[t]`, `f1_level` is `F_t R[t+1]`, `f2_level` is
//! `F_{t-1} R[t+1]` and `f2_base` is `F_{t-1} R[t]`. Growth forecasts are log
//! differences of these levels; the realized growth `g[t+1]` comes from the
//! firm's next fiscal year row.

use std::collections::HashMap;
use std::io::Read;
use std::path::Path;

use log::warn;

use crate::error::{Error, Result};
use crate::forecast::{ForecastPanel, ForecastRecord, PanelSource};

pub const HEADER: [&str; 6] = [
    "firm_id",
    "fiscal_year",
    "sales_actual",
    "f1_level",
    "f2_level",
    "f2_base",
];

/// Largest tolerated share of malformed rows.
pub const MAX_MALFORMED_SHARE: f64 = 0.10;

/// One validated firm-year. Empty forecast fields are `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct IngestRow {
    pub firm_id: String,
    pub fiscal_year: i64,
    pub sales_actual: f64,
    pub f1_level: Option<f64>,
    pub f2_level: Option<f64>,
    pub f2_base: Option<f64>,
}

/// Row accounting: `rows_in = rows_kept + rows_malformed + rows_incomplete`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct IngestReport {
    pub rows_in: usize,
    pub rows_kept: usize,
    pub rows_malformed: usize,
    /// Well-formed rows lacking the error or the revision.
    pub rows_incomplete: usize,
    pub diagnostics: Vec<String>,
}

fn parse_level(field: &str, name: &str) -> std::result::Result<Option<f64>, String> {
    if field.trim().is_empty() {
        return Ok(None);
    }
    let v: f64 = field
        .trim()
        .parse()
        .map_err(|_| format!("{name} `{field}` is not a number"))?;
    if !(v > 0.0 && v.is_finite()) {
        return Err(format!("{name} must be positive, got {field}"));
    }
    Ok(Some(v))
}

fn parse_row(rec: &csv::StringRecord) -> std::result::Result<IngestRow, String> {
    if rec.len() != HEADER.len() {
        return Err(format!("expected {} fields, found {}", HEADER.len(), rec.len()));
    }
    let firm_id = rec[0].trim().to_string();
    if firm_id.is_empty() {
        return Err("firm_id is empty".into());
    }
    let fiscal_year = rec[1]
        .trim()
        .parse()
        .map_err(|_| format!("fiscal_year `{}` is not an integer", &rec[1]))?;
    let sales_actual =
        parse_level(&rec[2], "sales_actual")?.ok_or_else(|| "sales_actual is missing".to_string())?;
    Ok(IngestRow {
        firm_id,
        fiscal_year,
        sales_actual,
        f1_level: parse_level(&rec[3], "f1_level")?,
        f2_level: parse_level(&rec[4], "f2_level")?,
        f2_base: parse_level(&rec[5], "f2_base")?,
    })
}

/// Error and revision of a firm-year given the next year's sales.
pub fn record_from_rows(row: &IngestRow, next_sales: Option<f64>) -> Option<ForecastRecord> {
    let f1_level = row.f1_level?;
    let next = next_sales?;
    let r_t = row.sales_actual.ln();
    let f1 = f1_level.ln() - r_t;
    let f2_prior = row.f2_level?.ln() - row.f2_base?.ln();
    Some(ForecastRecord {
        firm: row.firm_id.clone(),
        t: row.fiscal_year,
        f1,
        f2_prior,
        error: next.ln() - f1_level.ln(),
        revision: f1 - f2_prior,
    })
}

pub fn ingest_reader<R: Read>(reader: R) -> Result<(ForecastPanel, IngestReport)> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(reader);
    let header = rdr.headers()?.clone();
    let found: Vec<&str> = header.iter().map(str::trim).collect();
    if found != HEADER {
        return Err(Error::Data(format!(
            "header must be `{}`, found `{}`",
            HEADER.join(","),
            found.join(",")
        )));
    }
    let mut report = IngestReport::default();
    let mut rows: Vec<IngestRow> = Vec::new();
    let mut index: HashMap<(String, i64), usize> = HashMap::new();
    for (k, rec) in rdr.records().enumerate() {
        report.rows_in += 1;
        // header is line 1
        let line = k + 2;
        let parsed = rec
            .map_err(|e| e.to_string())
            .and_then(|r| parse_row(&r))
            .and_then(|row| {
                if index.contains_key(&(row.firm_id.clone(), row.fiscal_year)) {
                    Err(format!("duplicate row for {} {}", row.firm_id, row.fiscal_year))
                } else {
                    Ok(row)
                }
            });
        match parsed {
            Ok(row) => {
                index.insert((row.firm_id.clone(), row.fiscal_year), rows.len());
                rows.push(row);
            }
            Err(msg) => {
                report.rows_malformed += 1;
                report.diagnostics.push(format!("line {line}: {msg}"));
            }
        }
    }
    if report.rows_in == 0 {
        return Err(Error::Data("no data rows".into()));
    }
    let share = report.rows_malformed as f64 / report.rows_in as f64;
    if share > MAX_MALFORMED_SHARE {
        return Err(Error::Data(format!(
            "{} of {} rows malformed ({:.1}%), above the {:.0}% limit; first: {}",
            report.rows_malformed,
            report.rows_in,
            100.0 * share,
            100.0 * MAX_MALFORMED_SHARE,
            report.diagnostics.first().map_or("", String::as_str)
        )));
    }
    for d in &report.diagnostics {
        warn!("{d}");
    }
    let mut records = Vec::with_capacity(rows.len());
    for row in &rows {
        let next = index
            .get(&(row.firm_id.clone(), row.fiscal_year + 1))
            .map(|&i| rows[i].sales_actual);
        match record_from_rows(row, next) {
            Some(r) => records.push(r),
            None => report.rows_incomplete += 1,
        }
    }
    report.rows_kept = records.len();
    let panel = ForecastPanel::new(records, PanelSource::Ingested, report.rows_incomplete)?;
    Ok((panel, report))
}

pub fn ingest_forecast_panel(path: &Path) -> Result<(ForecastPanel, IngestReport)> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::Data(format!("cannot open {}: {e}", path.display())))?;
    ingest_reader(file)
}
