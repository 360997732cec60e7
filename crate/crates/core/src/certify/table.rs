//! Certificate tables: one row per `eta`, one column per method,
//! cells in percent with two decimals and `-` for abstentions.

use std::fmt::Write as _;

use super::Certificate;
use crate::error::{Error, Result};

/// Accuracy offset `C = A_baseline - A_method`, added after the fact to a
/// method's raw bounds so surrogates of different clean accuracy compare on
/// one scale.
pub fn accuracy_offset(baseline_accuracy: f64, method_accuracy: f64) -> f64 {
    baseline_accuracy - method_accuracy
}

/// All certificates of one method.
#[derive(Clone, Debug)]
pub struct Column {
    pub method: String,
    pub certificates: Vec<Certificate>,
    /// When set, an extra `<method>+offset` column is emitted.
    pub offset: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct CertTable {
    columns: Vec<Column>,
    etas: Vec<f64>,
}

fn same_setting(a: &Certificate, b: &Certificate) -> bool {
    a.q == b.q && a.sigma == b.sigma && a.n == b.n && a.alpha == b.alpha
}

fn eta_key(eta: f64) -> i64 {
    // etas are compared at 1e-9 resolution so 0.1 from text equals 0.1 computed
    (eta * 1e9).round() as i64
}

impl CertTable {
    /// Collects columns, refusing certificates with differing
    /// `(q, sigma, n, alpha)` unless `allow_mixed`.
    pub fn new(columns: Vec<Column>, allow_mixed: bool) -> Result<Self> {
        let first = columns
            .iter()
            .flat_map(|c| c.certificates.iter())
            .next()
            .ok_or_else(|| Error::config("no certificates to tabulate"))?;
        if !allow_mixed {
            if let Some(bad) = columns.iter().flat_map(|c| c.certificates.iter()).find(|c| !same_setting(first, c)) {
                return Err(Error::config(format!(
                    "certificates mix settings (q={}, sigma={}, n={}, alpha={}) and (q={}, sigma={}, n={}, alpha={})",
                    first.q, first.sigma, first.n, first.alpha, bad.q, bad.sigma, bad.n, bad.alpha
                )));
            }
        }
        let mut seen = std::collections::BTreeMap::new();
        for c in columns.iter().flat_map(|c| c.certificates.iter()) {
            if !c.eta.is_finite() {
                return Err(Error::NonFinite("eta"));
            }
            seen.entry(eta_key(c.eta)).or_insert(c.eta);
        }
        Ok(Self {
            etas: seen.into_values().collect(),
            columns,
        })
    }

    pub fn etas(&self) -> &[f64] {
        &self.etas
    }

    pub fn columns(&self) -> &[Column] {
        &self.columns
    }

    fn lookup(col: &Column, eta: f64) -> Option<&Certificate> {
        col.certificates.iter().rev().find(|c| eta_key(c.eta) == eta_key(eta))
    }

    /// Raw (or offset) bound for one cell; `None` for abstentions and gaps.
    pub fn cell(&self, col: usize, eta: f64, with_offset: bool) -> Option<f64> {
        let column = &self.columns[col];
        let bound = Self::lookup(column, eta)?.bound?;
        Some(if with_offset { bound + column.offset.unwrap_or(0.0) } else { bound })
    }

    /// CSV text with a header row `eta_x100,<methods...>`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("eta_x100");
        for c in &self.columns {
            out.push(',');
            out.push_str(&csv_field(&c.method));
            if c.offset.is_some() {
                out.push(',');
                out.push_str(&csv_field(&format!("{}+offset", c.method)));
            }
        }
        out.push('\n');
        for &eta in &self.etas {
            let _ = write!(out, "{}", format_percent(eta));
            for (i, c) in self.columns.iter().enumerate() {
                out.push(',');
                out.push_str(&format_cell(self.cell(i, eta, false)));
                if c.offset.is_some() {
                    out.push(',');
                    out.push_str(&format_cell(self.cell(i, eta, true)));
                }
            }
            out.push('\n');
        }
        out
    }
}

fn format_percent(v: f64) -> String {
    let s = format!("{:.4}", v * 100.0);
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" { "0".into() } else { s.to_string() }
}

fn format_cell(v: Option<f64>) -> String {
    match v {
        Some(b) => format!("{:.2}", b * 100.0),
        None => "-".into(),
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Parsed CSV table: `eta_x100` values and named columns of optional cells
/// (still in percent).
#[derive(Clone, Debug, PartialEq)]
pub struct ParsedTable {
    pub etas_x100: Vec<f64>,
    pub columns: Vec<(String, Vec<Option<f64>>)>,
}

/// Reads back a table written by [`CertTable::to_csv`].
pub fn parse_csv(text: &str) -> Result<ParsedTable> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().ok_or_else(|| Error::CorruptFile("empty table".into()))?;
    let names: Vec<&str> = header.split(',').collect();
    if names.first() != Some(&"eta_x100") {
        return Err(Error::CorruptFile("table header must start with eta_x100".into()));
    }
    let mut columns: Vec<(String, Vec<Option<f64>>)> = names[1..].iter().map(|n| (n.trim_matches('"').to_string(), Vec::new())).collect();
    let mut etas = Vec::new();
    for line in lines {
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != names.len() {
            return Err(Error::CorruptFile(format!("row has {} cells, header has {}", cells.len(), names.len())));
        }
        etas.push(cells[0].parse::<f64>().map_err(|e| Error::CorruptFile(format!("bad eta {:?}: {e}", cells[0])))?);
        for (col, cell) in columns.iter_mut().zip(&cells[1..]) {
            let v = match *cell {
                "-" => None,
                s => Some(s.parse::<f64>().map_err(|e| Error::CorruptFile(format!("bad cell {s:?}: {e}")))?),
            };
            col.1.push(v);
        }
    }
    Ok(ParsedTable { etas_x100: etas, columns })
}
