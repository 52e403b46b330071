//! Rectangular CSV reports with canonical row order.

use std::fmt::Write as _;
use std::io;
use std::path::Path;

#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Text(String),
    Int(u64),
    Float(f64),
    Empty,
}

impl From<&str> for Cell {
    fn from(s: &str) -> Self {
        Cell::Text(s.to_string())
    }
}

impl From<String> for Cell {
    fn from(s: String) -> Self {
        Cell::Text(s)
    }
}

impl From<u64> for Cell {
    fn from(v: u64) -> Self {
        Cell::Int(v)
    }
}

impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::Int(v as u64)
    }
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Float(v)
    }
}

impl<T: Into<Cell>> From<Option<T>> for Cell {
    fn from(v: Option<T>) -> Self {
        v.map_or(Cell::Empty, Into::into)
    }
}

impl Cell {
    fn render(&self, out: &mut String) {
        match self {
            Cell::Text(s) => out.push_str(s),
            Cell::Int(v) => write!(out, "{v}").unwrap(),
            // shortest round-trip form; locale-independent
            Cell::Float(v) => write!(out, "{v:e}").unwrap(),
            Cell::Empty => {}
        }
    }

    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Cell::Float(v) => Some(*v),
            Cell::Int(v) => Some(*v as f64),
            _ => None,
        }
    }

    pub fn as_text(&self) -> Option<&str> {
        match self {
            Cell::Text(s) => Some(s),
            _ => None,
        }
    }
}

/// A header plus rows of equal width.
///
/// Rows are emitted sorted by the first column (text) and then the second
/// (integer), so output does not depend on the order rows were produced in.
/// Ties keep insertion order.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvReport {
    header: Vec<String>,
    rows: Vec<Vec<Cell>>,
}

impl CsvReport {
    pub fn new<S: Into<String>>(header: impl IntoIterator<Item = S>) -> Self {
        let header: Vec<String> = header.into_iter().map(Into::into).collect();
        assert!(!header.is_empty(), "a report needs at least one column");
        assert!(
            header.iter().all(|h| !h.contains([',', '"', '\n'])),
            "column names must not need quoting"
        );
        CsvReport {
            header,
            rows: Vec::new(),
        }
    }

    pub fn header(&self) -> &[String] {
        &self.header
    }

    /// Appends a row; panics when its width differs from the header.
    pub fn push(&mut self, row: Vec<Cell>) {
        assert_eq!(row.len(), self.header.len(), "row width must match the header");
        self.rows.push(row);
    }

    pub fn extend(&mut self, other: CsvReport) {
        assert_eq!(self.header, other.header, "cannot merge reports with different columns");
        self.rows.extend(other.rows);
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Rows in canonical order.
    pub fn rows(&self) -> Vec<&[Cell]> {
        let mut rows: Vec<&[Cell]> = self.rows.iter().map(Vec::as_slice).collect();
        rows.sort_by(|a, b| {
            let key = |r: &[Cell]| {
                let name = r[0].as_text().unwrap_or("").to_string();
                let idx = r.get(1).and_then(Cell::as_f64).unwrap_or(f64::NEG_INFINITY);
                (name, idx)
            };
            let (na, ia) = key(a);
            let (nb, ib) = key(b);
            na.cmp(&nb).then(ia.total_cmp(&ib))
        });
        rows
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }

    /// `(second column, value)` pairs of column `name` for rows whose first
    /// column equals `key`, in canonical order.
    pub fn series(&self, key: &str, name: &str) -> Vec<(f64, Option<f64>)> {
        let Some(col) = self.column_index(name) else {
            return Vec::new();
        };
        self.rows()
            .into_iter()
            .filter(|r| r[0].as_text() == Some(key))
            .map(|r| (r[1].as_f64().unwrap_or(f64::NAN), r[col].as_f64()))
            .collect()
    }

    /// Distinct first-column values in canonical order.
    pub fn keys(&self) -> Vec<String> {
        let mut keys: Vec<String> = Vec::new();
        for r in self.rows() {
            let k = r[0].as_text().unwrap_or("").to_string();
            if keys.last() != Some(&k) {
                keys.push(k);
            }
        }
        keys
    }

    pub fn to_csv(&self) -> String {
        let mut out = self.header.join(",");
        out.push('\n');
        for row in self.rows() {
            for (i, cell) in row.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                cell.render(&mut out);
            }
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: &Path) -> io::Result<()> {
        std::fs::write(path, self.to_csv())
    }
}
