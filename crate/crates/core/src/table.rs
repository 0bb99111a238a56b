//! Per-subject landscape feature tables.
//!
//! On disk: header `subject_id,source,label,<feature columns...>` followed by
//! one row per (subject, source).

use std::path::Path;

use crate::error::{Error, Result};
use crate::ingest::WmLabel;
use crate::landscape::{Source, FEATURE_NAMES};

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRow {
    pub subject_id: String,
    pub source: Source,
    pub label: WmLabel,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTable {
    columns: Vec<String>,
    rows: Vec<FeatureRow>,
}

const KEY_COLUMNS: [&str; 3] = ["subject_id", "source", "label"];

impl FeatureTable {
    pub fn new(columns: Vec<String>) -> Self {
        Self { columns, rows: Vec::new() }
    }

    /// An empty table with the standard landscape feature columns.
    pub fn landscape() -> Self {
        Self::new(FEATURE_NAMES.iter().map(|s| s.to_string()).collect())
    }

    pub fn push(&mut self, row: FeatureRow) -> Result<()> {
        if row.values.len() != self.columns.len() {
            return Err(Error::Mismatch(format!(
                "row for {} has {} values, table has {} columns",
                row.subject_id,
                row.values.len(),
                self.columns.len()
            )));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn columns(&self) -> &[String] {
        &self.columns
    }

    pub fn rows(&self) -> &[FeatureRow] {
        &self.rows
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    /// Rows of one source, order preserved.
    pub fn for_source(&self, source: Source) -> FeatureTable {
        FeatureTable {
            columns: self.columns.clone(),
            rows: self.rows.iter().filter(|r| r.source == source).cloned().collect(),
        }
    }

    /// Sources present, in first-appearance order.
    pub fn sources(&self) -> Vec<Source> {
        let mut out: Vec<Source> = Vec::new();
        for r in &self.rows {
            if !out.contains(&r.source) {
                out.push(r.source);
            }
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let header: Vec<&str> = KEY_COLUMNS.iter().copied().chain(self.columns.iter().map(String::as_str)).collect();
        out.push_str(&header.join(","));
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!("{},{},{}", r.subject_id, r.source, r.label));
            for v in &r.values {
                out.push(',');
                out.push_str(&crate::report::fmt_f64(*v));
            }
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::report::write_file(path.as_ref(), self.to_csv().as_bytes())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(path, &text)
    }

    fn parse(path: &Path, text: &str) -> Result<Self> {
        let parse_err = |line: usize, message: String| Error::Parse { path: path.to_path_buf(), line, message };
        let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
        let header = reader.headers().map_err(|e| parse_err(1, e.to_string()))?.clone();
        if header.len() < KEY_COLUMNS.len() || header.iter().take(3).ne(KEY_COLUMNS) {
            return Err(parse_err(1, format!("header must start with {}", KEY_COLUMNS.join(","))));
        }
        let mut table = FeatureTable::new(header.iter().skip(3).map(str::to_string).collect());
        for (i, record) in reader.records().enumerate() {
            let line = i + 2;
            let record = record.map_err(|e| parse_err(line, e.to_string()))?;
            if record.len() != header.len() {
                return Err(parse_err(line, format!("expected {} cells, found {}", header.len(), record.len())));
            }
            let values = record
                .iter()
                .skip(3)
                .map(|c| c.parse::<f64>().map_err(|_| parse_err(line, format!("cannot parse {c:?} as a number"))))
                .collect::<Result<Vec<_>>>()?;
            table.rows.push(FeatureRow {
                subject_id: record[0].to_string(),
                source: record[1].parse()?,
                label: record[2].parse()?,
                values,
            });
        }
        Ok(table)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::Network;

    #[test]
    fn csv_round_trip() {
        let mut t = FeatureTable::new(vec!["a".into(), "b".into()]);
        t.push(FeatureRow {
            subject_id: "s01".into(),
            source: Source::HighOrder,
            label: WmLabel::Low,
            values: vec![0.1, -1.0 / 3.0],
        })
        .unwrap();
        t.push(FeatureRow {
            subject_id: "s02".into(),
            source: Source::Network(Network::Sn),
            label: WmLabel::High,
            values: vec![1e-300, 7.0],
        })
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.csv");
        t.write(&p).unwrap();
        assert_eq!(FeatureTable::read(&p).unwrap(), t);
        assert_eq!(t.sources(), vec![Source::HighOrder, Source::Network(Network::Sn)]);
        assert_eq!(t.for_source(Source::HighOrder).rows().len(), 1);
    }

    #[test]
    fn rejects_wrong_width() {
        let mut t = FeatureTable::new(vec!["a".into()]);
        let row = FeatureRow { subject_id: "x".into(), source: Source::HighOrder, label: WmLabel::Low, values: vec![] };
        assert!(t.push(row).is_err());
        let bad = "subject_id,source,label,a\nx,high_order,low\n";
        assert!(FeatureTable::parse(Path::new("x"), bad).is_err());
    }
}
