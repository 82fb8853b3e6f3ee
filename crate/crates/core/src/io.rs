//! Matrix files: a CSV body plus a `<file>.meta.json` sidecar with the
//! dimensions and labels.
//!
//! Floats are written in Rust's shortest round-trip form, so reading a
//! matrix back yields bit-identical values and repeated runs produce
//! byte-identical files.

use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixMeta {
    pub rows: usize,
    pub cols: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub row_labels: Option<Vec<String>>,
    pub col_labels: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledMatrix {
    pub data: Array2<f64>,
    pub meta: MatrixMeta,
}

pub fn meta_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".meta.json");
    path.with_file_name(name)
}

/// Writes `m` to `path`. Without explicit column labels the header is
/// `c0, c1, …`; row labels, when given, become a leading `label` column.
pub fn write_matrix(
    path: &Path,
    m: ArrayView2<f64>,
    row_labels: Option<&[String]>,
    col_labels: Option<&[String]>,
) -> Result<()> {
    let (rows, cols) = m.dim();
    let col_labels: Vec<String> = match col_labels {
        Some(l) if l.len() == cols => l.to_vec(),
        Some(l) => {
            return Err(Error::ShapeMismatch(format!("{} column labels for {cols} columns", l.len())));
        }
        None => (0..cols).map(|j| format!("c{j}")).collect(),
    };
    if let Some(l) = row_labels {
        if l.len() != rows {
            return Err(Error::ShapeMismatch(format!("{} row labels for {rows} rows", l.len())));
        }
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    let mut header = Vec::with_capacity(cols + 1);
    if row_labels.is_some() {
        header.push("label".to_string());
    }
    header.extend(col_labels.iter().cloned());
    w.write_record(&header).map_err(|e| Error::csv(path, e))?;
    let mut record = Vec::with_capacity(cols + 1);
    for (i, row) in m.rows().into_iter().enumerate() {
        record.clear();
        if let Some(l) = row_labels {
            record.push(l[i].clone());
        }
        record.extend(row.iter().map(|v| v.to_string()));
        w.write_record(&record).map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;

    let meta = MatrixMeta {
        rows,
        cols,
        row_labels: row_labels.map(<[String]>::to_vec),
        col_labels,
    };
    let mp = meta_path(path);
    let text = serde_json::to_string_pretty(&meta).expect("metadata serializes");
    std::fs::write(&mp, text + "\n").map_err(|e| Error::io(&mp, e))
}

/// Writes serializable rows as a headed CSV table, creating parent directories.
pub fn write_rows<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    for row in rows {
        w.serialize(row).map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a matrix written by [`write_matrix`], checking it against the
/// sidecar when one exists.
pub fn read_matrix(path: &Path) -> Result<LabeledMatrix> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
    let header: Vec<String> = r
        .headers()
        .map_err(|e| Error::csv(path, e))?
        .iter()
        .map(str::to_string)
        .collect();
    let labeled = header.first().is_some_and(|h| h == "label");
    let col_labels: Vec<String> = header[usize::from(labeled)..].to_vec();
    let cols = col_labels.len();
    let mut values = Vec::new();
    let mut row_labels = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| Error::csv(path, e))?;
        let line = i + 2;
        if rec.len() != header.len() {
            return Err(Error::MalformedRow {
                path: path.to_path_buf(),
                line,
                reason: format!("{} fields, expected {}", rec.len(), header.len()),
            });
        }
        let mut fields = rec.iter();
        if labeled {
            row_labels.push(fields.next().unwrap().to_string());
        }
        for f in fields {
            let v: f64 = f.trim().parse().map_err(|_| Error::MalformedRow {
                path: path.to_path_buf(),
                line,
                reason: format!("not a number: {f:?}"),
            })?;
            values.push(v);
        }
    }
    let rows = values.len().checked_div(cols).unwrap_or(0);
    let data = Array2::from_shape_vec((rows, cols), values).expect("row lengths checked");
    let meta = MatrixMeta {
        rows,
        cols,
        row_labels: labeled.then_some(row_labels),
        col_labels,
    };
    let mp = meta_path(path);
    if mp.exists() {
        let text = std::fs::read_to_string(&mp).map_err(|e| Error::io(&mp, e))?;
        let side: MatrixMeta = serde_json::from_str(&text).map_err(|e| Error::MalformedRow {
            path: mp.clone(),
            line: e.line(),
            reason: e.to_string(),
        })?;
        if side.rows != meta.rows || side.cols != meta.cols {
            return Err(Error::ShapeMismatch(format!(
                "{}: sidecar says {}×{}, file holds {}×{}",
                path.display(),
                side.rows,
                side.cols,
                meta.rows,
                meta.cols
            )));
        }
    }
    Ok(LabeledMatrix { data, meta })
}
