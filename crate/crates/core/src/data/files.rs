use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataFormat {
    EttCsv,
    Ucr,
    Synthetic,
}

/// Where a dataset lives and which parts of it to use.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: DataFormat,
    /// Data file. Unused for synthetic data.
    #[serde(default)]
    pub path: PathBuf,
    /// Separate held-out file, as distributed with the UCR archive.
    #[serde(default)]
    pub test_path: Option<PathBuf>,
    /// Feature columns to load. Empty means every non-timestamp column.
    #[serde(default)]
    pub columns: Vec<String>,
    #[serde(default)]
    pub num_classes: Option<usize>,
}

/// A named univariate series.
#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub name: String,
    pub values: Vec<f64>,
}

fn parse_cell(path: &Path, row: usize, column: &str, cell: &str) -> Result<f64> {
    let err = |message: String| Error::Parse {
        path: path.to_path_buf(),
        row,
        column: column.to_string(),
        message,
    };
    let v: f64 = cell
        .trim()
        .parse()
        .map_err(|_| err(format!("`{cell}` is not a number")))?;
    if !v.is_finite() {
        return Err(err(format!("`{cell}` is not finite")));
    }
    Ok(v)
}

/// Reads an ETT-style CSV: a header row, a timestamp in the first column,
/// numeric features after it. Each selected feature becomes one series.
/// Rows in errors are 1-based file lines (the header is line 1).
pub fn load_ett_csv(path: &Path, manifest: &DatasetManifest) -> Result<Vec<Series>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| csv_error(path, 1, e))?;
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| csv_error(path, 1, e))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    if headers.len() < 2 {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            row: 1,
            column: String::new(),
            message: "expected a timestamp column and at least one feature".into(),
        });
    }
    let selected: Vec<usize> = if manifest.columns.is_empty() {
        (1..headers.len()).collect()
    } else {
        manifest
            .columns
            .iter()
            .map(|name| {
                headers
                    .iter()
                    .skip(1)
                    .position(|h| h == name)
                    .map(|i| i + 1)
                    .ok_or_else(|| Error::Parse {
                        path: path.to_path_buf(),
                        row: 1,
                        column: name.clone(),
                        message: "declared column is missing from the header".into(),
                    })
            })
            .collect::<Result<_>>()?
    };
    let mut out: Vec<Series> = selected
        .iter()
        .map(|&c| Series {
            name: headers[c].clone(),
            values: Vec::new(),
        })
        .collect();
    for (i, record) in reader.records().enumerate() {
        let line = i + 2;
        let record = record.map_err(|e| csv_error(path, line, e))?;
        for (series, &c) in out.iter_mut().zip(&selected) {
            let cell = record.get(c).ok_or_else(|| Error::Parse {
                path: path.to_path_buf(),
                row: line,
                column: headers[c].clone(),
                message: "missing cell".into(),
            })?;
            series.values.push(parse_cell(path, line, &headers[c], cell)?);
        }
    }
    if out.first().map_or(true, |s| s.values.is_empty()) {
        return Err(Error::EmptyDataset(path.display().to_string()));
    }
    Ok(out)
}

fn csv_error(path: &Path, row: usize, e: csv::Error) -> Error {
    let row = e
        .position()
        .map(|p| p.line() as usize)
        .unwrap_or(row);
    Error::Parse {
        path: path.to_path_buf(),
        row,
        column: String::new(),
        message: e.to_string(),
    }
}

/// One labelled record from a UCR archive file.
#[derive(Clone, Debug, PartialEq)]
pub struct UcrRecord {
    pub label: String,
    pub values: Vec<f64>,
}

/// Reads a UCR file: one record per line, label first, values separated by
/// tabs or commas. Blank lines are skipped.
pub fn load_ucr(path: &Path) -> Result<Vec<UcrRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let sep = if line.contains('\t') { '\t' } else { ',' };
        let mut fields = line.split(sep);
        let label = fields.next().unwrap_or_default().trim().to_string();
        let values = fields
            .enumerate()
            .map(|(j, cell)| parse_cell(path, line_no, &(j + 1).to_string(), cell))
            .collect::<Result<Vec<_>>>()?;
        if values.is_empty() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                row: line_no,
                column: "1".into(),
                message: "record has a label but no values".into(),
            });
        }
        out.push(UcrRecord { label, values });
    }
    if out.is_empty() {
        return Err(Error::EmptyDataset(path.display().to_string()));
    }
    Ok(out)
}

/// Sorted distinct labels. Numeric labels sort by value, others by text.
pub fn label_set<'a>(records: impl IntoIterator<Item = &'a UcrRecord>) -> Vec<String> {
    let set: BTreeSet<&str> = records.into_iter().map(|r| r.label.as_str()).collect();
    let mut labels: Vec<String> = set.into_iter().map(str::to_string).collect();
    if labels.iter().all(|l| l.parse::<f64>().is_ok()) {
        labels.sort_by(|a, b| {
            let (x, y) = (a.parse::<f64>().unwrap(), b.parse::<f64>().unwrap());
            x.total_cmp(&y)
        });
    }
    labels
}

/// Index of `label` in `labels`.
pub fn label_index(labels: &[String], label: &str) -> Result<usize> {
    labels
        .iter()
        .position(|l| l == label)
        .ok_or_else(|| Error::Degenerate(format!("label `{label}` not seen in training data")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn manifest(columns: &[&str]) -> DatasetManifest {
        DatasetManifest {
            format: DataFormat::EttCsv,
            path: PathBuf::new(),
            test_path: None,
            columns: columns.iter().map(|s| s.to_string()).collect(),
            num_classes: None,
        }
    }

    fn write(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn toy_csv_gives_one_series_per_feature() {
        let f = write("date,a,b\n2020-01-01,1,4\n2020-01-02,2,5\n2020-01-03,3,6\n");
        let s = load_ett_csv(f.path(), &manifest(&[])).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].name, "a");
        assert_eq!(s[0].values, vec![1.0, 2.0, 3.0]);
        assert_eq!(s[1].values, vec![4.0, 5.0, 6.0]);
    }

    #[test]
    fn nan_cell_is_located() {
        let f = write("date,a,b\nt0,1,4\nt1,NaN,5\n");
        match load_ett_csv(f.path(), &manifest(&[])) {
            Err(Error::Parse { row, column, .. }) => {
                assert_eq!(row, 3);
                assert_eq!(column, "a");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn non_numeric_cell_is_located() {
        let f = write("date,a,b\nt0,1,x\n");
        match load_ett_csv(f.path(), &manifest(&[])) {
            Err(Error::Parse { row, column, .. }) => assert_eq!((row, column.as_str()), (2, "b")),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn missing_declared_column() {
        let f = write("date,a\nt0,1\n");
        assert!(matches!(
            load_ett_csv(f.path(), &manifest(&["OT"])),
            Err(Error::Parse { column, .. }) if column == "OT"
        ));
    }

    #[test]
    fn selected_columns_keep_declared_order() {
        let f = write("date,a,b\nt0,1,2\n");
        let s = load_ett_csv(f.path(), &manifest(&["b", "a"])).unwrap();
        assert_eq!(s[0].name, "b");
        assert_eq!(s[1].values, vec![1.0]);
    }

    #[test]
    fn ucr_tab_and_comma() {
        let f = write("1\t0.5\t0.25\n2,1,2\n\n1\t3\t4\n");
        let r = load_ucr(f.path()).unwrap();
        assert_eq!(r.len(), 3);
        assert_eq!(r[1].label, "2");
        assert_eq!(r[1].values, vec![1.0, 2.0]);
        let labels = label_set(&r);
        assert_eq!(labels, vec!["1", "2"]);
        assert_eq!(label_index(&labels, "2").unwrap(), 1);
    }

    #[test]
    fn numeric_labels_sort_by_value() {
        let recs: Vec<UcrRecord> = ["10", "9", "-1"]
            .iter()
            .map(|l| UcrRecord {
                label: l.to_string(),
                values: vec![0.0],
            })
            .collect();
        assert_eq!(label_set(&recs), vec!["-1", "9", "10"]);
    }

    #[test]
    fn ucr_bad_value() {
        let f = write("1\t0.5\tfoo\n");
        assert!(matches!(load_ucr(f.path()), Err(Error::Parse { row: 1, .. })));
    }
}
