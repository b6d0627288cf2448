//! Delimited numeric tables turned into least-squares instances.

use std::path::Path;

use crate::exec::metric;
use crate::instance::{Family, InstanceSpec, ProblemInstance};
use crate::ir::Env;
use crate::tensor::{condition_number, Matrix};

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: row {row}: {message}")]
    Row { path: String, row: usize, message: String },
    #[error("{path}: row {row}, column `{column}`: `{value}` is not a number")]
    Cell {
        path: String,
        row: usize,
        column: String,
        value: String,
    },
    #[error("{path}: {message}")]
    Shape { path: String, message: String },
}

/// How to read a table.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    /// Header name of the response column.
    pub target: String,
    /// Leading rows that form the training split; all rows when unset.
    pub train_rows: Option<usize>,
    pub delimiter: u8,
}

impl DatasetSpec {
    pub fn new(target: &str) -> Self {
        Self {
            target: target.to_string(),
            train_rows: None,
            delimiter: b',',
        }
    }
}

/// Features and response of the training split.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub features: Vec<String>,
    pub a: Matrix,
    pub b: Vec<f64>,
    /// Rows after the training split that were read and discarded.
    pub held_out: usize,
}

/// Reads a delimited file with a header row. Every cell must parse as a
/// number. Row numbers in errors count the header as row 1.
pub fn load(path: &Path, spec: &DatasetSpec) -> Result<Dataset, DatasetError> {
    let name = path.display().to_string();
    let file = std::fs::File::open(path).map_err(|source| DatasetError::Io {
        path: name.clone(),
        source,
    })?;
    read(file, &name, spec)
}

/// [`load`] over any reader; `name` labels errors.
pub fn read<R: std::io::Read>(input: R, name: &str, spec: &DatasetSpec) -> Result<Dataset, DatasetError> {
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(spec.delimiter)
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(input);
    let row_err = |row: usize, message: String| DatasetError::Row {
        path: name.to_string(),
        row,
        message,
    };
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| row_err(1, e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    let target = headers
        .iter()
        .position(|h| *h == spec.target)
        .ok_or_else(|| DatasetError::Shape {
            path: name.to_string(),
            message: format!("no column named `{}`", spec.target),
        })?;
    if headers.len() < 2 {
        return Err(DatasetError::Shape {
            path: name.to_string(),
            message: "need at least one feature column besides the target".into(),
        });
    }
    let features: Vec<String> = headers
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != target)
        .map(|(_, h)| h.clone())
        .collect();

    let mut data = Vec::new();
    let mut b = Vec::new();
    let mut rows = 0usize;
    let mut held_out = 0usize;
    for (i, record) in reader.records().enumerate() {
        let row = i + 2;
        let record = record.map_err(|e| row_err(row, e.to_string()))?;
        if record.len() != headers.len() {
            return Err(row_err(row, format!("expected {} fields, found {}", headers.len(), record.len())));
        }
        let mut values = Vec::with_capacity(headers.len());
        for (col, cell) in record.iter().enumerate() {
            let v: f64 = cell.parse().ok().filter(|v: &f64| v.is_finite()).ok_or_else(|| DatasetError::Cell {
                path: name.to_string(),
                row,
                column: headers[col].clone(),
                value: cell.to_string(),
            })?;
            values.push(v);
        }
        if spec.train_rows.is_some_and(|t| rows >= t) {
            held_out += 1;
            continue;
        }
        for (col, v) in values.iter().enumerate() {
            if col == target {
                b.push(*v);
            } else {
                data.push(*v);
            }
        }
        rows += 1;
    }
    if let Some(t) = spec.train_rows {
        if rows < t {
            return Err(DatasetError::Shape {
                path: name.to_string(),
                message: format!("training split needs {t} rows but the file has {rows}"),
            });
        }
    }
    if rows == 0 {
        return Err(DatasetError::Shape {
            path: name.to_string(),
            message: "no data rows".into(),
        });
    }
    let a = Matrix::from_vec(rows, features.len(), data).map_err(|e| DatasetError::Shape {
        path: name.to_string(),
        message: e.to_string(),
    })?;
    Ok(Dataset {
        features,
        a,
        b,
        held_out,
    })
}

impl Dataset {
    /// Least-squares instance `min ‖Ax − b‖`. The family tag is nominal;
    /// the realized condition number is measured.
    pub fn into_instance(self) -> ProblemInstance {
        let (m, n) = (self.a.rows(), self.a.cols());
        let realized_kappa = condition_number(&self.a).map(|c| c.kappa).unwrap_or(f64::INFINITY);
        let inst = ProblemInstance {
            env: Env::Linear,
            spec: InstanceSpec::new(Family::LowCond, m, n),
            seed: 0,
            a: self.a,
            b: self.b,
            labels: None,
            x_star: None,
            realized_kappa,
            lambda_max: None,
            loss_star: None,
        };
        debug_assert!(metric(&inst, &vec![0.0; n]).is_ok());
        inst
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reads_and_splits() {
        let text = "x1,y,x2\n1,2,3\n4,5,6\n7,8,9\n";
        let mut spec = DatasetSpec::new("y");
        spec.train_rows = Some(2);
        let d = read(text.as_bytes(), "t.csv", &spec).unwrap();
        assert_eq!(d.features, vec!["x1", "x2"]);
        assert_eq!(d.a.data(), &[1.0, 3.0, 4.0, 6.0]);
        assert_eq!(d.b, vec![2.0, 5.0]);
        assert_eq!(d.held_out, 1);
    }

    #[test]
    fn bad_cell_names_row_and_column() {
        let text = "x1,y\n1,2\n3,abc\n";
        let e = read(text.as_bytes(), "t.csv", &DatasetSpec::new("y")).unwrap_err();
        match e {
            DatasetError::Cell { row, column, .. } => assert_eq!((row, column.as_str()), (3, "y")),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn missing_target_and_short_split() {
        let text = "x1,y\n1,2\n";
        assert!(read(text.as_bytes(), "t", &DatasetSpec::new("z")).is_err());
        let mut spec = DatasetSpec::new("y");
        spec.train_rows = Some(5);
        assert!(read(text.as_bytes(), "t", &spec).is_err());
    }
}
