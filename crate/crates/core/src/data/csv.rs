use std::path::Path;

use crate::error::{Error, Result};
use crate::losses::LabelBatch;
use crate::numerics::Matrix;

use super::Dataset;

/// Reads `label,feature...` rows. The first line is a header whose first
/// column must be named `label`; the remaining header names are ignored.
/// Labels are class indices in `0..num_classes`.
pub fn read_csv(path: &Path, num_classes: usize) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let headers = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    if headers.get(0) != Some("label") || headers.len() < 2 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: 0,
            message: "header must start with 'label' followed by at least one feature".into(),
        });
    }
    let dim = headers.len() - 1;
    let mut inputs = Vec::new();
    let mut classes = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let offset = record.position().map_or(0, |p| p.byte());
        let bad = |message: String| Error::Format {
            path: path.to_path_buf(),
            offset,
            message,
        };
        if record.len() != dim + 1 {
            return Err(bad(format!(
                "expected {} fields, got {}",
                dim + 1,
                record.len()
            )));
        }
        let label: usize = record[0]
            .parse()
            .map_err(|_| bad(format!("label '{}' is not a class index", &record[0])))?;
        if label >= num_classes {
            return Err(bad(format!(
                "label {label} out of range for {num_classes} classes"
            )));
        }
        classes.push(label);
        for field in record.iter().skip(1) {
            let v: f64 = field
                .parse()
                .map_err(|_| bad(format!("feature '{field}' is not a number")))?;
            if !v.is_finite() {
                return Err(bad(format!("feature '{field}' is not finite")));
            }
            inputs.push(v);
        }
    }
    if classes.is_empty() {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: 0,
            message: "no data rows".into(),
        });
    }
    Dataset::with_sequential_ids(
        Matrix::from_vec(classes.len(), dim, inputs)?,
        LabelBatch::one_hot(&classes, num_classes)?,
    )
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let offset = e.position().map_or(0, |p| p.byte());
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        kind => Error::Format {
            path: path.to_path_buf(),
            offset,
            message: format!("{kind:?}"),
        },
    }
}
