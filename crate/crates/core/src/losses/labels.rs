use crate::error::{Error, Result};
use crate::numerics::{argmax, Matrix};

const ROW_SUM_TOL: f64 = 1e-12;

/// Label distributions for a batch, one row per sample.
///
/// Rows are validated to lie in `[0, 1]` and sum to one. The target index of
/// each row is its argmax (lowest index on ties), so mixed rows such as
/// `(0.8, 0.2)` still have a well-defined target and target value.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelBatch {
    values: Matrix,
    target_index: Vec<usize>,
}

impl LabelBatch {
    pub fn new(values: Matrix) -> Result<Self> {
        if values.cols() == 0 {
            return Err(Error::InvalidInput(
                "label rows need at least one class".into(),
            ));
        }
        for (r, row) in values.row_iter().enumerate() {
            if let Some(v) = row.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(Error::InvalidInput(format!(
                    "label row {r} has mass {v} outside [0, 1]"
                )));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::InvalidInput(format!(
                    "label row {r} sums to {sum}, expected 1"
                )));
            }
        }
        let target_index = values.row_iter().map(argmax).collect();
        Ok(LabelBatch {
            values,
            target_index,
        })
    }

    /// One-hot labels from class indices.
    pub fn one_hot(classes: &[usize], num_classes: usize) -> Result<Self> {
        let mut values = Matrix::zeros(classes.len(), num_classes);
        for (r, &c) in classes.iter().enumerate() {
            if c >= num_classes {
                return Err(Error::InvalidInput(format!(
                    "class {c} out of range for {num_classes} classes"
                )));
            }
            values.set(r, c, 1.0);
        }
        Self::new(values)
    }

    pub fn values(&self) -> &Matrix {
        &self.values
    }

    pub fn targets(&self) -> &[usize] {
        &self.target_index
    }

    pub fn len(&self) -> usize {
        self.values.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.rows() == 0
    }

    pub fn num_classes(&self) -> usize {
        self.values.cols()
    }

    /// `V_t` for every row.
    pub fn target_values(&self) -> Vec<f64> {
        self.target_index
            .iter()
            .enumerate()
            .map(|(r, &t)| self.values.get(r, t))
            .collect()
    }

    pub fn is_one_hot(&self) -> bool {
        self.target_values().iter().all(|&v| v == 1.0)
    }

    pub fn select(&self, indices: &[usize]) -> LabelBatch {
        LabelBatch {
            values: self.values.select_rows(indices),
            target_index: indices.iter().map(|&i| self.target_index[i]).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mixed_rows_have_argmax_target() {
        let l = LabelBatch::new(Matrix::from_rows(&[[0.2, 0.8, 0.0], [0.5, 0.0, 0.5]]).unwrap())
            .unwrap();
        assert_eq!(l.targets(), &[1, 0]);
        assert_eq!(l.target_values(), vec![0.8, 0.5]);
        assert!(!l.is_one_hot());
    }

    #[test]
    fn validation() {
        assert!(LabelBatch::new(Matrix::from_rows(&[[0.5, 0.4]]).unwrap()).is_err());
        assert!(LabelBatch::new(Matrix::from_rows(&[[1.5, -0.5]]).unwrap()).is_err());
        assert!(LabelBatch::one_hot(&[3], 3).is_err());
        let l = LabelBatch::one_hot(&[2, 0], 3).unwrap();
        assert!(l.is_one_hot());
        assert_eq!(l.targets(), &[2, 0]);
    }
}
