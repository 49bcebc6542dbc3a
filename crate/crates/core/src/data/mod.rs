//! Datasets, seeded batching and mixup.

mod blobs;
mod csv;
mod idx;

pub use blobs::{generate_blob_split, generate_blobs, BlobData, BlobSpec};
pub use csv::read_csv;
pub use idx::{read_idx, read_idx_images, read_idx_labels};

use std::collections::HashSet;

use crate::error::{Error, Result};
use crate::losses::LabelBatch;
use crate::numerics::{Matrix, SeededRng};

pub type SampleId = u64;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    inputs: Matrix,
    labels: LabelBatch,
    sample_ids: Vec<SampleId>,
}

impl Dataset {
    pub fn new(inputs: Matrix, labels: LabelBatch, sample_ids: Vec<SampleId>) -> Result<Self> {
        if inputs.rows() == 0 {
            return Err(Error::InvalidInput("dataset has no samples".into()));
        }
        if labels.len() != inputs.rows() || sample_ids.len() != inputs.rows() {
            return Err(Error::Dimension(format!(
                "{} inputs, {} labels, {} ids",
                inputs.rows(),
                labels.len(),
                sample_ids.len()
            )));
        }
        let mut seen = HashSet::with_capacity(sample_ids.len());
        if let Some(dup) = sample_ids.iter().find(|id| !seen.insert(**id)) {
            return Err(Error::InvalidInput(format!("duplicate sample id {dup}")));
        }
        Ok(Dataset {
            inputs,
            labels,
            sample_ids,
        })
    }

    /// Dataset with ids `0..N`.
    pub fn with_sequential_ids(inputs: Matrix, labels: LabelBatch) -> Result<Self> {
        let ids = (0..inputs.rows() as SampleId).collect();
        Self::new(inputs, labels, ids)
    }

    pub fn inputs(&self) -> &Matrix {
        &self.inputs
    }

    pub fn labels(&self) -> &LabelBatch {
        &self.labels
    }

    pub fn sample_ids(&self) -> &[SampleId] {
        &self.sample_ids
    }

    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.rows() == 0
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.labels.num_classes()
    }

    pub fn position_of(&self, id: SampleId) -> Option<usize> {
        self.sample_ids.iter().position(|&s| s == id)
    }

    pub fn subset(&self, indices: &[usize]) -> Batch {
        Batch {
            inputs: self.inputs.select_rows(indices),
            labels: self.labels.select(indices),
            sample_ids: indices.iter().map(|&i| self.sample_ids[i]).collect(),
        }
    }

    pub fn as_batch(&self) -> Batch {
        Batch {
            inputs: self.inputs.clone(),
            labels: self.labels.clone(),
            sample_ids: self.sample_ids.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Matrix,
    pub labels: LabelBatch,
    pub sample_ids: Vec<SampleId>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.rows() == 0
    }
}

/// One epoch of mini-batches in a seeded random order. The final partial
/// batch is kept, so every sample appears exactly once.
pub fn batches(dataset: &Dataset, batch_size: usize, epoch_seed: u64) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::InvalidParameter(
            "batch size must be at least 1".into(),
        ));
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    SeededRng::derive(epoch_seed, 0x0062_6174_6368).shuffle(&mut order);
    Ok(order
        .chunks(batch_size)
        .map(|idx| dataset.subset(idx))
        .collect())
}

/// `lam · a + (1 - lam) · b` on inputs and label rows. Ids are taken from `a`;
/// targets are recomputed as the argmax of the mixed rows.
pub fn mixup(a: &Batch, b: &Batch, lam: f64) -> Result<Batch> {
    if !(0.0..=1.0).contains(&lam) {
        return Err(Error::InvalidParameter(format!(
            "mixup coefficient must lie in [0, 1], got {lam}"
        )));
    }
    if a.inputs.shape() != b.inputs.shape()
        || a.labels.values().shape() != b.labels.values().shape()
    {
        return Err(Error::Dimension("mixup batches differ in shape".into()));
    }
    let inputs = a.inputs.scale(lam)?.add(&b.inputs.scale(1.0 - lam)?)?;
    let mut values = a
        .labels
        .values()
        .scale(lam)?
        .add(&b.labels.values().scale(1.0 - lam)?)?;
    // Rounding can leave a row a few ulps off 1; fold the residue into the largest entry.
    for r in 0..values.rows() {
        let row = values.row_mut(r);
        let residue = 1.0 - row.iter().sum::<f64>();
        let t = crate::numerics::argmax(row);
        row[t] += residue;
    }
    Ok(Batch {
        inputs,
        labels: LabelBatch::new(values)?,
        sample_ids: a.sample_ids.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(n: usize, classes: usize) -> Dataset {
        let inputs = Matrix::from_vec(n, 2, (0..2 * n).map(|v| v as f64).collect()).unwrap();
        let labels =
            LabelBatch::one_hot(&(0..n).map(|i| i % classes).collect::<Vec<_>>(), classes).unwrap();
        Dataset::with_sequential_ids(inputs, labels).unwrap()
    }

    #[test]
    fn batch_sizes_and_bijection() {
        let d = toy(10, 3);
        let b = batches(&d, 3, 1).unwrap();
        assert_eq!(
            b.iter().map(Batch::len).collect::<Vec<_>>(),
            vec![3, 3, 3, 1]
        );
        let mut ids: Vec<_> = b.iter().flat_map(|x| x.sample_ids.clone()).collect();
        ids.sort();
        assert_eq!(ids, (0..10).collect::<Vec<_>>());

        let whole = batches(&d, 10, 4).unwrap();
        assert_eq!(whole.len(), 1);
        assert_eq!(whole[0].len(), 10);

        assert_eq!(batches(&d, 3, 7).unwrap(), batches(&d, 3, 7).unwrap());
        assert_ne!(batches(&d, 10, 7).unwrap(), batches(&d, 10, 8).unwrap());
        assert!(batches(&d, 0, 1).is_err());
    }

    #[test]
    fn rejects_duplicate_ids() {
        let d = toy(2, 2);
        assert!(Dataset::new(d.inputs().clone(), d.labels().clone(), vec![5, 5]).is_err());
    }

    #[test]
    fn mixup_cases() {
        let d = toy(4, 4);
        let a = d.subset(&[0]);
        let b = d.subset(&[1]);
        assert_eq!(mixup(&a, &b, 1.0).unwrap().labels, a.labels);

        let m = mixup(&a, &b, 0.8).unwrap();
        let row = m.labels.values().row(0);
        assert!((row[0] - 0.8).abs() < 1e-15 && (row[1] - 0.2).abs() < 1e-15);
        assert_eq!(&row[2..], &[0.0, 0.0]);
        assert_eq!(m.labels.targets(), &[0]);
        assert!((m.labels.target_values()[0] - 0.8).abs() < 1e-15);

        let same = d.subset(&[2]);
        assert_eq!(mixup(&same, &same, 0.5).unwrap().labels, same.labels);

        assert!(mixup(&a, &b, 1.5).is_err());
        assert!(mixup(&a, &d.subset(&[0, 1]), 0.5).is_err());
    }
}
