use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LabelBatch;
use crate::numerics::{Matrix, SeededRng};

use super::{Dataset, SampleId};

/// Isotropic Gaussian class clusters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobSpec {
    pub num_classes: usize,
    pub dim: usize,
    pub samples_per_class: usize,
    /// Std-dev of the class centers around the origin.
    pub center_scale: f64,
    /// Std-dev of samples around their class center.
    pub noise_sigma: f64,
    pub seed: u64,
    /// Gaussian clusters per class; 1 gives one cluster per class.
    #[serde(default = "one")]
    pub modes_per_class: usize,
}

fn one() -> usize {
    1
}

impl BlobSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2
            || self.dim == 0
            || self.samples_per_class == 0
            || self.modes_per_class == 0
        {
            return Err(Error::InvalidParameter(
                "blobs need >= 2 classes, dim >= 1, >= 1 mode and >= 1 sample per class".into(),
            ));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "noise_sigma must be positive, got {}",
                self.noise_sigma
            )));
        }
        if !(self.center_scale.is_finite() && self.center_scale >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "center_scale must be nonnegative, got {}",
                self.center_scale
            )));
        }
        Ok(())
    }
}

/// A generated dataset together with the cluster centers it was drawn from.
#[derive(Debug, Clone)]
pub struct BlobData {
    pub dataset: Dataset,
    /// `(num_classes * modes_per_class) x dim`; row `c * modes + m` is mode
    /// `m` of class `c`.
    pub centers: Matrix,
    pub modes_per_class: usize,
}

impl BlobData {
    /// Distance to the nearest center of another class minus distance to the
    /// nearest center of the sample's own class. Large margins are easy
    /// samples, small or negative ones hard.
    pub fn margins(&self) -> Vec<f64> {
        let d = &self.dataset;
        (0..d.len())
            .map(|r| {
                let x = d.inputs().row(r);
                let own = d.labels().targets()[r];
                let dist = |c: usize| {
                    x.iter()
                        .zip(self.centers.row(c))
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                        .sqrt()
                };
                let modes = self.modes_per_class;
                let (mut near_own, mut near_other) = (f64::INFINITY, f64::INFINITY);
                for k in 0..self.centers.rows() {
                    if k / modes == own {
                        near_own = near_own.min(dist(k));
                    } else {
                        near_other = near_other.min(dist(k));
                    }
                }
                near_other - near_own
            })
            .collect()
    }

    /// Ids of the samples with the largest and smallest margin.
    pub fn easiest_and_hardest(&self) -> (SampleId, SampleId) {
        let m = self.margins();
        let ids = self.dataset.sample_ids();
        let easy = (0..m.len()).fold(0, |best, i| if m[i] > m[best] { i } else { best });
        let hard = (0..m.len()).fold(0, |best, i| if m[i] < m[best] { i } else { best });
        (ids[easy], ids[hard])
    }
}

fn draw_centers(spec: &BlobSpec) -> Result<Matrix> {
    let mut rng = SeededRng::derive(spec.seed, 1);
    let k = spec.num_classes * spec.modes_per_class;
    let data = (0..k * spec.dim)
        .map(|_| rng.normal(0.0, spec.center_scale))
        .collect();
    Matrix::from_vec(k, spec.dim, data)
}

fn draw_samples(
    spec: &BlobSpec,
    centers: &Matrix,
    per_class: usize,
    rng: &mut SeededRng,
    first_id: SampleId,
) -> Result<Dataset> {
    let n = spec.num_classes * per_class;
    let mut inputs = Vec::with_capacity(n * spec.dim);
    let mut classes = Vec::with_capacity(n);
    let modes = spec.modes_per_class;
    for c in 0..spec.num_classes {
        for i in 0..per_class {
            let center = centers.row(c * modes + i % modes);
            inputs.extend(center.iter().map(|&mu| rng.normal(mu, spec.noise_sigma)));
            classes.push(c);
        }
    }
    Dataset::new(
        Matrix::from_vec(n, spec.dim, inputs)?,
        LabelBatch::one_hot(&classes, spec.num_classes)?,
        (first_id..first_id + n as SampleId).collect(),
    )
}

/// `samples_per_class` points per class around centers drawn from the seed.
pub fn generate_blobs(spec: &BlobSpec) -> Result<BlobData> {
    spec.validate()?;
    let centers = draw_centers(spec)?;
    let mut rng = SeededRng::derive(spec.seed, 2);
    let dataset = draw_samples(spec, &centers, spec.samples_per_class, &mut rng, 0)?;
    Ok(BlobData {
        dataset,
        centers,
        modes_per_class: spec.modes_per_class,
    })
}

/// Train split as [`generate_blobs`] plus a test split from the same
/// centers. Test ids continue after the training ids.
pub fn generate_blob_split(spec: &BlobSpec, test_per_class: usize) -> Result<(BlobData, Dataset)> {
    let train = generate_blobs(spec)?;
    if test_per_class == 0 {
        return Err(Error::InvalidParameter(
            "test split needs >= 1 sample per class".into(),
        ));
    }
    let mut rng = SeededRng::derive(spec.seed, 3);
    let test = draw_samples(
        spec,
        &train.centers,
        test_per_class,
        &mut rng,
        train.dataset.len() as SampleId,
    )?;
    Ok((train, test))
}
