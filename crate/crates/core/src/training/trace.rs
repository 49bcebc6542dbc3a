use std::collections::BTreeMap;
use std::path::Path;

use crate::data::SampleId;
use crate::error::Result;
use crate::losses::WeightStrategy;
use crate::numerics::std_dev;

use super::metrics::write_csv;

/// A tracked sample's target probability and its weight under every
/// teacher-free strategy, as seen in the batch that contained it.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    /// 1-based training epoch.
    pub epoch: usize,
    pub sample_id: SampleId,
    pub student_target: f64,
    pub target_value: f64,
    /// `mean(S_t)` over the batch the sample was in.
    pub batch_mean: f64,
    /// Indexed like [`WeightStrategy::TEACHER_FREE`].
    pub weights: [f64; 6],
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct WeightTrace {
    pub records: Vec<TraceRecord>,
}

pub const TRACE_COLUMNS: [&str; 7] = [
    "epoch",
    "sample_id",
    "strategy",
    "student_target",
    "target_value",
    "batch_mean",
    "weight",
];

impl WeightTrace {
    pub fn for_sample(&self, id: SampleId) -> impl Iterator<Item = &TraceRecord> {
        self.records.iter().filter(move |r| r.sample_id == id)
    }

    /// Long format: one row per (epoch, sample, strategy), sorted by sample
    /// then strategy then epoch, so each (sample, strategy) pair is a series.
    pub fn rows(&self) -> Vec<Vec<String>> {
        let mut by_sample: BTreeMap<SampleId, Vec<&TraceRecord>> = BTreeMap::new();
        for r in &self.records {
            by_sample.entry(r.sample_id).or_default().push(r);
        }
        let mut rows = Vec::new();
        for (id, recs) in by_sample {
            for (k, strategy) in WeightStrategy::TEACHER_FREE.iter().enumerate() {
                for r in &recs {
                    rows.push(vec![
                        r.epoch.to_string(),
                        id.to_string(),
                        strategy.name().to_string(),
                        format!("{:.12}", r.student_target),
                        format!("{:.12}", r.target_value),
                        format!("{:.12}", r.batch_mean),
                        format!("{:.12}", r.weights[k]),
                    ]);
                }
            }
        }
        rows
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_csv(path, &TRACE_COLUMNS, &self.rows())
    }

    /// Across-epoch std-dev of the default-strategy weight and of raw `S_t`.
    pub fn stability(&self, id: SampleId) -> (f64, f64) {
        let recs: Vec<_> = self.for_sample(id).collect();
        let w: Vec<f64> = recs.iter().map(|r| r.weights[0]).collect();
        let s: Vec<f64> = recs.iter().map(|r| r.student_target).collect();
        (std_dev(&w), std_dev(&s))
    }

    /// Mean `S_t` of a sample over the first, middle and last third of the
    /// recorded epochs.
    pub fn thirds_mean(&self, id: SampleId) -> Option<[f64; 3]> {
        let s: Vec<f64> = self.for_sample(id).map(|r| r.student_target).collect();
        if s.len() < 3 {
            return None;
        }
        let n = s.len();
        let bounds = [0, n / 3, 2 * n / 3, n];
        let mut out = [0.0; 3];
        for k in 0..3 {
            let part = &s[bounds[k]..bounds[k + 1]];
            out[k] = part.iter().sum::<f64>() / part.len() as f64;
        }
        Some(out)
    }
}
