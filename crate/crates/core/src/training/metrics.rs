use std::io::Write;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::losses::ce_loss;
use crate::models::{predict, ModelParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// One row of the metrics CSV.
///
/// For `train` rows the loss columns are batch-size-weighted means of the
/// training objective over the epoch (epoch 0: CE of the initial model) and
/// accuracies are measured after the epoch. For `test` rows the loss is
/// plain CE.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub split: Split,
    pub top1: f64,
    pub topk: f64,
    pub mean_loss: f64,
    pub loss_ce: f64,
    pub loss_soft: f64,
    /// Distributed (or classical KD) term, already multiplied by its weight.
    pub loss_distributed: f64,
    pub clamp_events: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub top1: f64,
    pub topk: f64,
    pub mean_ce: f64,
    pub clamp_events: usize,
}

/// Top-1 / top-k accuracy and mean CE. A sample counts as a top-k hit when
/// fewer than `k` classes outrank its target, ties going to the lower index.
pub fn evaluate(params: &ModelParams, dataset: &Dataset, k: usize) -> Result<Evaluation> {
    let k = k.clamp(1, dataset.num_classes());
    let ids: Vec<usize> = (0..dataset.len()).collect();
    let mut hits1 = 0usize;
    let mut hitsk = 0usize;
    let mut ce_sum = 0.0;
    let mut clamp_events = 0;
    for chunk in ids.chunks(512) {
        let batch = dataset.subset(chunk);
        let logits = predict(params, &batch.inputs)?;
        let ce = ce_loss(&logits, &batch.labels)?;
        ce_sum += ce.loss * chunk.len() as f64;
        clamp_events += ce.clamp_events;
        for (r, &t) in batch.labels.targets().iter().enumerate() {
            let row = logits.row(r);
            let rank = row
                .iter()
                .enumerate()
                .filter(|&(i, &v)| v > row[t] || (v == row[t] && i < t))
                .count();
            if rank == 0 {
                hits1 += 1;
            }
            if rank < k {
                hitsk += 1;
            }
        }
    }
    let n = dataset.len() as f64;
    Ok(Evaluation {
        top1: hits1 as f64 / n,
        topk: hitsk as f64 / n,
        mean_ce: ce_sum / n,
        clamp_events,
    })
}

pub const METRICS_COLUMNS: [&str; 9] = [
    "epoch",
    "split",
    "top1",
    "topk",
    "mean_loss",
    "loss_ce",
    "loss_soft",
    "loss_distributed",
    "clamp_events",
];

/// `# generated_unix=<seconds>` line placed first in every emitted CSV.
pub fn timestamp_line() -> String {
    let secs = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    format!("# generated_unix={secs}\n")
}

/// Writes a CSV preceded by the timestamp line. Rows are formatted by the
/// caller so float formatting stays identical across runs.
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut out = timestamp_line().into_bytes();
    {
        let mut w = csv::Writer::from_writer(&mut out);
        let io = |e: csv::Error| Error::Io {
            path: path.to_path_buf(),
            source: std::io::Error::other(e.to_string()),
        };
        w.write_record(header).map_err(io)?;
        for row in rows {
            w.write_record(row).map_err(io)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

pub fn metrics_rows(records: &[MetricsRecord]) -> Vec<Vec<String>> {
    records
        .iter()
        .map(|m| {
            vec![
                m.epoch.to_string(),
                match m.split {
                    Split::Train => "train".into(),
                    Split::Test => "test".into(),
                },
                format!("{:.6}", m.top1),
                format!("{:.6}", m.topk),
                format!("{:.10}", m.mean_loss),
                format!("{:.10}", m.loss_ce),
                format!("{:.10}", m.loss_soft),
                format!("{:.10}", m.loss_distributed),
                m.clamp_events.to_string(),
            ]
        })
        .collect()
}

pub fn write_metrics_csv(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    write_csv(path, &METRICS_COLUMNS, &metrics_rows(records))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::LabelBatch;
    use crate::models::{Layer, ModelSpec};
    use crate::numerics::Matrix;

    #[test]
    fn topk_counts_and_ordering() {
        let spec = ModelSpec::new(3, vec![], 3).unwrap();
        let ident = ModelParams::from_layers(
            spec,
            vec![Layer {
                weight: Matrix::identity(3),
                bias: vec![0.0; 3],
            }],
        )
        .unwrap();
        let inputs =
            Matrix::from_rows(&[[3.0, 2.0, 1.0], [3.0, 2.0, 1.0], [1.0, 1.0, 0.0]]).unwrap();
        let labels = LabelBatch::one_hot(&[0, 1, 1], 3).unwrap();
        let d = Dataset::with_sequential_ids(inputs, labels).unwrap();
        let e = evaluate(&ident, &d, 2).unwrap();
        // row 0 rank 0; row 1 rank 1; row 2 tie with lower index -> rank 1
        assert!((e.top1 - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(e.topk, 1.0);
        assert!(e.top1 <= e.topk);
    }

    #[test]
    fn csv_has_timestamp_then_header() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        let rec = MetricsRecord {
            epoch: 0,
            split: Split::Test,
            top1: 0.5,
            topk: 1.0,
            mean_loss: 0.7,
            loss_ce: 0.7,
            loss_soft: 0.0,
            loss_distributed: 0.0,
            clamp_events: 0,
        };
        write_metrics_csv(&p, &[rec]).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert!(lines[0].starts_with("# generated_unix="));
        assert_eq!(lines[1], METRICS_COLUMNS.join(","));
        assert!(lines[2].starts_with("0,test,0.500000,1.000000"));
    }
}
