//! Frozen teacher logits keyed by sample id.
//!
//! File layout (little-endian):
//!
//! ```text
//! magic    4 bytes  "NKDC"
//! format   u32      2
//! digest   32 bytes SHA-256 of the teacher checkpoint
//! n        u64      number of samples
//! c        u32      number of classes
//! n records, ascending id:
//!   id     u64
//!   logits f64 x c
//! checksum 32 bytes SHA-256 of all preceding bytes
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::data::{Dataset, SampleId};
use crate::error::{Error, Result};
use crate::losses::teacher_target_probs;
use crate::models::{predict, ByteReader, ModelParams};
use crate::numerics::Matrix;
use sha2::{Digest, Sha256};

const MAGIC: &[u8; 4] = b"NKDC";
const FORMAT_VERSION: u32 = 2;
const CHUNK: usize = 512;

#[derive(Debug, Clone, PartialEq)]
pub struct TeacherCache {
    digest: String,
    num_classes: usize,
    entries: BTreeMap<SampleId, Vec<f64>>,
}

/// Teacher logits for every sample of `dataset`.
pub fn build_teacher_cache(teacher: &ModelParams, dataset: &Dataset) -> Result<TeacherCache> {
    let mut entries = BTreeMap::new();
    let ids: Vec<usize> = (0..dataset.len()).collect();
    for chunk in ids.chunks(CHUNK) {
        let batch = dataset.subset(chunk);
        let logits = predict(teacher, &batch.inputs)?;
        for (r, id) in batch.sample_ids.iter().enumerate() {
            entries.insert(*id, logits.row(r).to_vec());
        }
    }
    Ok(TeacherCache {
        digest: teacher.digest(),
        num_classes: teacher.spec().num_classes,
        entries,
    })
}

impl TeacherCache {
    pub fn digest(&self) -> &str {
        &self.digest
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn get(&self, id: SampleId) -> Option<&[f64]> {
        self.entries.get(&id).map(Vec::as_slice)
    }

    /// Ids of `dataset` missing from the cache.
    pub fn missing(&self, dataset: &Dataset) -> Vec<SampleId> {
        dataset
            .sample_ids()
            .iter()
            .copied()
            .filter(|id| !self.entries.contains_key(id))
            .collect()
    }

    pub fn check_complete(&self, dataset: &Dataset) -> Result<()> {
        let missing = self.missing(dataset);
        if !missing.is_empty() {
            let shown: Vec<String> = missing.iter().take(20).map(u64::to_string).collect();
            return Err(Error::Precondition(format!(
                "teacher cache lacks {} sample(s): {}{}",
                missing.len(),
                shown.join(", "),
                if missing.len() > 20 { ", ..." } else { "" }
            )));
        }
        if self.num_classes != dataset.num_classes() {
            return Err(Error::Precondition(format!(
                "teacher has {} classes, dataset {}",
                self.num_classes,
                dataset.num_classes()
            )));
        }
        Ok(())
    }

    /// Logits rows for `ids`, in order.
    pub fn logits_for(&self, ids: &[SampleId]) -> Result<Matrix> {
        let mut data = Vec::with_capacity(ids.len() * self.num_classes);
        for id in ids {
            let row = self.entries.get(id).ok_or_else(|| {
                Error::Precondition(format!("sample {id} missing from teacher cache"))
            })?;
            data.extend_from_slice(row);
        }
        Matrix::from_vec(ids.len(), self.num_classes, data)
    }

    /// Mean teacher target probability `T_t` over a dataset.
    pub fn mean_target_prob(&self, dataset: &Dataset) -> Result<f64> {
        let logits = self.logits_for(dataset.sample_ids())?;
        let tt = teacher_target_probs(&logits, dataset.labels().targets())?;
        Ok(tt.iter().sum::<f64>() / tt.len() as f64)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(52 + self.entries.len() * (8 + 8 * self.num_classes));
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let digest = hex::decode(&self.digest).unwrap_or_else(|_| vec![0; 32]);
        out.extend_from_slice(&digest);
        out.extend_from_slice(&(self.entries.len() as u64).to_le_bytes());
        out.extend_from_slice(&(self.num_classes as u32).to_le_bytes());
        for (id, row) in &self.entries {
            out.extend_from_slice(&id.to_le_bytes());
            for v in row {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let checksum = Sha256::digest(&out);
        out.extend_from_slice(&checksum);
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<TeacherCache> {
        let body_len = bytes.len().saturating_sub(32);
        let mut r = ByteReader {
            bytes: &bytes[..body_len],
            pos: 0,
            origin,
        };
        if r.take(4)? != MAGIC {
            return Err(r.error(0, "bad teacher-cache magic"));
        }
        let format = r.u32()?;
        if format != FORMAT_VERSION {
            return Err(r.error(4, &format!("unsupported cache format {format}")));
        }
        if Sha256::digest(&bytes[..body_len]).as_slice() != &bytes[body_len..] {
            return Err(r.error(body_len as u64, "checksum mismatch; the cache is corrupt"));
        }
        let digest = hex::encode(r.take(32)?);
        let n = r.u64()? as usize;
        let num_classes = r.u32()? as usize;
        let mut entries = BTreeMap::new();
        for _ in 0..n {
            let at = r.pos as u64;
            let id = r.u64()?;
            let row = (0..num_classes)
                .map(|_| r.f64())
                .collect::<Result<Vec<_>>>()?;
            if entries.insert(id, row).is_some() {
                return Err(r.error(at, &format!("duplicate sample id {id}")));
            }
        }
        if r.pos != body_len {
            return Err(r.error(r.pos as u64, "trailing bytes after cache records"));
        }
        Ok(TeacherCache {
            digest,
            num_classes,
            entries,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    /// Loads a cache and, when given, checks it was built from the teacher
    /// with digest `expected_digest`.
    pub fn load(path: &Path, expected_digest: Option<&str>) -> Result<TeacherCache> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let cache = Self::from_bytes(&bytes, path)?;
        if let Some(expected) = expected_digest {
            if cache.digest != expected {
                return Err(Error::Precondition(format!(
                    "teacher cache {} was built from checkpoint {}, expected {}",
                    path.display(),
                    cache.digest,
                    expected
                )));
            }
        }
        Ok(cache)
    }
}
