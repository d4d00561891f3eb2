//! Sample sets and the `.eptqd` binary format.
//!
//! Layout (all little-endian):
//!
//! ```text
//! magic   "EPTQD001"
//! u32     sample count
//! u32     rank
//! u32     dims[rank]
//! u32     flags        bit 0: labels block present
//! f64     samples[count * prod(dims)]
//! u32     labels[count]   (only when flagged)
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DATASET_MAGIC: &[u8; 8] = b"EPTQD001";
const FLAG_LABELS: u32 = 1;

/// Representative samples; labels are optional and never read by the
/// quantization pipeline itself.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Tensor>,
    pub labels: Option<Vec<u32>>,
}

impl Dataset {
    pub fn new(samples: Vec<Tensor>, labels: Option<Vec<u32>>) -> Result<Self> {
        if let Some(first) = samples.first() {
            if let Some(bad) = samples.iter().find(|s| s.shape() != first.shape()) {
                return Err(Error::Shape(format!(
                    "dataset sample {:?} differs from {:?}",
                    bad.shape(),
                    first.shape()
                )));
            }
        }
        if let Some(l) = &labels {
            if l.len() != samples.len() {
                return Err(Error::Shape(format!(
                    "{} labels for {} samples",
                    l.len(),
                    samples.len()
                )));
            }
        }
        Ok(Self { samples, labels })
    }

    pub fn unlabeled(samples: Vec<Tensor>) -> Result<Self> {
        Self::new(samples, None)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn sample_shape(&self) -> Option<&[usize]> {
        self.samples.first().map(|s| s.shape())
    }

    /// First `n` samples (or all when `n` exceeds the size).
    pub fn take(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            samples: self.samples[..n].to_vec(),
            labels: self.labels.as_ref().map(|l| l[..n].to_vec()),
        }
    }

    /// Samples at the given indices, stacked into one batch.
    pub fn batch(&self, indices: &[usize]) -> Result<Tensor> {
        let items: Vec<&Tensor> = indices.iter().map(|&i| &self.samples[i]).collect();
        Tensor::stack(&items)
    }

    /// Every sample as one batch.
    pub fn stacked(&self) -> Result<Tensor> {
        let idx: Vec<usize> = (0..self.len()).collect();
        self.batch(&idx)
    }
}

pub fn save_dataset(data: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let shape = data.sample_shape().ok_or(Error::EmptyDataset)?;
    let mut buf = Vec::new();
    buf.extend_from_slice(DATASET_MAGIC);
    buf.extend_from_slice(&(data.len() as u32).to_le_bytes());
    buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for d in shape {
        buf.extend_from_slice(&(*d as u32).to_le_bytes());
    }
    let flags = if data.labels.is_some() { FLAG_LABELS } else { 0 };
    buf.extend_from_slice(&flags.to_le_bytes());
    for s in &data.samples {
        for v in s.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(labels) = &data.labels {
        for l in labels {
            buf.extend_from_slice(&l.to_le_bytes());
        }
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Parse {
                location: format!("byte {}", self.pos),
                message: format!(
                    "truncated file: {what} needs {n} bytes, {} remain",
                    self.bytes.len() - self.pos
                ),
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

/// Loads the first `limit` samples, preserving file order.
pub fn load_dataset(path: impl AsRef<Path>, limit: usize) -> Result<Dataset> {
    let path = path.as_ref();
    if limit == 0 {
        return Err(Error::InvalidArgument("dataset limit must be at least 1".into()));
    }
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader { bytes: &bytes, pos: 0 };
    if r.take(8, "magic")? != DATASET_MAGIC {
        return Err(Error::Parse {
            location: "byte 0".into(),
            message: "bad dataset magic, expected EPTQD001".into(),
        });
    }
    let count = r.u32("sample count")? as usize;
    let rank = r.u32("rank")? as usize;
    if rank == 0 || rank > 8 {
        return Err(Error::Parse {
            location: "byte 12".into(),
            message: format!("unsupported rank {rank}"),
        });
    }
    let dims: Vec<usize> = (0..rank)
        .map(|_| r.u32("dims").map(|d| d as usize))
        .collect::<Result<_>>()?;
    if dims.contains(&0) {
        return Err(Error::Parse {
            location: format!("byte {}", r.pos),
            message: format!("zero dimension in {dims:?}"),
        });
    }
    let flags = r.u32("flags")?;
    let per: usize = dims.iter().product();
    let keep = count.min(limit);
    if limit > count {
        log::warn!(
            "{}: requested {limit} samples, file holds {count}; using all",
            path.display()
        );
    }
    let sample_bytes = r.take(count * per * 8, "samples")?;
    let mut samples = Vec::with_capacity(keep);
    for i in 0..keep {
        let chunk = &sample_bytes[i * per * 8..(i + 1) * per * 8];
        let data = chunk
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        samples.push(Tensor::new_finite(dims.clone(), data, "dataset sample")?);
    }
    let labels = if flags & FLAG_LABELS != 0 {
        let raw = r.take(count * 4, "labels")?;
        Some(
            raw.chunks_exact(4)
                .take(keep)
                .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
                .collect(),
        )
    } else {
        None
    };
    if r.pos != bytes.len() {
        return Err(Error::Parse {
            location: format!("byte {}", r.pos),
            message: format!("{} trailing bytes", bytes.len() - r.pos),
        });
    }
    Dataset::new(samples, labels)
}
