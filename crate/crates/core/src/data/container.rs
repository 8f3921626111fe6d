//! Binary dataset container.
//!
//! All integers are little-endian; features are `f64` LE, row-major; labels
//! are `u32` LE.
//!
//! ```text
//! offset  size      field
//! 0       8         magic "UDTSDSET"
//! 8       4         version (1)
//! 12      4         flags (bit 0: hidden unlabeled labels present)
//! 16      4         feature dim
//! 20      4         class count C
//! 24      8         labeled rows
//! 32      8         unlabeled rows
//! 40      8         test rows
//! 48      8·C       labeled per-class counts
//!         8·C       unlabeled per-class counts (zeros without hidden labels)
//!         8·C       test per-class counts
//!         6·16      section table: (offset u64, length u64) for
//!                   labeled features, labeled labels, unlabeled features,
//!                   hidden labels (evaluation only), test features, test labels
//!         ...       sections in table order
//! ```

use std::fs;
use std::path::Path;

use super::{histogram, LabeledSplit, SemiDataset};
use crate::error::{Error, Result};
use crate::nn::DenseMatrix;

pub const MAGIC: &[u8; 8] = b"UDTSDSET";
pub const VERSION: u32 = 1;
const FLAG_HIDDEN_LABELS: u32 = 1;
const SECTIONS: usize = 6;

pub fn save_dataset(path: &Path, ds: &SemiDataset) -> Result<()> {
    fs::write(path, encode(ds))?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<SemiDataset> {
    decode(&fs::read(path)?)
}

fn encode(ds: &SemiDataset) -> Vec<u8> {
    let c = ds.classes;
    let zeros = vec![0; c];
    let unlabeled_counts = ds.unlabeled_counts().unwrap_or(zeros);
    let hidden: &[usize] = ds.hidden_labels.as_deref().unwrap_or(&[]);

    let sections: [Vec<u8>; SECTIONS] = [
        f64_bytes(ds.labeled.features.values()),
        label_bytes(&ds.labeled.labels),
        f64_bytes(ds.unlabeled.values()),
        label_bytes(hidden),
        f64_bytes(ds.test.features.values()),
        label_bytes(&ds.test.labels),
    ];

    let header_len = 48 + 3 * 8 * c + SECTIONS * 16;
    let mut out = Vec::with_capacity(header_len + sections.iter().map(Vec::len).sum::<usize>());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let flags = if ds.hidden_labels.is_some() { FLAG_HIDDEN_LABELS } else { 0 };
    out.extend_from_slice(&flags.to_le_bytes());
    out.extend_from_slice(&(ds.dim() as u32).to_le_bytes());
    out.extend_from_slice(&(c as u32).to_le_bytes());
    for n in [ds.labeled.len(), ds.unlabeled.rows(), ds.test.len()] {
        out.extend_from_slice(&(n as u64).to_le_bytes());
    }
    for counts in [ds.labeled_counts(), unlabeled_counts, ds.test_counts()] {
        counts
            .iter()
            .for_each(|&n| out.extend_from_slice(&(n as u64).to_le_bytes()));
    }
    let mut offset = header_len as u64;
    for s in &sections {
        out.extend_from_slice(&offset.to_le_bytes());
        out.extend_from_slice(&(s.len() as u64).to_le_bytes());
        offset += s.len() as u64;
    }
    debug_assert_eq!(out.len(), header_len);
    sections.iter().for_each(|s| out.extend_from_slice(s));
    out
}

fn f64_bytes(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn label_bytes(labels: &[usize]) -> Vec<u8> {
    labels.iter().flat_map(|&y| (y as u32).to_le_bytes()).collect()
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::format(self.pos as u64, format!("truncated {what}"))),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn usize(&mut self, what: &str) -> Result<usize> {
        let at = self.pos as u64;
        usize::try_from(self.u64(what)?).map_err(|_| Error::format(at, format!("{what} too large")))
    }
}

fn decode(bytes: &[u8]) -> Result<SemiDataset> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8, "magic")? != MAGIC {
        return Err(Error::format(0, "bad magic bytes"));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::format(8, format!("unsupported version {version}")));
    }
    let flags = r.u32("flags")?;
    if flags & !FLAG_HIDDEN_LABELS != 0 {
        return Err(Error::format(12, format!("unknown flags {flags:#x}")));
    }
    let dim = r.u32("dim")? as usize;
    let classes = r.u32("class count")? as usize;
    if dim == 0 || classes < 2 {
        return Err(Error::format(16, "dim must be >= 1 and class count >= 2"));
    }
    let labeled_n = r.usize("labeled rows")?;
    let unlabeled_n = r.usize("unlabeled rows")?;
    let test_n = r.usize("test rows")?;
    let mut counts = Vec::with_capacity(3);
    for what in ["labeled counts", "unlabeled counts", "test counts"] {
        let at = r.pos as u64;
        let c: Vec<usize> = (0..classes).map(|_| r.usize(what)).collect::<Result<_>>()?;
        counts.push((at, c));
    }
    let table_at = r.pos;
    let table: Vec<(usize, usize)> = (0..SECTIONS)
        .map(|_| Ok((r.usize("section offset")?, r.usize("section length")?)))
        .collect::<Result<_>>()?;

    let has_hidden = flags & FLAG_HIDDEN_LABELS != 0;
    let expected_lengths = [
        labeled_n * dim * 8,
        labeled_n * 4,
        unlabeled_n * dim * 8,
        if has_hidden { unlabeled_n * 4 } else { 0 },
        test_n * dim * 8,
        test_n * 4,
    ];
    let mut cursor = r.pos;
    let mut slices = Vec::with_capacity(SECTIONS);
    for (i, (&(offset, len), &expected)) in table.iter().zip(&expected_lengths).enumerate() {
        let entry_at = (table_at + 16 * i) as u64;
        if len != expected {
            return Err(Error::format(entry_at, format!("section {i} has length {len}, expected {expected}")));
        }
        if offset != cursor {
            return Err(Error::format(entry_at, format!("section {i} at offset {offset}, expected {cursor}")));
        }
        let end = offset.checked_add(len).filter(|&e| e <= bytes.len());
        let Some(end) = end else {
            return Err(Error::format(bytes.len() as u64, format!("truncated payload in section {i}")));
        };
        slices.push((offset, &bytes[offset..end]));
        cursor = end;
    }
    if cursor != bytes.len() {
        return Err(Error::format(cursor as u64, "trailing bytes after last section"));
    }

    let features = |(at, s): (usize, &[u8]), rows: usize| -> Result<DenseMatrix> {
        let values: Vec<f64> = s
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::format((at + 8 * i) as u64, "non-finite feature"));
        }
        DenseMatrix::from_vec(rows, dim, values)
    };
    let labels = |(at, s): (usize, &[u8])| -> Result<Vec<usize>> {
        s.chunks_exact(4)
            .enumerate()
            .map(|(i, b)| {
                let y = u32::from_le_bytes(b.try_into().unwrap()) as usize;
                if y >= classes {
                    Err(Error::format((at + 4 * i) as u64, format!("label {y} out of range")))
                } else {
                    Ok(y)
                }
            })
            .collect()
    };

    let labeled = LabeledSplit {
        features: features(slices[0], labeled_n)?,
        labels: labels(slices[1])?,
    };
    let unlabeled = features(slices[2], unlabeled_n)?;
    let hidden = if has_hidden { Some(labels(slices[3])?) } else { None };
    let test = LabeledSplit {
        features: features(slices[4], test_n)?,
        labels: labels(slices[5])?,
    };

    let check_counts = |(at, declared): &(u64, Vec<usize>), actual: Vec<usize>, what: &str| {
        if *declared != actual {
            Err(Error::format(*at, format!("{what} do not match the payload")))
        } else {
            Ok(())
        }
    };
    check_counts(&counts[0], histogram(&labeled.labels, classes), "labeled counts")?;
    let unlabeled_actual = hidden
        .as_ref()
        .map_or_else(|| vec![0; classes], |h| histogram(h, classes));
    check_counts(&counts[1], unlabeled_actual, "unlabeled counts")?;
    check_counts(&counts[2], histogram(&test.labels, classes), "test counts")?;

    SemiDataset::new(classes, labeled, unlabeled, hidden, test)
}
