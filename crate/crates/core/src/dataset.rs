//! Labeled breathing-vector datasets and their on-disk formats.
//!
//! Text format: one header line
//! `breathae-dataset,<version>,<n_t>,<classes>` followed by one record per
//! sample, `source_id,label,v_0,...,v_{6 n_t - 1}`, with label `-1` when
//! absent. Floats are written in shortest round-trip form so a write/read
//! cycle is lossless.
//!
//! Binary format (little endian): magic `BAEDS\0\0\0`, `u32` version,
//! `u32` n_t, `u32` classes, `u64` record count, then per record a `u32`
//! id length, the id bytes, an `i64` label and `6 n_t` `f64` values.

use std::io::{BufRead, Read, Write};
use std::path::Path;

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::preprocess::{BreathingVector, TUPLE_LEN};

pub const DATASET_VERSION: u32 = 1;
const TEXT_TAG: &str = "breathae-dataset";
const BINARY_MAGIC: &[u8; 8] = b"BAEDS\0\0\0";

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub n_t: usize,
    pub classes: usize,
    pub vectors: Vec<BreathingVector>,
    /// Free-form origin note, not serialized in the record stream.
    pub provenance: String,
}

impl LabeledDataset {
    pub fn new(n_t: usize, classes: usize, vectors: Vec<BreathingVector>) -> Result<Self> {
        if n_t == 0 {
            return Err(Error::Config("n_t must be >= 1".into()));
        }
        for (i, v) in vectors.iter().enumerate() {
            if v.n_t() != n_t {
                return Err(Error::Shape(format!("vector {i} has {} periods, expected {n_t}", v.n_t())));
            }
            if let Some(l) = v.label {
                if l >= classes {
                    return Err(Error::Config(format!("vector {i} label {l} outside [0, {classes})")));
                }
            }
            if v.source_id.contains([',', '\n', '\r']) {
                return Err(Error::Format(format!("source id {:?} contains a separator", v.source_id)));
            }
        }
        Ok(Self { n_t, classes, vectors, provenance: String::new() })
    }

    pub fn with_provenance(mut self, note: impl Into<String>) -> Self {
        self.provenance = note.into();
        self
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    /// `(n, n_t, 6)` tensor of the raw tuple values.
    pub fn to_tensor(&self) -> Tensor {
        let data: Vec<f64> = self.vectors.iter().flat_map(|v| v.flat()).collect();
        Tensor::new(vec![self.len(), self.n_t, TUPLE_LEN], data).expect("shape checked on construction")
    }

    pub fn labels(&self) -> Vec<Option<usize>> {
        self.vectors.iter().map(|v| v.label).collect()
    }

    /// Labels of every vector, failing if any is missing.
    pub fn require_labels(&self) -> Result<Vec<usize>> {
        self.vectors
            .iter()
            .enumerate()
            .map(|(i, v)| v.label.ok_or_else(|| Error::InsufficientData(format!("vector {i} is unlabeled"))))
            .collect()
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            n_t: self.n_t,
            classes: self.classes,
            vectors: indices.iter().map(|&i| self.vectors[i].clone()).collect(),
            provenance: self.provenance.clone(),
        }
    }

    pub fn write_text<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{TEXT_TAG},{DATASET_VERSION},{},{}", self.n_t, self.classes)?;
        let mut line = String::new();
        for v in &self.vectors {
            use std::fmt::Write as _;
            line.clear();
            let label = v.label.map_or(-1, |l| l as i64);
            let _ = write!(line, "{},{label}", v.source_id);
            for x in v.flat() {
                let _ = write!(line, ",{x:?}");
            }
            line.push('\n');
            w.write_all(line.as_bytes())?;
        }
        Ok(())
    }

    pub fn read_text<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        let header = lines.next().ok_or_else(|| Error::Format("empty dataset file".into()))??;
        let fields: Vec<&str> = header.trim().split(',').collect();
        if fields.len() != 4 || fields[0] != TEXT_TAG {
            return Err(Error::Format(format!("bad dataset header {header:?}")));
        }
        let parse_u = |s: &str| s.parse::<usize>().map_err(|e| Error::Format(format!("header field {s:?}: {e}")));
        let version = parse_u(fields[1])? as u32;
        if version != DATASET_VERSION {
            return Err(Error::Version { found: version, expected: DATASET_VERSION });
        }
        let n_t = parse_u(fields[2])?;
        let classes = parse_u(fields[3])?;
        let width = n_t * TUPLE_LEN;
        let mut vectors = Vec::new();
        for (no, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: Vec<&str> = line.trim().split(',').collect();
            if rec.len() != width + 2 {
                return Err(Error::Format(format!(
                    "record {} has {} fields, expected {}",
                    no + 1,
                    rec.len(),
                    width + 2
                )));
            }
            let label: i64 = rec[1]
                .parse()
                .map_err(|e| Error::Format(format!("record {}: label {:?}: {e}", no + 1, rec[1])))?;
            let values = rec[2..]
                .iter()
                .map(|s| s.parse::<f64>().map_err(|e| Error::Format(format!("record {}: {s:?}: {e}", no + 1))))
                .collect::<Result<Vec<_>>>()?;
            let label = if label < 0 { None } else { Some(label as usize) };
            vectors.push(BreathingVector::from_flat(&values, label, rec[0]));
        }
        Self::new(n_t, classes, vectors)
    }

    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(BINARY_MAGIC)?;
        w.write_all(&DATASET_VERSION.to_le_bytes())?;
        w.write_all(&(self.n_t as u32).to_le_bytes())?;
        w.write_all(&(self.classes as u32).to_le_bytes())?;
        w.write_all(&(self.len() as u64).to_le_bytes())?;
        for v in &self.vectors {
            w.write_all(&(v.source_id.len() as u32).to_le_bytes())?;
            w.write_all(v.source_id.as_bytes())?;
            w.write_all(&v.label.map_or(-1i64, |l| l as i64).to_le_bytes())?;
            for x in v.flat() {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Self> {
        fn take<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
            let mut b = [0u8; N];
            r.read_exact(&mut b).map_err(|e| match e.kind() {
                std::io::ErrorKind::UnexpectedEof => Error::Corrupt("dataset file truncated".into()),
                _ => Error::Io(e),
            })?;
            Ok(b)
        }
        if &take::<8>(&mut r)? != BINARY_MAGIC {
            return Err(Error::Format("not a binary dataset file".into()));
        }
        let version = u32::from_le_bytes(take(&mut r)?);
        if version != DATASET_VERSION {
            return Err(Error::Version { found: version, expected: DATASET_VERSION });
        }
        let n_t = u32::from_le_bytes(take(&mut r)?) as usize;
        let classes = u32::from_le_bytes(take(&mut r)?) as usize;
        let count = u64::from_le_bytes(take(&mut r)?) as usize;
        let width = n_t * TUPLE_LEN;
        let mut vectors = Vec::with_capacity(count.min(1 << 20));
        for _ in 0..count {
            let id_len = u32::from_le_bytes(take(&mut r)?) as usize;
            let mut id = vec![0u8; id_len];
            r.read_exact(&mut id).map_err(|_| Error::Corrupt("dataset file truncated".into()))?;
            let id = String::from_utf8(id).map_err(|_| Error::Corrupt("source id is not utf-8".into()))?;
            let label = i64::from_le_bytes(take(&mut r)?);
            let values = (0..width)
                .map(|_| Ok(f64::from_le_bytes(take(&mut r)?)))
                .collect::<Result<Vec<_>>>()?;
            let label = if label < 0 { None } else { Some(label as usize) };
            vectors.push(BreathingVector::from_flat(&values, label, id));
        }
        Self::new(n_t, classes, vectors)
    }

    /// Writes text unless the extension is `.bin`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        if is_binary(path) {
            self.write_binary(&mut buf)?;
        } else {
            self.write_text(&mut buf)?;
        }
        write_atomic(path, &buf)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        if is_binary(path) {
            Self::read_binary(std::io::BufReader::new(f))
        } else {
            Self::read_text(std::io::BufReader::new(f))
        }
    }
}

fn is_binary(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "bin")
}

/// Writes via a sibling temporary file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path.file_name().ok_or_else(|| Error::Config(format!("{} is not a file path", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", name.to_string_lossy()));
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> LabeledDataset {
        let v = |k: f64, label| {
            let vals: Vec<f64> = (0..12).map(|i| k * 0.1 + i as f64 / 3.0).collect();
            BreathingVector::from_flat(&vals, label, format!("src{k}"))
        };
        LabeledDataset::new(2, 3, vec![v(1.0, Some(2)), v(2.0, None)]).unwrap()
    }

    #[test]
    fn text_round_trip_is_lossless() {
        let d = sample();
        let mut buf = Vec::new();
        d.write_text(&mut buf).unwrap();
        assert_eq!(LabeledDataset::read_text(&buf[..]).unwrap(), d);
    }

    #[test]
    fn binary_round_trip_and_truncation() {
        let d = sample();
        let mut buf = Vec::new();
        d.write_binary(&mut buf).unwrap();
        assert_eq!(LabeledDataset::read_binary(&buf[..]).unwrap(), d);
        let cut = &buf[..buf.len() - 3];
        assert!(matches!(LabeledDataset::read_binary(cut), Err(Error::Corrupt(_))));
    }

    #[test]
    fn future_version_rejected() {
        let text = "breathae-dataset,9,2,3\n";
        assert!(matches!(
            LabeledDataset::read_text(text.as_bytes()),
            Err(Error::Version { found: 9, .. })
        ));
    }

    #[test]
    fn label_out_of_range_rejected() {
        let text = "breathae-dataset,1,1,3\na,3,1,1,1,1,1,1\n";
        assert!(LabeledDataset::read_text(text.as_bytes()).is_err());
    }
}
