//! Calibration datasets of (θ, x) pairs and their on-disk formats.
//!
//! Text format: an optional metadata comment line
//! `# flowcheck-dataset task=<name> seed=<u64> held_out=<bool>`, then a CSV
//! header `theta_1..theta_m,x_1..x_d` and one row per pair.
//!
//! Binary mirror: magic `FCK1`, then little-endian u64 fields
//! `n, m, d, seed, flags (bit 0 = held out), task name length`, the task name
//! bytes, and `n * (m + d)` little-endian f64 values in row-major order
//! (θ columns first).

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{s, Array2, ArrayView1};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub const BINARY_MAGIC: &[u8; 4] = b"FCK1";
const META_PREFIX: &str = "# flowcheck-dataset";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub task: String,
    pub seed: u64,
    /// Set when the pairs were never used to fit the estimator under test.
    pub held_out: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationDataset {
    pub theta: Matrix,
    pub x: Matrix,
    pub meta: DatasetMeta,
}

impl CalibrationDataset {
    pub fn new(theta: Matrix, x: Matrix, meta: DatasetMeta) -> Result<Self> {
        if theta.nrows() != x.nrows() {
            return Err(Error::Shape(format!(
                "theta has {} rows but x has {}",
                theta.nrows(),
                x.nrows()
            )));
        }
        if theta.iter().chain(x.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("dataset contains non-finite values".into()));
        }
        Ok(Self { theta, x, meta })
    }

    pub fn len(&self) -> usize {
        self.theta.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn theta_dim(&self) -> usize {
        self.theta.ncols()
    }

    pub fn obs_dim(&self) -> usize {
        self.x.ncols()
    }

    pub fn theta_row(&self, n: usize) -> ArrayView1<'_, f64> {
        self.theta.row(n)
    }

    pub fn x_row(&self, n: usize) -> ArrayView1<'_, f64> {
        self.x.row(n)
    }

    /// Rows `[start, end)` as a new dataset with the same metadata.
    pub fn slice_rows(&self, start: usize, end: usize) -> Self {
        Self {
            theta: self.theta.slice(s![start..end, ..]).to_owned(),
            x: self.x.slice(s![start..end, ..]).to_owned(),
            meta: self.meta.clone(),
        }
    }

    pub fn select_rows(&self, rows: &[usize]) -> Self {
        Self {
            theta: self.theta.select(ndarray::Axis(0), rows),
            x: self.x.select(ndarray::Axis(0), rows),
            meta: self.meta.clone(),
        }
    }

    /// SHA-256 over dimensions and values; identifies the data independent
    /// of file name or metadata.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for dim in [self.len(), self.theta_dim(), self.obs_dim()] {
            h.update((dim as u64).to_le_bytes());
        }
        for v in self.theta.iter().chain(self.x.iter()) {
            h.update(v.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    pub fn header(&self) -> Vec<String> {
        (1..=self.theta_dim())
            .map(|i| format!("theta_{i}"))
            .chain((1..=self.obs_dim()).map(|j| format!("x_{j}")))
            .collect()
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        writeln!(
            out,
            "{META_PREFIX} task={} seed={} held_out={}",
            self.meta.task, self.meta.seed, self.meta.held_out
        )?;
        let mut w = csv::Writer::from_writer(out);
        w.write_record(self.header())?;
        for n in 0..self.len() {
            let row: Vec<String> = self
                .theta
                .row(n)
                .iter()
                .chain(self.x.row(n).iter())
                .map(|v| v.to_string())
                .collect();
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut reader = BufReader::new(File::open(path)?);
        let mut first = String::new();
        reader.read_line(&mut first)?;
        let (meta, header_line) = if first.starts_with('#') {
            (parse_meta(&first)?, None)
        } else {
            (
                DatasetMeta {
                    task: "unknown".into(),
                    seed: 0,
                    held_out: false,
                },
                Some(first),
            )
        };
        let mut rest = String::new();
        if let Some(h) = header_line {
            rest.push_str(&h);
        }
        reader.read_to_string(&mut rest)?;
        let mut r = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .from_reader(rest.as_bytes());
        let headers = r.headers()?.clone();
        let m = headers.iter().filter(|h| h.starts_with("theta_")).count();
        let d = headers.iter().filter(|h| h.starts_with("x_")).count();
        let expected: Vec<String> = (1..=m)
            .map(|i| format!("theta_{i}"))
            .chain((1..=d).map(|j| format!("x_{j}")))
            .collect();
        if headers.iter().collect::<Vec<_>>() != expected.iter().map(String::as_str).collect::<Vec<_>>() {
            return Err(Error::Format(format!(
                "{}: header must be theta_1..theta_m,x_1..x_d",
                path.display()
            )));
        }
        let mut values = Vec::new();
        let mut rows = 0;
        for rec in r.records() {
            let rec = rec?;
            for field in rec.iter() {
                values.push(field.trim().parse::<f64>().map_err(|e| {
                    Error::Format(format!("{}: row {}: {e}", path.display(), rows + 1))
                })?);
            }
            rows += 1;
        }
        let all = Array2::from_shape_vec((rows, m + d), values)
            .map_err(|e| Error::Format(e.to_string()))?;
        Self::new(
            all.slice(s![.., ..m]).to_owned(),
            all.slice(s![.., m..]).to_owned(),
            meta,
        )
    }

    pub fn write_binary(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(BINARY_MAGIC)?;
        for v in [
            self.len() as u64,
            self.theta_dim() as u64,
            self.obs_dim() as u64,
            self.meta.seed,
            self.meta.held_out as u64,
            self.meta.task.len() as u64,
        ] {
            w.write_u64::<LittleEndian>(v)?;
        }
        w.write_all(self.meta.task.as_bytes())?;
        for n in 0..self.len() {
            for v in self.theta.row(n).iter().chain(self.x.row(n).iter()) {
                w.write_f64::<LittleEndian>(*v)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_binary(path: impl AsRef<Path>) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != BINARY_MAGIC {
            return Err(Error::Format(format!("bad magic bytes {magic:?}")));
        }
        let mut fields = [0u64; 6];
        for f in &mut fields {
            *f = r.read_u64::<LittleEndian>()?;
        }
        let [n, m, d, seed, flags, name_len] = fields.map(|v| v as usize);
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let task = String::from_utf8(name).map_err(|e| Error::Format(e.to_string()))?;
        let mut all = Array2::zeros((n, m + d));
        for v in all.iter_mut() {
            *v = r.read_f64::<LittleEndian>()?;
        }
        Self::new(
            all.slice(s![.., ..m]).to_owned(),
            all.slice(s![.., m..]).to_owned(),
            DatasetMeta {
                task,
                seed: seed as u64,
                held_out: flags & 1 == 1,
            },
        )
    }

    /// Reads either format, choosing by the leading magic bytes.
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut magic = [0u8; 4];
        let is_binary = File::open(path)?.read_exact(&mut magic).is_ok() && &magic == BINARY_MAGIC;
        if is_binary {
            Self::read_binary(path)
        } else {
            Self::read_csv(path)
        }
    }
}

fn parse_meta(line: &str) -> Result<DatasetMeta> {
    let body = line
        .trim()
        .strip_prefix(META_PREFIX)
        .ok_or_else(|| Error::Format(format!("unrecognized metadata line: {}", line.trim())))?;
    let mut meta = DatasetMeta {
        task: "unknown".into(),
        seed: 0,
        held_out: false,
    };
    for kv in body.split_whitespace() {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("bad metadata field {kv}")))?;
        match k {
            "task" => meta.task = v.to_string(),
            "seed" => {
                meta.seed = v
                    .parse()
                    .map_err(|_| Error::Format(format!("bad seed {v}")))?
            }
            "held_out" => {
                meta.held_out = v
                    .parse()
                    .map_err(|_| Error::Format(format!("bad held_out flag {v}")))?
            }
            _ => {}
        }
    }
    Ok(meta)
}

/// Reads a matrix of evaluation points with header `x_1..x_d`.
pub fn read_points(path: impl AsRef<Path>) -> Result<Matrix> {
    let path = path.as_ref();
    let mut r = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)?;
    let d = r.headers()?.len();
    let mut values = Vec::new();
    let mut rows = 0;
    for rec in r.records() {
        let rec = rec?;
        if rec.len() != d {
            return Err(Error::Format(format!("{}: ragged row {}", path.display(), rows + 1)));
        }
        for field in rec.iter() {
            values.push(
                field
                    .trim()
                    .parse::<f64>()
                    .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?,
            );
        }
        rows += 1;
    }
    Array2::from_shape_vec((rows, d), values).map_err(|e| Error::Format(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn sample() -> CalibrationDataset {
        CalibrationDataset::new(
            array![[0.5, -1.25], [1e-17, 3.0]],
            array![[0.1], [-2.0]],
            DatasetMeta {
                task: "gaussian-linear".into(),
                seed: 7,
                held_out: true,
            },
        )
        .unwrap()
    }

    #[test]
    fn csv_and_binary_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = sample();
        ds.write_csv(dir.path().join("a.csv")).unwrap();
        ds.write_binary(dir.path().join("a.bin")).unwrap();
        assert_eq!(CalibrationDataset::read(dir.path().join("a.csv")).unwrap(), ds);
        assert_eq!(CalibrationDataset::read(dir.path().join("a.bin")).unwrap(), ds);
    }

    #[test]
    fn binary_layout() {
        let dir = tempfile::tempdir().unwrap();
        let ds = sample();
        let p = dir.path().join("a.bin");
        ds.write_binary(&p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(&bytes[..4], b"FCK1");
        assert_eq!(u64::from_le_bytes(bytes[4..12].try_into().unwrap()), 2);
        let header_len = 4 + 6 * 8 + "gaussian-linear".len();
        assert_eq!(bytes.len(), header_len + 2 * 3 * 8);
        let first = f64::from_le_bytes(bytes[header_len..header_len + 8].try_into().unwrap());
        assert_eq!(first, 0.5);
    }

    #[test]
    fn csv_header_layout() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.csv");
        sample().write_csv(&p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert!(lines[0].starts_with("# flowcheck-dataset"));
        assert_eq!(lines[1], "theta_1,theta_2,x_1");
        assert_eq!(lines.len(), 4);
    }

    #[test]
    fn missing_metadata_means_not_held_out() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("plain.csv");
        std::fs::write(&p, "theta_1,x_1\n0.5,1.0\n").unwrap();
        let ds = CalibrationDataset::read(&p).unwrap();
        assert!(!ds.meta.held_out);
        assert_eq!(ds.len(), 1);
    }

    #[test]
    fn bad_header_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.csv");
        std::fs::write(&p, "x_1,theta_1\n0.5,1.0\n").unwrap();
        assert!(matches!(CalibrationDataset::read(&p), Err(Error::Format(_))));
    }

    #[test]
    fn fingerprint_tracks_values() {
        let a = sample();
        let mut b = sample();
        assert_eq!(a.fingerprint(), b.fingerprint());
        b.meta.seed = 99;
        assert_eq!(a.fingerprint(), b.fingerprint());
        b.x[[0, 0]] += 1e-12;
        assert_ne!(a.fingerprint(), b.fingerprint());
    }

    #[test]
    fn mismatched_rows_rejected() {
        let meta = sample().meta;
        assert!(CalibrationDataset::new(array![[1.0]], array![[1.0], [2.0]], meta).is_err());
    }
}
