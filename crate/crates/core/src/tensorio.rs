//! Flat `f64` tensors, the `RFTENSOR` binary format, and CSV emission.
//!
//! File layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes   "RFTENSOR"
//! version  u32       1
//! rank     u32
//! dims     rank x u64
//! payload  product(dims) x f64 (row-major)
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{ensure, Error, Result};

pub const MAGIC: &[u8; 8] = b"RFTENSOR";
pub const VERSION: u32 = 1;

/// Row-major dense tensor of 64-bit floats.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        ensure!(
            shape.iter().all(|&d| d > 0),
            "tensor dims must be positive, got {shape:?}"
        );
        let expected: usize = shape.iter().product();
        ensure!(
            expected == data.len(),
            "shape {shape:?} implies {expected} elements, got {}",
            data.len()
        );
        Ok(Self { shape, data })
    }

    /// One-dimensional tensor over `data`.
    ///
    /// # Panics
    /// If `data` is empty.
    pub fn from_vec(data: Vec<f64>) -> Self {
        assert!(!data.is_empty(), "tensor must have at least one element");
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        assert!(n > 0, "tensor dims must be positive");
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let mut t = Self::zeros(shape);
        t.data.fill(value);
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Size of the trailing axis.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().expect("rank >= 1")
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    /// Same shape, elements produced by `f`.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    /// Elementwise `self + scale * other`.
    pub fn add_scaled(&self, scale: f64, other: &Tensor) -> Self {
        assert_eq!(self.shape, other.shape, "shape mismatch in add_scaled");
        Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a + scale * b)
                .collect(),
        }
    }

    /// Elementwise `(self - other) / denom`.
    pub fn sub_div(&self, other: &Tensor, denom: f64) -> Self {
        assert_eq!(self.shape, other.shape, "shape mismatch in sub_div");
        Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| (a - b) / denom)
                .collect(),
        }
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }
}

/// Mean squared difference between two equally shaped tensors.
pub fn mse(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape, b.shape, "shape mismatch in mse");
    let sum: f64 = a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum();
    sum / a.len() as f64
}

/// Euclidean distance between two equally shaped tensors.
pub fn distance(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape, b.shape, "shape mismatch in distance");
    a.data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

pub fn encode(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 8 * t.shape.len() + 8 * t.data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
    for &d in &t.shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &x in &t.data {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

/// Parses an `RFTENSOR` byte buffer. `path` is used only for error messages.
pub fn decode(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let corrupt = |reason: &str| Error::CorruptFile {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    if bytes.len() < 8 || &bytes[..8] != MAGIC {
        return Err(Error::NotATensorFile(path.to_path_buf()));
    }
    let mut cursor = Cursor { bytes, pos: 8 };
    let version = cursor.u32().ok_or_else(|| corrupt("truncated header"))?;
    if version != VERSION {
        return Err(corrupt(&format!("unsupported version {version}")));
    }
    let rank = cursor.u32().ok_or_else(|| corrupt("truncated header"))? as usize;
    if rank == 0 {
        return Err(corrupt("rank 0"));
    }
    let mut shape = Vec::with_capacity(rank.min(64));
    let mut count: u64 = 1;
    for _ in 0..rank {
        let d = cursor.u64().ok_or_else(|| corrupt("truncated header"))?;
        if d == 0 {
            return Err(corrupt("zero-length dimension"));
        }
        count = count
            .checked_mul(d)
            .ok_or_else(|| corrupt("dimension product overflows"))?;
        shape.push(d as usize);
    }
    let payload = &bytes[cursor.pos..];
    let expected = count
        .checked_mul(8)
        .ok_or_else(|| corrupt("dimension product overflows"))?;
    if payload.len() as u64 != expected {
        return Err(corrupt(&format!(
            "payload is {} bytes, header implies {expected}",
            payload.len()
        )));
    }
    let data: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if !data.iter().all(|x| x.is_finite()) {
        return Err(Error::InvalidData(path.to_path_buf()));
    }
    Ok(Tensor { shape, data })
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take<const N: usize>(&mut self) -> Option<[u8; N]> {
        let chunk = self.bytes.get(self.pos..self.pos + N)?;
        self.pos += N;
        Some(chunk.try_into().unwrap())
    }

    fn u32(&mut self) -> Option<u32> {
        self.take::<4>().map(u32::from_le_bytes)
    }

    fn u64(&mut self) -> Option<u64> {
        self.take::<8>().map(u64::from_le_bytes)
    }
}

pub fn write_tensor(t: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(t)).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

/// Formats a float with 17 significant digits, enough to round-trip any `f64`.
pub fn format_f64(x: f64) -> String {
    format!("{x:.16e}")
}

/// Renders labelled rows as CSV text. All rows must have the same length.
pub fn render_csv(rows: &[(String, Vec<f64>)]) -> Result<String> {
    if let Some((_, first)) = rows.first() {
        let width = first.len();
        for (label, values) in rows {
            ensure!(
                values.len() == width,
                "ragged csv rows: '{label}' has {} values, expected {width}",
                values.len()
            );
        }
    }
    let mut out = String::new();
    for (label, values) in rows {
        out.push_str(label);
        for &v in values {
            out.push(',');
            out.push_str(&format_f64(v));
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn write_csv(rows: &[(String, Vec<f64>)], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = render_csv(rows)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// CSV preceded by `# key=value` metadata lines.
pub fn write_csv_with_metadata(
    metadata: &[(String, String)],
    rows: &[(String, Vec<f64>)],
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    let mut text = String::new();
    for (k, v) in metadata {
        ensure!(
            !k.contains(['=', '\n']) && !v.contains('\n'),
            "metadata entries must be single-line and keys must not contain '='"
        );
        writeln!(text, "# {k}={v}").unwrap();
    }
    text.push_str(&render_csv(rows)?);
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_element_file_size() {
        // 8 magic + 4 version + 4 rank + 8 dim + 16 payload
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.rft");
        write_tensor(&Tensor::from_vec(vec![0.0, 1.0]), &path).unwrap();
        assert_eq!(fs::metadata(&path).unwrap().len(), 40);
    }

    #[test]
    fn nan_writes_but_does_not_read() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nan.rft");
        write_tensor(&Tensor::from_vec(vec![1.0, f64::NAN]), &path).unwrap();
        assert!(matches!(read_tensor(&path), Err(Error::InvalidData(_))));
    }

    #[test]
    fn bad_magic_rejected() {
        let mut bytes = encode(&Tensor::from_vec(vec![1.0]));
        bytes[7] = b'X';
        let err = decode(&bytes, Path::new("x")).unwrap_err();
        assert!(matches!(err, Error::NotATensorFile(_)));
        assert!(err.to_string().contains("not a tensor file"));
    }

    #[test]
    fn truncated_payload_rejected() {
        let t = Tensor::new(vec![2, 3], vec![1.0; 6]).unwrap();
        let mut bytes = encode(&t);
        bytes.truncate(bytes.len() - 8);
        let err = decode(&bytes, Path::new("x")).unwrap_err();
        assert!(matches!(err, Error::CorruptFile { .. }));
        assert!(err.to_string().contains("corrupt file"));
        // header cut short
        assert!(matches!(
            decode(&bytes[..14], Path::new("x")),
            Err(Error::CorruptFile { .. })
        ));
    }

    #[test]
    fn shape_product_checked() {
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::new(vec![0], vec![]).is_err());
    }

    #[test]
    fn csv_single_row() {
        let text = render_csv(&[("mse".into(), vec![0.5])]).unwrap();
        let (label, value) = text.trim_end().split_once(',').unwrap();
        assert_eq!(label, "mse");
        assert_eq!(value.parse::<f64>().unwrap(), 0.5);
        assert!(text.ends_with('\n'));
    }

    #[test]
    fn csv_empty_and_ragged() {
        assert_eq!(render_csv(&[]).unwrap(), "");
        let ragged = [("a".to_string(), vec![1.0]), ("b".to_string(), vec![])];
        assert!(matches!(render_csv(&ragged), Err(Error::Precondition(_))));
    }

    #[test]
    fn csv_two_rows_of_three() {
        let rows = [
            ("a".to_string(), vec![1.0, 2.0, 3.0]),
            ("b".to_string(), vec![0.1, 0.2, 0.3]),
        ];
        let text = render_csv(&rows).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        assert!(lines.iter().all(|l| l.split(',').count() == 4));
    }

    #[test]
    fn seventeen_digits_round_trip() {
        for x in [0.1, 1.0 / 3.0, std::f64::consts::E, -1e-300, 6.02e23] {
            assert_eq!(format_f64(x).parse::<f64>().unwrap(), x);
        }
    }
}
