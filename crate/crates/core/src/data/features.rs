//! Binary feature-file format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! offset 0   magic   b"PYFT"
//! offset 4   u32     version (1 = frame features, 2 = node descriptors)
//! offset 8   u32     row count (frames for v1, node count for v2)
//! offset 12  u32     columns (feature dimension)
//! offset 16  f32[]   row-major payload, rows * columns values
//! ```
//!
//! Files store binary32; all in-memory compute is binary64. Reading then
//! rewriting a file reproduces it byte for byte.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"PYFT";
pub const VERSION_FRAMES: u32 = 1;
pub const VERSION_DESCRIPTORS: u32 = 2;

/// A parsed feature file: the version tag plus the payload widened to f64.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureFile {
    pub version: u32,
    pub data: Array2<f64>,
}

impl FeatureFile {
    /// Row count: frames for v1 files, node count for v2 files.
    pub fn rows(&self) -> usize {
        self.data.nrows()
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }
}

fn format_err(path: &Path, offset: u64, reason: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        offset,
        reason: reason.into(),
    }
}

fn write_file(path: &Path, version: u32, matrix: ArrayView2<'_, f64>) -> Result<()> {
    if matrix.nrows() == 0 || matrix.ncols() == 0 {
        return Err(Error::invalid("feature matrix must be non-empty"));
    }
    if matrix.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("feature matrix contains non-finite values"));
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&MAGIC)?;
    w.write_u32::<LittleEndian>(version)?;
    w.write_u32::<LittleEndian>(matrix.nrows() as u32)?;
    w.write_u32::<LittleEndian>(matrix.ncols() as u32)?;
    for v in matrix.iter() {
        let narrowed = *v as f32;
        if !narrowed.is_finite() {
            return Err(Error::invalid(format!("value {v} overflows binary32")));
        }
        w.write_f32::<LittleEndian>(narrowed)?;
    }
    w.flush()?;
    Ok(())
}

/// Write per-frame features (version 1).
pub fn write_frame_features(path: impl AsRef<Path>, matrix: ArrayView2<'_, f64>) -> Result<()> {
    write_file(path.as_ref(), VERSION_FRAMES, matrix)
}

/// Write per-node descriptors (version 2).
pub fn write_node_descriptors(path: impl AsRef<Path>, matrix: ArrayView2<'_, f64>) -> Result<()> {
    write_file(path.as_ref(), VERSION_DESCRIPTORS, matrix)
}

/// Read either file version, widening the payload to f64.
pub fn read_features(path: impl AsRef<Path>) -> Result<FeatureFile> {
    let path = path.as_ref();
    let file = File::open(path)?;
    let total = file.metadata()?.len();
    let mut r = BufReader::new(file);

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| format_err(path, 0, format!("file too short for magic ({total} bytes)")))?;
    if magic != MAGIC {
        return Err(format_err(path, 0, format!("bad magic {magic:?}, expected {MAGIC:?}")));
    }
    let version = r
        .read_u32::<LittleEndian>()
        .map_err(|_| format_err(path, 4, "truncated version field"))?;
    if version != VERSION_FRAMES && version != VERSION_DESCRIPTORS {
        return Err(format_err(path, 4, format!("unsupported version {version}")));
    }
    let rows = r
        .read_u32::<LittleEndian>()
        .map_err(|_| format_err(path, 8, "truncated row-count field"))? as usize;
    let cols = r
        .read_u32::<LittleEndian>()
        .map_err(|_| format_err(path, 12, "truncated column-count field"))? as usize;
    if rows == 0 || cols == 0 {
        return Err(format_err(path, 8, format!("empty shape {rows}x{cols}")));
    }
    let expected = 16 + 4 * (rows as u64) * (cols as u64);
    if total != expected {
        return Err(format_err(
            path,
            total.min(expected),
            format!("expected {expected} bytes for {rows}x{cols}, file has {total}"),
        ));
    }
    let mut values = vec![0f32; rows * cols];
    r.read_f32_into::<LittleEndian>(&mut values)
        .map_err(|_| format_err(path, 16, "truncated payload"))?;
    let data = Array2::from_shape_vec((rows, cols), values.iter().map(|&v| v as f64).collect())
        .expect("shape checked above");
    Ok(FeatureFile { version, data })
}

/// Read a v1 file, rejecting descriptor files.
pub fn read_frame_features(path: impl AsRef<Path>) -> Result<Array2<f64>> {
    let path = path.as_ref();
    let f = read_features(path)?;
    if f.version != VERSION_FRAMES {
        return Err(format_err(
            path,
            4,
            format!("expected frame features (v1), found v{}", f.version),
        ));
    }
    Ok(f.data)
}

/// Read a v2 file, rejecting raw frame files.
pub fn read_node_descriptors(path: impl AsRef<Path>) -> Result<Array2<f64>> {
    let path = path.as_ref();
    let f = read_features(path)?;
    if f.version != VERSION_DESCRIPTORS {
        return Err(format_err(
            path,
            4,
            format!("expected node descriptors (v2), found v{}", f.version),
        ));
    }
    Ok(f.data)
}

/// Peek at the header without reading the payload: `(version, rows, cols)`.
pub fn read_header(path: impl AsRef<Path>) -> Result<(u32, usize, usize)> {
    let path = path.as_ref();
    let mut r = BufReader::new(File::open(path)?);
    let mut header = [0u8; 16];
    r.read_exact(&mut header)
        .map_err(|_| format_err(path, 0, "file too short for header"))?;
    if header[..4] != MAGIC {
        return Err(format_err(path, 0, "bad magic"));
    }
    let word = |i: usize| u32::from_le_bytes(header[i..i + 4].try_into().unwrap());
    Ok((word(4), word(8) as usize, word(12) as usize))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;
    use proptest::prelude::*;

    #[test]
    fn one_by_one_file_is_twenty_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tiny.pyft");
        write_frame_features(&path, arr2(&[[0.5]]).view()).unwrap();
        assert_eq!(std::fs::metadata(&path).unwrap().len(), 20);
        let back = read_features(&path).unwrap();
        assert_eq!(back.version, VERSION_FRAMES);
        assert_eq!(back.data, arr2(&[[0.5]]));
    }

    #[test]
    fn truncated_file_reports_expected_length() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trunc.pyft");
        write_frame_features(&path, arr2(&[[1.0, 2.0], [3.0, 4.0]]).view()).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        let err = read_features(&path).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("expected 32 bytes"), "{msg}");
        assert!(msg.contains("27"), "{msg}");
    }

    #[test]
    fn bad_magic_is_rejected_at_offset_zero() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.pyft");
        std::fs::write(&path, b"NOPE\x01\x00\x00\x00\x01\x00\x00\x00\x01\x00\x00\x00AAAA").unwrap();
        let err = read_features(&path).unwrap_err();
        match err {
            Error::Format { offset, .. } => assert_eq!(offset, 0),
            other => panic!("unexpected error: {other}"),
        }
    }

    #[test]
    fn version_gates_typed_readers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("desc.pyft");
        write_node_descriptors(&path, arr2(&[[1.0, 0.0]]).view()).unwrap();
        assert!(read_frame_features(&path).is_err());
        assert!(read_node_descriptors(&path).is_ok());
        assert_eq!(read_header(&path).unwrap(), (2, 1, 2));
    }

    #[test]
    fn rejects_non_finite_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nan.pyft");
        assert!(write_frame_features(&path, arr2(&[[f64::NAN]]).view()).is_err());
        assert!(write_frame_features(&path, arr2(&[[1e300]]).view()).is_err());
    }

    proptest! {
        #[test]
        fn prop_round_trip_is_bit_exact(
            rows in 1usize..24,
            cols in 1usize..12,
            seed in 0u64..1000,
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            // values drawn as f32 so the f64 matrix is exactly representable
            let data = Array2::from_shape_fn((rows, cols), |_| {
                rng.random_range(-100.0f32..100.0) as f64
            });
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("rt.pyft");
            write_frame_features(&path, data.view()).unwrap();
            let bytes_first = std::fs::read(&path).unwrap();
            let back = read_features(&path).unwrap();
            prop_assert_eq!(&back.data, &data);
            // write what we read: files must match byte for byte
            write_frame_features(&path, back.data.view()).unwrap();
            let bytes_second = std::fs::read(&path).unwrap();
            prop_assert_eq!(bytes_first, bytes_second);
        }
    }
}
