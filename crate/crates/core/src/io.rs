//! File interchange: NPY arrays, JSON sidecars, CSV tables and preview PNGs.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayBase, Data, Dimension};
use ndarray_npy::{ReadableElement, WritableElement};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

pub fn read_npy<A, D>(path: impl AsRef<Path>) -> Result<ndarray::Array<A, D>>
where
    A: ReadableElement,
    D: Dimension,
{
    let path = path.as_ref();
    ndarray_npy::read_npy(path).map_err(|e| Error::format(path, e))
}

pub fn write_npy<S, A, D>(path: impl AsRef<Path>, array: &ArrayBase<S, D>) -> Result<()>
where
    S: Data<Elem = A>,
    A: WritableElement,
    D: Dimension,
{
    let path = path.as_ref();
    ndarray_npy::write_npy(path, array).map_err(|e| Error::format(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e))
}

pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let path = path.as_ref();
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn create_dir(path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Writes a CSV file from a header and pre-formatted rows.
pub fn write_csv(path: impl AsRef<Path>, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let path = path.as_ref();
    let csv_err = |e: csv::Error| Error::format(path, e);
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(header).map_err(csv_err)?;
    for row in rows {
        w.write_record(row).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a CSV file into its header and rows.
pub fn read_csv(path: impl AsRef<Path>) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let path = path.as_ref();
    let csv_err = |e: csv::Error| Error::format(path, e);
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let header = r.headers().map_err(csv_err)?.iter().map(str::to_owned).collect();
    let rows = r
        .records()
        .map(|rec| rec.map(|rec| rec.iter().map(str::to_owned).collect()).map_err(csv_err))
        .collect::<Result<_>>()?;
    Ok((header, rows))
}

/// Formats a float for CSV output; infinities are written as `inf`/`-inf`.
pub fn fmt_f64(v: f64) -> String {
    if v == f64::INFINITY {
        "inf".into()
    } else if v.is_nan() {
        "nan".into()
    } else if v == f64::NEG_INFINITY {
        "-inf".into()
    } else {
        format!("{v}")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, serde::Deserialize)]
pub struct PngRange {
    pub min: f64,
    pub max: f64,
}

/// Writes a min-max scaled 8-bit grayscale preview and returns the mapped range.
pub fn write_png(path: impl AsRef<Path>, values: &Array2<f64>) -> Result<PngRange> {
    let path = path.as_ref();
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if max > min { max - min } else { 1.0 };
    let (rows, cols) = values.dim();
    let img = image::GrayImage::from_fn(cols as u32, rows as u32, |x, y| {
        let v = (values[[y as usize, x as usize]] - min) / span;
        image::Luma([(v.clamp(0.0, 1.0) * 255.0).round() as u8])
    });
    img.save(path).map_err(|e| Error::format(path, e))?;
    Ok(PngRange { min, max })
}

/// Replaces `dest` with a directory populated by `fill`, via a sibling temp directory
/// and a rename so readers never observe a partial write.
pub fn write_dir_atomic(dest: &Path, fill: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
    let name = dest
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "out".into());
    let parent = dest
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    create_dir(&parent)?;
    let tmp = parent.join(format!(".{name}.tmp"));
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    }
    create_dir(&tmp)?;
    fill(&tmp)?;
    if dest.exists() {
        let old = parent.join(format!(".{name}.old"));
        if old.exists() {
            fs::remove_dir_all(&old).map_err(|e| Error::io(&old, e))?;
        }
        fs::rename(dest, &old).map_err(|e| Error::io(dest, e))?;
        fs::rename(&tmp, dest).map_err(|e| Error::io(dest, e))?;
        fs::remove_dir_all(&old).map_err(|e| Error::io(&old, e))?;
    } else {
        fs::rename(&tmp, dest).map_err(|e| Error::io(dest, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use num_complex::Complex64;

    #[test]
    fn npy_complex_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.npy");
        let a = array![[Complex64::new(1.0, -2.0), Complex64::new(0.5, 3.0)]];
        write_npy(&p, &a).unwrap();
        let b: Array2<Complex64> = read_npy(&p).unwrap();
        assert_eq!(a, b);
        // NPY v1.0 magic
        let bytes = fs::read(&p).unwrap();
        assert_eq!(&bytes[..8], b"\x93NUMPY\x01\x00");
    }

    #[test]
    fn atomic_dir_replaces_previous_contents() {
        let dir = tempfile::tempdir().unwrap();
        let dest = dir.path().join("ckpt");
        write_dir_atomic(&dest, |p| write_json(p.join("a.json"), &1)).unwrap();
        write_dir_atomic(&dest, |p| write_json(p.join("b.json"), &2)).unwrap();
        assert!(!dest.join("a.json").exists());
        assert_eq!(read_json::<i32>(dest.join("b.json")).unwrap(), 2);
    }

    #[test]
    fn csv_inf_formatting() {
        assert_eq!(fmt_f64(f64::INFINITY), "inf");
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.csv");
        write_csv(&p, &["a", "b"], &[vec!["1".into(), "inf".into()]]).unwrap();
        let (h, rows) = read_csv(&p).unwrap();
        assert_eq!(h, ["a", "b"]);
        assert_eq!(rows[0][1], "inf");
    }
}
